"""Recovery of missing or suspect predictors by per-class box-constrained QP.

For class k with precision Psi (split into missing ``u`` and available ``v``
blocks), the recovered values minimise

    0.5 * xu @ Psi_uu @ xu + R @ xu,   lower <= xu <= upper

with ``R = 0.5 * ((xv - mv) @ (Psi_vu + Psi_uv.T) - mu @ (Psi_uu + Psi_uu.T))``.
The problem is solved for every class and the class whose discriminant score
is largest after substitution wins.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import (
    AllSignalsMissing,
    NoConvergence,
    NonPositiveDefinite,
    NoSignalsMissing,
    NumericalError,
    ValidationError,
)
from .model import DaModel, Observation

KKT_TOL = 1e-8
FREE, AT_LOWER, AT_UPPER = 0, -1, 1


@dataclass(frozen=True)
class PartitionedPrecision:
    missing_idx: tuple[int, ...]
    available_idx: tuple[int, ...]
    psi_uu: np.ndarray
    psi_uv: np.ndarray
    psi_vu: np.ndarray
    psi_vv: np.ndarray

    def reassemble(self) -> np.ndarray:
        n = len(self.missing_idx) + len(self.available_idx)
        out = np.empty((n, n))
        u, v = list(self.missing_idx), list(self.available_idx)
        out[np.ix_(u, u)] = self.psi_uu
        out[np.ix_(u, v)] = self.psi_uv
        out[np.ix_(v, u)] = self.psi_vu
        out[np.ix_(v, v)] = self.psi_vv
        return out


@dataclass(frozen=True)
class BoxQp:
    """minimise 0.5 x H x' + R x'  subject to lower <= x <= upper."""

    hessian: np.ndarray
    linear: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        for name in ("hessian", "linear", "lower", "upper"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        l = self.linear.size
        if self.hessian.shape != (l, l) or self.lower.shape != (l,) or self.upper.shape != (l,):
            raise ValidationError("inconsistent box-QP dimensions")
        if np.any(self.lower > self.upper):
            raise ValidationError("box lower bound exceeds upper bound")

    @property
    def size(self) -> int:
        return self.linear.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.hessian @ x + self.linear @ x)

    def gradient(self, x) -> np.ndarray:
        return self.hessian @ np.asarray(x, dtype=float) + self.linear


@dataclass(frozen=True)
class ClassRecovery:
    class_index: int
    values: np.ndarray
    objective: float
    score: float


@dataclass(frozen=True)
class RecoveryResult:
    missing_idx: tuple[int, ...]
    per_class: tuple[ClassRecovery, ...]
    best_class: int
    recovered_observation: Observation

    @property
    def recovered_values(self) -> np.ndarray:
        return self.per_class[self.best_class].values

    def to_dict(self, model: DaModel | None = None) -> dict:
        d = {
            "missing_idx": list(self.missing_idx),
            "best_class": self.best_class,
            "recovered_values": self.recovered_values.tolist(),
            "per_class": [
                {"class_index": c.class_index, "values": c.values.tolist(),
                 "objective": c.objective, "score": c.score}
                for c in self.per_class
            ],
        }
        if model is not None:
            d["best_label"] = str(model.classes[self.best_class].label)
        return d


def partition_precision(precision, missing_idx: Sequence[int]) -> PartitionedPrecision:
    """Split a precision matrix into missing/available blocks (pure gathering)."""
    precision = np.asarray(precision, dtype=float)
    n = precision.shape[0]
    u = sorted(int(i) for i in missing_idx)
    if len(set(u)) != len(u) or any(i < 0 or i >= n for i in u):
        raise ValidationError(f"invalid missing indices {list(missing_idx)} for dimension {n}")
    if not u:
        raise NoSignalsMissing("no missing signals; classify the observation directly")
    if len(u) == n:
        raise AllSignalsMissing("every signal is missing; at least one available signal is required")
    v = [i for i in range(n) if i not in set(u)]
    return PartitionedPrecision(
        tuple(u), tuple(v),
        precision[np.ix_(u, u)], precision[np.ix_(u, v)],
        precision[np.ix_(v, u)], precision[np.ix_(v, v)],
    )


def recovery_coefficients(p: PartitionedPrecision, x_avail, mean, lower=None, upper=None) -> BoxQp:
    """Box QP for the missing block given the available values and class mean."""
    x_avail = np.asarray(x_avail, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if not np.isfinite(x_avail).all():
        raise ValidationError("available values must be finite")
    mu = mean[list(p.missing_idx)]
    mv = mean[list(p.available_idx)]
    linear = 0.5 * ((x_avail - mv) @ (p.psi_vu + p.psi_uv.T) - mu @ (p.psi_uu + p.psi_uu.T))
    l = len(p.missing_idx)
    lower = np.full(l, -np.inf) if lower is None else lower
    upper = np.full(l, np.inf) if upper is None else upper
    return BoxQp(p.psi_uu, linear, lower, upper)


def kkt_satisfied(qp: BoxQp, x, tol: float = KKT_TOL) -> bool:
    """Sign-pattern optimality certificate for a box QP."""
    x = np.asarray(x, dtype=float)
    if np.any(x < qp.lower) or np.any(x > qp.upper):
        return False
    g = qp.gradient(x)
    eps = tol * (1.0 + np.abs(qp.linear).max(initial=0.0))
    at_lo = x == qp.lower
    at_hi = x == qp.upper
    fixed = at_lo & at_hi
    free = ~(at_lo | at_hi)
    return bool(
        np.all(np.abs(g[free]) <= eps)
        and np.all(g[at_lo & ~fixed] >= -eps)
        and np.all(g[at_hi & ~fixed] <= eps)
    )


def _free_solve(H, R, x, free):
    """Minimiser over the free coordinates with the rest held at x."""
    fixed = ~free
    rhs = R[free] + H[np.ix_(free, fixed)] @ x[fixed]
    return -linalg.solve(H[np.ix_(free, free)], rhs, assume_a="pos")


def _active_set(H, R, lo, hi, max_iter, tol):
    l = R.size
    x = np.clip(-linalg.solve(H, R, assume_a="pos"), lo, hi)
    state = np.where(x <= lo, AT_LOWER, np.where(x >= hi, AT_UPPER, FREE))
    eps = tol * (1.0 + np.abs(R).max(initial=0.0))
    for _ in range(max_iter):
        free = state == FREE
        if free.any():
            target = _free_solve(H, R, x, free)
            step = target - x[free]
            alpha, blocking = 1.0, -1
            idx = np.flatnonzero(free)
            for j, i in enumerate(idx):
                if step[j] < 0 and np.isfinite(lo[i]):
                    a = (lo[i] - x[i]) / step[j]
                elif step[j] > 0 and np.isfinite(hi[i]):
                    a = (hi[i] - x[i]) / step[j]
                else:
                    continue
                if a < alpha:
                    alpha, blocking = a, j
            if blocking >= 0:
                x[free] = x[free] + alpha * step
                i = idx[blocking]
                if step[blocking] < 0:
                    x[i], state[i] = lo[i], AT_LOWER
                else:
                    x[i], state[i] = hi[i], AT_UPPER
                # keep the rest of the step inside the box despite rounding
                x[:] = np.clip(x, lo, hi)
                continue
            x[free] = target
        g = H @ x + R
        multipliers = np.where(state == AT_LOWER, g, np.where(state == AT_UPPER, -g, np.inf))
        j = int(np.argmin(multipliers)) if l else 0
        if l == 0 or multipliers[j] >= -eps:
            return x, state
        state[j] = FREE
    raise NoConvergence(f"active-set iteration cap {max_iter} reached for a {l}-variable box QP")


def solve_box_qp(qp: BoxQp, tol: float = KKT_TOL, max_iter: int | None = None) -> tuple[np.ndarray, float]:
    """Global minimiser of a strictly convex box-constrained QP.

    Primal active-set iteration started from the clipped unconstrained
    minimiser: solve the free subsystem by Cholesky, step until a bound
    blocks, release the bound with the most negative multiplier once the
    free subsystem is optimal.  Coordinates with equal bounds are fixed up
    front.
    """
    H, R, lo, hi = qp.hessian, qp.linear, qp.lower, qp.upper
    l = qp.size
    try:
        linalg.cholesky(H, lower=True)
    except linalg.LinAlgError:
        raise NonPositiveDefinite("box-QP Hessian is not positive definite") from None
    x = np.zeros(l)
    pinned = lo == hi
    x[pinned] = lo[pinned]
    rest = ~pinned
    if rest.any():
        Hr = H[np.ix_(rest, rest)]
        Rr = R[rest] + H[np.ix_(rest, pinned)] @ x[pinned]
        cap = 10 * l if max_iter is None else max_iter
        x[rest], _ = _active_set(Hr, Rr, lo[rest].copy(), hi[rest].copy(), cap, tol)
    return x, qp.objective(x)


def active_pattern(qp: BoxQp, x) -> tuple[int, ...]:
    x = np.asarray(x)
    return tuple(int(s) for s in np.where(x == qp.lower, AT_LOWER, np.where(x == qp.upper, AT_UPPER, FREE)))


def enumerate_active_sets(qp: BoxQp, tol: float = KKT_TOL, max_size: int = 10) -> tuple[np.ndarray, tuple[int, ...]]:
    """Exhaustive reference solver: try every lower/free/upper pattern.

    Returns the unique pattern whose free-subsystem solution is feasible and
    satisfies the KKT sign conditions.  Exponential; meant for small l.
    """
    H, R, lo, hi = qp.hessian, qp.linear, qp.lower, qp.upper
    l = qp.size
    if l > max_size:
        raise ValidationError(f"exhaustive enumeration limited to {max_size} variables")
    choices = []
    for i in range(l):
        opts = [FREE]
        if np.isfinite(lo[i]):
            opts.append(AT_LOWER)
        if np.isfinite(hi[i]) and hi[i] != lo[i]:
            opts.append(AT_UPPER)
        if lo[i] == hi[i]:
            opts = [AT_LOWER]
        choices.append(opts)
    for pattern in itertools.product(*choices):
        pattern = np.array(pattern)
        x = np.where(pattern == AT_LOWER, lo, np.where(pattern == AT_UPPER, hi, 0.0))
        free = pattern == FREE
        if free.any():
            x[free] = _free_solve(H, R, x, free)
            if np.any(x[free] <= lo[free]) or np.any(x[free] >= hi[free]):
                continue
        if kkt_satisfied(qp, x, tol):
            return x, tuple(int(s) for s in pattern)
    raise NumericalError("no active-set pattern satisfies the KKT conditions")


def _bounds_for(model: DaModel, missing_idx, override):
    lower = model.signal_min[list(missing_idx)].astype(float)
    upper = model.signal_max[list(missing_idx)].astype(float)
    if override is not None:
        for j, i in enumerate(missing_idx):
            if i in override:
                lower[j], upper[j] = override[i]
    if np.any(lower > upper):
        raise ValidationError("recovery bounds have min > max")
    return lower, upper


def recover(model: DaModel, x, missing_idx: Sequence[int] | None = None,
            override_bounds: dict[int, tuple[float, float]] | None = None) -> RecoveryResult:
    """Recover the missing entries of ``x`` under every class and keep the best.

    ``missing_idx`` defaults to the NaN entries of ``x``; pass it explicitly to
    treat present-but-suspect values as missing.  Bounds default to the
    training range of each signal; ``override_bounds`` maps predictor index to
    ``(min, max)``.
    """
    if not isinstance(x, Observation):
        x = Observation(np.asarray(x, dtype=float), model.schema)
    if missing_idx is None:
        missing_idx = x.missing_idx
    u = sorted(int(i) for i in missing_idx)
    n = model.n_predictors
    if len(u) == n:
        raise AllSignalsMissing("every signal is missing; at least one available signal is required")
    if not u:
        raise NoSignalsMissing("no missing signals; classify the observation directly")
    v = [i for i in range(n) if i not in set(u)]
    values = np.array(x.values)
    if np.isnan(values[v]).any():
        raise ValidationError("available entries contain NaN outside missing_idx")

    lower, upper = _bounds_for(model, u, override_bounds)
    shift_u, scale_u = model.shift[u], model.scale[u]
    z_lower, z_upper = (lower - shift_u) / scale_u, (upper - shift_u) / scale_u
    z_avail = (values[v] - model.shift[v]) / model.scale[v]

    candidates = np.repeat(values[None, :], model.n_classes, axis=0)
    objectives = []
    for k, stats in enumerate(model.classes):
        part = partition_precision(stats.z_precision, u)
        qp = recovery_coefficients(part, z_avail, stats.z_mean, z_lower, z_upper)
        try:
            z_star, obj = solve_box_qp(qp)
        except NumericalError as exc:
            raise type(exc)(f"class {k} ({stats.label}): {exc}") from exc
        candidates[k, u] = np.clip(shift_u + scale_u * z_star, lower, upper)
        objectives.append(obj)

    scores = model.discriminant_scores(candidates)
    own = np.diagonal(scores).copy()
    best = int(np.argmax(own))
    per_class = tuple(
        ClassRecovery(k, candidates[k, u].copy(), float(objectives[k]), float(own[k]))
        for k in range(model.n_classes)
    )
    return RecoveryResult(tuple(u), per_class, best, Observation(candidates[best], model.schema))
