"""Quadratic discriminant analysis over grid measurements.

Class statistics are stored in raw predictor units.  All numerically
sensitive work (Cholesky factors, Mahalanobis distances) runs in the
z-scored coordinates held in ``DaModel.standardization``; densities and
scores are mapped back to raw units through the Jacobian of that affine map,
so every returned quantity is the raw-space value.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .errors import EmptyClass, SchemaMismatch, SingularCovariance, ValidationError

QUANTITIES = ("P", "Q", "V+", "V-")
FORMAT_VERSION = 1
DEFAULT_SHRINKAGE = 1e-3
JITTER = 1e-10
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PredictorSchema:
    """Ordered predictor names of the form ``<unit>.<quantity>``."""

    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValidationError("schema needs at least one predictor")
        if len(set(names)) != len(names):
            raise ValidationError("predictor names must be unique")

    @property
    def dimension(self) -> int:
        return len(self.names)

    def __len__(self):
        return len(self.names)

    @property
    def units(self) -> list[str]:
        """Metered units in order of first appearance."""
        seen: dict[str, None] = {}
        for name in self.names:
            seen.setdefault(name.split(".", 1)[0], None)
        return list(seen)

    def unit_indices(self, unit: str) -> list[int]:
        idx = [i for i, name in enumerate(self.names) if name.split(".", 1)[0] == unit]
        if not idx:
            raise ValidationError(f"unknown unit {unit!r}; schema units are {self.units}")
        return idx

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown predictor {name!r}") from None

    def without(self, drop: Iterable[int]) -> tuple["PredictorSchema", list[int]]:
        drop = set(drop)
        keep = [i for i in range(len(self.names)) if i not in drop]
        return PredictorSchema(tuple(self.names[i] for i in keep)), keep


@dataclass(frozen=True, order=True)
class TopologyLabel:
    """Switching configuration paired with the protective-device status bits
    (0 = closed, 1 = open)."""

    switch_config: str
    pd_status: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "pd_status", tuple(int(b) for b in self.pd_status))
        if any(b not in (0, 1) for b in self.pd_status):
            raise ValidationError(f"pd_status bits must be 0/1, got {self.pd_status}")

    @property
    def pd_string(self) -> str:
        return "".join(str(b) for b in self.pd_status)

    def __str__(self):
        return f"{self.switch_config}-{self.pd_string}" if self.pd_status else self.switch_config

    def to_dict(self) -> dict:
        return {"switch_config": self.switch_config, "pd_status": list(self.pd_status)}

    @classmethod
    def from_dict(cls, d: dict) -> "TopologyLabel":
        return cls(d["switch_config"], tuple(d["pd_status"]))

    @classmethod
    def parse(cls, config: str, pd: str) -> "TopologyLabel":
        return cls(config, tuple(int(c) for c in pd.strip()))


@dataclass(frozen=True)
class Observation:
    """One measurement vector; missing entries are NaN."""

    values: np.ndarray
    schema: PredictorSchema

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.size != self.schema.dimension:
            raise SchemaMismatch(
                f"observation has {values.size} values, schema has {self.schema.dimension}"
            )
        if np.isinf(values).any():
            raise ValidationError("observation contains infinite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def mask(self) -> np.ndarray:
        """True where the entry is available."""
        return ~np.isnan(self.values)

    @property
    def missing_idx(self) -> list[int]:
        return np.flatnonzero(np.isnan(self.values)).tolist()

    @property
    def is_complete(self) -> bool:
        return bool(self.mask.all())

    def with_values(self, idx: Sequence[int], values) -> "Observation":
        new = self.values.copy()
        new[list(idx)] = values
        return Observation(new, self.schema)


@dataclass(frozen=True)
class ClassStats:
    label: TopologyLabel
    prior: float
    mean: np.ndarray
    covariance: np.ndarray
    # scoring-space quantities, derived in from_moments
    z_mean: np.ndarray = field(repr=False)
    z_chol: np.ndarray = field(repr=False)
    z_precision: np.ndarray = field(repr=False)
    scale: np.ndarray = field(repr=False)
    log_det_cov: float = 0.0

    @classmethod
    def from_moments(cls, label, prior, mean, covariance, shift, scale) -> "ClassStats":
        mean = np.array(mean, dtype=float)
        covariance = np.array(covariance, dtype=float)
        n = mean.size
        if covariance.shape != (n, n):
            raise SchemaMismatch(f"covariance shape {covariance.shape} does not match mean length {n}")
        if not 0.0 < prior <= 1.0:
            raise ValidationError(f"prior must lie in (0, 1], got {prior}")
        if not np.allclose(covariance, covariance.T, rtol=0, atol=1e-10 * max(1.0, np.abs(covariance).max())):
            raise ValidationError(f"covariance of class {label} is not symmetric")
        z_cov = covariance / np.outer(scale, scale)
        z_cov = 0.5 * (z_cov + z_cov.T)
        try:
            chol = linalg.cholesky(z_cov, lower=True)
        except linalg.LinAlgError:
            raise SingularCovariance(f"covariance of class {label} is not positive definite") from None
        z_precision = linalg.cho_solve((chol, True), np.eye(n))
        z_precision = 0.5 * (z_precision + z_precision.T)
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol)))) + 2.0 * float(np.sum(np.log(scale)))
        for arr in (mean, covariance, chol, z_precision):
            arr.setflags(write=False)
        z_mean = (mean - shift) / scale
        z_mean.setflags(write=False)
        scale = np.array(scale, dtype=float)
        scale.setflags(write=False)
        return cls(label, float(prior), mean, covariance, z_mean, chol, z_precision, scale, log_det)

    @property
    def precision(self) -> np.ndarray:
        """Inverse covariance in raw units."""
        return self.z_precision / np.outer(self.scale, self.scale)


@dataclass(frozen=True)
class DaModel:
    schema: PredictorSchema
    classes: tuple[ClassStats, ...]
    shift: np.ndarray
    scale: np.ndarray
    shrinkage: float
    signal_min: np.ndarray
    signal_max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.classes:
            raise ValidationError("a model needs at least one class")
        total = sum(c.prior for c in self.classes)
        if abs(total - 1.0) > 1e-12:
            raise ValidationError(f"class priors sum to {total!r}, expected 1")
        if np.any(self.scale <= 0):
            raise ValidationError("standardization scales must be positive")
        if np.any(self.signal_min > self.signal_max):
            raise ValidationError("signal_min exceeds signal_max")
        labels = [c.label for c in self.classes]
        if len(set(labels)) != len(labels):
            raise ValidationError("duplicate class labels")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_predictors(self) -> int:
        return self.schema.dimension

    @property
    def labels(self) -> list[TopologyLabel]:
        return [c.label for c in self.classes]

    @property
    def standardization(self) -> list[tuple[float, float]]:
        return list(zip(self.shift.tolist(), self.scale.tolist()))

    @property
    def signal_ranges(self) -> list[tuple[float, float]]:
        return list(zip(self.signal_min.tolist(), self.signal_max.tolist()))

    @property
    def log_priors(self) -> np.ndarray:
        return np.log([c.prior for c in self.classes])

    def class_index(self, label: TopologyLabel) -> int:
        for k, c in enumerate(self.classes):
            if c.label == label:
                return k
        raise ValidationError(f"label {label} is not a class of this model")

    # ---- batched scoring ---------------------------------------------------

    def _rows(self, x) -> np.ndarray:
        if isinstance(x, Observation):
            if x.schema != self.schema:
                raise SchemaMismatch("observation schema differs from model schema")
            x = x.values
        X = np.atleast_2d(np.asarray(x, dtype=float))
        if X.ndim != 2 or X.shape[1] != self.n_predictors:
            raise SchemaMismatch(f"expected {self.n_predictors} predictors, got shape {np.shape(x)}")
        if np.isnan(X).any():
            raise ValidationError("scoring requires complete observations; use recovery for missing entries")
        return X

    def mahalanobis(self, x) -> np.ndarray:
        """Squared Mahalanobis distance of each row to each class (N x K)."""
        Z = (self._rows(x) - self.shift) / self.scale
        out = np.empty((Z.shape[0], self.n_classes))
        for k, c in enumerate(self.classes):
            w = linalg.solve_triangular(c.z_chol, (Z - c.z_mean).T, lower=True, check_finite=False)
            out[:, k] = np.einsum("ij,ij->j", w, w)
        return out

    def discriminant_scores(self, x) -> np.ndarray:
        log_dets = np.array([c.log_det_cov for c in self.classes])
        return -0.5 * self.mahalanobis(x) - 0.5 * log_dets + self.log_priors

    def log_densities(self, x) -> np.ndarray:
        log_dets = np.array([c.log_det_cov for c in self.classes])
        return -0.5 * self.mahalanobis(x) - 0.5 * log_dets - 0.5 * self.n_predictors * _LOG_2PI

    def posteriors(self, x) -> np.ndarray:
        scores = self.discriminant_scores(x)
        return np.exp(scores - logsumexp(scores, axis=1, keepdims=True))

    def mixture_log_likelihoods(self, x) -> np.ndarray:
        return logsumexp(self.discriminant_scores(x), axis=1) - 0.5 * self.n_predictors * _LOG_2PI

    def predict(self, x) -> np.ndarray:
        """Class index of the largest discriminant score; ties go to the lowest index."""
        return np.argmax(self.discriminant_scores(x), axis=1)

    def restricted(self, keep: Sequence[int]) -> "DaModel":
        """Marginal model on a subset of predictors (no refitting needed for Gaussians)."""
        keep = list(keep)
        schema = PredictorSchema(tuple(self.schema.names[i] for i in keep))
        shift, scale = self.shift[keep], self.scale[keep]
        classes = [
            ClassStats.from_moments(c.label, c.prior, c.mean[keep], c.covariance[np.ix_(keep, keep)], shift, scale)
            for c in self.classes
        ]
        return DaModel(schema, classes, shift, scale, self.shrinkage, self.signal_min[keep], self.signal_max[keep])

    # ---- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "topoid.DaModel",
            "schema": list(self.schema.names),
            "shrinkage": self.shrinkage,
            "standardization": {"shift": self.shift.tolist(), "scale": self.scale.tolist()},
            "signal_ranges": {"min": self.signal_min.tolist(), "max": self.signal_max.tolist()},
            "classes": [
                {
                    "label": c.label.to_dict(),
                    "prior": c.prior,
                    "mean": c.mean.tolist(),
                    "covariance": c.covariance.tolist(),
                }
                for c in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DaModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported model format_version {d.get('format_version')!r}")
        schema = PredictorSchema(tuple(d["schema"]))
        shift = np.array(d["standardization"]["shift"], dtype=float)
        scale = np.array(d["standardization"]["scale"], dtype=float)
        classes = [
            ClassStats.from_moments(
                TopologyLabel.from_dict(c["label"]), c["prior"], c["mean"], c["covariance"], shift, scale
            )
            for c in d["classes"]
        ]
        model = cls(
            schema,
            classes,
            shift,
            scale,
            float(d["shrinkage"]),
            np.array(d["signal_ranges"]["min"], dtype=float),
            np.array(d["signal_ranges"]["max"], dtype=float),
        )
        _verify_precision(model)
        return model

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "DaModel":
        return cls.from_dict(json.loads(text))


def _verify_precision(model: DaModel, tol: float = 1e-8) -> None:
    n = model.n_predictors
    for c in model.classes:
        z_cov = c.z_chol @ c.z_chol.T
        err = np.abs(c.z_precision @ z_cov - np.eye(n)).max()
        if err > tol:
            raise SingularCovariance(f"class {c.label}: precision check failed (max error {err:.2e})")


def from_parameters(means, covariances, priors, labels=None, schema=None, signal_ranges=None) -> DaModel:
    """Build a model directly from class parameters, with identity standardization.

    Handy for constructing known Gaussian mixtures in experiments and tests.
    """
    means = [np.atleast_1d(np.asarray(m, dtype=float)) for m in means]
    n = means[0].size
    covariances = [np.atleast_2d(np.asarray(s, dtype=float)) for s in covariances]
    priors = np.asarray(priors, dtype=float)
    if labels is None:
        labels = [TopologyLabel(f"K{k + 1}") for k in range(len(means))]
    if schema is None:
        schema = PredictorSchema(tuple(f"U{i}.P" for i in range(n)))
    shift, scale = np.zeros(n), np.ones(n)
    classes = [
        ClassStats.from_moments(lab, p, m, s, shift, scale)
        for lab, p, m, s in zip(labels, priors, means, covariances)
    ]
    if signal_ranges is None:
        lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    else:
        lo, hi = (np.asarray(a, dtype=float) for a in zip(*signal_ranges))
    return DaModel(schema, classes, shift, scale, 0.0, lo, hi)


def _shrink(cov: np.ndarray, lam: float) -> np.ndarray:
    out = (1.0 - lam) * cov
    np.fill_diagonal(out, np.diag(cov))
    return out


def fit(X, labels: Sequence[TopologyLabel], schema: PredictorSchema,
        shrinkage: float = DEFAULT_SHRINKAGE, classes: Sequence[TopologyLabel] | None = None,
        standardize: bool = True) -> DaModel:
    """Fit per-class Gaussian statistics.

    Parameters
    ----------
    X : (N, n) array of complete observations in raw units.
    labels : class label of each row.
    shrinkage : weight of the diagonal in ``(1 - lam) * S + lam * diag(S)``.
    classes : the label enumeration fixing class order; defaults to the
        sorted distinct labels.  A label with no rows raises ``EmptyClass``.
    standardize : z-score predictors with pooled training statistics before
        factorizing.  Decisions do not depend on it.
    """
    X = np.asarray(X, dtype=float)
    labels = list(labels)
    if X.ndim != 2 or X.shape[1] != schema.dimension:
        raise SchemaMismatch(f"training data shape {X.shape} does not match schema dimension {schema.dimension}")
    if X.shape[0] != len(labels):
        raise ValidationError("number of labels differs from number of rows")
    if not np.isfinite(X).all():
        raise ValidationError("training observations must be complete and finite")
    if not 0.0 <= shrinkage <= 1.0:
        raise ValidationError(f"shrinkage must lie in [0, 1], got {shrinkage}")
    if classes is None:
        classes = sorted(set(labels))
    classes = list(classes)
    if len(classes) < 2:
        raise ValidationError("fitting a discriminant model needs at least two classes")
    index = {lab: k for k, lab in enumerate(classes)}
    try:
        y = np.array([index[lab] for lab in labels], dtype=int)
    except KeyError as exc:
        raise ValidationError(f"label {exc.args[0]} is not in the class enumeration") from None

    n = schema.dimension
    N = X.shape[0]
    if standardize:
        shift = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[~(scale > 0)] = 1.0
    else:
        shift, scale = np.zeros(n), np.ones(n)

    stats = []
    for k, lab in enumerate(classes):
        Xk = X[y == k]
        Nk = Xk.shape[0]
        if Nk == 0:
            raise EmptyClass(f"class {lab} has no training samples")
        if Nk < n + 1 and shrinkage == 0.0:
            raise EmptyClass(f"class {lab} has {Nk} samples; at least {n + 1} needed without shrinkage")
        mean = Xk.mean(axis=0)
        centered = Xk - mean
        cov = _shrink(centered.T @ centered / Nk, shrinkage)
        try:
            stats.append(ClassStats.from_moments(lab, Nk / N, mean, cov, shift, scale))
        except SingularCovariance:
            z_trace = float(np.sum(np.diag(cov) / scale**2))
            jitter = JITTER * z_trace / n
            if not jitter > 0:
                jitter = JITTER
            cov = cov + np.diag(jitter * scale**2)
            try:
                stats.append(ClassStats.from_moments(lab, Nk / N, mean, cov, shift, scale))
            except SingularCovariance:
                raise SingularCovariance(
                    f"covariance of class {lab} is singular even after shrinkage and jitter"
                ) from None
    model = DaModel(schema, stats, shift, scale, float(shrinkage), X.min(axis=0), X.max(axis=0))
    _verify_precision(model)
    return model


def log_density(model: DaModel, k: int, x) -> float:
    """Log of the class-k normal density at a complete observation."""
    return float(model.log_densities(x)[0, k])


def discriminant_score(model: DaModel, k: int, x) -> float:
    return float(model.discriminant_scores(x)[0, k])


def posterior(model: DaModel, x) -> np.ndarray:
    return model.posteriors(x)[0]


def classify(model: DaModel, x) -> tuple[TopologyLabel, np.ndarray]:
    scores = model.discriminant_scores(x)[0]
    k = int(np.argmax(scores))
    post = np.exp(scores - logsumexp(scores))
    return model.classes[k].label, post
