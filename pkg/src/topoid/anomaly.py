"""Likelihood-ratio screening of suspect measurement groups."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyValidation, ValidationError
from .model import DaModel, Observation, TopologyLabel, classify
from .recovery import recover

DEFAULT_FALSE_ALARM = 0.05


@dataclass(frozen=True)
class AnomalyVerdict:
    log_alpha: float
    threshold: float
    suspect_idx: tuple[int, ...]
    recovered_values: np.ndarray
    final_label: TopologyLabel

    @property
    def alpha(self) -> float:
        # overflow is reported as inf; log_alpha stays exact
        return math.exp(self.log_alpha) if self.log_alpha < 709.0 else math.inf

    @property
    def is_anomalous(self) -> bool:
        return self.log_alpha > math.log(self.threshold)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "log_alpha": self.log_alpha,
            "threshold": self.threshold,
            "is_anomalous": self.is_anomalous,
            "suspect_idx": list(self.suspect_idx),
            "recovered_values": self.recovered_values.tolist(),
            "final_label": str(self.final_label),
        }


def mixture_log_likelihood(model: DaModel, x) -> float:
    """log sum_k f_k(x) rho_k, evaluated by log-sum-exp."""
    return float(model.mixture_log_likelihoods(x)[0])


def _as_observation(model, x):
    if isinstance(x, Observation):
        return x
    return Observation(np.asarray(x, dtype=float), model.schema)


def likelihood_ratio(model: DaModel, x_suspect, suspect_idx: Sequence[int]):
    """Return ``(log_alpha, recovery)`` for a suspect group of a complete observation.

    alpha compares the mixture likelihood of the observation with the suspect
    entries replaced by their recovered values against the observation as given.
    """
    x = _as_observation(model, x_suspect)
    if not x.is_complete:
        raise ValidationError("likelihood ratio needs a complete observation")
    if not len(suspect_idx):
        raise ValidationError("suspect_idx must not be empty")
    rec = recover(model, x, missing_idx=suspect_idx)
    lls = model.mixture_log_likelihoods(np.vstack([rec.recovered_observation.values, x.values]))
    return float(lls[0] - lls[1]), rec


def detect(model: DaModel, x, suspect_idx: Sequence[int], threshold: float) -> AnomalyVerdict:
    """Flag the suspect group when alpha exceeds ``threshold``.

    An anomalous observation is classified on its recovered values, a clean
    one on the values as given.
    """
    if not threshold > 0:
        raise ValidationError(f"threshold must be positive, got {threshold}")
    x = _as_observation(model, x)
    log_alpha, rec = likelihood_ratio(model, x, suspect_idx)
    if log_alpha > math.log(threshold):
        label, _ = classify(model, rec.recovered_observation)
    else:
        label, _ = classify(model, x)
    return AnomalyVerdict(log_alpha, float(threshold), rec.missing_idx, rec.recovered_values, label)


def log_alphas(model: DaModel, X, suspect_idx: Sequence[int]) -> np.ndarray:
    return np.array([likelihood_ratio(model, row, suspect_idx)[0] for row in np.atleast_2d(X)])


def calibrate_threshold(model: DaModel, clean_validation, suspect_idx: Sequence[int],
                        target_false_alarm: float = DEFAULT_FALSE_ALARM) -> float:
    """(1 - target_false_alarm) quantile of alpha over clean observations."""
    X = np.atleast_2d(np.asarray(clean_validation, dtype=float))
    if X.size == 0:
        raise EmptyValidation("calibration needs at least one clean observation")
    if not 0.0 <= target_false_alarm < 1.0:
        raise ValidationError(f"target false alarm must lie in [0, 1), got {target_false_alarm}")
    alphas = np.exp(np.minimum(log_alphas(model, X, suspect_idx), 709.0))
    threshold = float(np.quantile(alphas, 1.0 - target_false_alarm))
    # alpha can dip below 1 when recovery clips; keep the threshold strictly positive
    return max(threshold, np.finfo(float).tiny)
