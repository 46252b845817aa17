"""Evaluation harness: confusion matrices, ROC/AUC and the resilience sweeps."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .anomaly import calibrate_threshold, likelihood_ratio
from .dataset import Dataset
from .errors import DegenerateClass, ValidationError
from .model import DaModel, TopologyLabel, fit
from .recovery import recover

# alpha histogram edges (decades); recorded in every anomaly report
ALPHA_EDGES = (0.0, 1.0, 10.0, 100.0, 1e3, 1e4, 1e6, np.inf)


# ---- pipelines ------------------------------------------------------------------


@dataclass(frozen=True)
class Plain:
    name = "plain"

    def predict(self, model: DaModel, X: np.ndarray) -> np.ndarray:
        return model.predict(X)


@dataclass(frozen=True)
class MeanSubstitution:
    """Replace the missing signals by their pooled training means."""

    missing_idx: tuple[int, ...]
    name = "mean-substitution"

    def filled(self, model, X):
        X = np.array(X, dtype=float)
        X[:, list(self.missing_idx)] = model.shift[list(self.missing_idx)]
        return X

    def predict(self, model, X):
        return model.predict(self.filled(model, X))


@dataclass(frozen=True)
class Recover:
    missing_idx: tuple[int, ...]
    name = "recovery"

    def filled(self, model, X):
        return np.array([recover(model, row, self.missing_idx).recovered_observation.values for row in X])

    def predict(self, model, X):
        return model.predict(self.filled(model, X))


@dataclass(frozen=True)
class Detect:
    """Screen a suspect group with alpha; classify recovered values when flagged."""

    suspect_idx: tuple[int, ...]
    threshold: float
    name = "detect"

    def run(self, model, X):
        log_thr = np.log(self.threshold)
        flagged, rows, log_alpha = [], [], []
        for row in X:
            la, rec = likelihood_ratio(model, row, self.suspect_idx)
            log_alpha.append(la)
            flagged.append(la > log_thr)
            rows.append(rec.recovered_observation.values if la > log_thr else row)
        return np.array(log_alpha), np.array(flagged, dtype=bool), np.array(rows)

    def predict(self, model, X):
        return model.predict(self.run(model, X)[2])


# ---- confusion and rates ---------------------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    labels: tuple[TopologyLabel, ...]
    counts: np.ndarray  # rows = predicted, columns = actual

    @classmethod
    def from_predictions(cls, labels, predicted, actual) -> "ConfusionMatrix":
        K = len(labels)
        counts = np.zeros((K, K), dtype=np.int64)
        np.add.at(counts, (np.asarray(predicted), np.asarray(actual)), 1)
        return cls(tuple(labels), counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)

    def to_dict(self) -> dict:
        return {"labels": [str(l) for l in self.labels], "counts": self.counts.tolist()}


def confusion(model: DaModel, test: Dataset, pipeline=None) -> ConfusionMatrix:
    if len(test) == 0:
        raise ValidationError("test set is empty")
    pipeline = pipeline or Plain()
    predicted = pipeline.predict(model, test.values)
    actual = np.array([model.class_index(l) for l in test.labels])
    return ConfusionMatrix.from_predictions(model.labels, predicted, actual)


@dataclass(frozen=True)
class SplitRates:
    per_config: dict[str, tuple[float, float]]  # config -> (sc_misid, pds_misid)
    average_sc: float
    average_pds: float
    pooled_sc: float
    pooled_pds: float

    def to_dict(self) -> dict:
        return {
            "per_config": {c: {"sc_misid": s, "pds_misid": p} for c, (s, p) in self.per_config.items()},
            "average": {"sc_misid": self.average_sc, "pds_misid": self.average_pds},
            "pooled": {"sc_misid": self.pooled_sc, "pds_misid": self.pooled_pds},
        }


def split_rates(cm: ConfusionMatrix) -> SplitRates:
    """Switching-configuration vs protective-device misidentification.

    ``pds_misid`` counts points whose configuration is right but whose PD
    status is wrong, so the two rates partition the errors.
    """
    configs = [l.switch_config for l in cm.labels]
    order = list(dict.fromkeys(configs))
    same_cfg = np.array([[a == b for b in configs] for a in configs])
    exact = np.eye(len(configs), dtype=bool)
    per = {}
    tot_sc = tot_pds = tot = 0
    for c in order:
        cols = [j for j, cj in enumerate(configs) if cj == c]
        sub = cm.counts[:, cols]
        n = int(sub.sum())
        if n == 0:
            continue
        sc = int(sub[~same_cfg[:, cols[0]]].sum())
        pds = int(sum(cm.counts[i, j] for j in cols for i in range(len(configs)) if same_cfg[i, j] and not exact[i, j]))
        per[c] = (sc / n, pds / n)
        tot_sc += sc
        tot_pds += pds
        tot += n
    return SplitRates(
        per,
        float(np.mean([v[0] for v in per.values()])),
        float(np.mean([v[1] for v in per.values()])),
        tot_sc / tot,
        tot_pds / tot,
    )


# ---- ROC --------------------------------------------------------------------------


@dataclass(frozen=True)
class RocCurve:
    class_label: TopologyLabel | None
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(scores, positives, class_label=None) -> RocCurve:
    """Exact empirical ROC; a point is predicted positive when score >= threshold.

    Thresholds are every distinct score plus {0, 1}, swept from +inf down.
    """
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(positives.sum()), int((~positives).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClass(f"class {class_label}: need both positives and negatives for ROC")
    grid = np.unique(np.concatenate([scores, [0.0, 1.0]]))[::-1]
    order = np.argsort(-scores, kind="stable")
    s_sorted, p_sorted = scores[order], positives[order]
    # number of points with score >= t for each threshold t
    counts = np.searchsorted(-s_sorted, -grid, side="right")
    cum_pos = np.concatenate([[0], np.cumsum(p_sorted)])
    tp = cum_pos[counts]
    fp = counts - tp
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    if tpr[-1] != 1.0 or fpr[-1] != 1.0:
        tpr, fpr = np.append(tpr, 1.0), np.append(fpr, 1.0)
        grid = np.append(grid, -np.inf)
    thresholds = np.concatenate([[np.inf], grid])
    return RocCurve(class_label, fpr, tpr, thresholds, float(trapezoid(tpr, fpr)))


def roc(model: DaModel, test: Dataset, k: int) -> RocCurve:
    """One-vs-rest ROC of class ``k`` over its posterior probability."""
    post = model.posteriors(test.values)[:, k]
    actual = np.array([model.class_index(l) for l in test.labels])
    return roc_curve(post, actual == k, model.classes[k].label)


def roc_all(model: DaModel, test: Dataset) -> list[RocCurve]:
    post = model.posteriors(test.values)
    actual = np.array([model.class_index(l) for l in test.labels])
    return [roc_curve(post[:, k], actual == k, c.label) for k, c in enumerate(model.classes)]


# ---- sweeps -----------------------------------------------------------------------


def _correlation(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def missing_unit_sweep(model: DaModel, train: Dataset, test: Dataset, units: Sequence[str] | None = None,
                       shrinkage: float | None = None) -> list[dict]:
    """Per-unit accuracy with the unit's signals lost, under three strategies.

    mean-substitution: training means in place of the lost signals;
    recovery: per-class box-QP recovery; retrained: a model fitted without
    the unit.  Recovery rows also carry recovered-vs-actual correlations.
    """
    units = list(units) if units is not None else model.schema.units
    shrinkage = model.shrinkage if shrinkage is None else shrinkage
    actual = np.array([model.class_index(l) for l in test.labels])
    rows = []
    for unit in units:
        idx = tuple(model.schema.unit_indices(unit))
        subst = MeanSubstitution(idx)
        cm = ConfusionMatrix.from_predictions(model.labels, subst.predict(model, test.values), actual)
        rows.append(_rate_row(unit, "mean-substitution", cm))

        rec = Recover(idx)
        filled = rec.filled(model, test.values)
        cm = ConfusionMatrix.from_predictions(model.labels, model.predict(filled), actual)
        row = _rate_row(unit, "recovery", cm)
        row["correlation"] = {
            model.schema.names[i]: _correlation(filled[:, i], test.values[:, i]) for i in idx
        }
        rows.append(row)

        reduced_schema, keep = model.schema.without(idx)
        reduced = fit(train.values[:, keep], train.labels, reduced_schema, shrinkage, classes=model.labels)
        cm = ConfusionMatrix.from_predictions(model.labels, reduced.predict(test.values[:, keep]), actual)
        rows.append(_rate_row(unit, "retrained", cm))
    return rows


def _rate_row(unit, strategy, cm: ConfusionMatrix) -> dict:
    rates = split_rates(cm)
    return {
        "unit": unit,
        "strategy": strategy,
        "accuracy": cm.accuracy,
        "sc_misid": rates.average_sc,
        "pds_misid": rates.average_pds,
        "sc_accuracy": 1.0 - rates.pooled_sc,
        "per_config": {c: v[0] for c, v in rates.per_config.items()},
    }


def alpha_histogram(log_alpha: np.ndarray) -> list[float]:
    edges = np.log(np.maximum(np.array(ALPHA_EDGES), 1e-300))
    edges[0] = -np.inf
    counts, _ = np.histogram(log_alpha, bins=edges)
    return (counts / max(len(log_alpha), 1)).tolist()


def anomaly_sweep(model: DaModel, test: Dataset, units: Sequence[str] | None = None,
                  scales: Sequence[float] = (0.9, 1.1),
                  threshold: float | Mapping[str, float] | None = None,
                  validation: Dataset | None = None, target_false_alarm: float = 0.05) -> list[dict]:
    """Multiply each unit's signals by each scale and screen them with alpha.

    ``threshold`` may be a number, a per-unit mapping, or None to calibrate
    on ``validation`` at ``target_false_alarm``.
    """
    units = list(units) if units is not None else model.schema.units
    actual = np.array([model.class_index(l) for l in test.labels])
    rows = []
    for unit in units:
        idx = tuple(model.schema.unit_indices(unit))
        if threshold is None:
            if validation is None:
                raise ValidationError("anomaly sweep needs a threshold or a validation set")
            thr = calibrate_threshold(model, validation.values, idx, target_false_alarm)
        elif isinstance(threshold, Mapping):
            thr = float(threshold[unit])
        else:
            thr = float(threshold)
        det = Detect(idx, thr)
        clean_la, clean_flag, _ = det.run(model, test.values)
        for scale in scales:
            X = np.array(test.values)
            X[:, list(idx)] *= scale
            la, flagged, filled = det.run(model, X)
            cm = ConfusionMatrix.from_predictions(model.labels, model.predict(filled), actual)
            rates = split_rates(cm)
            rows.append({
                "unit": unit,
                "scale": scale,
                "threshold": thr,
                "detection_rate": float(flagged.mean()),
                "false_alarm_rate": float(clean_flag.mean()),
                "clean_below_threshold": float(1.0 - clean_flag.mean()),
                "accuracy": cm.accuracy,
                "sc_misid": rates.average_sc,
                "pds_misid": rates.average_pds,
                "alpha_histogram": alpha_histogram(la),
                "clean_alpha_histogram": alpha_histogram(clean_la),
                "alpha_edges": [float(e) for e in ALPHA_EDGES],
            })
    return rows


def pair_drop_sweep(train: Dataset, test: Dataset, units: Sequence[str] | None = None,
                    shrinkage: float = 1e-3) -> list[dict]:
    """Retrain and test without each pair of units; ranked by average SC misidentification.

    The full-meter baseline is included as the row with ``dropped == []``.
    """
    schema = train.schema
    units = list(units) if units is not None else schema.units
    if len(units) < 2:
        raise ValidationError("pair sweep needs at least two metered units")
    classes = list(train.classes)
    actual = np.array([classes.index(l) for l in test.labels])
    rows = []
    for pair in [()] + list(itertools.combinations(units, 2)):
        drop = [i for u in pair for i in schema.unit_indices(u)]
        reduced_schema, keep = schema.without(drop)
        m = fit(train.values[:, keep], train.labels, reduced_schema, shrinkage, classes=classes)
        cm = ConfusionMatrix.from_predictions(classes, m.predict(test.values[:, keep]), actual)
        rates = split_rates(cm)
        rows.append({
            "dropped": list(pair),
            "sc_misid": rates.average_sc,
            "pds_misid": rates.average_pds,
            "accuracy": cm.accuracy,
            "per_config": {c: v[0] for c, v in rates.per_config.items()},
            "config_confusion": _config_confusion(cm),
        })
    rows.sort(key=lambda r: (r["sc_misid"], len(r["dropped"]), r["dropped"]))
    return rows


def _config_confusion(cm: ConfusionMatrix) -> dict:
    configs = list(dict.fromkeys(l.switch_config for l in cm.labels))
    idx = {c: [k for k, l in enumerate(cm.labels) if l.switch_config == c] for c in configs}
    return {
        actual: {pred: int(cm.counts[np.ix_(idx[pred], idx[actual])].sum()) for pred in configs}
        for actual in configs
    }


LOAD_VARIANTS: dict[str, Callable] = {
    "base": lambda f: f,
    "constant-power": lambda f: f.with_load_type("constant-power"),
    "constant-impedance": lambda f: f.with_load_type("constant-impedance"),
    "constant-current": lambda f: f.with_load_type("constant-current"),
    "p-x1.2": lambda f: f.scaled_loads(p=1.2),
    "q-x1.2": lambda f: f.scaled_loads(q=1.2),
}


def load_variant_sweep(feeder, n_per_topology: int, seed: int, shrinkage: float = 1e-3,
                       variants: Sequence[str] | None = None, split_fraction: float = 0.9) -> list[dict]:
    """Regenerate, retrain and test under load-type and loading-level presets."""
    from .simgen import generate_dataset

    rows = []
    for name in variants or list(LOAD_VARIANTS):
        variant = LOAD_VARIANTS[name](feeder)
        train, test = generate_dataset(variant, n_per_topology, seed, split_fraction)
        m = fit(train.values, train.labels, train.schema, shrinkage, classes=train.classes)
        rates = split_rates(confusion(m, test))
        rows.append({"variant": name, "sc_misid": rates.average_sc, "pds_misid": rates.average_pds})
    return rows
