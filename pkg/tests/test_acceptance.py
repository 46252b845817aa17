"""Acceptance criteria on the shipped reference feeder.

Each test prints one PASS/FAIL line; the lines are repeated in the pytest
terminal summary.  Run alone with ``pytest tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from topoid import cli
from topoid.anomaly import likelihood_ratio
from topoid.dataset import Dataset
from topoid.evaluation import anomaly_sweep, confusion, missing_unit_sweep, roc_all, split_rates
from topoid.model import fit, from_parameters
from topoid.recovery import active_pattern, enumerate_active_sets, kkt_satisfied, recover, solve_box_qp
from topoid.simgen import enumerate_topologies, generate_dataset, reference_feeder

from conftest import ACCEPTANCE_LINES, random_spd
from oracles import conditional_mean, grid_search, projected_gradient, random_box_qp

SEED = 7
N_PER_TOPOLOGY = 1000
TIME_BUDGET = 300.0
_START = time.perf_counter()


def report(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def reference():
    feeder = reference_feeder()
    train, test = generate_dataset(feeder, N_PER_TOPOLOGY, SEED)
    a, b = generate_dataset(feeder, 200, SEED, split_fraction=0.5, stream=1)
    validation = Dataset(b.schema, b.values, b.labels, classes=list(b.classes))
    model = fit(train.values, train.labels, train.schema, classes=train.classes)
    return feeder, train, test, validation, model


def test_criterion_02_classifier_rates(reference):
    *_, test, _, model = reference
    rates = split_rates(confusion(model, test))
    ok = rates.average_sc <= 0.02 and rates.average_pds <= 0.05
    report(2, ok, f"average sc_misid {rates.average_sc:.4%} (<= 2%), pds_misid {rates.average_pds:.4%} (<= 5%)")


def test_criterion_03_min_auc(reference):
    *_, test, _, model = reference
    curves = roc_all(model, test)
    worst = min(curves, key=lambda c: c.auc)
    report(3, worst.auc >= 0.98, f"minimum one-vs-rest AUC {worst.auc:.5f} ({worst.class_label}) (>= 0.98)")


def test_criterion_04_box_qp():
    rng = np.random.default_rng(SEED)
    failures = []
    worst_x = worst_obj = 0.0
    for i in range(500):
        l = int(rng.integers(1, 7))
        qp = random_box_qp(rng, l)
        x, obj = solve_box_qp(qp)
        x_ref, pattern = enumerate_active_sets(qp)
        _, grid_obj = grid_search(qp)
        err_x = float(np.max(np.abs(x - x_ref)))
        gap = grid_obj - obj
        worst_x, worst_obj = max(worst_x, err_x), max(worst_obj, abs(gap))
        if active_pattern(qp, x) != pattern or err_x > 1e-8 or not (-1e-12 <= gap < 1e-4) \
                or not kkt_satisfied(qp, x):
            failures.append(i)
    report(4, not failures, f"500 box QPs: {len(failures)} failures; max |x - enum| {worst_x:.1e} (<= 1e-8), "
                            f"max grid gap {worst_obj:.1e} (< 1e-4), KKT certified")


def test_criterion_04b_projected_gradient_cross_check():
    rng = np.random.default_rng(SEED + 1)
    worst = 0.0
    for _ in range(50):
        qp = random_box_qp(rng, int(rng.integers(1, 7)))
        worst = max(worst, float(np.max(np.abs(solve_box_qp(qp)[0] - projected_gradient(qp)))))
    assert worst < 1e-6


def test_criterion_05_conditional_mean():
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 8))
        K = int(rng.integers(1, 4))
        means = rng.normal(scale=2, size=(K, n))
        covs = [random_spd(rng, n) for _ in range(K)]
        m = from_parameters(means, covs, rng.dirichlet(np.ones(K)), signal_ranges=[(-np.inf, np.inf)] * n)
        miss = sorted(rng.choice(n, size=int(rng.integers(1, n)), replace=False).tolist())
        x = rng.multivariate_normal(means[0], covs[0])
        res = recover(m, x, miss)
        k = res.best_class
        avail = [i for i in range(n) if i not in miss]
        want = conditional_mean(means[k], covs[k], miss, x[avail])
        worst = max(worst, float(np.max(np.abs(res.recovered_values - want))))
    report(5, worst <= 1e-8, f"200 Gaussian models: max |recovered - Schur conditional mean| {worst:.1e} (<= 1e-8)")


@pytest.fixture(scope="module")
def unit_sweep(reference):
    _, train, test, _, model = reference
    return missing_unit_sweep(model, train, test)


def test_criterion_06_recovery_beats_mean_substitution(unit_sweep):
    acc = {(r["unit"], r["strategy"]): r["sc_accuracy"] for r in unit_sweep}
    units = sorted({u for u, _ in acc}, key=[r["unit"] for r in unit_sweep].index)
    gains = {u: acc[u, "recovery"] - acc[u, "mean-substitution"] for u in units}
    ok = all(g >= 0 for g in gains.values()) and max(gains.values()) >= 0.05
    detail = ", ".join(f"{u} {acc[u, 'recovery']:.3f} vs {acc[u, 'mean-substitution']:.3f}" for u in units)
    report(6, ok, f"sc accuracy recovery vs mean-substitution: {detail}")


def test_criterion_07_negative_sequence_correlation(unit_sweep):
    corr = {name: c for r in unit_sweep if r["strategy"] == "recovery"
            for name, c in r["correlation"].items() if name.endswith(".V-")}
    worst = min(corr, key=corr.get)
    report(7, corr[worst] >= 0.9, f"V- recovered-vs-actual correlation min {corr[worst]:.4f} ({worst}) (>= 0.9)")


def test_criterion_08_anomaly_benchmark(reference):
    *_, test, validation, model = reference
    rows = anomaly_sweep(model, test, scales=(0.9, 1.1), validation=validation, target_false_alarm=0.05)
    det = min(r["detection_rate"] for r in rows)
    fa = max(r["false_alarm_rate"] for r in rows)
    report(8, det >= 0.95 and fa <= 0.07,
           f"min detection rate {det:.4f} at x0.9/x1.1 (>= 0.95), max false alarm {fa:.4f} (<= 0.07)")


def test_criterion_09_math_identities(reference):
    *_, test, _, model = reference
    rng = np.random.default_rng(SEED)
    rows = test.values[rng.integers(0, len(test), 10_000)]
    X = rows * (1 + rng.normal(0, 0.02, rows.shape))
    post = model.posteriors(X)
    norm_err = float(np.max(np.abs(post.sum(axis=1) - 1)))
    argmax_ok = bool(np.array_equal(post.argmax(axis=1), model.discriminant_scores(X).argmax(axis=1)))

    mean = np.array([1.0, -1.0, 2.0])
    twin = from_parameters([mean] * 2, [random_spd(rng, 3)] * 2, [0.5, 0.5], signal_ranges=[(-9, 9)] * 3)
    log_alpha = likelihood_ratio(twin, mean, [1])[0]

    lse_err = 0.0
    for _ in range(50):
        K, n = 4, 3
        means, covs = rng.normal(scale=2, size=(K, n)), [random_spd(rng, n) for _ in range(K)]
        priors = rng.dirichlet(np.ones(K))
        m = from_parameters(means, covs, priors)
        P = rng.normal(scale=3, size=(20, n))
        naive = sum(priors[k] * multivariate_normal(means[k], covs[k]).pdf(P) for k in range(K))
        ok = naive > 1e-300
        rel = np.abs(m.mixture_log_likelihoods(P)[ok] - np.log(naive[ok])) / np.abs(np.log(naive[ok]))
        lse_err = max(lse_err, float(rel.max()))

    ok = norm_err <= 1e-12 and argmax_ok and abs(log_alpha) <= 1e-12 and lse_err <= 1e-10
    report(9, ok, f"normalization {norm_err:.1e}, argmax agreement on 10000 points {argmax_ok}, "
                  f"identity log alpha {log_alpha:.1e}, log-sum-exp rel err {lse_err:.1e}")


def test_criterion_10_determinism(tmp_path):
    d = tmp_path / "run"
    snapshots = []
    for _ in range(2):
        codes = [
            cli.main(["generate", "--n", "100", "--seed", str(SEED), "--out", str(d / "data")]),
            cli.main(["train", "--data", str(d / "data" / "train.csv"), "--out", str(d / "model.json")]),
            cli.main(["evaluate", "--sweep", "confusion", "--model", str(d / "model.json"),
                      "--test", str(d / "data" / "test.csv"), "--out", str(d / "report")]),
            cli.main(["evaluate", "--sweep", "roc", "--model", str(d / "model.json"),
                      "--test", str(d / "data" / "test.csv"), "--out", str(d / "report")]),
        ]
        assert codes == [0, 0, 0, 0]
        snapshots.append({str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()})
    same = snapshots[0] == snapshots[1]
    report(10, same, f"generate -> train -> evaluate twice: {len(snapshots[0])} files byte-identical = {same}")


def test_criterion_01_reference_scale_and_runtime(reference):
    feeder, train, test, *_ = reference
    topologies = enumerate_topologies(feeder)
    per_topology = {t: 0 for t in topologies}
    for lab in train.labels + test.labels:
        per_topology[lab] += 1
    elapsed = time.perf_counter() - _START
    ok = (len(feeder.buses) == 10 and len(topologies) == 12
          and set(per_topology.values()) == {N_PER_TOPOLOGY} and elapsed <= TIME_BUDGET)
    report(1, ok, f"{len(feeder.buses)} buses, {len(topologies)} topologies, {N_PER_TOPOLOGY} scenarios each, "
                  f"seed {SEED}; acceptance runtime {elapsed:.0f} s (<= {TIME_BUDGET:.0f} s)")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
