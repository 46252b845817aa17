import copy
import json
import math

import numpy as np
import pytest
from scipy.stats import truncnorm

from topoid.errors import FeederSpecError, NoValidTopology, ValidationError
from topoid.model import TopologyLabel
from topoid.simgen import (
    FlowSolver,
    enumerate_topologies,
    generate_dataset,
    parse_feeder,
    reference_feeder_path,
    sample_scenario,
    scenario_rng,
    sequence_magnitudes,
    solve_linearized_flow,
    switch_configurations,
)
from topoid.simgen.sampling import LOAD_FLOOR, LOAD_MEAN, LOAD_STD, truncated_normal


def _spec(branches, loads=(), ders=(), pds=(), buses=None, sub=None):
    if buses is None:
        ids = sorted({b["from"] for b in branches} | {b["to"] for b in branches} | {"1"}, key=int)
        buses = [{"id": i, "phases": "abc"} for i in ids]
    return {
        "format_version": 1,
        "buses": buses,
        "substation": sub or {"bus": "1", "r": 0.0, "x": 0.0},
        "branches": list(branches),
        "loads": list(loads),
        "ders": list(ders),
        "protective_devices": list(pds),
    }


def _reference_spec():
    return json.loads(reference_feeder_path().read_text())


def test_reference_feeder_has_twelve_topologies(feeder):
    topos = enumerate_topologies(feeder)
    assert len(topos) == 12
    assert len({t.switch_config for t in topos}) == 3
    assert [t.pd_string for t in topos[:4]] == ["00", "01", "10", "11"]


def test_no_switches_no_pds_gives_one_label():
    f = parse_feeder(_spec([{"id": "L1", "from": "1", "to": "2", "r": 0.01, "x": 0.01}]))
    assert enumerate_topologies(f) == [TopologyLabel("C1", ())]


def test_pentagon_ring_with_two_pds_gives_24_labels():
    ring = [{"id": f"R{i}", "from": str(i), "to": str(i % 5 + 1), "r": 0.01, "x": 0.02,
             "switch_id": f"S{i}", "normally_closed": i != 5} for i in range(1, 6)]
    stubs = [{"id": "T6", "from": "2", "to": "6", "r": 0.01, "x": 0.02},
             {"id": "T7", "from": "4", "to": "7", "r": 0.01, "x": 0.02}]
    loads = [{"bus": str(b), "phase": "abc", "p": 0.1, "q": 0.05} for b in range(2, 8)]
    f = parse_feeder(_spec(ring + stubs, loads, pds=[{"id": "P1", "branch": "T6"}, {"id": "P2", "branch": "T7"}]))
    configs = switch_configurations(f)
    assert len(configs) == 6
    assert configs[0].closed == frozenset({"S1", "S2", "S3", "S4"})
    assert len(enumerate_topologies(f)) == 24


def test_negative_impedance_names_branch():
    spec = _reference_spec()
    spec["branches"][3]["r"] = -0.1
    with pytest.raises(FeederSpecError, match="L4-5"):
        parse_feeder(spec)


def test_unknown_bus_names_branch():
    spec = _reference_spec()
    spec["branches"][0]["to"] = "99"
    with pytest.raises(FeederSpecError, match="L1-2"):
        parse_feeder(spec)


def test_feeder_spec_error_is_a_validation_error():
    assert issubclass(FeederSpecError, ValidationError)


def test_der_behind_protective_device_rejected():
    spec = _spec([{"id": "L1", "from": "1", "to": "2", "r": 0.01, "x": 0.01}],
                 ders=[{"id": "DER1", "bus": "2", "p_mean": 0.1}], pds=[{"id": "P1", "branch": "L1"}])
    with pytest.raises(FeederSpecError, match="DER1"):
        enumerate_topologies(parse_feeder(spec))


def test_unknown_configuration(feeder):
    with pytest.raises(NoValidTopology):
        FlowSolver(feeder, TopologyLabel("C9", (0, 0)))


def test_single_branch_drop():
    spec = _spec([{"id": "L1", "from": "1", "to": "2", "phases": "a", "r": 0.01, "x": 0.02}],
                 loads=[{"bus": "2", "phase": "a", "p": 1.0, "q": 0.5}],
                 buses=[{"id": "1", "phases": "abc"}, {"id": "2", "phases": "a"}])
    f = parse_feeder(spec)
    res = solve_linearized_flow(f, TopologyLabel("C1", ()), [1.0], np.zeros((1, 0)))
    assert res.bus("2")[0, 0] == pytest.approx(0.98, abs=1e-14)
    # losses: r |I|^2 with |I|^2 = 1.25
    assert res.sub_p[0] == pytest.approx(1.0 + 0.01 * 1.25, abs=1e-14)
    assert res.sub_q[0] == pytest.approx(0.5 + 0.02 * 1.25, abs=1e-14)


def test_parallel_branches_equal_half_impedance():
    load = [{"bus": "2", "phase": "abc", "p": [0.3, 0.2, 0.1], "q": [0.1, 0.1, 0.05]}]
    one = parse_feeder(_spec([{"id": "L", "from": "1", "to": "2", "r": 0.01, "x": 0.02}], load))
    two = parse_feeder(_spec([{"id": "La", "from": "1", "to": "2", "r": 0.02, "x": 0.04},
                              {"id": "Lb", "from": "1", "to": "2", "r": 0.02, "x": 0.04}], load))
    a = solve_linearized_flow(one, TopologyLabel("C1", ()), [1.0], np.zeros((1, 0)))
    b = solve_linearized_flow(two, TopologyLabel("C1", ()), [1.0], np.zeros((1, 0)))
    np.testing.assert_allclose(a.voltages, b.voltages, atol=1e-14)
    np.testing.assert_allclose([a.sub_p, a.sub_q], [b.sub_p, b.sub_q], atol=1e-14)


def test_no_flow(feeder):
    for topo in enumerate_topologies(feeder):
        res = solve_linearized_flow(feeder, topo, np.zeros(len(feeder.loads)), np.zeros(len(feeder.ders)))
        live = res.voltages[res.voltages > 0]
        np.testing.assert_allclose(live, feeder.v0, atol=0)
        assert res.sub_p[0] == 0.0 and res.sub_q[0] == 0.0
        assert sequence_magnitudes(res.bus("1"))[1][0] == pytest.approx(0.0, abs=1e-15)


def test_balanced_loads_have_no_negative_sequence():
    branches = [{"id": "L12", "from": "1", "to": "2", "r": 0.02, "x": 0.04},
                {"id": "L23", "from": "2", "to": "3", "r": 0.03, "x": 0.05},
                {"id": "L14", "from": "1", "to": "4", "r": 0.02, "x": 0.03},
                {"id": "L43", "from": "4", "to": "3", "r": 0.02, "x": 0.03, "switch_id": "S1",
                 "normally_closed": False}]
    loads = [{"bus": str(b), "phase": "abc", "p": 0.1 * b, "q": 0.05, "type": t}
             for b, t in zip((2, 3, 4), ("constant-power", "constant-impedance", "constant-current"))]
    ders = [{"id": "DER1", "bus": "3", "p_mean": 0.1}]
    f = parse_feeder(_spec(branches, loads, ders))
    for topo in enumerate_topologies(f):
        res = solve_linearized_flow(f, topo, [1.2, 0.8, 1.0], [0.15])
        for bus in "1234":
            assert sequence_magnitudes(res.bus(bus))[1][0] < 1e-12


def test_sequence_magnitudes():
    pos, neg = sequence_magnitudes(np.array([1.0, 1.0, 1.0]))
    assert pos == pytest.approx(1.0, abs=1e-15) and neg == pytest.approx(0.0, abs=1e-15)
    # one phase dropped by d: both components move by d / 3
    pos, neg = sequence_magnitudes(np.array([0.97, 1.0, 1.0]))
    assert pos == pytest.approx(1.0 - 0.01, abs=1e-12) and neg == pytest.approx(0.01, abs=1e-12)


def test_der_absorbs_reactive_power(feeder):
    topo = enumerate_topologies(feeder)[0]
    s = FlowSolver(feeder, topo)
    zero = np.zeros(len(feeder.loads))
    res = s.solve(zero, [0.15, 0.0, 0.0])
    assert res.sub_p[0] < 0 and res.sub_q[0] > 0
    assert res.sub_q[0] == pytest.approx(0.15 * math.tan(math.acos(0.95)), rel=0.05)


def test_open_pd_curtails_downstream_load(feeder):
    s0 = FlowSolver(feeder, TopologyLabel("C1", (0, 0)))
    s1 = FlowSolver(feeder, TopologyLabel("C1", (1, 0)))
    ones, ders = np.ones(len(feeder.loads)), np.zeros(len(feeder.ders))
    a, b = s0.solve(ones, ders), s1.solve(ones, ders)
    assert b.sub_p[0] < a.sub_p[0]
    assert np.all(b.bus("8") == 0.0) and np.all(b.bus("9") == 0.0)


def test_meshed_configuration_changes_measurements(feeder):
    ones, ders = np.ones(len(feeder.loads)), np.array([0.15, 0.1, 0.08])
    radial = FlowSolver(feeder, TopologyLabel("C1", (0, 0))).measurements(ones, ders)
    meshed = FlowSolver(feeder, TopologyLabel("C2", (0, 0))).measurements(ones, ders)
    assert np.abs(radial - meshed).max() > 1e-3


def test_predictor_names(feeder):
    names = feeder.predictor_names()
    assert names[:4] == ("SUB.P", "SUB.Q", "SUB.V+", "SUB.V-")
    assert len(names) == 4 + 3 * 3


def test_scenario_determinism_and_noise_off(feeder):
    topo = enumerate_topologies(feeder)[5]
    a = sample_scenario(feeder, topo, scenario_rng(3, 5, 0))
    b = sample_scenario(feeder, topo, scenario_rng(3, 5, 0))
    np.testing.assert_array_equal(a.observation.values, b.observation.values)
    c = sample_scenario(feeder, topo, scenario_rng(3, 5, 0), noise_std=0.0)
    np.testing.assert_array_equal(c.observation.values, c.clean_observation.values)


def test_truncated_normal_moments():
    x = truncated_normal(np.random.default_rng(0), 10_000)
    a = (LOAD_FLOOR - LOAD_MEAN) / LOAD_STD
    dist = truncnorm(a, np.inf, loc=LOAD_MEAN, scale=LOAD_STD)
    assert x.min() >= LOAD_FLOOR
    assert abs(x.mean() - dist.mean()) < 0.01
    assert abs(x.std() - dist.std()) < 0.01


def test_dataset_split_counts(feeder, small_data):
    train, test = generate_dataset(feeder, 100, seed=7)
    assert len(train) == 1080 and len(test) == 120
    for lab in train.classes:
        assert train.labels.count(lab) == 90 and test.labels.count(lab) == 10


def test_dataset_determinism(feeder):
    a, _ = generate_dataset(feeder, 20, seed=5)
    b, _ = generate_dataset(feeder, 20, seed=5)
    c, _ = generate_dataset(feeder, 20, seed=6)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_dataset_arguments_validated(feeder):
    with pytest.raises(ValidationError):
        generate_dataset(feeder, 5, seed=0)
    with pytest.raises(ValidationError):
        generate_dataset(feeder, 100, seed=0, split_fraction=1.0)


def test_class_means_separated_beyond_noise(small_data):
    """Every pair of topologies differs in some predictor by more than 5 noise sigmas."""
    train, _ = small_data
    y = train.y
    means = np.array([train.values[y == k].mean(axis=0) for k in range(len(train.classes))])
    sigma = 0.01 * np.abs(means).mean(axis=0)  # multiplicative noise at the mean operating point
    for i in range(len(means)):
        for j in range(i + 1, len(means)):
            assert np.max(np.abs(means[i] - means[j]) / sigma) > 5


def test_load_variants(feeder):
    zf = feeder.with_load_type("constant-impedance")
    assert all(l.type == "constant-impedance" for l in zf.loads)
    scaled = feeder.scaled_loads(p=1.2)
    assert scaled.loads[0].p[0] == pytest.approx(1.2 * feeder.loads[0].p[0])
    assert scaled.loads[0].q == feeder.loads[0].q
    assert zf.content_hash() != feeder.content_hash()


def test_content_hash_stable():
    a = parse_feeder(_reference_spec())
    b = parse_feeder(copy.deepcopy(_reference_spec()))
    assert a.content_hash() == b.content_hash()
