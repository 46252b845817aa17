"""Monte Carlo scenario sampling and dataset generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataset import Dataset
from ..errors import ValidationError
from ..model import Observation, PredictorSchema, TopologyLabel
from .feeder import FeederModel, enumerate_topologies
from .flow import FlowSolver

LOAD_MEAN = 1.0
LOAD_STD = 0.3
LOAD_FLOOR = 0.05
NOISE_STD = 0.01


@dataclass(frozen=True)
class Scenario:
    topology: TopologyLabel
    load_scale: np.ndarray
    der_p: np.ndarray
    observation: Observation
    clean_observation: Observation


def scenario_rng(seed: int, topology_index: int, sample_index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one (topology, sample) cell."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, topology_index, sample_index]))


def truncated_normal(rng: np.random.Generator, size: int, mean=LOAD_MEAN, std=LOAD_STD, floor=LOAD_FLOOR):
    """Normal(mean, std) conditioned on being >= floor, by rejection."""
    out = rng.normal(mean, std, size)
    bad = out < floor
    while bad.any():
        out[bad] = rng.normal(mean, std, int(bad.sum()))
        bad = out < floor
    return out


def draw_inputs(feeder: FeederModel, rng: np.random.Generator, noise_std: float = NOISE_STD):
    """Load scales, DER outputs and multiplicative noise factors for one scenario."""
    load_scale = truncated_normal(rng, len(feeder.loads))
    der_p = rng.uniform(0.0, 2.0, len(feeder.ders)) * np.array([d.p_mean for d in feeder.ders])
    n = len(feeder.predictor_names())
    noise = 1.0 + rng.normal(0.0, noise_std, n) if noise_std > 0 else np.ones(n)
    return load_scale, der_p, noise


def sample_scenario(feeder: FeederModel, topology: TopologyLabel, rng: np.random.Generator,
                    noise_std: float = NOISE_STD, solver: FlowSolver | None = None) -> Scenario:
    solver = solver or FlowSolver(feeder, topology)
    load_scale, der_p, noise = draw_inputs(feeder, rng, noise_std)
    clean = solver.measurements(load_scale, der_p)[0]
    schema = PredictorSchema(feeder.predictor_names())
    return Scenario(topology, load_scale, der_p, Observation(clean * noise, schema), Observation(clean, schema))


def generate_dataset(feeder: FeederModel, n_per_topology: int, seed: int, split_fraction: float = 0.9,
                     noise_std: float = NOISE_STD, stream: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified train/test datasets, ``n_per_topology`` scenarios per topology.

    The first ``round(split_fraction * n_per_topology)`` samples of each
    topology go to training.  Test sets keep the noise-free observations.
    """
    if n_per_topology < 10:
        raise ValidationError("n_per_topology must be at least 10")
    if not 0.0 < split_fraction < 1.0:
        raise ValidationError("split_fraction must lie strictly between 0 and 1")
    n_train = int(round(split_fraction * n_per_topology))
    if not 0 < n_train < n_per_topology:
        raise ValidationError("split leaves an empty train or test partition")
    topologies = enumerate_topologies(feeder)
    schema = PredictorSchema(feeder.predictor_names())
    n = schema.dimension
    parts = {"train": ([], [], []), "test": ([], [], [])}
    for t, topo in enumerate(topologies):
        solver = FlowSolver(feeder, topo)
        loads = np.empty((n_per_topology, len(feeder.loads)))
        ders = np.empty((n_per_topology, len(feeder.ders)))
        noise = np.empty((n_per_topology, n))
        for i in range(n_per_topology):
            loads[i], ders[i], noise[i] = draw_inputs(feeder, scenario_rng(seed, t, i, stream), noise_std)
        clean = solver.measurements(loads, ders)
        noisy = clean * noise
        for name, rows in (("train", slice(0, n_train)), ("test", slice(n_train, None))):
            vals, cl, labs = parts[name]
            vals.append(noisy[rows])
            cl.append(clean[rows])
            labs.extend([topo] * (n_train if name == "train" else n_per_topology - n_train))
    out = []
    for name in ("train", "test"):
        vals, cl, labs = parts[name]
        out.append(Dataset(schema, np.vstack(vals), labs, np.vstack(cl), list(topologies)))
    return out[0], out[1]
