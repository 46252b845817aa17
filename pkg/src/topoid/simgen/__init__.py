"""Desk-scale feeder simulator producing labeled measurement datasets."""

from .feeder import (
    FeederModel,
    enumerate_topologies,
    load_feeder,
    parse_feeder,
    reference_feeder,
    reference_feeder_path,
    switch_configurations,
)
from .flow import FlowResult, FlowSolver, sequence_magnitudes, solve_linearized_flow
from .sampling import Scenario, generate_dataset, sample_scenario, scenario_rng

__all__ = [
    "FeederModel", "FlowResult", "FlowSolver", "Scenario", "enumerate_topologies", "generate_dataset",
    "load_feeder", "parse_feeder", "reference_feeder", "reference_feeder_path", "sample_scenario",
    "scenario_rng", "sequence_magnitudes", "solve_linearized_flow", "switch_configurations",
]
