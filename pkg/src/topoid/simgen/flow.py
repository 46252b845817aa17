"""Per-phase linearized power flow used as the data-generating surrogate.

Each phase is solved independently as a linear current-injection network:
with draws ``I = conj(S) / V0`` the complex drop vector solves
``L dU = I`` (L the branch-admittance Laplacian, source node eliminated) and
the voltage magnitude is ``V0 - Re(dU)``.  On a radial path this is exactly
``V0 - sum(r * P_flow + x * Q_flow) / V0``; on a weakly-meshed network the
nodal solve resolves the loop flow so that drops around the loop cancel.
Voltage-dependent loads are re-evaluated once at the first-pass voltages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
import numpy as np

from ..errors import DisconnectedLoadWithoutPD, NoValidTopology
from ..model import TopologyLabel
from .feeder import LOAD_EXPONENT, PHASES, FeederModel, configuration, energized, in_service

A = complex(math.cos(2 * math.pi / 3), math.sin(2 * math.pi / 3))
_PHASE_ROT = np.array([1.0, A.conjugate(), A])  # nominal angles 0, -120, +120 degrees


def sequence_magnitudes(v_abc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positive/negative sequence magnitudes from phase magnitudes (..., 3)."""
    phasors = np.asarray(v_abc) * _PHASE_ROT
    pos = np.abs(phasors @ np.array([1.0, A, A * A])) / 3.0
    neg = np.abs(phasors @ np.array([1.0, A * A, A])) / 3.0
    return pos, neg


@dataclass(frozen=True)
class FlowResult:
    voltages: np.ndarray      # (N, n_bus, 3) phase magnitudes, 0 where absent/de-energized
    sub_p: np.ndarray         # (N,)
    sub_q: np.ndarray         # (N,)
    bus_ids: tuple[str, ...]

    def bus(self, bus_id: str) -> np.ndarray:
        return self.voltages[:, self.bus_ids.index(bus_id), :]

    def sequence(self, bus_id: str) -> tuple[np.ndarray, np.ndarray]:
        return sequence_magnitudes(self.bus(bus_id))


class _PhaseNetwork:
    def __init__(self, feeder: FeederModel, branches, phase: str):
        live = energized(feeder, branches, phase)
        self.nodes = [b for b in feeder.buses if b in live]
        index = {b: i for i, b in enumerate(self.nodes)}
        n = len(self.nodes)
        lap = np.zeros((n, n), dtype=complex)
        edges = []  # (from index or -1 for source, to index, admittance, r, x)
        z_src = complex(feeder.source_r, feeder.source_x)
        s = index[feeder.substation_bus]
        stiff = z_src == 0
        if not stiff:
            lap[s, s] += 1.0 / z_src
        edges.append((-1, s, 0.0, feeder.source_r, feeder.source_x))
        for b in branches:
            if phase not in b.phases or b.from_bus not in index:
                continue
            i, j = index[b.from_bus], index[b.to_bus]
            z = b.impedance(phase)
            y = 1.0 / z
            lap[i, i] += y
            lap[j, j] += y
            lap[i, j] -= y
            lap[j, i] -= y
            edges.append((i, j, y, z.real, z.imag))
        impedance = np.zeros((n, n), dtype=complex)
        if stiff:
            # ideal source at the substation bus: its drop is pinned to zero
            keep = [i for i in range(n) if i != s]
            if keep:
                impedance[np.ix_(keep, keep)] = np.linalg.inv(lap[np.ix_(keep, keep)])
        else:
            impedance = np.linalg.inv(lap)
        self.index = index
        self.impedance = impedance
        self.edges = edges

    def drops(self, draws: np.ndarray) -> np.ndarray:
        """Complex drops (N, nodes) for complex current draws (N, nodes)."""
        return draws @ self.impedance.T

    def losses(self, drops: np.ndarray, draws: np.ndarray) -> np.ndarray:
        total = np.zeros(drops.shape[0], dtype=complex)
        for i, j, y, r, x in self.edges:
            if i < 0:
                current = draws.sum(axis=1)
            else:
                current = y * (drops[:, j] - drops[:, i])
            mag2 = np.abs(current) ** 2
            total += r * mag2 + 1j * x * mag2
        return total


class FlowSolver:
    """Precomputed linear network for one topology; evaluates batches of scenarios."""

    def __init__(self, feeder: FeederModel, topology: TopologyLabel):
        if len(topology.pd_status) != len(feeder.protective_devices):
            raise NoValidTopology(f"topology {topology} does not match the feeder's protective devices")
        cfg = configuration(feeder, topology.switch_config)
        opened = [d.id for d, bit in zip(feeder.protective_devices, topology.pd_status) if bit]
        branches = in_service(feeder, cfg.closed, opened)
        normal = in_service(feeder, cfg.closed)
        self.feeder = feeder
        self.topology = topology
        self.bus_ids = tuple(feeder.buses)
        self.phases = {ph: _PhaseNetwork(feeder, branches, ph) for ph in PHASES}
        supplied_all = {ph: energized(feeder, normal, ph) for ph in PHASES}

        # one entry per (load, phase) element; node None when curtailed
        self.elements = []
        for i, l in enumerate(feeder.loads):
            for ph, p, q in l.elements():
                net = self.phases[ph]
                if l.bus in net.index:
                    node = net.index[l.bus]
                elif l.bus in supplied_all[ph]:
                    node = None  # curtailed by an open protective device
                else:
                    raise DisconnectedLoadWithoutPD(f"load {i} at bus {l.bus} phase {ph} is islanded")
                self.elements.append((i, ph, node, complex(p, q), LOAD_EXPONENT[l.type],
                                      self.bus_ids.index(l.bus), PHASES.index(ph)))
        for d in feeder.ders:
            for ph in PHASES:
                if d.bus not in self.phases[ph].index:
                    raise NoValidTopology(f"DER {d.id} is de-energized in topology {topology}")
        tan = np.array([math.tan(math.acos(d.power_factor)) for d in feeder.ders])
        # leading power factor: the DER absorbs reactive power
        self.der_q_ratio = -tan

    def _network_draws(self, element_s, der_p):
        """Net complex power draw per phase node, (N, nodes) per phase."""
        N = element_s.shape[0]
        out = {ph: np.zeros((N, len(net.nodes)), dtype=complex) for ph, net in self.phases.items()}
        for e, (_, ph, node, *_rest) in enumerate(self.elements):
            if node is not None:
                out[ph][:, node] += element_s[:, e]
        for j, d in enumerate(self.feeder.ders):
            s = (der_p[:, j] + 1j * der_p[:, j] * self.der_q_ratio[j]) / 3.0
            for ph in PHASES:
                out[ph][:, self.phases[ph].index[d.bus]] -= s
        return out

    def _solve_pass(self, load_s, der_p):
        v0 = self.feeder.v0
        N = load_s.shape[0]
        volts = np.zeros((N, len(self.bus_ids), 3))
        total = np.zeros(N, dtype=complex)
        for p, (ph, draws_s) in enumerate(self._network_draws(load_s, der_p).items()):
            net = self.phases[ph]
            draws = np.conj(draws_s) / v0
            drops = net.drops(draws)
            cols = [self.bus_ids.index(b) for b in net.nodes]
            volts[:, cols, p] = v0 - drops.real
            total += draws_s.sum(axis=1) + net.losses(drops, draws)
        return volts, total

    def solve(self, load_scale, der_p) -> FlowResult:
        load_scale = np.atleast_2d(np.asarray(load_scale, dtype=float))
        der_p = np.atleast_2d(np.asarray(der_p, dtype=float))
        owner = [e[0] for e in self.elements]
        base = np.array([e[3] for e in self.elements])
        element_s = load_scale[:, owner] * base
        volts, total = self._solve_pass(element_s, der_p)
        exponents = np.array([e[4] for e in self.elements], dtype=float)
        if np.any(exponents > 0):
            v_elem = np.ones(element_s.shape)
            for e, (_, _, node, _, _, bus, ph) in enumerate(self.elements):
                if node is not None:
                    v_elem[:, e] = volts[:, bus, ph] / self.feeder.v0
            volts, total = self._solve_pass(element_s * v_elem ** exponents, der_p)
        return FlowResult(volts, total.real, total.imag, self.bus_ids)

    def measurements(self, load_scale, der_p) -> np.ndarray:
        """Noise-free predictor matrix (N, n) in the feeder's predictor order."""
        res = self.solve(load_scale, der_p)
        der_p = np.atleast_2d(np.asarray(der_p, dtype=float))
        pos, neg = res.sequence(self.feeder.substation_bus)
        cols = [res.sub_p, res.sub_q, pos, neg]
        for j, d in enumerate(self.feeder.ders):
            if d.metered:
                pos, neg = res.sequence(d.bus)
                cols += [der_p[:, j], pos, neg]
        return np.column_stack(cols)


def solve_linearized_flow(feeder: FeederModel, topology: TopologyLabel, load_scale, der_p) -> FlowResult:
    return FlowSolver(feeder, topology).solve(load_scale, der_p)
