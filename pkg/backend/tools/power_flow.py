# backend/tools/power_flow.py

"""
Newton-Raphson AC power flow in polar coordinates.

Given generator setpoints and loads, recovers voltage magnitudes at load buses,
angles everywhere, generator reactive output and the slack real injection.
Reactive limits are reported by the legality check, never enforced here.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from pypower.dSbus_dV import dSbus_dV
from scipy.sparse.linalg import splu

from core.config import settings
from core.errors import DimensionMismatch, Diverged, SingularJacobian
from tools.grid_model import AdmittanceMatrix, Network, NetworkIndex, build_admittance, compile_network

logger = logging.getLogger(__name__)


# ─────────────────────────────────────────────
# Types
# ─────────────────────────────────────────────

@dataclass
class PowerFlowState:
    v_mag: np.ndarray
    v_ang: np.ndarray

    @classmethod
    def flat(cls, n_bus: int) -> "PowerFlowState":
        return cls(v_mag=np.ones(n_bus), v_ang=np.zeros(n_bus))

    def complex(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)

    def copy(self) -> "PowerFlowState":
        return PowerFlowState(self.v_mag.copy(), self.v_ang.copy())


@dataclass
class SetpointProfile:
    """
    Controls plus demand for one power-flow instance.
    p_gen / v_gen are indexed over the in-service generators (network order),
    p_load / q_load over buses. The slack generator's p_gen entry is ignored.
    """
    p_gen:  np.ndarray
    v_gen:  np.ndarray
    p_load: np.ndarray
    q_load: np.ndarray

    @classmethod
    def from_network(cls, net: Network) -> "SetpointProfile":
        gens = [g for g in net.generators if g.in_service]
        return cls(
            p_gen=np.array([g.p_init for g in gens]),
            v_gen=np.array([g.v_setpoint for g in gens]),
            p_load=net.p_load(),
            q_load=net.q_load(),
        )

    def check(self, idx: NetworkIndex):
        if len(self.p_gen) != idx.n_gen or len(self.v_gen) != idx.n_gen:
            raise DimensionMismatch(f"setpoints cover {len(self.p_gen)} generators, network has {idx.n_gen}")
        if len(self.p_load) != idx.n_bus or len(self.q_load) != idx.n_bus:
            raise DimensionMismatch(f"loads cover {len(self.p_load)} buses, network has {idx.n_bus}")


@dataclass
class PowerFlowSolution:
    state:        PowerFlowState
    p_gen:        np.ndarray
    q_gen:        np.ndarray
    p_slack:      float
    branch_flows: Tuple[np.ndarray, np.ndarray]
    converged:    bool
    iterations:   int
    max_mismatch: float
    mismatch_history: List[float] = field(default_factory=list)

    def raise_for_status(self) -> "PowerFlowSolution":
        if not self.converged:
            raise Diverged(
                f"power flow did not converge after {self.iterations} iterations "
                f"(mismatch {self.max_mismatch:.3e})",
                solution=self,
            )
        return self


class SetpointLayout:
    """
    End-to-end target layout: P of every in-service generator except the slack
    generator, then V of every generator bus except the slack bus.
    """

    VERSION = settings.TARGET_LAYOUT

    def __init__(self, net: Network, idx: Optional[NetworkIndex] = None):
        self.idx = idx or compile_network(net)
        g = self.idx
        self.p_slots = np.array([k for k in range(g.n_gen) if k != g.slack_gen], dtype=int)
        # first unit at each non-slack generator bus carries that bus's voltage target
        self.v_buses = g.pv
        self.v_slots = np.array([int(np.flatnonzero(g.gen_bus == b)[0]) for b in g.pv], dtype=int)
        gens = [net.generators[k] for k in g.gens]
        self.slack_v = gens[g.slack_gen].v_setpoint

    @property
    def n_targets(self) -> int:
        return len(self.p_slots) + len(self.v_slots)

    def to_targets(self, profile: SetpointProfile) -> np.ndarray:
        return np.r_[profile.p_gen[self.p_slots], profile.v_gen[self.v_slots]]

    def from_targets(self, targets: np.ndarray, p_load: np.ndarray, q_load: np.ndarray) -> SetpointProfile:
        targets = np.asarray(targets, dtype=float)
        if targets.shape != (self.n_targets,):
            raise DimensionMismatch(f"expected {self.n_targets} targets, got shape {targets.shape}")
        g = self.idx
        p_gen = np.zeros(g.n_gen)
        p_gen[self.p_slots] = targets[:len(self.p_slots)]

        v_bus = np.full(g.n_bus, np.nan)
        v_bus[g.slack] = self.slack_v
        v_bus[self.v_buses] = targets[len(self.p_slots):]
        return SetpointProfile(
            p_gen=p_gen,
            v_gen=v_bus[g.gen_bus],
            p_load=np.asarray(p_load, dtype=float),
            q_load=np.asarray(q_load, dtype=float),
        )

    def describe(self) -> dict:
        return {
            "version": self.VERSION,
            "p_slots": self.p_slots.tolist(),
            "v_buses": self.v_buses.tolist(),
        }


# ─────────────────────────────────────────────
# Physics
# ─────────────────────────────────────────────

def compute_injections(net: Network, Y: AdmittanceMatrix, state: PowerFlowState) -> Tuple[np.ndarray, np.ndarray]:
    if len(state.v_mag) != Y.dimension or len(state.v_ang) != Y.dimension:
        raise DimensionMismatch(f"state has {len(state.v_mag)} buses, admittance has {Y.dimension}")
    V = state.complex()
    s = V * np.conj(Y.matrix @ V)
    return s.real, s.imag


def branch_flows(net: Network, Y: AdmittanceMatrix, state: PowerFlowState) -> Tuple[np.ndarray, np.ndarray]:
    """Complex power entering each branch at its from and to end, p.u."""
    V = state.complex()
    f = np.array([Y.bus_index[br.from_bus] for br in net.branches], dtype=int)
    t = np.array([Y.bus_index[br.to_bus] for br in net.branches], dtype=int)
    sf = V[f] * np.conj(Y.yf @ V) if len(f) else np.zeros(0, dtype=complex)
    st = V[t] * np.conj(Y.yt @ V) if len(t) else np.zeros(0, dtype=complex)
    return sf, st


def newton_jacobian(ybus: sp.spmatrix, V: np.ndarray, pvpq: np.ndarray, pq: np.ndarray) -> sp.csr_matrix:
    """Jacobian of [P mismatch at pv+pq; Q mismatch at pq] wrt [angle at pv+pq; magnitude at pq]."""
    dS_dVm, dS_dVa = dSbus_dV(ybus, V)
    j11 = dS_dVa[pvpq][:, pvpq].real
    j12 = dS_dVm[pvpq][:, pq].real
    j21 = dS_dVa[pq][:, pvpq].imag
    j22 = dS_dVm[pq][:, pq].imag
    return sp.vstack([sp.hstack([j11, j12]), sp.hstack([j21, j22])], format="csr")


def _solve_linear(J: sp.csr_matrix, rhs: np.ndarray, n_bus: int) -> np.ndarray:
    try:
        if n_bus < settings.DENSE_BUS_LIMIT:
            return np.linalg.solve(J.toarray(), rhs)
        return splu(J.tocsc()).solve(rhs)
    except (np.linalg.LinAlgError, RuntimeError) as e:
        raise SingularJacobian(f"Newton Jacobian is singular: {e}")


def split_reactive(q_bus: np.ndarray, gen_bus: np.ndarray, q_min: np.ndarray, q_max: np.ndarray) -> np.ndarray:
    """
    Share each bus's reactive output among its units in proportion to their
    Q ranges. Units with no range split the remainder above their minima
    equally; a bus with an unbounded unit splits its total equally.
    """
    n_bus = len(q_bus)
    count = np.bincount(gen_bus, minlength=n_bus)[gen_bus]
    total = np.asarray(q_bus)[gen_bus]
    if not (np.all(np.isfinite(q_min)) and np.all(np.isfinite(q_max))):
        bounded = np.isfinite(q_min) & np.isfinite(q_max)
        all_bounded = np.bincount(gen_bus, weights=(~bounded).astype(float), minlength=n_bus)[gen_bus] == 0
    else:
        all_bounded = np.ones(len(gen_bus), dtype=bool)

    lo = np.where(all_bounded, q_min, 0.0)
    hi = np.where(all_bounded, q_max, 0.0)
    lo_bus = np.bincount(gen_bus, weights=lo, minlength=n_bus)[gen_bus]
    span = np.bincount(gen_bus, weights=hi - lo, minlength=n_bus)[gen_bus]

    proportional = all_bounded & (span > 1e-12)
    share = np.where(proportional, (hi - lo) / np.where(proportional, span, 1.0), 1.0 / count)
    return np.where(count == 1, total, lo + (total - lo_bus) * share)


def _mismatch(ybus, V, sbus, pvpq, pq) -> np.ndarray:
    mis = V * np.conj(ybus @ V) - sbus
    return np.r_[mis[pvpq].real, mis[pq].imag]


def solve_newton(
    net: Network,
    profile: SetpointProfile,
    tol: float = settings.PF_TOL,
    max_iter: int = settings.PF_MAX_ITER,
    Y: Optional[AdmittanceMatrix] = None,
    state0: Optional[PowerFlowState] = None,
) -> PowerFlowSolution:
    """
    Polar Newton-Raphson from a flat start (or `state0`).
    On failure returns the lowest-mismatch iterate with converged=False;
    call raise_for_status() to turn that into Diverged.
    """
    idx = compile_network(net)
    profile.check(idx)
    Y = Y or build_admittance(net)
    ybus = Y.matrix

    # bus voltage setpoints: the first in-service unit at a bus sets its magnitude
    v_set = np.full(idx.n_bus, np.nan)
    for k in range(idx.n_gen - 1, -1, -1):
        v_set[idx.gen_bus[k]] = profile.v_gen[k]

    state = state0.copy() if state0 is not None else PowerFlowState.flat(idx.n_bus)
    state.v_ang[idx.slack] = 0.0
    controlled = idx.gen_buses
    state.v_mag[controlled] = v_set[controlled]

    p_gen = np.asarray(profile.p_gen, dtype=float).copy()
    p_gen[idx.slack_gen] = 0.0
    cg = idx.gen_incidence()
    sbus = cg @ p_gen - (np.asarray(profile.p_load) + 1j * np.asarray(profile.q_load))

    pvpq = np.r_[idx.pv, idx.pq].astype(int)
    pq = idx.pq
    n_ang = len(pvpq)

    V = state.complex()
    F = _mismatch(ybus, V, sbus, pvpq, pq)
    norm = float(np.max(np.abs(F))) if len(F) else 0.0
    history = [norm]
    best = (norm, V.copy())
    iterations = 0
    converged = norm <= tol

    while not converged and iterations < max_iter:
        J = newton_jacobian(ybus, V, pvpq, pq)
        dx = _solve_linear(J, -F, idx.n_bus)
        iterations += 1

        va = np.angle(V)
        vm = np.abs(V)
        va[pvpq] += dx[:n_ang]
        vm[pq] += dx[n_ang:]
        V = vm * np.exp(1j * va)

        F = _mismatch(ybus, V, sbus, pvpq, pq)
        norm = float(np.max(np.abs(F)))
        history.append(norm)
        logger.debug(f"   NR iter {iterations}: mismatch {norm:.3e}")
        if not np.isfinite(norm):
            logger.warning(f"⚠️  {net.name}: power flow mismatch became non-finite at iteration {iterations}")
            break
        if norm < best[0]:
            best = (norm, V.copy())
        converged = norm <= tol

    if converged:
        best = (norm, V)
    norm, V = best

    state = PowerFlowState(v_mag=np.abs(V), v_ang=np.angle(V))
    s_inj = V * np.conj(ybus @ V)
    s_gen_bus = s_inj + profile.p_load + 1j * np.asarray(profile.q_load)

    gens = [net.generators[k] for k in idx.gens]
    q_gen = split_reactive(
        s_gen_bus.imag, idx.gen_bus,
        np.array([g.q_min for g in gens], dtype=float),
        np.array([g.q_max for g in gens], dtype=float),
    )

    others = np.flatnonzero(idx.gen_bus == idx.slack)
    others = others[others != idx.slack_gen]
    p_slack = float(s_gen_bus.real[idx.slack] - p_gen[others].sum())
    p_gen[idx.slack_gen] = p_slack

    if not converged:
        logger.warning(f"⚠️  {net.name}: power flow stopped after {iterations} iterations, mismatch {norm:.3e}")

    return PowerFlowSolution(
        state=state,
        p_gen=p_gen,
        q_gen=q_gen,
        p_slack=p_slack,
        branch_flows=branch_flows(net, Y, state),
        converged=bool(converged),
        iterations=iterations,
        max_mismatch=norm,
        mismatch_history=history,
    )
