# backend/tools/opf.py

"""
AC optimal power flow on the polar formulation.

Variables are x = [Va (N), Vm (N), Pg (G), Qg (G)] over all buses and in-service
generators. Power balance is the equality set; squared apparent-power limits at
both branch ends are the nonlinear inequalities; everything else is a box.
The slack bus angle is fixed at 0 and its magnitude at the slack generator's setpoint.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field
from pypower.d2ASbr_dV2 import d2ASbr_dV2
from pypower.d2Sbus_dV2 import d2Sbus_dV2
from pypower.dAbr_dV import dAbr_dV
from pypower.dSbr_dV import dSbr_dV
from pypower.dSbus_dV import dSbus_dV

from core.config import settings
from core.errors import DimensionMismatch, Infeasible, NotConverged, SingularJacobian
from tools import interior_point
from tools.grid_model import (
    DEFAULT_ANGLE_MAX,
    DEFAULT_ANGLE_MIN,
    AdmittanceMatrix,
    Generator,
    Network,
    build_admittance,
    compile_network,
)
from tools.power_flow import PowerFlowState, SetpointProfile, solve_newton

logger = logging.getLogger(__name__)


# ─────────────────────────────────────────────
# Types
# ─────────────────────────────────────────────

class OpfOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    kkt_tol:           float = Field(settings.OPF_KKT_TOL, gt=0.0)
    max_iter:          int   = Field(settings.OPF_MAX_ITER, ge=1)
    barrier_reduction: float = Field(settings.OPF_BARRIER_REDUCTION, gt=0.0, lt=1.0)
    step_fraction:     float = Field(settings.OPF_STEP_FRACTION, gt=0.0, lt=1.0)
    active_eps:        float = Field(settings.OPF_ACTIVE_EPS, gt=0.0)
    warm_barrier:      float = Field(settings.OPF_WARM_BARRIER, gt=0.0, le=1.0)


@dataclass
class ActiveSetVector:
    """
    One bit per box constraint, laid out as
    [G: P limit][G: Q limit][N: V limit][N: angle limit].
    """
    bits:  np.ndarray
    n_gen: int
    n_bus: int

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        expected = 2 * self.n_gen + 2 * self.n_bus
        if self.bits.shape != (expected,):
            raise DimensionMismatch(f"active set has {self.bits.size} bits, expected {expected}")

    @classmethod
    def zeros(cls, n_gen: int, n_bus: int) -> "ActiveSetVector":
        return cls(np.zeros(2 * n_gen + 2 * n_bus, dtype=bool), n_gen, n_bus)

    @classmethod
    def from_bitstring(cls, text: str, n_gen: int, n_bus: int) -> "ActiveSetVector":
        return cls(np.array([c == "1" for c in text], dtype=bool), n_gen, n_bus)

    def to_bitstring(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def p(self) -> np.ndarray:
        return self.bits[:self.n_gen]

    @property
    def q(self) -> np.ndarray:
        return self.bits[self.n_gen:2 * self.n_gen]

    @property
    def v(self) -> np.ndarray:
        return self.bits[2 * self.n_gen:2 * self.n_gen + self.n_bus]

    @property
    def delta(self) -> np.ndarray:
        return self.bits[2 * self.n_gen + self.n_bus:]

    def inverted(self) -> "ActiveSetVector":
        return ActiveSetVector(~self.bits, self.n_gen, self.n_bus)


@dataclass
class WarmStartHint:
    state0:           PowerFlowState
    p_gen0:           np.ndarray
    q_gen0:           np.ndarray
    predicted_active: ActiveSetVector


@dataclass
class Violation:
    constraint: str
    bound:      str
    value:      float
    limit:      float

    def describe(self) -> str:
        return f"{self.constraint} {self.bound} limit {self.limit:.6g} violated by value {self.value:.6g}"


@dataclass
class LegalityReport:
    legal:        bool
    violations:   List[Violation]
    pf_converged: bool
    p_gen:        Optional[np.ndarray] = None
    objective:    Optional[float] = None


@dataclass
class OpfSolution:
    state:        PowerFlowState
    p_gen:        np.ndarray
    q_gen:        np.ndarray
    objective:    float
    converged:    bool
    iterations:   int
    kkt_residual: float
    p_load:       np.ndarray
    q_load:       np.ndarray
    gen_bus:      np.ndarray
    lam:          np.ndarray = field(default_factory=lambda: np.zeros(0))
    conditions:   Dict[str, float] = field(default_factory=dict)
    barrier_history: List[float] = field(default_factory=list)
    active_set:   Optional[ActiveSetVector] = None
    message:      str = ""

    def raise_for_status(self) -> "OpfSolution":
        if not self.converged:
            raise Infeasible(
                f"ACOPF did not converge after {self.iterations} iterations "
                f"(kkt residual {self.kkt_residual:.3e}, {self.message})",
                solution=self,
            )
        return self

    def setpoints(self) -> SetpointProfile:
        return SetpointProfile(
            p_gen=self.p_gen.copy(),
            v_gen=self.state.v_mag[self.gen_bus].copy(),
            p_load=self.p_load.copy(),
            q_load=self.q_load.copy(),
        )

    def to_document(self) -> dict:
        return {
            "converged":    self.converged,
            "iterations":   self.iterations,
            "objective":    self.objective,
            "kkt_residual": self.kkt_residual,
            "v_mag":        self.state.v_mag.tolist(),
            "v_ang":        self.state.v_ang.tolist(),
            "p_gen":        self.p_gen.tolist(),
            "q_gen":        self.q_gen.tolist(),
            "active_set":   self.active_set.to_bitstring() if self.active_set is not None else None,
            "conditions":   self.conditions,
            "message":      self.message,
        }


# ─────────────────────────────────────────────
# Cost
# ─────────────────────────────────────────────

def evaluate_cost(gens: Sequence[Generator], p_gen: Sequence[float], base_mva: float = 100.0) -> float:
    """Total cost in $/hr; p_gen in p.u., polynomials evaluated on MW."""
    if len(gens) != len(p_gen):
        raise DimensionMismatch(f"{len(gens)} generators but {len(p_gen)} dispatch values")
    return float(sum(g.cost.evaluate(p * base_mva) for g, p in zip(gens, p_gen)))


# ─────────────────────────────────────────────
# Problem assembly
# ─────────────────────────────────────────────

def _midpoint(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    finite = np.isfinite(lo) & np.isfinite(hi)
    mid = np.clip(np.zeros_like(lo), lo, hi)
    mid[finite] = (lo[finite] + hi[finite]) / 2
    return mid


class _AcopfModel:
    """Callbacks and bounds of one ACOPF instance for the interior-point solver."""

    def __init__(self, net: Network, Y: Optional[AdmittanceMatrix] = None):
        self.net = net
        self.idx = compile_network(net)
        self.Y = Y or build_admittance(net)
        self.gens = [net.generators[k] for k in self.idx.gens]
        self.base = net.base_mva

        nb, ng = self.idx.n_bus, self.idx.n_gen
        self.nb, self.ng = nb, ng
        self.va = slice(0, nb)
        self.vm = slice(nb, 2 * nb)
        self.pg = slice(2 * nb, 2 * nb + ng)
        self.qg = slice(2 * nb + ng, 2 * nb + 2 * ng)
        self.nx = 2 * nb + 2 * ng

        self.sd = net.p_load() + 1j * net.q_load()
        self.cg = self.idx.gen_incidence()

        limited = [
            k for k, br in enumerate(net.branches)
            if br.in_service and br.rate_mva > 0
        ]
        self.il = np.array(limited, dtype=int)
        self.flow_max = np.array([net.branches[k].rate_mva / self.base for k in limited])
        nl = len(limited)
        nb_ = nb
        self.f = self.idx.f_bus[self.il]
        self.t = self.idx.t_bus[self.il]
        self.ends = np.c_[self.f, self.t]
        self.yf = self.Y.yf[self.il]
        self.yt = self.Y.yt[self.il]
        self.cf = sp.csr_matrix((np.ones(nl), (np.arange(nl), self.f)), shape=(nl, nb_))
        self.ct = sp.csr_matrix((np.ones(nl), (np.arange(nl), self.t)), shape=(nl, nb_))

        self.xmin, self.xmax = self._bounds()
        self.layout = interior_point.BoundLayout.of(self.xmin, self.xmax)

    def _bounds(self):
        buses = self.net.buses
        d_lo = np.array([b.delta_min for b in buses])
        d_hi = np.array([b.delta_max for b in buses])
        default = (d_lo <= DEFAULT_ANGLE_MIN) & (d_hi >= DEFAULT_ANGLE_MAX)
        d_lo[default] = -np.inf
        d_hi[default] = np.inf

        v_lo = np.array([b.v_min for b in buses])
        v_hi = np.array([b.v_max for b in buses])

        s = self.idx.slack
        d_lo[s] = d_hi[s] = 0.0
        v_lo[s] = v_hi[s] = self.gens[self.idx.slack_gen].v_setpoint

        xmin = np.r_[d_lo, v_lo, [g.p_min for g in self.gens], [g.q_min for g in self.gens]]
        xmax = np.r_[d_hi, v_hi, [g.p_max for g in self.gens], [g.q_max for g in self.gens]]
        return xmin.astype(float), xmax.astype(float)

    def cold_start(self) -> np.ndarray:
        x = np.zeros(self.nx)
        x[self.va] = np.clip(0.0, self.xmin[self.va], self.xmax[self.va])
        x[self.vm] = np.clip(1.0, self.xmin[self.vm], self.xmax[self.vm])
        x[self.pg] = _midpoint(self.xmin[self.pg], self.xmax[self.pg])
        x[self.qg] = _midpoint(self.xmin[self.qg], self.xmax[self.qg])
        return x

    def voltage(self, x: np.ndarray) -> np.ndarray:
        return x[self.vm] * np.exp(1j * x[self.va])

    # ── callbacks ────────────────────────────────────────────

    def f_fcn(self, x: np.ndarray):
        p_mw = x[self.pg] * self.base
        f = sum(float(g.cost.evaluate(p)) for g, p in zip(self.gens, p_mw))
        df = np.zeros(self.nx)
        df[self.pg] = self.base * np.array([g.cost.derivative(p) for g, p in zip(self.gens, p_mw)])
        return f, df

    def gh_fcn(self, x: np.ndarray):
        V = self.voltage(x)
        ybus = self.Y.matrix
        sg = x[self.pg] + 1j * x[self.qg]
        mis = V * np.conj(ybus @ V) + self.sd - self.cg @ sg
        g = np.r_[mis.real, mis.imag]

        dS_dVm, dS_dVa = dSbus_dV(ybus, V)
        zero = sp.csr_matrix((self.nb, self.ng))
        dg = sp.bmat([
            [dS_dVa.real, dS_dVm.real, -self.cg, zero],
            [dS_dVa.imag, dS_dVm.imag, zero, -self.cg],
        ], format="csr")

        nl = len(self.il)
        if nl == 0:
            return np.zeros(0), g, sp.csr_matrix((0, self.nx)), dg

        dSf_dVa, dSf_dVm, dSt_dVa, dSt_dVm, sf, st = dSbr_dV(self.ends, self.yf, self.yt, V)
        dAf_dVa, dAf_dVm, dAt_dVa, dAt_dVm = dAbr_dV(dSf_dVa, dSf_dVm, dSt_dVa, dSt_dVm, sf, st)
        limit = self.flow_max ** 2
        h = np.r_[np.abs(sf) ** 2 - limit, np.abs(st) ** 2 - limit]
        pad = sp.csr_matrix((nl, 2 * self.ng))
        dh = sp.bmat([
            [dAf_dVa, dAf_dVm, pad],
            [dAt_dVa, dAt_dVm, pad],
        ], format="csr")
        return h, g, dh, dg

    def hess_fcn(self, x: np.ndarray, lam: np.ndarray, mu: np.ndarray):
        V = self.voltage(x)
        nb, ng = self.nb, self.ng
        ybus = self.Y.matrix

        p_mw = x[self.pg] * self.base
        d2f = self.base ** 2 * np.array([g.cost.second_derivative(p) for g, p in zip(self.gens, p_mw)], dtype=float)

        Gp = d2Sbus_dV2(ybus, V, lam[:nb])
        Gq = d2Sbus_dV2(ybus, V, lam[nb:2 * nb])
        d2g = (sp.bmat([[Gp[0], Gp[1]], [Gp[2], Gp[3]]]).real
               + sp.bmat([[Gq[0], Gq[1]], [Gq[2], Gq[3]]]).imag)

        nl = len(self.il)
        if nl:
            dSf_dVa, dSf_dVm, dSt_dVa, dSt_dVm, sf, st = dSbr_dV(self.ends, self.yf, self.yt, V)
            Hf = d2ASbr_dV2(dSf_dVa, dSf_dVm, sf, self.cf, self.yf, V, mu[:nl])
            Ht = d2ASbr_dV2(dSt_dVa, dSt_dVm, st, self.ct, self.yt, V, mu[nl:2 * nl])
            d2h = sp.bmat([[Hf[0] + Ht[0], Hf[1] + Ht[1]], [Hf[2] + Ht[2], Hf[3] + Ht[3]]])
            voltage_block = d2g + d2h
        else:
            voltage_block = d2g

        return sp.block_diag([
            voltage_block,
            sp.diags(d2f, 0, shape=(ng, ng)),
            sp.csr_matrix((ng, ng)),
        ], format="csr")

    def problem(self, x0: np.ndarray) -> interior_point.NlpProblem:
        return interior_point.NlpProblem(
            f_fcn=self.f_fcn,
            gh_fcn=self.gh_fcn,
            hess_fcn=self.hess_fcn,
            x0=x0,
            xmin=self.xmin,
            xmax=self.xmax,
        )

    # ── warm start plumbing ──────────────────────────────────

    def bit_variables(self) -> np.ndarray:
        """Variable index housed by each active-set bit, in bit order."""
        return np.r_[
            np.arange(self.pg.start, self.pg.stop),
            np.arange(self.qg.start, self.qg.stop),
            np.arange(self.vm.start, self.vm.stop),
            np.arange(self.va.start, self.va.stop),
        ]

    def slack_hint(self, x0: np.ndarray, hinted: np.ndarray, active_eps: float) -> np.ndarray:
        """
        Slack start for every inequality row. A predicted-active side sitting on
        its bound starts at active_eps * max(1, width); every other side of a
        finite box starts at the midpoint distance, floored at 1 like the cold
        rule. Flow rows and half-open boxes stay NaN (cold rule).
        """
        n_flow = 2 * len(self.il)
        n_up = len(self.layout.upper)
        z = np.full(n_flow + n_up + len(self.layout.lower), np.nan)
        width = self.xmax - self.xmin
        boxed = np.isfinite(width)
        pinned = np.zeros(self.nx, dtype=bool)
        pinned[hinted] = True

        for rows, side, bound in (
            (n_flow + np.arange(n_up), self.layout.upper, self.xmax),
            (n_flow + n_up + np.arange(len(self.layout.lower)), self.layout.lower, self.xmin),
        ):
            on_bound = pinned[side] & np.isclose(x0[side], bound[side], rtol=0.0, atol=1e-12)
            w = np.where(boxed[side], width[side], 1.0)
            z[rows[boxed[side]]] = np.maximum(1.0, w[boxed[side]] / 2)
            z[rows[on_bound]] = active_eps * np.maximum(1.0, w[on_bound])
        return z


# ─────────────────────────────────────────────
# Operations
# ─────────────────────────────────────────────

def solve_acopf(
    net: Network,
    opts: Optional[OpfOptions] = None,
    warm: Optional[WarmStartHint] = None,
    Y: Optional[AdmittanceMatrix] = None,
) -> OpfSolution:
    """
    Primal-dual interior-point ACOPF. A non-converged run comes back with
    converged=False and the last iterate; raise_for_status() raises Infeasible.
    """
    opts = opts or OpfOptions()
    model = _AcopfModel(net, Y)

    start = None
    if warm is None:
        x0 = model.cold_start()
    else:
        bits = warm.predicted_active
        if bits.n_gen != model.ng or bits.n_bus != model.nb:
            raise DimensionMismatch(
                f"warm start built for {bits.n_gen} gens / {bits.n_bus} buses, "
                f"network has {model.ng} / {model.nb}"
            )
        x0 = np.r_[warm.state0.v_ang, warm.state0.v_mag, warm.p_gen0, warm.q_gen0].astype(float)
        if bits.bits.any():
            hinted = model.bit_variables()[bits.bits]
            z0 = model.slack_hint(x0, hinted, opts.active_eps)
            start = interior_point.StartPoint(z=z0, gamma=opts.warm_barrier)

    result = interior_point.solve(
        model.problem(x0),
        tol=opts.kkt_tol,
        max_iter=opts.max_iter,
        sigma=opts.barrier_reduction,
        step_fraction=opts.step_fraction,
        start=start,
    )

    x = result.x
    sol = OpfSolution(
        state=PowerFlowState(v_mag=x[model.vm].copy(), v_ang=x[model.va].copy()),
        p_gen=x[model.pg].copy(),
        q_gen=x[model.qg].copy(),
        objective=result.f,
        converged=result.converged,
        iterations=result.iterations,
        kkt_residual=result.kkt_residual,
        p_load=net.p_load(),
        q_load=net.q_load(),
        gen_bus=model.idx.gen_bus.copy(),
        lam=result.lam[:2 * model.nb].copy(),
        conditions=result.conditions,
        barrier_history=result.barrier_history,
        message=result.message,
    )
    if sol.converged:
        sol.active_set = extract_active_set(net, sol, opts.active_eps)
        logger.debug(f"✅ {net.name}: ACOPF converged in {sol.iterations} iterations, cost {sol.objective:.4f}")
    else:
        logger.debug(f"❌ {net.name}: ACOPF failed after {sol.iterations} iterations ({result.message})")
    return sol


def _box_active(x: np.ndarray, lb: np.ndarray, ub: np.ndarray, eps: float) -> np.ndarray:
    width = ub - lb
    scale = np.maximum(1.0, np.where(np.isfinite(width), width, 1.0))
    gap = np.minimum(x - lb, ub - x)
    return gap <= eps * scale


def extract_active_set(net: Network, sol: OpfSolution, active_eps: float = settings.OPF_ACTIVE_EPS) -> ActiveSetVector:
    if not sol.converged:
        raise NotConverged("active set is only defined for a converged ACOPF solution")
    idx = compile_network(net)
    gens = [net.generators[k] for k in idx.gens]
    buses = net.buses

    p_bits = _box_active(sol.p_gen, np.array([g.p_min for g in gens]), np.array([g.p_max for g in gens]), active_eps)
    q_bits = _box_active(sol.q_gen, np.array([g.q_min for g in gens]), np.array([g.q_max for g in gens]), active_eps)
    v_bits = _box_active(sol.state.v_mag, np.array([b.v_min for b in buses]), np.array([b.v_max for b in buses]), active_eps)

    d_lo = np.array([b.delta_min for b in buses])
    d_hi = np.array([b.delta_max for b in buses])
    default = (d_lo <= DEFAULT_ANGLE_MIN) & (d_hi >= DEFAULT_ANGLE_MAX)
    d_bits = _box_active(sol.state.v_ang, d_lo, d_hi, active_eps) & ~default

    return ActiveSetVector(np.r_[p_bits, q_bits, v_bits, d_bits], idx.n_gen, idx.n_bus)


def _allowance(limit: float, tol_rel: float) -> float:
    return tol_rel * max(1.0, abs(limit))


def check_legality(
    net: Network,
    profile: SetpointProfile,
    tol_rel: float = settings.LEGALITY_TOL_REL,
    Y: Optional[AdmittanceMatrix] = None,
) -> LegalityReport:
    """Recover the full state by power flow, then check every box and branch limit."""
    Y = Y or build_admittance(net)
    try:
        pf = solve_newton(net, profile, Y=Y)
    except SingularJacobian as e:
        logger.debug(f"   legality: singular Jacobian ({e})")
        return LegalityReport(legal=False, violations=[], pf_converged=False)
    if not pf.converged:
        return LegalityReport(legal=False, violations=[], pf_converged=False)

    idx = compile_network(net)
    gens = [net.generators[k] for k in idx.gens]
    violations: List[Violation] = []

    def box(name: str, value: float, lo: float, hi: float):
        if value > hi + _allowance(hi, tol_rel):
            violations.append(Violation(name, "upper", float(value), float(hi)))
        elif value < lo - _allowance(lo, tol_rel):
            violations.append(Violation(name, "lower", float(value), float(lo)))

    for k, g in enumerate(gens):
        tag = f"gen{idx.gens[k]}@bus{g.bus_id}"
        box(f"{tag}:P", pf.p_gen[k], g.p_min, g.p_max)
        box(f"{tag}:Q", pf.q_gen[k], g.q_min, g.q_max)

    for i, b in enumerate(net.buses):
        box(f"bus{b.id}:V", pf.state.v_mag[i], b.v_min, b.v_max)
        box(f"bus{b.id}:delta", pf.state.v_ang[i], b.delta_min, b.delta_max)

    sf, st = pf.branch_flows
    for k, br in enumerate(net.branches):
        if not br.in_service or br.rate_mva <= 0:
            continue
        limit = br.rate_mva / net.base_mva
        for end, s in (("from", sf[k]), ("to", st[k])):
            if abs(s) > limit * (1 + tol_rel):
                violations.append(Violation(f"branch{k}({br.from_bus}-{br.to_bus}):{end}", "rate", float(abs(s)), limit))

    return LegalityReport(
        legal=not violations,
        violations=violations,
        pf_converged=True,
        p_gen=pf.p_gen,
        objective=evaluate_cost(gens, pf.p_gen, net.base_mva),
    )


def warm_start_from_active_set(
    net: Network,
    pred: ActiveSetVector,
    base_sp: SetpointProfile,
    Y: Optional[AdmittanceMatrix] = None,
) -> WarmStartHint:
    """
    Cold-start point with every predicted-active variable moved onto a bound.
    The bound is the one nearer the base-case value. Distances within 1e-9 are
    a tie, settled by the sign of the cost gradient (positive -> lower) and
    otherwise by the upper bound.
    """
    model = _AcopfModel(net, Y)
    if len(pred) != 2 * model.ng + 2 * model.nb or pred.n_gen != model.ng or pred.n_bus != model.nb:
        raise DimensionMismatch(f"prediction has {len(pred)} bits, network needs {2 * model.ng + 2 * model.nb}")

    x = model.cold_start()
    if pred.bits.any():
        reference = x.copy()
        try:
            pf = solve_newton(net, base_sp, Y=model.Y)
        except SingularJacobian:
            pf = None
        if pf is not None and pf.converged:
            reference[model.va] = pf.state.v_ang
            reference[model.vm] = pf.state.v_mag
            reference[model.pg] = pf.p_gen
            reference[model.qg] = pf.q_gen
        else:
            reference[model.pg] = base_sp.p_gen

        gradient = np.zeros(model.nx)
        p_mw = reference[model.pg] * model.base
        gradient[model.pg] = [g.cost.derivative(p) for g, p in zip(model.gens, p_mw)]

        for j in model.bit_variables()[pred.bits]:
            lb, ub = model.xmin[j], model.xmax[j]
            if lb == ub or not (np.isfinite(lb) or np.isfinite(ub)):
                continue
            below, above = reference[j] - lb, ub - reference[j]
            if np.isclose(below, above, rtol=0.0, atol=1e-9):
                to_lower = gradient[j] > 0
            else:
                to_lower = below < above
            if to_lower and not np.isfinite(lb):
                to_lower = False
            if not to_lower and not np.isfinite(ub):
                to_lower = True
            x[j] = lb if to_lower else ub

    return WarmStartHint(
        state0=PowerFlowState(v_mag=x[model.vm].copy(), v_ang=x[model.va].copy()),
        p_gen0=x[model.pg].copy(),
        q_gen0=x[model.qg].copy(),
        predicted_active=pred,
    )
