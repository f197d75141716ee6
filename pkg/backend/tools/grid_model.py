# backend/tools/grid_model.py

"""
Grid data model: per-unit Network, MATPOWER case parser and serializer, Y-bus construction
"""

import math
import re
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict

from core.errors import MalformedCase, SingularBranch, UnsupportedFeature

logger = logging.getLogger(__name__)


# ─────────────────────────────────────────────
# MATPOWER column layout (MATPOWER 7 manual ordering)
# ─────────────────────────────────────────────

BUS_COLUMNS     = 13   # BUS_I BUS_TYPE PD QD GS BS BUS_AREA VM VA BASE_KV ZONE VMAX VMIN
GEN_COLUMNS     = 10   # GEN_BUS PG QG QMAX QMIN VG MBASE GEN_STATUS PMAX PMIN
BRANCH_COLUMNS  = 13   # F_BUS T_BUS BR_R BR_X BR_B RATE_A RATE_B RATE_C TAP SHIFT BR_STATUS ANGMIN ANGMAX
GENCOST_COLUMNS = 4    # MODEL STARTUP SHUTDOWN NCOST, then NCOST coefficients

MIN_COLUMNS = {
    "bus":     BUS_COLUMNS,
    "gen":     GEN_COLUMNS,
    "branch":  BRANCH_COLUMNS,
    "gencost": GENCOST_COLUMNS,
}

PW_LINEAR  = 1
POLYNOMIAL = 2

DEFAULT_ANGLE_MIN = -math.pi
DEFAULT_ANGLE_MAX = math.pi


class BusKind(str, Enum):
    PQ    = "PQ"
    PV    = "PV"
    SLACK = "Slack"


_KIND_BY_CODE = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}
_CODE_BY_KIND = {v: k for k, v in _KIND_BY_CODE.items()}


# ─────────────────────────────────────────────
# Domain types
# ─────────────────────────────────────────────

class CostPolynomial(BaseModel):
    """Polynomial generator cost, coefficients highest degree first, P in MW, result in $/hr."""
    model_config = ConfigDict(frozen=True)

    coefficients: Tuple[float, ...]
    startup:      float = 0.0
    shutdown:     float = 0.0

    def evaluate(self, p_mw):
        return np.polyval(np.asarray(self.coefficients, dtype=float), p_mw)

    def derivative(self, p_mw):
        c = np.asarray(self.coefficients, dtype=float)
        if len(c) < 2:
            return np.zeros_like(np.asarray(p_mw, dtype=float))
        return np.polyval(np.polyder(c), p_mw)

    def second_derivative(self, p_mw):
        c = np.asarray(self.coefficients, dtype=float)
        if len(c) < 3:
            return np.zeros_like(np.asarray(p_mw, dtype=float))
        return np.polyval(np.polyder(c, 2), p_mw)


class Bus(BaseModel):
    model_config = ConfigDict(frozen=True)

    id:         int
    kind:       BusKind
    p_load:     float = 0.0
    q_load:     float = 0.0
    g_shunt:    float = 0.0
    b_shunt:    float = 0.0
    v_min:      float = 0.9
    v_max:      float = 1.1
    delta_min:  float = DEFAULT_ANGLE_MIN
    delta_max:  float = DEFAULT_ANGLE_MAX
    v_init:     float = 1.0
    delta_init: float = 0.0
    area:       int   = 1
    base_kv:    float = 0.0
    zone:       int   = 1
    extra:      Tuple[float, ...] = ()


class Generator(BaseModel):
    model_config = ConfigDict(frozen=True)

    bus_id:     int
    p_min:      float
    p_max:      float
    q_min:      float
    q_max:      float
    v_setpoint: float = 1.0
    cost:       CostPolynomial
    in_service: bool  = True
    p_init:     float = 0.0
    q_init:     float = 0.0
    mbase:      float = 100.0
    extra:      Tuple[float, ...] = ()


class Branch(BaseModel):
    model_config = ConfigDict(frozen=True)

    from_bus:   int
    to_bus:     int
    r:          float
    x:          float
    b_charging: float = 0.0
    tap:        float = 1.0
    shift:      float = 0.0
    rate_mva:   float = 0.0
    rate_b_mva: float = 0.0
    rate_c_mva: float = 0.0
    in_service: bool  = True
    angmin:     float = -2 * math.pi
    angmax:     float = 2 * math.pi
    extra:      Tuple[float, ...] = ()


class Network(BaseModel):
    model_config = ConfigDict(frozen=True)

    name:       str = "case"
    base_mva:   float = 100.0
    buses:      Tuple[Bus, ...]
    generators: Tuple[Generator, ...]
    branches:   Tuple[Branch, ...] = ()

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def p_load(self) -> np.ndarray:
        return np.array([b.p_load for b in self.buses])

    def q_load(self) -> np.ndarray:
        return np.array([b.q_load for b in self.buses])


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Bus admittance Y plus the branch matrices Yf, Yt giving from/to end currents."""
    matrix:    sp.csr_matrix
    yf:        sp.csr_matrix
    yt:        sp.csr_matrix
    bus_index: Dict[int, int]

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass(frozen=True)
class NetworkIndex:
    """
    Positional view of a Network used by the solvers.

    gens     - indices into net.generators of the in-service units (the set G)
    gen_bus  - bus position of each unit in G
    slack_gen- position within G of the generator that balances the system
    pv, pq   - non-slack bus positions, voltage-controlled / load
    """
    n_bus:     int
    bus_index: Dict[int, int]
    slack:     int
    gens:      np.ndarray
    gen_bus:   np.ndarray
    slack_gen: int
    pv:        np.ndarray
    pq:        np.ndarray
    gen_buses: np.ndarray
    f_bus:     np.ndarray
    t_bus:     np.ndarray

    @property
    def n_gen(self) -> int:
        return len(self.gens)

    def gen_incidence(self) -> sp.csr_matrix:
        """N x G matrix mapping generator injections onto buses."""
        return sp.csr_matrix(
            (np.ones(self.n_gen), (self.gen_bus, np.arange(self.n_gen))),
            shape=(self.n_bus, self.n_gen),
        )


# ─────────────────────────────────────────────
# Parsing
# ─────────────────────────────────────────────

_TABLE_START = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([\[{])(.*)$")
_SCALAR      = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([^\[{;]+?)\s*;?\s*$")
_FUNCTION    = re.compile(r"^\s*function\s+(?:\w+\s*=\s*)?(\w+)")


def _strip_comment(line: str) -> str:
    return line.split("%", 1)[0]


def _read_tables(text: str) -> Tuple[str, Dict[str, List[Tuple[int, List[float]]]], Dict[str, Tuple[int, str]]]:
    """Split case text into name, numeric tables (rows tagged with line numbers) and scalars."""
    name = "case"
    tables: Dict[str, List[Tuple[int, List[float]]]] = {}
    scalars: Dict[str, Tuple[int, str]] = {}

    current: Optional[str] = None
    closer = "]"
    skipping = False

    def consume(body: str, lineno: int):
        nonlocal current
        done = closer in body
        body = body.split(closer, 1)[0]
        if not skipping:
            for chunk in body.split(";"):
                tokens = chunk.replace(",", " ").split()
                if not tokens:
                    continue
                try:
                    row = [float(t) for t in tokens]
                except ValueError:
                    raise MalformedCase(f"non-numeric field in row '{chunk.strip()}'", line=lineno, table=current)
                tables[current].append((lineno, row))
        if done:
            current = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if current is not None:
            consume(line, lineno)
            continue
        if not line.strip():
            continue

        m = _FUNCTION.match(line)
        if m:
            name = m.group(1)
            continue

        m = _TABLE_START.match(line)
        if m:
            current, opener, rest = m.group(1), m.group(2), m.group(3)
            closer = "]" if opener == "[" else "}"
            skipping = current not in MIN_COLUMNS
            if not skipping:
                tables[current] = []
            consume(rest, lineno)
            continue

        m = _SCALAR.match(line)
        if m:
            scalars[m.group(1)] = (lineno, m.group(2).strip().strip("'\""))

    if current is not None:
        raise MalformedCase("table is never closed", line=len(text.splitlines()), table=current)
    return name, tables, scalars


def _check_width(table: str, rows: List[Tuple[int, List[float]]], width: int):
    for lineno, row in rows:
        if len(row) < width:
            raise MalformedCase(f"expected at least {width} columns, found {len(row)}", line=lineno, table=table)


def _as_id(value: float, lineno: int, table: str) -> int:
    if value != int(value):
        raise MalformedCase(f"bus number {value} is not an integer", line=lineno, table=table)
    return int(value)


def parse_matpower_case(text: str) -> Network:
    """
    Parse MATPOWER case text into a per-unit Network.
    Raises MalformedCase / UnsupportedFeature naming the offending line and table.
    """
    if not text or not text.strip():
        raise MalformedCase("empty case text")

    name, tables, scalars = _read_tables(text)

    if "baseMVA" not in scalars:
        raise MalformedCase("missing baseMVA", table="baseMVA")
    base_line, base_text = scalars["baseMVA"]
    try:
        base_mva = float(base_text)
    except ValueError:
        raise MalformedCase(f"baseMVA '{base_text}' is not numeric", line=base_line, table="baseMVA")
    if not base_mva > 0:
        raise MalformedCase("baseMVA must be positive", line=base_line, table="baseMVA")

    for table, width in MIN_COLUMNS.items():
        if table not in tables:
            raise MalformedCase("missing table", table=table)
        _check_width(table, tables[table], width)

    buses = [_parse_bus(row, lineno, base_mva) for lineno, row in tables["bus"]]
    costs = _parse_gencost(tables["gencost"], len(tables["gen"]))
    generators = [
        _parse_gen(row, costs[i], base_mva)
        for i, (lineno, row) in enumerate(tables["gen"])
    ]
    branches = [_parse_branch(row, lineno) for lineno, row in tables["branch"]]

    if not buses:
        raise MalformedCase("bus table is empty", table="bus")
    if not generators:
        raise MalformedCase("gen table is empty", table="gen")

    net = Network(
        name=name,
        base_mva=base_mva,
        buses=tuple(buses),
        generators=tuple(generators),
        branches=tuple(branches),
    )
    logger.debug(f"Parsed {name}: {net.n_bus} buses, {len(generators)} gens, {len(branches)} branches")
    return net


def _parse_bus(row: List[float], lineno: int, base: float) -> Bus:
    code = int(row[1])
    if code == 4:
        raise UnsupportedFeature("isolated bus (type 4)", line=lineno, table="bus")
    if code not in _KIND_BY_CODE:
        raise MalformedCase(f"unknown bus type {row[1]}", line=lineno, table="bus")
    return Bus(
        id=_as_id(row[0], lineno, "bus"),
        kind=_KIND_BY_CODE[code],
        p_load=row[2] / base,
        q_load=row[3] / base,
        g_shunt=row[4] / base,
        b_shunt=row[5] / base,
        area=int(row[6]),
        v_init=row[7],
        delta_init=math.radians(row[8]),
        base_kv=row[9],
        zone=int(row[10]),
        v_max=row[11],
        v_min=row[12],
        extra=tuple(row[BUS_COLUMNS:]),
    )


def _parse_gencost(rows: List[Tuple[int, List[float]]], n_gen: int) -> List[CostPolynomial]:
    if len(rows) < n_gen:
        line = rows[-1][0] if rows else None
        raise MalformedCase(f"{len(rows)} gencost rows for {n_gen} generators", line=line, table="gencost")
    if len(rows) > n_gen:
        raise UnsupportedFeature("reactive power cost rows", line=rows[n_gen][0], table="gencost")

    costs = []
    for lineno, row in rows:
        model = int(row[0])
        if model == PW_LINEAR:
            raise UnsupportedFeature("piecewise-linear cost model", line=lineno, table="gencost")
        if model != POLYNOMIAL:
            raise MalformedCase(f"unknown cost model {row[0]}", line=lineno, table="gencost")
        n = int(row[3])
        if n < 1 or len(row) < GENCOST_COLUMNS + n:
            raise MalformedCase(f"NCOST={n} does not match row width {len(row)}", line=lineno, table="gencost")
        costs.append(CostPolynomial(
            coefficients=tuple(row[GENCOST_COLUMNS:GENCOST_COLUMNS + n]),
            startup=row[1],
            shutdown=row[2],
        ))
    return costs


def _parse_gen(row: List[float], cost: CostPolynomial, base: float) -> Generator:
    return Generator(
        bus_id=int(row[0]),
        p_init=row[1] / base,
        q_init=row[2] / base,
        q_max=row[3] / base,
        q_min=row[4] / base,
        v_setpoint=row[5],
        mbase=row[6],
        in_service=row[7] > 0,
        p_max=row[8] / base,
        p_min=row[9] / base,
        cost=cost,
        extra=tuple(row[GEN_COLUMNS:]),
    )


def _parse_branch(row: List[float], lineno: int) -> Branch:
    return Branch(
        from_bus=_as_id(row[0], lineno, "branch"),
        to_bus=_as_id(row[1], lineno, "branch"),
        r=row[2],
        x=row[3],
        b_charging=row[4],
        rate_mva=row[5],
        rate_b_mva=row[6],
        rate_c_mva=row[7],
        tap=row[8] if row[8] != 0 else 1.0,
        shift=math.radians(row[9]),
        in_service=row[10] > 0,
        angmin=math.radians(row[11]),
        angmax=math.radians(row[12]),
        extra=tuple(row[BRANCH_COLUMNS:]),
    )


# ─────────────────────────────────────────────
# Serialization
# ─────────────────────────────────────────────

def _fmt(value: float) -> str:
    if math.isinf(value):
        return "Inf" if value > 0 else "-Inf"
    return np.format_float_positional(float(value), unique=True, trim="-")


def format_matpower(name: str, base_mva: float, tables: Dict[str, Sequence[Sequence[float]]]) -> str:
    """Render raw MATPOWER tables (MW/degree units) as case text."""
    lines = [
        f"function mpc = {name}",
        "",
        "%% MATPOWER Case Format : Version 2",
        "mpc.version = '2';",
        "",
        "%% system MVA base",
        f"mpc.baseMVA = {_fmt(base_mva)};",
    ]
    for table in ("bus", "gen", "branch", "gencost"):
        rows = tables[table]
        width = max((len(r) for r in rows), default=0)
        lines += ["", f"%% {table} data", f"mpc.{table} = ["]
        for r in rows:
            padded = list(r) + [0.0] * (width - len(r))
            lines.append("\t" + "\t".join(_fmt(v) for v in padded) + ";")
        lines.append("];")
    return "\n".join(lines) + "\n"


def serialize_case(net: Network) -> str:
    base = net.base_mva
    bus_rows = [
        [b.id, _CODE_BY_KIND[b.kind], b.p_load * base, b.q_load * base,
         b.g_shunt * base, b.b_shunt * base, b.area, b.v_init, math.degrees(b.delta_init),
         b.base_kv, b.zone, b.v_max, b.v_min, *b.extra]
        for b in net.buses
    ]
    gen_rows = [
        [g.bus_id, g.p_init * base, g.q_init * base, g.q_max * base, g.q_min * base,
         g.v_setpoint, g.mbase, 1 if g.in_service else 0, g.p_max * base, g.p_min * base, *g.extra]
        for g in net.generators
    ]
    branch_rows = [
        [br.from_bus, br.to_bus, br.r, br.x, br.b_charging, br.rate_mva, br.rate_b_mva,
         br.rate_c_mva, br.tap, math.degrees(br.shift), 1 if br.in_service else 0,
         math.degrees(br.angmin), math.degrees(br.angmax), *br.extra]
        for br in net.branches
    ]
    cost_rows = [
        [POLYNOMIAL, g.cost.startup, g.cost.shutdown, len(g.cost.coefficients), *g.cost.coefficients]
        for g in net.generators
    ]
    return format_matpower(net.name, base, {
        "bus": bus_rows, "gen": gen_rows, "branch": branch_rows, "gencost": cost_rows,
    })


def _close(a, b, rel: float) -> bool:
    if isinstance(a, tuple):
        return len(a) == len(b) and all(_close(x, y, rel) for x, y in zip(a, b))
    if isinstance(a, float) or isinstance(b, float):
        return math.isclose(a, b, rel_tol=rel, abs_tol=rel)
    return a == b


def network_allclose(a: Network, b: Network, rel: float = 1e-12) -> bool:
    """Field-by-field equality with a relative tolerance on every real field."""
    if a.name != b.name or not _close(a.base_mva, b.base_mva, rel):
        return False
    for xs, ys in ((a.buses, b.buses), (a.generators, b.generators), (a.branches, b.branches)):
        if len(xs) != len(ys):
            return False
        for x, y in zip(xs, ys):
            for field in type(x).model_fields:
                u, v = getattr(x, field), getattr(y, field)
                if isinstance(u, CostPolynomial):
                    if not (_close(u.coefficients, v.coefficients, rel)
                            and _close(u.startup, v.startup, rel)
                            and _close(u.shutdown, v.shutdown, rel)):
                        return False
                elif not _close(u, v, rel):
                    return False
    return True


# ─────────────────────────────────────────────
# Admittance
# ─────────────────────────────────────────────

def bus_index(net: Network) -> Dict[int, int]:
    return {b.id: i for i, b in enumerate(net.buses)}


def build_admittance(net: Network) -> AdmittanceMatrix:
    """Y-bus from the branch pi-model, tap/shift on the from side, shunts on the diagonal."""
    idx = bus_index(net)
    n = len(net.buses)
    nl = len(net.branches)

    for k, br in enumerate(net.branches):
        if br.in_service and br.r == 0 and br.x == 0:
            raise SingularBranch(f"branch {k} ({br.from_bus}-{br.to_bus}) has zero impedance")

    stat = np.array([1.0 if br.in_service else 0.0 for br in net.branches])
    z = np.array([complex(br.r, br.x) if br.in_service else 1.0 for br in net.branches], dtype=complex)
    ys = stat / z if nl else np.zeros(0, dtype=complex)
    bc = stat * np.array([br.b_charging for br in net.branches])
    tap = np.array([br.tap * np.exp(1j * br.shift) for br in net.branches], dtype=complex)

    ytt = ys + 1j * bc / 2
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap

    ysh = np.array([complex(b.g_shunt, b.b_shunt) for b in net.buses])

    f = np.array([idx[br.from_bus] for br in net.branches], dtype=int)
    t = np.array([idx[br.to_bus] for br in net.branches], dtype=int)
    rows = np.r_[np.arange(nl), np.arange(nl)]
    cols = np.r_[f, t]

    yf = sp.csr_matrix((np.r_[yff, yft], (rows, cols)), shape=(nl, n))
    yt = sp.csr_matrix((np.r_[ytf, ytt], (rows, cols)), shape=(nl, n))
    cf = sp.csr_matrix((np.ones(nl), (np.arange(nl), f)), shape=(nl, n))
    ct = sp.csr_matrix((np.ones(nl), (np.arange(nl), t)), shape=(nl, n))

    ybus = (cf.T @ yf + ct.T @ yt + sp.diags(ysh, format="csr")).tocsr()
    return AdmittanceMatrix(matrix=ybus, yf=yf, yt=yt, bus_index=idx)


# ─────────────────────────────────────────────
# Indexing
# ─────────────────────────────────────────────

def compile_network(net: Network) -> NetworkIndex:
    idx = bus_index(net)
    slacks = [i for i, b in enumerate(net.buses) if b.kind == BusKind.SLACK]
    if len(slacks) != 1:
        raise MalformedCase(f"expected exactly one slack bus, found {len(slacks)}", table="bus")
    slack = slacks[0]

    gens = np.array([k for k, g in enumerate(net.generators) if g.in_service], dtype=int)
    gen_bus = np.array([idx[net.generators[k].bus_id] for k in gens], dtype=int)
    at_slack = np.flatnonzero(gen_bus == slack)
    if len(at_slack) == 0:
        raise MalformedCase(f"slack bus {net.buses[slack].id} has no in-service generator", table="gen")

    gen_buses = np.unique(gen_bus)
    pv = np.array([i for i in gen_buses if i != slack], dtype=int)
    controlled = set(gen_buses.tolist())
    pq = np.array([i for i in range(len(net.buses)) if i not in controlled], dtype=int)

    return NetworkIndex(
        n_bus=len(net.buses),
        bus_index=idx,
        slack=slack,
        gens=gens,
        gen_bus=gen_bus,
        slack_gen=int(at_slack[0]),
        pv=pv,
        pq=pq,
        gen_buses=gen_buses,
        f_bus=np.array([idx[br.from_bus] for br in net.branches], dtype=int),
        t_bus=np.array([idx[br.to_bus] for br in net.branches], dtype=int),
    )


# ─────────────────────────────────────────────
# Validation
# ─────────────────────────────────────────────

def validate(net: Network) -> List[str]:
    """One human-readable entry per violated Network invariant; empty means valid."""
    problems: List[str] = []

    if not net.buses:
        problems.append("network has no buses")
    if not net.generators:
        problems.append("network has no generators")

    seen: Dict[int, int] = {}
    for b in net.buses:
        seen[b.id] = seen.get(b.id, 0) + 1
    for bus_id, count in seen.items():
        if count > 1:
            problems.append(f"bus id {bus_id} appears {count} times")

    slacks = [b.id for b in net.buses if b.kind == BusKind.SLACK]
    if len(slacks) != 1:
        listed = ", ".join(str(s) for s in slacks) or "none"
        problems.append(f"expected exactly one slack bus, found {len(slacks)} ({listed})")

    for b in net.buses:
        if b.v_min > b.v_max:
            problems.append(f"bus {b.id}: v_min {b.v_min} > v_max {b.v_max}")
        if b.delta_min > b.delta_max:
            problems.append(f"bus {b.id}: delta_min {b.delta_min} > delta_max {b.delta_max}")

    for k, g in enumerate(net.generators):
        if g.bus_id not in seen:
            problems.append(f"generator {k}: bus {g.bus_id} does not exist")
        if g.p_min > g.p_max:
            problems.append(f"generator {k} at bus {g.bus_id}: p_min {g.p_min} > p_max {g.p_max}")
        if g.q_min > g.q_max:
            problems.append(f"generator {k} at bus {g.bus_id}: q_min {g.q_min} > q_max {g.q_max}")
        if not g.cost.coefficients:
            problems.append(f"generator {k}: cost has no coefficients")
        else:
            ends = g.cost.evaluate(np.array([g.p_min, g.p_max]) * net.base_mva)
            if not np.all(np.isfinite(ends)):
                problems.append(f"generator {k}: cost is not finite on [p_min, p_max]")

    for k, br in enumerate(net.branches):
        for end in (br.from_bus, br.to_bus):
            if end not in seen:
                problems.append(f"branch {k}: bus {end} does not exist")
        if br.r < 0:
            problems.append(f"branch {k} ({br.from_bus}-{br.to_bus}): negative resistance {br.r}")
        if br.r == 0 and br.x == 0:
            problems.append(f"branch {k} ({br.from_bus}-{br.to_bus}): zero impedance")
        if br.tap <= 0:
            problems.append(f"branch {k} ({br.from_bus}-{br.to_bus}): non-positive tap {br.tap}")

    return problems
