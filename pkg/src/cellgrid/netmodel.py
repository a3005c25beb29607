"""Steady-state network model: buses, branches, loads, generators.

Physical quantities live on :class:`Network` (km, ohm/km, MW, MVAr).
:func:`to_per_unit` converts everything onto the common MVA base, after which
the power-flow and clustering code only ever sees dimensionless arrays.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NetworkValidationError, SetpointError

SLACK = "slack"
PV = "pv"
PQ = "pq"
BUS_KINDS = (SLACK, PV, PQ)

# integer codes used by the solver kernels
KIND_CODE = {SLACK: 0, PV: 1, PQ: 2}


@dataclass(frozen=True)
class Bus:
    id: str
    kind: str
    nominal_kv: float
    v_set: float | None = None  # per unit, slack/pv only


@dataclass(frozen=True)
class Branch:
    """Series element between two buses (line or two-winding transformer).

    Impedances are per km referred to the ``to_bus`` voltage level; a
    transformer is a branch with ``length_km`` 1.0 and its short-circuit
    impedance entered as the per-km value.  ``tap_ratio`` is the off-nominal
    tap on the ``from_bus`` side.
    """

    id: str
    from_bus: str
    to_bus: str
    r_per_km: float
    x_per_km: float
    b_per_km: float
    length_km: float
    tap_ratio: float = 1.0


@dataclass(frozen=True)
class Load:
    id: str
    bus: str
    p_mw: float
    q_mvar: float


@dataclass(frozen=True)
class Generator:
    id: str
    bus: str
    p_set_mw: float
    q_set_mvar: float
    q_min_mvar: float
    q_max_mvar: float
    controllable: bool = False
    external: bool = False  # injection supplied by a co-simulation client


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    loads: tuple[Load, ...]
    generators: tuple[Generator, ...]
    base_mva: float
    base_frequency_hz: float = 50.0
    name: str = ""

    def bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    def branch(self, branch_id: str) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise KeyError(branch_id)

    def generator(self, gen_id: str) -> Generator:
        for g in self.generators:
            if g.id == gen_id:
                return g
        raise KeyError(gen_id)

    @property
    def slack_bus(self) -> Bus:
        return next(b for b in self.buses if b.kind == SLACK)


def validate_network(net: Network) -> None:
    """Check all structural invariants; raise NetworkValidationError on the first hit."""
    seen: set[str] = set()
    for b in net.buses:
        if b.id in seen:
            raise NetworkValidationError(f"duplicate bus id {b.id!r}")
        seen.add(b.id)
        if b.kind not in BUS_KINDS:
            raise NetworkValidationError(f"bus {b.id!r}: unknown kind {b.kind!r}")
        if not (b.nominal_kv > 0):
            raise NetworkValidationError(f"bus {b.id!r}: nominal_kv must be > 0")
        if b.kind in (SLACK, PV):
            if b.v_set is None:
                raise NetworkValidationError(f"bus {b.id!r}: {b.kind} bus needs v_set")
            if not (0.8 <= b.v_set <= 1.2):
                raise NetworkValidationError(
                    f"bus {b.id!r}: v_set {b.v_set} outside [0.8, 1.2] pu")

    slacks = [b.id for b in net.buses if b.kind == SLACK]
    if len(slacks) == 0:
        raise NetworkValidationError("no slack bus")
    if len(slacks) > 1:
        raise NetworkValidationError(f"multiple slack buses: {', '.join(slacks)}")

    bus_ids = seen
    ids: set[str] = set()
    for br in net.branches:
        if br.id in ids:
            raise NetworkValidationError(f"duplicate branch id {br.id!r}")
        ids.add(br.id)
        for end in (br.from_bus, br.to_bus):
            if end not in bus_ids:
                raise NetworkValidationError(
                    f"branch {br.id!r} references unknown bus {end!r}")
        if not (br.length_km > 0):
            raise NetworkValidationError(
                f"branch {br.id!r}: length must be > 0 km, got {br.length_km}")
        if br.r_per_km < 0:
            raise NetworkValidationError(f"branch {br.id!r}: negative resistance")
        if br.r_per_km == 0 and br.x_per_km == 0:
            raise NetworkValidationError(
                f"branch {br.id!r}: r_per_km and x_per_km are both zero")
        for v in (br.r_per_km, br.x_per_km, br.b_per_km):
            if not math.isfinite(v):
                raise NetworkValidationError(f"branch {br.id!r}: non-finite impedance")
        if not (br.tap_ratio > 0):
            raise NetworkValidationError(f"branch {br.id!r}: tap_ratio must be > 0")

    for ld in net.loads:
        if ld.id in ids:
            raise NetworkValidationError(f"duplicate id {ld.id!r}")
        ids.add(ld.id)
        if ld.bus not in bus_ids:
            raise NetworkValidationError(f"load {ld.id!r} references unknown bus {ld.bus!r}")

    for g in net.generators:
        if g.id in ids:
            raise NetworkValidationError(f"duplicate id {g.id!r}")
        ids.add(g.id)
        if g.bus not in bus_ids:
            raise NetworkValidationError(f"generator {g.id!r} references unknown bus {g.bus!r}")
        if g.controllable and not (g.q_min_mvar <= g.q_set_mvar <= g.q_max_mvar):
            raise NetworkValidationError(
                f"generator {g.id!r}: q_set {g.q_set_mvar} outside "
                f"[{g.q_min_mvar}, {g.q_max_mvar}]")

    if not (net.base_mva > 0):
        raise NetworkValidationError("base_mva must be > 0")
    if not (net.base_frequency_hz > 0):
        raise NetworkValidationError("base_frequency_hz must be > 0")


def modify_line_length(net: Network, line_id: str, new_length_km: float) -> Network:
    """Return a copy of the network with exactly one branch length changed."""
    if not (new_length_km > 0):
        raise NetworkValidationError(
            f"new length for {line_id!r} must be > 0 km, got {new_length_km}")
    hit = False
    branches = []
    for br in net.branches:
        if br.id == line_id:
            branches.append(dataclasses.replace(br, length_km=new_length_km))
            hit = True
        else:
            branches.append(br)
    if not hit:
        raise NetworkValidationError(f"unknown line id {line_id!r}")
    return dataclasses.replace(net, branches=tuple(branches))


# --------------------------------------------------------------------------
# per-unit form
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PuBranch:
    id: str
    from_i: int
    to_i: int
    r: float
    x: float
    b_shunt: float  # total line charging susceptance, pu
    tap: float
    length_km: float = 1.0  # carried so the per-unit round trip is exact


@dataclass(frozen=True)
class PuLoad:
    id: str
    bus_i: int
    p: float
    q: float


@dataclass(frozen=True)
class PuGenerator:
    id: str
    bus_i: int
    p: float
    q: float
    q_min: float
    q_max: float
    controllable: bool
    external: bool


@dataclass(frozen=True)
class PerUnitNetwork:
    """Network on the common MVA base, with buses mapped to dense indices.

    Bus order follows the source :class:`Network`.  All arrays are read-only;
    transformations return new instances.
    """

    bus_ids: tuple[str, ...]
    bus_kinds: tuple[str, ...]
    nominal_kv: np.ndarray
    v_set: np.ndarray          # nan where absent
    slack_index: int
    branches: tuple[PuBranch, ...]
    loads: tuple[PuLoad, ...]
    generators: tuple[PuGenerator, ...]
    base_mva: float
    base_frequency_hz: float
    name: str = ""
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for arr in (self.nominal_kv, self.v_set):
            arr.flags.writeable = False
        self._index.update({bid: i for i, bid in enumerate(self.bus_ids)})

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    def bus_index(self, bus_id: str) -> int:
        return self._index[bus_id]

    def kind_codes(self) -> np.ndarray:
        return np.array([KIND_CODE[k] for k in self.bus_kinds], dtype=np.int64)

    def pq_indices(self) -> np.ndarray:
        return np.array([i for i, k in enumerate(self.bus_kinds) if k == PQ], dtype=np.int64)

    def non_slack_indices(self) -> np.ndarray:
        return np.array([i for i, k in enumerate(self.bus_kinds) if k != SLACK], dtype=np.int64)

    def scheduled_injections(self) -> tuple[np.ndarray, np.ndarray]:
        """Net scheduled (P, Q) per bus in pu (generation minus load)."""
        p = np.zeros(self.n_bus)
        q = np.zeros(self.n_bus)
        for g in self.generators:
            p[g.bus_i] += g.p
            q[g.bus_i] += g.q
        for ld in self.loads:
            p[ld.bus_i] -= ld.p
            q[ld.bus_i] -= ld.q
        return p, q

    def generator_by_id(self, gen_id: str) -> PuGenerator:
        for g in self.generators:
            if g.id == gen_id:
                return g
        raise SetpointError(f"unknown generator {gen_id!r}")


def _z_base(net: Network, branch: Branch) -> float:
    # impedance base on the to_bus voltage level
    kv = net.bus(branch.to_bus).nominal_kv
    return kv * kv / net.base_mva


def to_per_unit(net: Network) -> PerUnitNetwork:
    validate_network(net)
    index = {b.id: i for i, b in enumerate(net.buses)}
    slack_index = index[net.slack_bus.id]

    branches = []
    for br in net.branches:
        zb = _z_base(net, br)
        branches.append(PuBranch(
            id=br.id,
            from_i=index[br.from_bus],
            to_i=index[br.to_bus],
            r=br.r_per_km * br.length_km / zb,
            x=br.x_per_km * br.length_km / zb,
            b_shunt=br.b_per_km * br.length_km * zb,
            tap=br.tap_ratio,
            length_km=br.length_km,
        ))

    loads = tuple(
        PuLoad(ld.id, index[ld.bus], ld.p_mw / net.base_mva, ld.q_mvar / net.base_mva)
        for ld in net.loads)
    gens = tuple(
        PuGenerator(g.id, index[g.bus], g.p_set_mw / net.base_mva,
                    g.q_set_mvar / net.base_mva, g.q_min_mvar / net.base_mva,
                    g.q_max_mvar / net.base_mva, g.controllable, g.external)
        for g in net.generators)

    return PerUnitNetwork(
        bus_ids=tuple(b.id for b in net.buses),
        bus_kinds=tuple(b.kind for b in net.buses),
        nominal_kv=np.array([b.nominal_kv for b in net.buses]),
        v_set=np.array([b.v_set if b.v_set is not None else np.nan for b in net.buses]),
        slack_index=slack_index,
        branches=tuple(branches),
        loads=loads,
        generators=gens,
        base_mva=net.base_mva,
        base_frequency_hz=net.base_frequency_hz,
        name=net.name,
    )


def per_unit_to_network(pun: PerUnitNetwork) -> Network:
    """Inverse of :func:`to_per_unit` (used to check the round-trip invariant)."""
    buses = tuple(
        Bus(bid, kind, kv, None if math.isnan(vs) else vs)
        for bid, kind, kv, vs in zip(pun.bus_ids, pun.bus_kinds, pun.nominal_kv, pun.v_set))
    base = pun.base_mva
    branches = []
    for br in pun.branches:
        kv = pun.nominal_kv[br.to_i]
        zb = kv * kv / base
        branches.append(Branch(br.id, pun.bus_ids[br.from_i], pun.bus_ids[br.to_i],
                               br.r * zb / br.length_km, br.x * zb / br.length_km,
                               br.b_shunt / zb / br.length_km, br.length_km, br.tap))
    loads = tuple(
        Load(ld.id, pun.bus_ids[ld.bus_i], ld.p * base, ld.q * base) for ld in pun.loads)
    gens = tuple(
        Generator(g.id, pun.bus_ids[g.bus_i], g.p * base, g.q * base,
                  g.q_min * base, g.q_max * base, g.controllable, g.external)
        for g in pun.generators)
    return Network(buses, tuple(branches), loads, gens, base, pun.base_frequency_hz, pun.name)


def admittance_matrix(pun: PerUnitNetwork) -> np.ndarray:
    """Complex bus admittance matrix.

    Standard pi model with an off-nominal tap ``t`` on the from side:
    ``Y_ff += (y + jb/2)/t^2``, ``Y_ft = Y_tf -= y/t``, ``Y_tt += y + jb/2``.
    """
    n = pun.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in pun.branches:
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_shunt
        t = br.tap
        f, to = br.from_i, br.to_i
        y[f, f] += (ys + ysh) / (t * t)
        y[to, to] += ys + ysh
        y[f, to] -= ys / t
        y[to, f] -= ys / t
    return y


def apply_setpoints(pun: PerUnitNetwork, setpoints: dict[str, tuple[float, float]]) -> PerUnitNetwork:
    """Replace generator (P, Q) injections; values are MW / MVAr.

    Reactive values are checked against the generator limits; idempotent.
    """
    by_id = {g.id: g for g in pun.generators}
    for gen_id in setpoints:
        if gen_id not in by_id:
            raise SetpointError(f"unknown generator {gen_id!r}")
    base = pun.base_mva
    gens = []
    for g in pun.generators:
        if g.id in setpoints:
            p_mw, q_mvar = setpoints[g.id]
            p, q = p_mw / base, q_mvar / base
            if not (g.q_min - 1e-12 <= q <= g.q_max + 1e-12):
                raise SetpointError(
                    f"generator {g.id!r}: q setpoint {q_mvar} MVAr outside "
                    f"[{g.q_min * base}, {g.q_max * base}] MVAr")
            gens.append(dataclasses.replace(g, p=p, q=q))
        else:
            gens.append(g)
    return dataclasses.replace(pun, generators=tuple(gens), _index={})


def scale_injections(pun: PerUnitNetwork, load_factor: float = 1.0,
                     gen_factor: float = 1.0) -> PerUnitNetwork:
    """Scale all loads and the active power of internal generators.

    External generators are left untouched (their injection is owned by a
    co-simulation client); generator reactive setpoints are dispatch state
    and are not profile-scaled either.
    """
    loads = tuple(dataclasses.replace(ld, p=ld.p * load_factor, q=ld.q * load_factor)
                  for ld in pun.loads)
    gens = tuple(g if g.external else dataclasses.replace(g, p=g.p * gen_factor)
                 for g in pun.generators)
    return dataclasses.replace(pun, loads=loads, generators=gens, _index={})
