"""Feeder data model: buses, lines, switches, DERs, blocks, whole cases.

Loading a case validates everything it can up front and reports all problems
at once; downstream layers may then assume referential integrity.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

logger = logging.getLogger(__name__)

PHASES = ("a", "b", "c")

ESW = "esw"
SSW = "ssw"

GFM_BESS = "gfm_bess"
GFL_PV = "gfl_pv"

F_NOM_HZ = 60.0


class CaseError(ValueError):
    """One or more validation failures; the message lists every one."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid case:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class BaseQuantities:
    """Per-unit system for the feeder."""

    kv_ll: float = 4.16
    s_base_kva_per_phase: float = 100.0

    @property
    def z_base_ohm(self) -> float:
        v_ln_kv = self.kv_ll / np.sqrt(3.0)
        return (v_ln_kv * 1000.0) ** 2 / (self.s_base_kva_per_phase * 1000.0)


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[str, ...]
    has_gei: bool = False
    peak_load_kw: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.peak_load_kw:
            object.__setattr__(self, "peak_load_kw", (0.0,) * len(self.phases))


@dataclass(frozen=True)
class Line:
    """Series element; r_pu/x_pu are |phases| x |phases| in the bus ordering."""

    id: str
    from_bus: str
    to_bus: str
    phases: tuple[str, ...]
    r_pu: tuple[tuple[float, ...], ...]
    x_pu: tuple[tuple[float, ...], ...]


@dataclass(frozen=True)
class Switch:
    """Sectionalizing (esw) or synchronizing (ssw) tie between two buses."""

    id: str
    from_bus: str
    to_bus: str
    kind: str
    phases: tuple[str, ...]
    initially_open: bool = True


@dataclass(frozen=True)
class DerUnit:
    """Inverter-based resource. Grid-forming units carry droop/inertia data."""

    id: str
    kind: str
    bus: str
    s_rat_kva: float
    p_hat_kw: tuple[float, ...] = ()
    e_cap_kwh: float = 0.0
    e_init_kwh: float = 0.0
    d: float = 0.0
    k_f: float = 0.0
    h: float = 0.0
    gamma: float = 0.0


@dataclass(frozen=True)
class TgInterface:
    """Transmission-grid point of interconnection at the substation."""

    substation_bus: str
    ss_rat_kva: float
    outage_h: tuple[tuple[float, float], ...]

    def is_out(self, clock_h: float) -> bool:
        return any(start <= clock_h < end for start, end in self.outage_h)


@dataclass(frozen=True)
class BusBlock:
    """Maximal switch-free connected region; the unit of energization."""

    id: str
    member_buses: tuple[str, ...]
    member_lines: tuple[str, ...]
    boundary_switches: tuple[str, ...]


@dataclass
class GridCase:
    """One feeder study: topology, resources, houses, profiles."""

    name: str
    base: BaseQuantities
    buses: dict[str, Bus]
    lines: dict[str, Line]
    switches: dict[str, Switch]
    ders: dict[str, DerUnit]
    tg: TgInterface
    houses: dict[str, object] = field(default_factory=dict)
    profiles: dict[str, object] = field(default_factory=dict)

    def gfm_units(self) -> list[DerUnit]:
        return [u for u in self.ders.values() if u.kind == GFM_BESS]

    def gfl_units(self) -> list[DerUnit]:
        return [u for u in self.ders.values() if u.kind == GFL_PV]


def _natural_key(s: str):
    m = re.match(r"(\d+)(.*)", s)
    return (0, int(m.group(1)), m.group(2)) if m else (1, 0, s)


def validate_case(case: GridCase) -> list[str]:
    """Collect every detectable inconsistency; empty list means clean."""
    problems: list[str] = []
    buses, lines, switches = case.buses, case.lines, case.switches

    for store, label in ((buses, "bus"), (lines, "line"), (switches, "switch"),
                         (case.ders, "der")):
        for key, obj in store.items():
            if key != obj.id:
                problems.append(f"{label} keyed {key!r} but carries id {obj.id!r}")

    for b in buses.values():
        if not b.phases or any(ph not in PHASES for ph in b.phases):
            problems.append(f"bus {b.id}: phases must be a subset of a/b/c")
        if len(b.peak_load_kw) != len(b.phases):
            problems.append(f"bus {b.id}: peak_load_kw length != phase count")
        if any(p < 0 for p in b.peak_load_kw):
            problems.append(f"bus {b.id}: negative peak load")

    for ln in lines.values():
        for end in (ln.from_bus, ln.to_bus):
            if end not in buses:
                problems.append(f"line {ln.id}: unknown bus {end}")
        for end in (ln.from_bus, ln.to_bus):
            if end in buses and not set(ln.phases) <= set(buses[end].phases):
                problems.append(f"line {ln.id}: phases {ln.phases} not carried by bus {end}")
        nph = len(ln.phases)
        for mat, nm in ((ln.r_pu, "r"), (ln.x_pu, "x")):
            arr = np.asarray(mat, dtype=float)
            if arr.shape != (nph, nph):
                problems.append(f"line {ln.id}: {nm}_pu shape {arr.shape} != ({nph},{nph})")
                continue
            if not np.allclose(arr, arr.T, atol=1e-12):
                problems.append(f"line {ln.id}: {nm}_pu must be symmetric")
            if nm == "r" and np.any(np.diag(arr) < 0):
                problems.append(f"line {ln.id}: negative series resistance")

    for sw in switches.values():
        if sw.kind not in (ESW, SSW):
            problems.append(f"switch {sw.id}: kind must be {ESW!r} or {SSW!r}")
        for end in (sw.from_bus, sw.to_bus):
            if end not in buses:
                problems.append(f"switch {sw.id}: unknown bus {end}")
        for end in (sw.from_bus, sw.to_bus):
            if end in buses and not set(sw.phases) <= set(buses[end].phases):
                problems.append(f"switch {sw.id}: phases not carried by bus {end}")

    for u in case.ders.values():
        if u.kind not in (GFM_BESS, GFL_PV):
            problems.append(f"der {u.id}: unknown kind {u.kind!r}")
        if u.bus not in buses:
            problems.append(f"der {u.id}: unknown bus {u.bus}")
        if u.s_rat_kva <= 0:
            problems.append(f"der {u.id}: apparent power rating must be positive")
        if u.kind == GFM_BESS:
            if u.d + u.k_f <= 0:
                problems.append(f"der {u.id}: droop d + k_f must be positive")
            if u.h <= 0:
                problems.append(f"der {u.id}: inertia constant must be positive")
            if not 0.0 <= u.e_init_kwh <= u.e_cap_kwh or u.e_cap_kwh <= 0:
                problems.append(f"der {u.id}: energy bounds violated")
            if u.gamma < 0:
                problems.append(f"der {u.id}: overshoot factor must be non-negative")

    if case.tg.substation_bus not in buses:
        problems.append(f"tg interface: unknown substation bus {case.tg.substation_bus}")
    if case.tg.ss_rat_kva <= 0:
        problems.append("tg interface: substation rating must be positive")
    for start, end in case.tg.outage_h:
        if not start < end:
            problems.append(f"tg interface: outage window [{start}, {end}) is empty")

    gei_buses = {b.id for b in buses.values() if b.has_gei}
    housed = {h.bus for h in case.houses.values()}
    for extra in sorted(housed - set(buses)):
        problems.append(f"house bus {extra} does not exist")
    for b in sorted(gei_buses - housed):
        problems.append(f"bus {b} flagged has_gei but hosts no house")
    for b in sorted(housed & set(buses) - gei_buses):
        problems.append(f"bus {b} hosts a house but is not flagged has_gei")
    for h in case.houses.values():
        if h.bus in buses and h.phase not in buses[h.bus].phases:
            problems.append(f"house {h.id}: phase {h.phase} not carried by bus {h.bus}")

    # switches must actually separate regions; a switch inside one switch-free
    # component would never change connectivity
    try:
        blocks = derive_bus_blocks(case)
    except CaseError:
        blocks = []
    if blocks:
        owner = {b: blk.id for blk in blocks for b in blk.member_buses}
        for sw in switches.values():
            if sw.from_bus in owner and sw.to_bus in owner \
                    and owner[sw.from_bus] == owner[sw.to_bus]:
                problems.append(f"switch {sw.id}: both ends inside block {owner[sw.from_bus]}")

    return problems


def load_case(case: GridCase) -> GridCase:
    """Validate; raise CaseError listing every problem, else return the case."""
    problems = validate_case(case)
    if problems:
        raise CaseError(problems)
    logger.info("case %s: %d buses, %d lines, %d switches, %d ders, %d houses",
                case.name, len(case.buses), len(case.lines), len(case.switches),
                len(case.ders), len(case.houses))
    return case


def derive_bus_blocks(case: GridCase) -> list[BusBlock]:
    """Partition buses into switch-free connected components.

    Blocks are ordered by their smallest member bus id (natural sort) and
    named B1..Bn in that order.
    """
    g = nx.Graph()
    g.add_nodes_from(case.buses)
    missing = [ln.id for ln in case.lines.values()
               if ln.from_bus not in case.buses or ln.to_bus not in case.buses]
    if missing:
        raise CaseError([f"line {i}: endpoint missing" for i in missing])
    for ln in case.lines.values():
        g.add_edge(ln.from_bus, ln.to_bus)

    comps = [sorted(c, key=_natural_key) for c in nx.connected_components(g)]
    comps.sort(key=lambda c: _natural_key(c[0]))

    line_owner = {}
    for idx, members in enumerate(comps):
        for b in members:
            line_owner[b] = idx
    blocks = []
    for idx, members in enumerate(comps):
        mset = set(members)
        mlines = sorted(ln.id for ln in case.lines.values() if ln.from_bus in mset)
        bswitches = sorted(sw.id for sw in case.switches.values()
                           if (sw.from_bus in mset) != (sw.to_bus in mset))
        blocks.append(BusBlock(id=f"B{idx + 1}", member_buses=tuple(members),
                               member_lines=tuple(mlines),
                               boundary_switches=tuple(bswitches)))
    return blocks


def block_of_bus(blocks: list[BusBlock]) -> dict[str, str]:
    return {b: blk.id for blk in blocks for b in blk.member_buses}


def phase_submatrix(line: Line, which: str, phases: tuple[str, ...]) -> np.ndarray:
    """Principal submatrix of a line's r or x for the requested phases."""
    mat = np.asarray(line.r_pu if which == "r" else line.x_pu, dtype=float)
    try:
        idx = [line.phases.index(ph) for ph in phases]
    except ValueError as exc:
        raise CaseError([f"line {line.id}: phase not present: {exc}"]) from exc
    return mat[np.ix_(idx, idx)]


def switch_pairs_between(blocks: list[BusBlock], case: GridCase) -> dict[tuple[str, str], list[str]]:
    """Map each adjacent block pair to the switches joining it (parallel ties)."""
    owner = block_of_bus(blocks)
    out: dict[tuple[str, str], list[str]] = {}
    for sw in case.switches.values():
        a, b = owner.get(sw.from_bus), owner.get(sw.to_bus)
        if a is None or b is None or a == b:
            continue
        key = tuple(sorted((a, b), key=_natural_key))
        out.setdefault(key, []).append(sw.id)
    return {k: sorted(v) for k, v in out.items()}


def case_summary(case: GridCase, blocks: list[BusBlock] | None = None) -> dict:
    blocks = blocks if blocks is not None else derive_bus_blocks(case)
    return {
        "name": case.name,
        "n_buses": len(case.buses),
        "n_lines": len(case.lines),
        "n_switches": len(case.switches),
        "n_blocks": len(blocks),
        "n_ders": len(case.ders),
        "n_houses": len(case.houses),
        "n_gei_buses": sum(1 for b in case.buses.values() if b.has_gei),
        "blocks": {b.id: len(b.member_buses) for b in blocks},
    }


def dump_case_json(case: GridCase, path: str) -> None:
    """Write a human-inspectable snapshot (topology and ratings only)."""
    blocks = derive_bus_blocks(case)
    doc = {
        "summary": case_summary(case, blocks),
        "buses": {b.id: {"phases": list(b.phases), "has_gei": b.has_gei,
                         "peak_load_kw": list(b.peak_load_kw)}
                  for b in case.buses.values()},
        "switches": {s.id: {"from": s.from_bus, "to": s.to_bus, "kind": s.kind}
                     for s in case.switches.values()},
        "blocks": {blk.id: {"buses": list(blk.member_buses),
                            "switches": list(blk.boundary_switches)}
                   for blk in blocks},
        "ders": {u.id: {"kind": u.kind, "bus": u.bus, "s_rat_kva": u.s_rat_kva}
                 for u in case.ders.values()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
