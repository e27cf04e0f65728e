"""Synthesized 123-bus feeder case with switchable blocks and house fleets.

The topology is fixed; a seed controls line lengths, load magnitudes, house
device parameters, and weather/load/solar profiles. A fraction in [0, 1]
chooses how many of the 88 load nodes host a controllable house; the chosen
sets nest as the fraction grows so runs at different fractions are
comparable.
"""

from __future__ import annotations

import numpy as np

from flexstart.house import (
    BesParams,
    House,
    HouseForecast,
    HouseState,
    HouseThermalParams,
    HvacParams,
)
from flexstart.network import (
    ESW,
    GFL_PV,
    GFM_BESS,
    PHASES,
    SSW,
    BaseQuantities,
    Bus,
    DerUnit,
    GridCase,
    Line,
    Switch,
    TgInterface,
    derive_bus_blocks,
    load_case,
)

# tree edges inside each switch-free block; switches are listed separately
_EDGES = [
    # around the substation exit
    ("150", "149"), ("149", "1"), ("1", "2"), ("1", "3"), ("1", "7"),
    ("3", "4"), ("3", "5"), ("5", "6"), ("7", "8"), ("8", "12"),
    ("8", "9"), ("9", "14"), ("14", "10"), ("14", "11"), ("8", "13"),
    ("13", "34"), ("34", "15"), ("15", "16"), ("15", "17"),
    # first mid-feeder region
    ("18", "19"), ("19", "20"), ("18", "21"), ("21", "22"), ("21", "23"),
    ("23", "24"),
    ("25", "26"), ("26", "27"), ("26", "31"), ("31", "32"), ("27", "33"),
    ("25", "28"), ("28", "29"), ("29", "30"), ("30", "250"),
    # western laterals
    ("135", "35"), ("35", "36"), ("36", "37"), ("36", "38"), ("38", "39"),
    ("35", "40"), ("40", "41"), ("40", "42"), ("42", "43"), ("42", "44"),
    ("44", "45"), ("45", "46"), ("44", "47"), ("47", "48"), ("47", "49"),
    ("49", "50"), ("50", "51"),
    # southern trunk
    ("152", "52"), ("52", "53"), ("53", "54"), ("54", "55"), ("55", "56"),
    ("54", "57"), ("57", "58"), ("58", "59"), ("57", "60"), ("60", "61"),
    ("53", "151"),
    # eastern trunk, joined internally by a normally closed tie
    ("62", "63"), ("63", "64"), ("64", "65"), ("65", "66"), ("66", "160"),
    ("160", "67"), ("67", "68"), ("68", "69"), ("69", "70"), ("70", "71"),
    ("67", "72"), ("72", "73"), ("73", "74"), ("74", "75"), ("72", "76"),
    ("76", "86"), ("67", "97"),
    # far eastern region
    ("77", "78"), ("78", "79"), ("78", "80"), ("80", "81"), ("81", "82"),
    ("82", "83"), ("81", "84"), ("84", "85"), ("85", "87"), ("87", "88"),
    ("87", "89"), ("89", "90"), ("89", "91"), ("91", "92"), ("91", "93"),
    ("93", "94"), ("93", "95"), ("95", "96"),
    # northern region
    ("98", "99"), ("99", "100"), ("100", "450"), ("100", "101"),
    ("197", "101"), ("101", "102"), ("102", "103"), ("103", "104"),
    ("101", "105"), ("105", "106"), ("106", "107"), ("105", "108"),
    ("108", "109"), ("109", "110"), ("110", "111"), ("110", "112"),
    ("112", "113"), ("113", "114"), ("108", "300"),
]

_SWITCHES = [
    ("S1", "13", "18", ESW), ("S2", "18", "135", ESW), ("S3", "23", "25", ESW),
    ("S4", "151", "300", ESW), ("S5", "51r", "51", ESW), ("S6", "60", "62", ESW),
    ("S7", "13", "152", SSW), ("S8", "60", "160", ESW), ("S9", "97", "197", ESW),
    ("S10a", "97", "98", ESW), ("S10b", "76", "77", ESW), ("S12", "86", "87", ESW),
    ("S13", "89r", "89", ESW), ("S14", "150r", "150", SSW),
]

# branching buses: every bus with more than one downstream lateral
_JUNCTIONS = {"1", "3", "7", "8", "13", "14", "15", "18", "21", "23", "25",
              "26", "36", "40", "44", "47", "54", "57", "60", "67", "72",
              "76", "81", "91", "97", "110"}

_SPECIALS = {"150", "149", "135", "152", "151", "160", "197", "250", "300",
             "450", "51r", "89r", "150r"}

_PV_SITES = [("PV1", "6", 24.5), ("PV2", "20", 44.1), ("PV3", "28", 24.5),
             ("PV4", "43", 24.5), ("PV5", "56", 24.5), ("PV6", "84", 12.25),
             ("PV7", "88", 24.5), ("PV8", "106", 24.5)]

_GFM_SITES = [("BESS1", "51r"), ("BESS2", "89r")]

GFM_S_RAT_KVA = 24.5
GFM_E_CAP_KWH = 98.0
GFM_E_INIT_FRAC = 0.9
GFM_D = 30.0
GFM_K_F = 20.0
GFM_H = 5.0
GFM_GAMMA = 0.3
SS_RAT_KVA = 1500.0
OUTAGE_H = ((9.0, 11.75),)

N_PROFILE_STEPS = 36
PROFILE_START_H = 9.0
PROFILE_DT_H = 0.25

# ohm per mile; mildly coupled three-wire values and a lateral conductor
_Z3_SELF = 0.306 + 0.627j
_Z3_MUT = 0.095 + 0.300j
_Z1 = 0.550 + 0.750j

NON_GEI_PF_Q_PER_P = 0.3287  # tan(acos(0.95))


def _natural(s: str):
    head = "".join(ch for ch in s if ch.isdigit())
    return (int(head) if head else 10 ** 9, s)


def load_bus_ids() -> list[str]:
    """The 88 numbered buses that carry end-use demand, in natural order."""
    numbered = sorted({str(i) for i in range(1, 115)}, key=_natural)
    return [b for b in numbered if b not in _JUNCTIONS]


def _backbone_and_phases() -> tuple[set[str], dict[str, str]]:
    """Prune leaf chains off the anchor tree; assign one phase per pruned subtree."""
    anchors = set(_JUNCTIONS) | _SPECIALS
    for _, a, b, _k in _SWITCHES:
        anchors.add(a)
        anchors.add(b)
    for _, bus, _s in _PV_SITES:
        anchors.add(bus)

    adj: dict[str, set[str]] = {}
    for a, b in _EDGES:
        adj.setdefault(a, set()).add(b)
        adj.setdefault(b, set()).add(a)
    alive = set(adj)
    changed = True
    while changed:
        changed = False
        for bus in sorted(alive, key=_natural):
            if bus in anchors:
                continue
            deg = sum(1 for nb in adj[bus] if nb in alive)
            if deg <= 1:
                alive.discard(bus)
                changed = True
    backbone = alive | {"51r", "89r", "150r"}

    # hanging subtrees: connected pieces of the pruned remainder, each fed
    # from one backbone bus; a whole subtree shares one phase
    hanging = sorted((set(adj) - backbone), key=_natural)
    seen: set[str] = set()
    groups: list[list[str]] = []
    for bus in hanging:
        if bus in seen:
            continue
        stack, grp = [bus], []
        seen.add(bus)
        while stack:
            cur = stack.pop()
            grp.append(cur)
            for nb in adj[cur]:
                if nb not in backbone and nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        groups.append(sorted(grp, key=_natural))
    groups.sort(key=lambda g: _natural(g[0]))

    phase_of: dict[str, str] = {}
    for i, grp in enumerate(groups):
        for bus in grp:
            phase_of[bus] = PHASES[i % 3]
    return backbone, phase_of


def _line_matrices(length_ft: float, nph: int, z_base: float):
    miles = length_ft / 5280.0
    if nph == 1:
        z = _Z1 * miles / z_base
        return ((z.real,),), ((z.imag,),)
    zs, zm = _Z3_SELF * miles / z_base, _Z3_MUT * miles / z_base
    r = tuple(tuple(zs.real if i == j else zm.real for j in range(3)) for i in range(3))
    x = tuple(tuple(zs.imag if i == j else zm.imag for j in range(3)) for i in range(3))
    return r, x


def _solar_fraction(hour: float) -> float:
    return float(max(0.0, np.sin(np.pi * (hour - 6.0) / 13.0)))


def build_profiles(seed: int) -> dict:
    rng = np.random.default_rng([seed, 2])
    hours = PROFILE_START_H + PROFILE_DT_H * np.arange(N_PROFILE_STEPS)
    t_out = 30.0 + 5.0 * (hours - 9.0) / 3.0 + rng.normal(0.0, 0.15, N_PROFILE_STEPS)
    t_out = np.minimum(t_out, 36.5)
    solar = np.array([_solar_fraction(h) for h in hours])
    solar = np.clip(solar * (1.0 + rng.normal(0.0, 0.03, N_PROFILE_STEPS)), 0.0, 1.0)
    load = np.clip(0.55 + 0.010 * (hours - 9.0) * 4.0 / 3.0
                   + rng.normal(0.0, 0.02, N_PROFILE_STEPS), 0.35, 0.9)
    return {
        "start_h": PROFILE_START_H,
        "dt_h": PROFILE_DT_H,
        "n_steps": N_PROFILE_STEPS,
        "hours": tuple(float(h) for h in hours),
        "t_out_degc": tuple(float(v) for v in t_out),
        "solar_frac": tuple(float(v) for v in solar),
        "load_frac": tuple(float(v) for v in load),
    }


def _draw_house(rng: np.random.Generator, hid: str, bus: str, phase: str,
                base_load_kw: float, profiles: dict) -> tuple[House, dict]:
    thermal = HouseThermalParams(
        c_wall_kwh_per_degc=tuple(rng.uniform(0.8, 1.5, 4)),
        r_wall_degc_per_kw=tuple(rng.uniform(8.0, 12.0, 4)),
        r_win_degc_per_kw=float(rng.uniform(15.0, 25.0)),
        c_room_kwh_per_degc=float(rng.uniform(0.2, 0.4)),
        w_wall=tuple(rng.uniform(0.3, 0.7, 4)),
        w_win=float(rng.uniform(0.3, 0.7)),
        cop=float(rng.uniform(2.8, 3.5)),
    )
    t_lo = float(rng.uniform(21.0, 23.0))
    p_max = float(rng.uniform(3.0, 5.0))
    hvac = HvacParams(t_set_lo_degc=t_lo, t_set_hi_degc=t_lo + float(rng.uniform(3.0, 5.0)),
                      q_max_kw=3.0 * p_max, p_max_kw=p_max)
    cap = float(rng.uniform(15.0, 20.0))
    bes = BesParams(e_lo_kwh=0.1 * cap, e_hi_kwh=cap,
                    p_c_max_kw=5.0, p_d_max_kw=5.0, ramp_c_kw=5.0, ramp_d_kw=5.0,
                    eta_c=float(rng.uniform(0.90, 0.95)),
                    eta_d=float(rng.uniform(0.90, 0.95)))
    house = House(id=hid, bus=bus, phase=phase, thermal=thermal, hvac=hvac,
                  bes=bes, hvac_mode="cool")

    n = profiles["n_steps"]
    solar = np.asarray(profiles["solar_frac"])
    pv_kw = float(rng.uniform(5.0, 7.0))
    orient = rng.uniform(0.5, 1.2, 4)
    series = {
        "q_rad_wall_kw": tuple(tuple(float(orient[i] * s) for s in solar)
                               for i in range(4)),
        "q_rad_win_kw": tuple(float(rng.uniform(0.3, 0.5) * s) for s in solar),
        "q_int_kw": tuple(float(rng.uniform(0.2, 0.5)) for _ in range(n)),
        "p_pv_hat_kw": tuple(float(pv_kw * s) for s in solar),
        "p_load_hat_kw": tuple(float(base_load_kw * f) for f in profiles["load_frac"]),
    }
    soc0 = float(rng.uniform(0.40, 0.50))
    t_room0 = float(np.clip(rng.uniform(23.0, 25.0), t_lo + 0.5, hvac.t_set_hi_degc - 0.5))
    init = {
        "t_wall_degc": tuple(float(t_room0 + rng.uniform(2.0, 5.0)) for _ in range(4)),
        "t_room_degc": t_room0,
        "e_es_kwh": soc0 * cap,
    }
    return house, {"series": series, "init": init}


def build_case(seed: int = 1, gei_fraction: float = 0.4, name: str | None = None) -> GridCase:
    """Assemble and validate the full feeder case."""
    if not 0.0 <= gei_fraction <= 1.0:
        raise ValueError("gei_fraction must lie in [0, 1]")
    base = BaseQuantities()
    rng_topo = np.random.default_rng([seed, 0])
    rng_house = np.random.default_rng([seed, 1])
    profiles = build_profiles(seed)

    backbone, phase_of = _backbone_and_phases()
    load_buses = load_bus_ids()
    n_gei = int(round(gei_fraction * len(load_buses)))
    order = rng_house.permutation(len(load_buses))
    gei_set = {load_buses[i] for i in order[:n_gei]}

    # one load phase per bus: pruned laterals inherit their subtree phase,
    # backbone load buses rotate to keep the feeder roughly balanced
    load_phase: dict[str, str] = {}
    rot = 0
    for b in load_buses:
        if b in phase_of:
            load_phase[b] = phase_of[b]
        else:
            load_phase[b] = PHASES[rot % 3]
            rot += 1

    peaks = {b: float(rng_house.uniform(10.0, 15.0)) for b in load_buses}

    buses: dict[str, Bus] = {}
    all_ids = {b for e in _EDGES for b in e} | _SPECIALS
    for bid in sorted(all_ids, key=_natural):
        if bid in backbone:
            phases = PHASES
            peak = [0.0, 0.0, 0.0]
            if bid in peaks:
                peak[PHASES.index(load_phase[bid])] = peaks[bid]
            peak = tuple(peak)
        else:
            phases = (phase_of[bid],)
            peak = (peaks.get(bid, 0.0),)
        buses[bid] = Bus(id=bid, phases=phases, has_gei=bid in gei_set,
                         peak_load_kw=peak)

    lines: dict[str, Line] = {}
    for (a, b) in _EDGES:
        length = float(rng_topo.uniform(200.0, 1000.0))
        if a in backbone and b in backbone:
            ph = PHASES
        else:
            one = phase_of.get(b if b not in backbone else a)
            ph = (one,)
        r, x = _line_matrices(length, len(ph), base.z_base_ohm)
        lid = f"L{a}_{b}"
        lines[lid] = Line(id=lid, from_bus=a, to_bus=b, phases=ph, r_pu=r, x_pu=x)

    switches = {
        sid: Switch(id=sid, from_bus=a, to_bus=b, kind=kind, phases=PHASES,
                    initially_open=True)
        for sid, a, b, kind in _SWITCHES
    }

    ders: dict[str, DerUnit] = {}
    solar = profiles["solar_frac"]
    for pid, bus, rating in _PV_SITES:
        ders[pid] = DerUnit(id=pid, kind=GFL_PV, bus=bus, s_rat_kva=rating,
                            p_hat_kw=tuple(rating * s for s in solar))
    for gid, bus in _GFM_SITES:
        ders[gid] = DerUnit(id=gid, kind=GFM_BESS, bus=bus, s_rat_kva=GFM_S_RAT_KVA,
                            e_cap_kwh=GFM_E_CAP_KWH,
                            e_init_kwh=GFM_E_INIT_FRAC * GFM_E_CAP_KWH,
                            d=GFM_D, k_f=GFM_K_F, h=GFM_H, gamma=GFM_GAMMA)

    houses: dict[str, House] = {}
    house_data: dict[str, dict] = {}
    for b in load_buses:
        hid = f"H{b}"
        house, data = _draw_house(rng_house, hid, b, load_phase[b], peaks[b], profiles)
        if b in gei_set:
            houses[hid] = house
            house_data[hid] = data

    profiles = dict(profiles)
    profiles["houses"] = house_data

    case = GridCase(
        name=name or f"ieee123_seed{seed}_gei{gei_fraction:g}",
        base=base,
        buses=buses,
        lines=lines,
        switches=switches,
        ders=ders,
        tg=TgInterface(substation_bus="150r", ss_rat_kva=SS_RAT_KVA, outage_h=OUTAGE_H),
        houses=houses,
        profiles=profiles,
    )
    return load_case(case)


def profile_index(profiles: dict, clock_h: float) -> int:
    idx = int(round((clock_h - profiles["start_h"]) / profiles["dt_h"]))
    return min(max(idx, 0), profiles["n_steps"] - 1)


def house_forecast_window(case: GridCase, hid: str, clock_h: float,
                          n_steps: int) -> HouseForecast:
    """Slice a house's day-long series into one optimization horizon."""
    prof = case.profiles
    data = prof["houses"][hid]["series"]
    i0 = profile_index(prof, clock_h)
    idx = [min(i0 + k, prof["n_steps"] - 1) for k in range(n_steps)]

    def pick(key):
        return tuple(data[key][i] for i in idx)

    return HouseForecast(
        t_out_degc=tuple(prof["t_out_degc"][i] for i in idx),
        q_rad_wall_kw=tuple(tuple(data["q_rad_wall_kw"][w][i] for i in idx)
                            for w in range(4)),
        q_rad_win_kw=pick("q_rad_win_kw"),
        q_int_kw=pick("q_int_kw"),
        p_pv_hat_kw=pick("p_pv_hat_kw"),
        p_load_hat_kw=pick("p_load_hat_kw"),
    )


def initial_house_state(case: GridCase, hid: str) -> HouseState:
    init = case.profiles["houses"][hid]["init"]
    return HouseState(t_wall_degc=init["t_wall_degc"], t_room_degc=init["t_room_degc"],
                      e_es_kwh=init["e_es_kwh"], connected=False,
                      clock_h=PROFILE_START_H)


def gfl_forecast_window(case: GridCase, der_id: str, clock_h: float,
                        n_steps: int) -> tuple[float, ...]:
    prof = case.profiles
    unit = case.ders[der_id]
    i0 = profile_index(prof, clock_h)
    return tuple(unit.p_hat_kw[min(i0 + k, prof["n_steps"] - 1)] for k in range(n_steps))
