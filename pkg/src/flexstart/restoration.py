"""Network-side restoration MILP over one rolling-horizon window.

Decides switch closures, block energization, grid-forming unit operation,
transmission reconnection, non-controllable load pickup, and per-house
dispatch within published flexibility envelopes. Every constraint row is
tagged with a stable family id so a solution can be audited row by row
afterwards; the tag strings are part of the on-disk artifact format.

Network quantities are per-unit on a 100 kVA per-phase base; house dispatch
is in kW; storage energy in kWh; frequency in Hz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

from flexstart.house import FlexibilityEnvelope
from flexstart.milp import (
    BINARY,
    CONTINUOUS,
    EQUAL,
    GREATER_EQUAL,
    LESS_EQUAL,
    BigMConfig,
    LinExpr,
    Model,
    SolveLimits,
    solve,
)
from flexstart.network import (
    ESW,
    SSW,
    BusBlock,
    GridCase,
    block_of_bus,
    phase_submatrix,
)

F_NOM = 60.0
S_BASE_KVA = 100.0
OCT_APOTHEM = math.cos(math.pi / 8.0)
OCT_NORMALS = tuple((math.cos((2 * m + 1) * math.pi / 8.0),
                     math.sin((2 * m + 1) * math.pi / 8.0)) for m in range(8))


@dataclass(frozen=True)
class RestorationOptions:
    """Operating limits and tolerances for one planning window."""

    freq_band_hz: float = 0.5
    rocof_limit_hz_s: float = 3.0
    nadir_limit_hz: float = 1.5
    sync_offset_hz: float = 0.2
    sync_freq_tol_hz: float = 0.01
    sync_flow_tol_pu: float = 1e-4
    dv_limit: float = 0.1025
    v_sq_lo: float = 0.9025
    v_sq_hi: float = 1.1025
    gfm_v_ref_sq: float = 1.0
    q_per_p_non_gei: float = 0.3287
    switch_close_reward: float = 1e-4

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RestorationOptions":
        return RestorationOptions(**d)


@dataclass
class PriorState:
    """Applied system state at the window's start instant."""

    clock_h: float
    switch_closed: dict[str, int]
    block_live: dict[str, int]
    gfm_energy_kwh: dict[str, float]
    gfm_p_kw: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "clock_h": self.clock_h,
            "switch_closed": dict(self.switch_closed),
            "block_live": dict(self.block_live),
            "gfm_energy_kwh": dict(self.gfm_energy_kwh),
            "gfm_p_kw": dict(self.gfm_p_kw),
        }

    @staticmethod
    def from_dict(d: dict) -> "PriorState":
        return PriorState(
            clock_h=float(d["clock_h"]),
            switch_closed={k: int(v) for k, v in d["switch_closed"].items()},
            block_live={k: int(v) for k, v in d["block_live"].items()},
            gfm_energy_kwh={k: float(v) for k, v in d["gfm_energy_kwh"].items()},
            gfm_p_kw={k: float(v) for k, v in d["gfm_p_kw"].items()},
        )


def initial_prior(case: GridCase, blocks: list[BusBlock]) -> PriorState:
    """Outage start: everything open and dead except the black-start units."""
    owner = block_of_bus(blocks)
    gfm_blocks = {owner[u.bus] for u in case.gfm_units()}
    clock = case.profiles.get("start_h", 9.0) if case.profiles else 9.0
    tg_block = owner[case.tg.substation_bus]
    live = {b.id: 1 if b.id in gfm_blocks else 0 for b in blocks}
    live[tg_block] = 0 if case.tg.is_out(clock) else 1
    return PriorState(
        clock_h=clock,
        switch_closed={s: 0 if sw.initially_open else 1
                       for s, sw in sorted(case.switches.items())},
        block_live=live,
        gfm_energy_kwh={u.id: u.e_init_kwh for u in case.gfm_units()},
        gfm_p_kw={u.id: 0.0 for u in case.gfm_units()},
    )


@dataclass
class RestorationVars:
    """Handles into the window model, keyed by entity id and step."""

    n_steps: int
    y_sw: dict[str, list]
    y_blk: dict[str, list]
    y_line: dict[str, list]
    y_bus: dict[str, list]
    dy_ssw: dict[str, list]
    z_sync: dict[str, list]
    p_flow: dict[tuple, list]
    q_flow: dict[tuple, list]
    v_sq: dict[tuple, list]
    p_d: dict[str, list]
    p_dis: dict[str, list]
    pv_x: dict[tuple, list]
    gfm_p: dict[tuple, list]
    gfm_q: dict[tuple, list]
    gfm_e: dict[str, list]
    gfm_f: dict[str, list]
    gfm_dv: dict[tuple, list]
    df_qss: dict[str, list]
    rocof: dict[str, list]
    df_nad: dict[str, list]
    s_adj: dict[str, list]
    delta: dict[str, list]
    f_blk: dict[str, list]
    p_tg: dict[str, list]
    q_tg: dict[str, list]


def tg_availability(case: GridCase, clock_h: float, n_steps: int,
                    dt_h: float) -> tuple[int, ...]:
    return tuple(0 if case.tg.is_out(clock_h + k * dt_h) else 1
                 for k in range(n_steps))


def _abs_leq(m: Model, expr: LinExpr, bound: LinExpr | float, tag: str):
    if isinstance(bound, (int, float)):
        m.add_constraint(expr, LESS_EQUAL, float(bound), tag)
        m.add_constraint(expr * -1.0, LESS_EQUAL, float(bound), tag)
    else:
        m.add_constraint(expr - bound, LESS_EQUAL, 0.0, tag)
        m.add_constraint(expr * -1.0 - bound, LESS_EQUAL, 0.0, tag)


def build_restoration_milp(case: GridCase, blocks: list[BusBlock], prior: PriorState,
                           envelopes: dict[str, FlexibilityEnvelope],
                           tg_avail: tuple[int, ...], dt_h: float, n_steps: int,
                           big_m: BigMConfig | None = None,
                           options: RestorationOptions | None = None
                           ) -> tuple[Model, RestorationVars]:
    opt = options or RestorationOptions()
    bm = big_m or BigMConfig(m_power=10.0, m_freq=70.0, m_volt=2.0,
                             epsilon=opt.sync_flow_tol_pu)
    owner = block_of_bus(blocks)
    blk_ids = [b.id for b in blocks]
    tg_block = owner[case.tg.substation_bus]
    gfm_units = sorted(case.gfm_units(), key=lambda u: u.id)
    gfl_units = sorted(case.gfl_units(), key=lambda u: u.id)
    gfm_block = {u.id: owner[u.bus] for u in gfm_units}
    ssw_ids = sorted(s for s, sw in case.switches.items() if sw.kind == SSW)
    esw_ids = sorted(s for s, sw in case.switches.items() if sw.kind == ESW)
    houses = sorted(case.houses)
    non_gei_load = sorted(
        (b for b in case.buses.values()
         if not b.has_gei and any(p > 0 for p in b.peak_load_kw)),
        key=lambda b: b.id)
    if len(tg_avail) != n_steps:
        raise ValueError("tg availability length disagrees with horizon")
    for hid in houses:
        if hid not in envelopes or envelopes[hid].n_steps != n_steps:
            raise ValueError(f"envelope missing or mis-sized for house {hid}")

    m = Model(f"restoration_{case.name}")
    V = RestorationVars(
        n_steps=n_steps, y_sw={}, y_blk={}, y_line={}, y_bus={}, dy_ssw={},
        z_sync={}, p_flow={}, q_flow={}, v_sq={}, p_d={}, p_dis={}, pv_x={},
        gfm_p={}, gfm_q={}, gfm_e={}, gfm_f={}, gfm_dv={}, df_qss={}, rocof={},
        df_nad={}, s_adj={}, delta={}, f_blk={}, p_tg={}, q_tg={})

    # ---- variables -------------------------------------------------------
    for sid in sorted(case.switches):
        V.y_sw[sid] = [m.add_var(BINARY, name=f"ysw_{sid}_{k}") for k in range(n_steps)]
        if prior.switch_closed.get(sid, 0):
            for v in V.y_sw[sid]:
                m.set_var_lower(v, 1.0)
    for bid in blk_ids:
        V.y_blk[bid] = [m.add_var(BINARY, name=f"yblk_{bid}_{k}") for k in range(n_steps)]
        if bid == tg_block:
            for k in range(n_steps):
                m.fix_var(V.y_blk[bid][k], float(tg_avail[k]))
        elif prior.block_live.get(bid, 0):
            for v in V.y_blk[bid]:
                m.set_var_lower(v, 1.0)
    for lid in sorted(case.lines):
        V.y_line[lid] = [m.add_var(CONTINUOUS, 0.0, 1.0, f"yline_{lid}_{k}")
                         for k in range(n_steps)]
    for bus in sorted(case.buses):
        V.y_bus[bus] = [m.add_var(CONTINUOUS, 0.0, 1.0, f"ybus_{bus}_{k}")
                        for k in range(n_steps)]
    for sid in ssw_ids:
        V.dy_ssw[sid] = [m.add_var(BINARY, name=f"dy_{sid}_{k}") for k in range(n_steps)]
        V.z_sync[sid] = [m.add_var(BINARY, name=f"z_{sid}_{k}") for k in range(n_steps)]

    edges = [("line", lid, case.lines[lid].from_bus, case.lines[lid].to_bus,
              case.lines[lid].phases) for lid in sorted(case.lines)]
    edges += [("switch", sid, case.switches[sid].from_bus, case.switches[sid].to_bus,
               tuple(ph for ph in case.switches[sid].phases
                     if ph in case.buses[case.switches[sid].from_bus].phases
                     and ph in case.buses[case.switches[sid].to_bus].phases))
              for sid in sorted(case.switches)]
    for kind, eid, _fb, _tb, phases in edges:
        for ph in phases:
            V.p_flow[(eid, ph)] = [m.add_var(CONTINUOUS, -bm.m_power, bm.m_power,
                                             f"pf_{eid}_{ph}_{k}") for k in range(n_steps)]
            V.q_flow[(eid, ph)] = [m.add_var(CONTINUOUS, -bm.m_power, bm.m_power,
                                             f"qf_{eid}_{ph}_{k}") for k in range(n_steps)]
    for bus in sorted(case.buses):
        for ph in case.buses[bus].phases:
            V.v_sq[(bus, ph)] = [m.add_var(CONTINUOUS, 0.0, 1.21, f"v_{bus}_{ph}_{k}")
                                 for k in range(n_steps)]
    for b in non_gei_load:
        peak_pu = max(b.peak_load_kw) / S_BASE_KVA
        V.p_d[b.id] = [m.add_var(CONTINUOUS, 0.0, peak_pu, f"pd_{b.id}_{k}")
                       for k in range(n_steps)]
    for hid in houses:
        env = envelopes[hid]
        V.p_dis[hid] = [m.add_var(CONTINUOUS, min(env.lower_kw[k], 0.0),
                                  max(env.upper_kw[k], 0.0), f"pdis_{hid}_{k}")
                        for k in range(n_steps)]
    for u in gfl_units:
        for ph in case.buses[u.bus].phases:
            V.pv_x[(u.id, ph)] = [m.add_var(CONTINUOUS, 0.0, bm.m_power,
                                            f"pv_{u.id}_{ph}_{k}") for k in range(n_steps)]
    for u in gfm_units:
        cap = u.s_rat_kva / 3.0 / S_BASE_KVA
        for ph in case.buses[u.bus].phases:
            V.gfm_p[(u.id, ph)] = [m.add_var(CONTINUOUS, -cap, cap, f"pes_{u.id}_{ph}_{k}")
                                   for k in range(n_steps)]
            V.gfm_q[(u.id, ph)] = [m.add_var(CONTINUOUS, -cap, cap, f"qes_{u.id}_{ph}_{k}")
                                   for k in range(n_steps)]
            V.gfm_dv[(u.id, ph)] = [m.add_var(CONTINUOUS, -opt.dv_limit, opt.dv_limit,
                                              f"dv_{u.id}_{ph}_{k}") for k in range(n_steps)]
        V.gfm_e[u.id] = [m.add_var(CONTINUOUS, 0.0, u.e_cap_kwh, f"e_{u.id}_{k}")
                         for k in range(n_steps)]
        V.gfm_f[u.id] = [m.add_var(CONTINUOUS, 55.0, 65.0, f"f_{u.id}_{k}")
                         for k in range(n_steps)]
        V.df_qss[u.id] = [m.add_var(CONTINUOUS, -5.0, 5.0, f"dfq_{u.id}_{k}")
                          for k in range(n_steps)]
        V.rocof[u.id] = [m.add_var(CONTINUOUS, -50.0, 50.0, f"rocof_{u.id}_{k}")
                         for k in range(n_steps)]
        V.df_nad[u.id] = [m.add_var(CONTINUOUS, -50.0, 50.0, f"dfn_{u.id}_{k}")
                          for k in range(n_steps)]
        V.s_adj[u.id] = [m.add_var(CONTINUOUS, -opt.sync_offset_hz, opt.sync_offset_hz,
                                   f"sadj_{u.id}_{k}") for k in range(n_steps)]
        V.delta[u.id] = [m.add_var(BINARY, name=f"delta_{u.id}_{k}") for k in range(n_steps)]
    for bid in blk_ids:
        V.f_blk[bid] = [m.add_var(CONTINUOUS, 0.0, 70.0, f"fblk_{bid}_{k}")
                        for k in range(n_steps)]
    for ph in case.buses[case.tg.substation_bus].phases:
        V.p_tg[ph] = [m.add_var(CONTINUOUS, -bm.m_power, bm.m_power, f"ptg_{ph}_{k}")
                      for k in range(n_steps)]
        V.q_tg[ph] = [m.add_var(CONTINUOUS, -bm.m_power, bm.m_power, f"qtg_{ph}_{k}")
                      for k in range(n_steps)]

    # ---- switching and energization logic --------------------------------
    def sw_prev(sid, k):
        return V.y_sw[sid][k - 1] if k >= 1 else float(prior.switch_closed.get(sid, 0))

    def blk_prev(bid, k):
        return V.y_blk[bid][k - 1] if k >= 1 else float(prior.block_live.get(bid, 0))

    for k in range(n_steps):
        for sid in sorted(case.switches):
            prev = sw_prev(sid, k)
            expr = V.y_sw[sid][k] - prev if k >= 1 else LinExpr.of(V.y_sw[sid][k]) - prev
            m.add_constraint(expr, GREATER_EQUAL, 0.0, "eq30")

        for sid in esw_ids:
            sw = case.switches[sid]
            bi, bj = owner[sw.from_bus], owner[sw.to_bus]
            prev = sw_prev(sid, k)
            pi, pj = blk_prev(bi, k), blk_prev(bj, k)
            dy = LinExpr.of(V.y_sw[sid][k]) - prev
            # a sectionalizing switch closes from exactly one live side
            m.add_constraint(dy - pi - pj, LESS_EQUAL, 0.0, "eq31")
            m.add_constraint(dy + pi + pj, LESS_EQUAL, 2.0, "eq31")

        for sid in ssw_ids:
            sw = case.switches[sid]
            bi, bj = owner[sw.from_bus], owner[sw.to_bus]
            prev = sw_prev(sid, k)
            pi, pj = blk_prev(bi, k), blk_prev(bj, k)
            dy_var = V.dy_ssw[sid][k]
            # a synchronizing switch joins two already-live islands
            m.add_constraint(LinExpr.of(dy_var) - pi, LESS_EQUAL, 0.0, "eq32")
            m.add_constraint(LinExpr.of(dy_var) - pj, LESS_EQUAL, 0.0, "eq32")
            m.add_constraint(LinExpr.of(dy_var) - V.y_sw[sid][k] + prev, EQUAL, 0.0, "eq33")
            if k == 0:
                z_expr = LinExpr.of(dy_var, float(pi) + float(pj) - 1.0)
            else:
                w1 = m.linearize_binary_product(dy_var, V.y_blk[bi][k - 1],
                                                f"w1_{sid}_{k}", "eq33")
                w2 = m.linearize_binary_product(dy_var, V.y_blk[bj][k - 1],
                                                f"w2_{sid}_{k}", "eq33")
                z_expr = w1 + w2 - dy_var
            m.add_constraint(LinExpr.of(V.z_sync[sid][k]) - z_expr, EQUAL, 0.0, "eq33")

            # the tie must carry no pre-existing flow at the merge instant
            for ph in case.switches[sid].phases:
                if (sid, ph) not in V.p_flow:
                    continue
                zc = LinExpr.of(V.z_sync[sid][k])
                _abs_leq(m, LinExpr.of(V.p_flow[(sid, ph)][k]),
                         opt.sync_flow_tol_pu + bm.m_power - bm.m_power * zc, "eq34")
                _abs_leq(m, LinExpr.of(V.q_flow[(sid, ph)][k]),
                         opt.sync_flow_tol_pu + bm.m_power - bm.m_power * zc, "eq35")

            # closed tie keeps both island frequencies matched
            fi, fj = V.f_blk[bi][k], V.f_blk[bj][k]
            ysw = LinExpr.of(V.y_sw[sid][k])
            _abs_leq(m, fi - fj, opt.sync_freq_tol_hz + bm.m_freq - bm.m_freq * ysw,
                     "eq36")

        for blk in blocks:
            bid = blk.id
            seed = float(prior.block_live.get(bid, 0))
            if bid in (gfm_block[u.id] for u in gfm_units):
                seed = 1.0
            if bid == tg_block:
                seed = float(tg_avail[k])
            src = LinExpr(constant=seed)
            for sid in blk.boundary_switches:
                m.add_constraint(LinExpr.of(V.y_blk[bid][k]) - V.y_sw[sid][k],
                                 GREATER_EQUAL, 0.0, "eq37")
                src = src + V.y_sw[sid][k]
            m.add_constraint(LinExpr.of(V.y_blk[bid][k]) - src, LESS_EQUAL, 0.0,
                             "block_source")

            prev = blk_prev(bid, k)
            expr = (LinExpr.of(V.y_blk[bid][k]) - prev) if k == 0 \
                else V.y_blk[bid][k] - prev
            m.add_constraint(expr, GREATER_EQUAL, 0.0, "eq38")

            # while dead, a block may accept at most one newly closed feed
            grow = LinExpr()
            for sid in blk.boundary_switches:
                grow = grow + V.y_sw[sid][k] - sw_prev(sid, k)
            nb = float(len(blk.boundary_switches))
            rhs_blk = blk_prev(bid, k)
            if isinstance(rhs_blk, float):
                m.add_constraint(grow, LESS_EQUAL, nb * rhs_blk + 1.0, "eq41")
            else:
                m.add_constraint(grow - nb * rhs_blk, LESS_EQUAL, 1.0, "eq41")

        for lid in sorted(case.lines):
            bid = owner[case.lines[lid].from_bus]
            m.add_constraint(V.y_line[lid][k] - V.y_blk[bid][k], EQUAL, 0.0, "eq39")
        for bus in sorted(case.buses):
            m.add_constraint(V.y_bus[bus][k] - V.y_blk[owner[bus]][k], EQUAL, 0.0,
                             "eq40")

    # ---- power flow ------------------------------------------------------
    inflow: dict[tuple, list] = {}
    outflow: dict[tuple, list] = {}
    for kind, eid, fb, tb, phases in edges:
        gate = (lambda e=eid: V.y_line[e]) if kind == "line" else (lambda e=eid: V.y_sw[e])
        for ph in phases:
            outflow.setdefault((fb, ph), []).append((eid, ph))
            inflow.setdefault((tb, ph), []).append((eid, ph))
            for k in range(n_steps):
                g = LinExpr.of(gate()[k])
                _abs_leq(m, LinExpr.of(V.p_flow[(eid, ph)][k]),
                         bm.m_power * g, "eq42")
                _abs_leq(m, LinExpr.of(V.q_flow[(eid, ph)][k]),
                         bm.m_power * g, "eq43")

    house_at: dict[tuple, list[str]] = {}
    for hid in houses:
        h = case.houses[hid]
        house_at.setdefault((h.bus, h.phase), []).append(hid)
    pd_phase = {b.id: b.phases[max(range(len(b.phases)),
                                   key=lambda i: b.peak_load_kw[i])]
                for b in non_gei_load}
    gfl_at = {(case.ders[u.id].bus, ph): (u.id, ph)
              for u in gfl_units for ph in case.buses[u.bus].phases}
    gfm_at = {(case.ders[u.id].bus, ph): (u.id, ph)
              for u in gfm_units for ph in case.buses[u.bus].phases}

    for bus in sorted(case.buses):
        for ph in case.buses[bus].phases:
            for k in range(n_steps):
                bal_p = LinExpr()
                bal_q = LinExpr()
                for eid, eph in inflow.get((bus, ph), []):
                    bal_p = bal_p + V.p_flow[(eid, eph)][k]
                    bal_q = bal_q + V.q_flow[(eid, eph)][k]
                for eid, eph in outflow.get((bus, ph), []):
                    bal_p = bal_p - V.p_flow[(eid, eph)][k]
                    bal_q = bal_q - V.q_flow[(eid, eph)][k]
                if bus in V.p_d and pd_phase[bus] == ph:
                    bal_p = bal_p - V.p_d[bus][k]
                    bal_q = bal_q - opt.q_per_p_non_gei * V.p_d[bus][k]
                for hid in house_at.get((bus, ph), []):
                    bal_p = bal_p - (1.0 / S_BASE_KVA) * V.p_dis[hid][k]
                if (bus, ph) in gfl_at:
                    bal_p = bal_p + V.pv_x[gfl_at[(bus, ph)]][k]
                if (bus, ph) in gfm_at:
                    bal_p = bal_p + V.gfm_p[gfm_at[(bus, ph)]][k]
                    bal_q = bal_q + V.gfm_q[gfm_at[(bus, ph)]][k]
                if bus == case.tg.substation_bus:
                    bal_p = bal_p + V.p_tg[ph][k]
                    bal_q = bal_q + V.q_tg[ph][k]
                m.add_constraint(bal_p, EQUAL, 0.0, "eq44")
                m.add_constraint(bal_q, EQUAL, 0.0, "eq45")

    for bus in sorted(case.buses):
        for ph in case.buses[bus].phases:
            for k in range(n_steps):
                yb = V.y_bus[bus][k]
                v = V.v_sq[(bus, ph)][k]
                m.add_constraint(LinExpr.of(v) - opt.v_sq_lo * yb, GREATER_EQUAL,
                                 0.0, "eq46")
                m.add_constraint(LinExpr.of(v) - opt.v_sq_hi * yb, LESS_EQUAL,
                                 0.0, "eq46")

    for lid in sorted(case.lines):
        ln = case.lines[lid]
        rmat = phase_submatrix(ln, "r", ln.phases)
        xmat = phase_submatrix(ln, "x", ln.phases)
        for i, ph in enumerate(ln.phases):
            for k in range(n_steps):
                drop = LinExpr()
                for j, ph2 in enumerate(ln.phases):
                    drop = drop + 2.0 * rmat[i][j] * V.p_flow[(lid, ph2)][k] \
                        + 2.0 * xmat[i][j] * V.q_flow[(lid, ph2)][k]
                expr = V.v_sq[(ln.to_bus, ph)][k] - V.v_sq[(ln.from_bus, ph)][k] + drop
                gate = bm.m_volt * (1.0 - LinExpr.of(V.y_line[lid][k]))
                m.add_constraint(expr - gate, LESS_EQUAL, 0.0, "eq47")
                m.add_constraint(expr * -1.0 - gate, LESS_EQUAL, 0.0, "eq48")
    for sid in sorted(case.switches):
        sw = case.switches[sid]
        for ph in sw.phases:
            if (sid, ph) not in V.p_flow:
                continue
            for k in range(n_steps):
                expr = V.v_sq[(sw.to_bus, ph)][k] - V.v_sq[(sw.from_bus, ph)][k]
                gate = bm.m_volt * (1.0 - LinExpr.of(V.y_sw[sid][k]))
                m.add_constraint(expr - gate, LESS_EQUAL, 0.0, "eq47")
                m.add_constraint(expr * -1.0 - gate, LESS_EQUAL, 0.0, "eq48")

    # ---- resources -------------------------------------------------------
    for b in non_gei_load:
        peak_pu = max(b.peak_load_kw) / S_BASE_KVA
        for k in range(n_steps):
            m.add_constraint(LinExpr.of(V.p_d[b.id][k]) - peak_pu * V.y_bus[b.id][k],
                             LESS_EQUAL, 0.0, "load_gate")

    for hid in houses:
        env = envelopes[hid]
        bus = case.houses[hid].bus
        for k in range(n_steps):
            yb = V.y_bus[bus][k]
            m.add_constraint(LinExpr.of(V.p_dis[hid][k]) - env.upper_kw[k] * yb,
                             LESS_EQUAL, 0.0, "gei_dispatch")
            m.add_constraint(LinExpr.of(V.p_dis[hid][k]) - env.lower_kw[k] * yb,
                             GREATER_EQUAL, 0.0, "gei_dispatch")

    for u in gfl_units:
        nph = len(case.buses[u.bus].phases)
        for ph in case.buses[u.bus].phases:
            for k in range(n_steps):
                cap_pu = u.p_hat_kw[min(k, len(u.p_hat_kw) - 1)] / nph / S_BASE_KVA
                m.add_constraint(LinExpr.of(V.pv_x[(u.id, ph)][k])
                                 - cap_pu * V.y_bus[u.bus][k], LESS_EQUAL, 0.0,
                                 "gfl_cap")

    for u in gfm_units:
        cap = u.s_rat_kva / 3.0 / S_BASE_KVA
        denom = u.s_rat_kva * (u.d + u.k_f)
        bid = gfm_block[u.id]
        for k in range(n_steps):
            total_p = LinExpr.total([V.gfm_p[(u.id, ph)][k]
                                     for ph in case.buses[u.bus].phases])
            prev_p = LinExpr.total([V.gfm_p[(u.id, ph)][k - 1]
                                    for ph in case.buses[u.bus].phases]) \
                if k >= 1 else LinExpr(constant=prior.gfm_p_kw.get(u.id, 0.0)
                                       / S_BASE_KVA)

            # quasi-steady droop deviation, transient step metrics, recovery
            m.add_constraint(LinExpr.of(V.df_qss[u.id][k])
                             - (F_NOM * S_BASE_KVA / denom) * total_p, EQUAL, 0.0,
                             "eq19")
            _abs_leq(m, LinExpr.of(V.df_qss[u.id][k]), opt.freq_band_hz, "eq21")

            delta_p = total_p - prev_p
            m.add_constraint(LinExpr.of(V.rocof[u.id][k])
                             - (F_NOM * S_BASE_KVA / (2.0 * u.h * u.s_rat_kva)) * delta_p,
                             EQUAL, 0.0, "eq24")
            m.add_constraint(LinExpr.of(V.df_nad[u.id][k])
                             - (F_NOM * S_BASE_KVA * (1.0 + u.gamma) / denom) * delta_p,
                             EQUAL, 0.0, "eq25")
            _abs_leq(m, LinExpr.of(V.rocof[u.id][k]), opt.rocof_limit_hz_s, "eq26")
            _abs_leq(m, LinExpr.of(V.df_nad[u.id][k]), opt.nadir_limit_hz, "eq27")

            m.add_constraint(LinExpr.of(V.gfm_f[u.id][k]) + V.df_qss[u.id][k]
                             - V.s_adj[u.id][k], EQUAL, F_NOM, "eq28")
            _abs_leq(m, LinExpr.of(V.s_adj[u.id][k]),
                     opt.sync_offset_hz * LinExpr.of(V.delta[u.id][k]), "eq29")

            # stored energy tracks net output
            e_expr = LinExpr.of(V.gfm_e[u.id][k]) + dt_h * S_BASE_KVA * total_p
            if k == 0:
                m.add_constraint(e_expr, EQUAL, prior.gfm_energy_kwh[u.id], "eq22")
            else:
                m.add_constraint(e_expr - V.gfm_e[u.id][k - 1], EQUAL, 0.0, "eq22")

            # eight-sided inner approximation of the per-phase capability circle
            for ph in case.buses[u.bus].phases:
                for cn, sn in OCT_NORMALS:
                    m.add_constraint(cn * V.gfm_p[(u.id, ph)][k]
                                     + sn * V.gfm_q[(u.id, ph)][k],
                                     LESS_EQUAL, cap * OCT_APOTHEM, "eq23")
                # formed voltage sits on the reference plus a bounded trim
                vexpr = (LinExpr.of(V.v_sq[(u.bus, ph)][k]) - opt.gfm_v_ref_sq
                         - V.gfm_dv[(u.id, ph)][k])
                gate = bm.m_volt * (1.0 - LinExpr.of(V.y_bus[u.bus][k]))
                m.add_constraint(vexpr - gate, LESS_EQUAL, 0.0, "eq18")
                m.add_constraint(vexpr * -1.0 - gate, LESS_EQUAL, 0.0, "eq18")
                _abs_leq(m, LinExpr.of(V.gfm_dv[(u.id, ph)][k]), opt.dv_limit, "eq20")

            # unit frequency is the island frequency at its block
            _abs_leq(m, LinExpr.of(V.f_blk[bid][k]) - V.gfm_f[u.id][k],
                     bm.m_freq - bm.m_freq * LinExpr.of(V.y_blk[bid][k]), "freq_pin")

            # recovery offset only once some synchronizing tie has closed
            gate = LinExpr.total([V.y_sw[sid][k] for sid in ssw_ids])
            m.add_constraint(LinExpr.of(V.delta[u.id][k]) - gate, LESS_EQUAL, 0.0,
                             "sync_gate")

    # frequency agrees across every closed non-synchronizing boundary
    for sid in esw_ids:
        sw = case.switches[sid]
        bi, bj = owner[sw.from_bus], owner[sw.to_bus]
        for k in range(n_steps):
            expr = V.f_blk[bi][k] - V.f_blk[bj][k]
            gate = bm.m_freq * (1.0 - LinExpr.of(V.y_sw[sid][k]))
            m.add_constraint(expr - gate, LESS_EQUAL, 0.0, "freq_prop")
            m.add_constraint(expr * -1.0 - gate, LESS_EQUAL, 0.0, "freq_prop")

    # ---- transmission interface -----------------------------------------
    tg_bus = case.tg.substation_bus
    ss_cap = case.tg.ss_rat_kva / 3.0 / S_BASE_KVA
    for ph in case.buses[tg_bus].phases:
        for k in range(n_steps):
            avail = float(tg_avail[k])
            _abs_leq(m, LinExpr.of(V.p_tg[ph][k]), bm.m_power * avail, "tg_gate")
            _abs_leq(m, LinExpr.of(V.q_tg[ph][k]), bm.m_power * avail, "tg_gate")
            for cn, sn in OCT_NORMALS:
                m.add_constraint(cn * V.p_tg[ph][k] + sn * V.q_tg[ph][k],
                                 LESS_EQUAL, ss_cap * OCT_APOTHEM, "eq49")
            m.add_constraint(LinExpr.of(V.v_sq[(tg_bus, ph)][k]), EQUAL, avail,
                             "eq50")
    for k in range(n_steps):
        m.add_constraint(LinExpr.of(V.f_blk[tg_block][k]), EQUAL,
                         F_NOM * float(tg_avail[k]), "eq51")

    return m, V


def restoration_objective(case: GridCase, V: RestorationVars, dt_h: float,
                          options: RestorationOptions | None = None) -> LinExpr:
    """Served demand over the window, with a tiny early-closure incentive."""
    opt = options or RestorationOptions()
    obj = LinExpr()
    for bus in sorted(V.p_d):
        for v in V.p_d[bus]:
            obj = obj + dt_h * S_BASE_KVA * v
    for hid in sorted(V.p_dis):
        for v in V.p_dis[hid]:
            obj = obj + dt_h * v
    for sid in sorted(V.y_sw):
        for v in V.y_sw[sid]:
            obj = obj + opt.switch_close_reward * v
    return obj


@dataclass
class RestorationPlan:
    """Extracted window solution."""

    status: str
    objective_kwh: float
    switch_closed: dict[str, tuple[int, ...]]
    block_live: dict[str, tuple[int, ...]]
    bus_live: dict[str, tuple[int, ...]]
    house_dispatch_kw: dict[str, tuple[float, ...]]
    non_gei_served_kw: dict[str, tuple[float, ...]]
    unit_freq_hz: dict[str, tuple[float, ...]]
    unit_energy_kwh: dict[str, tuple[float, ...]]
    unit_p_kw: dict[str, tuple[float, ...]]
    block_freq_hz: dict[str, tuple[float, ...]]
    tg_import_kw: tuple[float, ...]
    sync_events: tuple[tuple[str, int], ...]
    v_sq_min: float
    v_sq_max: float
    x: tuple[float, ...]


def extract_plan(case: GridCase, V: RestorationVars, result,
                 dt_h: float) -> RestorationPlan:
    n = V.n_steps
    val = result.value

    def series(vs):
        return tuple(float(val(v)) for v in vs)

    def bin_series(vs):
        return tuple(int(round(val(v))) for v in vs)

    unit_p = {}
    for uid in sorted(V.gfm_e):
        per_k = []
        for k in range(n):
            tot = sum(val(V.gfm_p[(uid, ph)][k]) for (u2, ph) in V.gfm_p if u2 == uid)
            per_k.append(S_BASE_KVA * tot)
        unit_p[uid] = tuple(per_k)

    all_v = [val(v) for vs in V.v_sq.values() for v in vs]
    pos = [v for v in all_v if v > 1e-6]
    sync = []
    for sid in sorted(V.z_sync):
        for k in range(n):
            if val(V.z_sync[sid][k]) > 0.5:
                sync.append((sid, k))

    return RestorationPlan(
        status=result.status,
        objective_kwh=_primary_objective(V, result, dt_h),
        switch_closed={sid: bin_series(vs) for sid, vs in sorted(V.y_sw.items())},
        block_live={bid: bin_series(vs) for bid, vs in sorted(V.y_blk.items())},
        bus_live={b: bin_series(vs) for b, vs in sorted(V.y_bus.items())},
        house_dispatch_kw={h: series(vs) for h, vs in sorted(V.p_dis.items())},
        non_gei_served_kw={b: tuple(S_BASE_KVA * val(v) for v in vs)
                           for b, vs in sorted(V.p_d.items())},
        unit_freq_hz={u: series(vs) for u, vs in sorted(V.gfm_f.items())},
        unit_energy_kwh={u: series(vs) for u, vs in sorted(V.gfm_e.items())},
        unit_p_kw=unit_p,
        block_freq_hz={b: series(vs) for b, vs in sorted(V.f_blk.items())},
        tg_import_kw=tuple(S_BASE_KVA * sum(val(V.p_tg[ph][k]) for ph in V.p_tg)
                           for k in range(n)),
        sync_events=tuple(sync),
        v_sq_min=float(min(pos)) if pos else 0.0,
        v_sq_max=float(max(all_v)) if all_v else 0.0,
        x=tuple(float(v) for v in result.values),
    )


def _primary_objective(V: RestorationVars, result, dt_h: float) -> float:
    val = result.value
    total = 0.0
    for bus in V.p_d:
        total += dt_h * sum(val(v) * S_BASE_KVA for v in V.p_d[bus])
    for hid in V.p_dis:
        total += dt_h * sum(val(v) for v in V.p_dis[hid])
    return total


def solve_restoration(case: GridCase, blocks: list[BusBlock], prior: PriorState,
                      envelopes: dict[str, FlexibilityEnvelope],
                      tg_avail: tuple[int, ...], dt_h: float, n_steps: int,
                      big_m: BigMConfig | None = None,
                      options: RestorationOptions | None = None,
                      limits: SolveLimits | None = None,
                      backend: str | None = None):
    """Build, solve, and extract one window; returns (plan, model, vars, result)."""
    m, V = build_restoration_milp(case, blocks, prior, envelopes, tg_avail,
                                  dt_h, n_steps, big_m, options)
    obj = restoration_objective(case, V, dt_h, options)
    result = solve(m, obj, "max", limits, backend)
    plan = extract_plan(case, V, result, dt_h) if result.ok else None
    return plan, m, V, result


def compute_qss_frequency(unit, p_total_kw: float, sync_offset_hz: float = 0.0) -> float:
    """Droop steady-state frequency for a grid-forming unit at given output."""
    return F_NOM - F_NOM * p_total_kw / (unit.s_rat_kva * (unit.d + unit.k_f)) \
        + sync_offset_hz


def compute_rocof_and_nadir(unit, delta_p_kw: float) -> tuple[float, float]:
    """Initial frequency slope and transient dip for a step change in output."""
    rocof = F_NOM * delta_p_kw / (2.0 * unit.h * unit.s_rat_kva)
    nadir = F_NOM * delta_p_kw * (1.0 + unit.gamma) \
        / (unit.s_rat_kva * (unit.d + unit.k_f))
    return rocof, nadir


def verify_solution(case: GridCase, m: Model, V: RestorationVars, x,
                    prior: PriorState, dt_h: float, tol: float = 1e-5) -> dict:
    """Audit a solution vector: per-tag residuals plus direct re-derivations."""
    tag_report = m.report_by_tag(list(x), tol=tol)
    derived = []

    def xv(var):
        return float(x[var.index])

    for uid in sorted(V.gfm_e):
        unit = case.ders[uid]
        phases = sorted(ph for (u2, ph) in V.gfm_p if u2 == uid)
        e_prev = prior.gfm_energy_kwh[uid]
        p_prev = prior.gfm_p_kw.get(uid, 0.0)
        for k in range(V.n_steps):
            p_tot = S_BASE_KVA * sum(xv(V.gfm_p[(uid, ph)][k]) for ph in phases)
            f_expect = compute_qss_frequency(unit, p_tot, xv(V.s_adj[uid][k]))
            if abs(f_expect - xv(V.gfm_f[uid][k])) > tol:
                derived.append(f"{uid} step {k}: droop frequency mismatch "
                               f"{xv(V.gfm_f[uid][k]):.6f} vs {f_expect:.6f}")
            rc, nad = compute_rocof_and_nadir(unit, p_tot - p_prev)
            if abs(rc - xv(V.rocof[uid][k])) > tol:
                derived.append(f"{uid} step {k}: slope metric mismatch")
            if abs(nad - xv(V.df_nad[uid][k])) > tol:
                derived.append(f"{uid} step {k}: dip metric mismatch")
            e_expect = e_prev - dt_h * p_tot
            if abs(e_expect - xv(V.gfm_e[uid][k])) > tol:
                derived.append(f"{uid} step {k}: energy recursion mismatch")
            cap = unit.s_rat_kva / 3.0 / S_BASE_KVA
            for ph in phases:
                mag = math.hypot(xv(V.gfm_p[(uid, ph)][k]), xv(V.gfm_q[(uid, ph)][k]))
                if mag > cap + tol:
                    derived.append(f"{uid} step {k} phase {ph}: capability circle "
                                   f"exceeded ({mag:.6f} > {cap:.6f})")
            e_prev = xv(V.gfm_e[uid][k])
            p_prev = p_tot

    bad_tags = {t: r for t, r in tag_report.items() if not r["ok"]}
    return {
        "ok": not bad_tags and not derived,
        "tags": tag_report,
        "failed_tags": sorted(bad_tags),
        "derived_problems": derived,
    }
