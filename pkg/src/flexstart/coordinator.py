"""Receding-horizon co-simulation: grid window solves driving house plants.

Each iteration publishes house envelopes, solves the network window, sends
dispatch to connected houses, applies the first step everywhere, and rolls
the clock. The plant uses the same discrete dynamics as the optimizers, so
a feasible plan replays exactly; an infeasible window holds the previous
switch state and logs the event instead of dying.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

from flexstart.house import (
    DispatchSignal,
    estimate_flexibility_envelope,
    optimize_house,
    realized_house_load_kw,
    step_house_state,
)
from flexstart.ieee123 import build_case, house_forecast_window, initial_house_state
from flexstart.milp import SolveLimits
from flexstart.network import GridCase, block_of_bus, derive_bus_blocks
from flexstart.restoration import (
    PriorState,
    RestorationOptions,
    initial_prior,
    solve_restoration,
    tg_availability,
)
from flexstart.runio import (
    TimeseriesWriter,
    dispatch_message,
    flex_message,
    step_dir,
    write_json,
    write_message,
)

logger = logging.getLogger(__name__)


@dataclass
class ScenarioConfig:
    """One co-simulation run."""

    seed: int = 1
    gei_fraction: float = 0.4
    n_horizon: int = 8
    dt_h: float = 0.25
    start_h: float = 9.0
    end_h: float = 12.0
    run_dir: str = "runs/scenario"
    time_limit_s: float | None = 60.0
    mip_gap: float | None = 2e-3
    backend: str | None = None
    options: RestorationOptions = field(default_factory=RestorationOptions)
    write_artifacts: bool = True

    @property
    def n_iterations(self) -> int:
        return int(round((self.end_h - self.start_h) / self.dt_h))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "gei_fraction": self.gei_fraction,
            "n_horizon": self.n_horizon,
            "dt_h": self.dt_h,
            "start_h": self.start_h,
            "end_h": self.end_h,
            "run_dir": self.run_dir,
            "time_limit_s": self.time_limit_s,
            "mip_gap": self.mip_gap,
            "backend": self.backend,
            "options": self.options.to_dict(),
        }


def run_scenario(cfg: ScenarioConfig, case: GridCase | None = None) -> dict:
    """Execute the full horizon; returns the summary (also written to disk)."""
    t_start = time.time()
    case = case if case is not None else build_case(cfg.seed, cfg.gei_fraction)
    blocks = derive_bus_blocks(case)
    owner = block_of_bus(blocks)
    tg_block = owner[case.tg.substation_bus]
    prior = initial_prior(case, blocks)
    prior.clock_h = cfg.start_h
    house_ids = sorted(case.houses)
    house_states = {hid: initial_house_state(case, hid) for hid in house_ids}
    limits = SolveLimits(time_limit_s=cfg.time_limit_s, mip_gap=cfg.mip_gap)

    ts = TimeseriesWriter(cfg.run_dir)
    for hid in house_ids:
        st = house_states[hid]
        ts.add("house_states",
               ("clock_h", "house", "t_room_degc", "e_es_kwh", "connected"),
               (cfg.start_h, hid, st.t_room_degc, st.e_es_kwh, st.connected))

    summary: dict = {
        "config": cfg.to_dict(),
        "case": case.name,
        "n_houses": len(house_ids),
        "restored_kw_by_step": [],
        "non_gei_served_kw_by_step": [],
        "house_served_kw_by_step": [],
        "houses_restored_by_step": [],
        "clock_by_step": [],
        "block_energization_h": {b.id: None for b in blocks},
        "switch_close_h": {s: None for s in sorted(case.switches)},
        "sync_events": [],
        "fallback_events": [],
        "freq_min_hz": math.inf,
        "freq_max_hz": -math.inf,
        "v_sq_min": math.inf,
        "v_sq_max": -math.inf,
        "tg_import_kwh": 0.0,
        "solver": {"statuses": [], "objectives_kwh": [], "wall_s": []},
    }
    for b in blocks:
        if prior.block_live.get(b.id, 0):
            summary["block_energization_h"][b.id] = cfg.start_h

    non_gei = sorted(b.id for b in case.buses.values()
                     if not b.has_gei and any(p > 0 for p in b.peak_load_kw))
    peaks = {bid: max(case.buses[bid].peak_load_kw) for bid in non_gei}

    for it in range(cfg.n_iterations):
        clock = cfg.start_h + it * cfg.dt_h
        tga = tg_availability(case, clock, cfg.n_horizon, cfg.dt_h)

        # the transmission side re-energizes on its own schedule
        prior.block_live[tg_block] = tga[0]
        if tga[0] and summary["block_energization_h"][tg_block] is None:
            summary["block_energization_h"][tg_block] = clock

        envelopes = {}
        for hid in house_ids:
            fc = house_forecast_window(case, hid, clock, cfg.n_horizon)
            envelopes[hid] = estimate_flexibility_envelope(
                case.houses[hid], fc, house_states[hid], cfg.dt_h,
                backend=cfg.backend)
            if cfg.write_artifacts:
                write_message(
                    f"{step_dir(cfg.run_dir, 'messages', it)}/flex_{hid}.json",
                    flex_message(hid, envelopes[hid]))

        t0 = time.time()
        plan, model, mvars, result = solve_restoration(
            case, blocks, prior, envelopes, tga, cfg.dt_h, cfg.n_horizon,
            options=cfg.options, limits=limits, backend=cfg.backend)
        wall = time.time() - t0
        summary["solver"]["statuses"].append(result.status)
        summary["solver"]["wall_s"].append(round(wall, 3))
        summary["solver"]["objectives_kwh"].append(
            plan.objective_kwh if plan else None)

        if plan is None:
            summary["fallback_events"].append(
                {"clock_h": clock, "status": result.status})
            logger.warning("window at %.2f h %s; holding state", clock, result.status)
            _apply_fallback(cfg, case, it, clock, prior, house_states, house_ids,
                            ts, summary)
            continue

        if cfg.write_artifacts:
            write_json(f"{step_dir(cfg.run_dir, 'solutions', it)}/solution.json", {
                "clock_h": clock,
                "dt_h": cfg.dt_h,
                "n_steps": cfg.n_horizon,
                "status": result.status,
                "objective_kwh": plan.objective_kwh,
                "gap": result.gap,
                "tg_avail": list(tga),
                "prior": prior.to_dict(),
                "envelopes": {hid: {"lower_kw": list(envelopes[hid].lower_kw),
                                    "upper_kw": list(envelopes[hid].upper_kw)}
                              for hid in house_ids},
                "options": cfg.options.to_dict(),
                "sync_events": [list(e) for e in plan.sync_events],
                "x": list(plan.x),
            })

        connected = {hid: plan.bus_live[case.houses[hid].bus][0] == 1
                     for hid in house_ids}
        dispatches: dict[str, DispatchSignal] = {}
        for hid in house_ids:
            if not connected[hid]:
                continue
            sig = DispatchSignal(p_ref_kw=plan.house_dispatch_kw[hid],
                                 horizon_start_h=clock, dt_h=cfg.dt_h)
            dispatches[hid] = sig
            if cfg.write_artifacts:
                write_message(
                    f"{step_dir(cfg.run_dir, 'messages', it)}/dispatch_{hid}.json",
                    dispatch_message(hid, sig.p_ref_kw, clock, cfg.dt_h))

        served_houses_kw = _advance_houses(cfg, case, it, clock, house_states,
                                           dispatches, connected, house_ids, ts)

        # applied network metrics come from the window's first step
        served_non_gei = sum(plan.non_gei_served_kw[b][0]
                             for b in plan.non_gei_served_kw)
        n_restored = sum(1 for hid in house_ids if connected[hid])
        for bid in non_gei:
            if plan.non_gei_served_kw.get(bid, (0.0,))[0] >= 0.5 * peaks[bid] - 1e-6:
                n_restored += 1
        restored_kw = served_non_gei + served_houses_kw
        summary["clock_by_step"].append(clock)
        summary["restored_kw_by_step"].append(round(restored_kw, 6))
        summary["non_gei_served_kw_by_step"].append(round(served_non_gei, 6))
        summary["house_served_kw_by_step"].append(round(served_houses_kw, 6))
        summary["houses_restored_by_step"].append(n_restored)
        summary["tg_import_kwh"] += cfg.dt_h * plan.tg_import_kw[0]

        for sid, series in plan.switch_closed.items():
            if series[0] and summary["switch_close_h"][sid] is None:
                summary["switch_close_h"][sid] = clock
            ts.add("switches", ("clock_h", "switch", "closed"),
                   (clock, sid, series[0]))
        for bid, series in plan.block_live.items():
            live0 = series[0]
            if live0 and summary["block_energization_h"][bid] is None:
                summary["block_energization_h"][bid] = clock
            f0 = plan.block_freq_hz[bid][0]
            ts.add("blocks", ("clock_h", "block", "live", "freq_hz"),
                   (clock, bid, live0, f0 if live0 else ""))
            if live0:
                summary["freq_min_hz"] = min(summary["freq_min_hz"], f0)
                summary["freq_max_hz"] = max(summary["freq_max_hz"], f0)
        for sid, k in plan.sync_events:
            if k == 0:
                summary["sync_events"].append({"clock_h": clock, "switch": sid})
        for uid in sorted(plan.unit_p_kw):
            ts.add("units", ("clock_h", "unit", "p_kw", "energy_kwh", "freq_hz"),
                   (clock, uid, plan.unit_p_kw[uid][0],
                    plan.unit_energy_kwh[uid][0], plan.unit_freq_hz[uid][0]))
        for bid in non_gei:
            ts.add("service", ("clock_h", "bus", "served_kw", "peak_kw"),
                   (clock, bid, plan.non_gei_served_kw.get(bid, (0.0,))[0],
                    peaks[bid]))
        ts.add("tg", ("clock_h", "available", "import_kw"),
               (clock, tga[0], plan.tg_import_kw[0]))
        for (bus, ph), vs in mvars.v_sq.items():
            if plan.bus_live[bus][0]:
                v0 = plan.x[vs[0].index]
                summary["v_sq_min"] = min(summary["v_sq_min"], v0)
                summary["v_sq_max"] = max(summary["v_sq_max"], v0)

        # roll the applied state forward
        prior = PriorState(
            clock_h=clock + cfg.dt_h,
            switch_closed={sid: plan.switch_closed[sid][0]
                           for sid in plan.switch_closed},
            block_live={bid: plan.block_live[bid][0] for bid in plan.block_live},
            gfm_energy_kwh={uid: plan.unit_energy_kwh[uid][0]
                            for uid in plan.unit_energy_kwh},
            gfm_p_kw={uid: plan.unit_p_kw[uid][0] for uid in plan.unit_p_kw},
        )

    summary["restored_load_hours"] = round(
        cfg.dt_h * sum(summary["restored_kw_by_step"]), 6)
    summary["final"] = {
        "clock_h": cfg.end_h,
        "switch_closed": dict(prior.switch_closed),
        "block_live": dict(prior.block_live),
        "gfm_energy_kwh": {u: round(e, 6) for u, e in prior.gfm_energy_kwh.items()},
        "house_connected": {hid: house_states[hid].connected for hid in house_ids},
    }
    if math.isinf(summary["freq_min_hz"]):
        summary["freq_min_hz"] = None
        summary["freq_max_hz"] = None
    if math.isinf(summary["v_sq_min"]):
        summary["v_sq_min"] = None
        summary["v_sq_max"] = None
    summary["wall_time_s"] = round(time.time() - t_start, 3)

    if cfg.write_artifacts:
        ts.flush()
        write_json(f"{cfg.run_dir}/summary.json", summary)
        write_json(f"{cfg.run_dir}/config.json", cfg.to_dict())
    return summary


def _advance_houses(cfg, case, it, clock, house_states, dispatches, connected,
                    house_ids, ts) -> float:
    """Solve and step every house plant; returns end-use power served now."""
    served_kw = 0.0
    for hid in house_ids:
        fc = house_forecast_window(case, hid, clock, cfg.n_horizon)
        before = house_states[hid]
        dec = optimize_house(case.houses[hid], fc, before, cfg.dt_h,
                             dispatches.get(hid), backend=cfg.backend)
        new_state = step_house_state(case.houses[hid], before, dec, fc,
                                     cfg.dt_h, connected=connected[hid])
        house_states[hid] = new_state
        if connected[hid]:
            served_kw += realized_house_load_kw(dec, fc, 0)
        ref = dispatches[hid].p_ref_kw[0] if hid in dispatches else ""
        resid = dec.tracking_residual_kw[0] if dec.tracking_residual_kw else ""
        ts.add("houses",
               ("clock_h", "house", "connected", "p_gei_kw", "p_ref_kw",
                "residual_kw", "p_hvac_kw", "x_load", "x_pv", "p_es_c_kw",
                "p_es_d_kw"),
               (clock, hid, connected[hid], dec.p_gei_kw[0], ref, resid,
                dec.p_hvac_kw[0], dec.x_load[0], dec.x_pv[0], dec.p_es_c_kw[0],
                dec.p_es_d_kw[0]))
        ts.add("house_states",
               ("clock_h", "house", "t_room_degc", "e_es_kwh", "connected"),
               (clock + cfg.dt_h, hid, new_state.t_room_degc, new_state.e_es_kwh,
                new_state.connected))
        if cfg.write_artifacts:
            write_json(f"{step_dir(cfg.run_dir, 'houses', it)}/decision_{hid}.json", {
                "clock_h": clock,
                "house": hid,
                "connected": connected[hid],
                "status": dec.status,
                "p_gei_kw": list(dec.p_gei_kw),
                "q_hvac_kw": list(dec.q_hvac_kw),
                "p_hvac_kw": list(dec.p_hvac_kw),
                "p_es_c_kw": list(dec.p_es_c_kw),
                "p_es_d_kw": list(dec.p_es_d_kw),
                "x_pv": list(dec.x_pv),
                "x_load": list(dec.x_load),
                "t_room_plan_degc": list(dec.t_hvac_degc),
                "tracking_residual_kw": list(dec.tracking_residual_kw)
                if dec.tracking_residual_kw else None,
                "state_before": {
                    "t_wall_degc": list(before.t_wall_degc),
                    "t_room_degc": before.t_room_degc,
                    "e_es_kwh": before.e_es_kwh,
                },
                "state_after": {
                    "t_wall_degc": list(new_state.t_wall_degc),
                    "t_room_degc": new_state.t_room_degc,
                    "e_es_kwh": new_state.e_es_kwh,
                },
            })
    return served_kw


def _apply_fallback(cfg, case, it, clock, prior, house_states,
                    house_ids, ts, summary) -> None:
    """Hold the previous applied state through one failed window."""
    connected = {hid: house_states[hid].connected for hid in house_ids}
    served_kw = _advance_houses(cfg, case, it, clock, house_states, {},
                                connected, house_ids, ts)
    summary["clock_by_step"].append(clock)
    summary["restored_kw_by_step"].append(round(served_kw, 6))
    summary["non_gei_served_kw_by_step"].append(0.0)
    summary["house_served_kw_by_step"].append(round(served_kw, 6))
    summary["houses_restored_by_step"].append(
        sum(1 for hid in house_ids if connected[hid]))
    for uid in list(prior.gfm_energy_kwh):
        drained = prior.gfm_energy_kwh[uid] - cfg.dt_h * prior.gfm_p_kw.get(uid, 0.0)
        cap = case.ders[uid].e_cap_kwh
        prior.gfm_energy_kwh[uid] = min(max(drained, 0.0), cap)
    prior.clock_h = clock + cfg.dt_h
