"""Command line front end.

Exit codes: 0 success, 1 operational failure (infeasible window, failed
verification, missing artifacts), 2 bad usage.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from flexstart.coordinator import ScenarioConfig, run_scenario
from flexstart.house import FlexibilityEnvelope, estimate_flexibility_envelope
from flexstart.ieee123 import build_case, house_forecast_window, initial_house_state
from flexstart.network import derive_bus_blocks, dump_case_json, case_summary
from flexstart.restoration import (PriorState, RestorationOptions,
                                   build_restoration_milp, verify_solution)
from flexstart.runio import read_json, write_json

logger = logging.getLogger("flexstart")


def _add_case_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--gei-fraction", type=float, default=0.4,
                   help="share of load buses with a controllable house")


def _add_run_args(p: argparse.ArgumentParser) -> None:
    _add_case_args(p)
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--horizon", type=int, default=8, help="lookahead steps")
    p.add_argument("--start", type=float, default=9.0)
    p.add_argument("--end", type=float, default=12.0)
    p.add_argument("--dt", type=float, default=0.25)
    p.add_argument("--time-limit", type=float, default=60.0,
                   help="per-window solver budget, seconds")
    p.add_argument("--gap", type=float, default=2e-3)
    p.add_argument("--backend", default=None)
    p.add_argument("--override", action="append", default=[], metavar="K=V",
                   help="tweak a planner option, e.g. freq_band_hz=0.3")
    p.add_argument("--figures", action="store_true",
                   help="render figures when the run finishes")


def _options_from_overrides(pairs: list[str]) -> RestorationOptions:
    opts = RestorationOptions()
    fields = opts.to_dict()
    for pair in pairs:
        if "=" not in pair:
            raise SystemExit(f"bad --override {pair!r}, expected K=V")
        key, raw = pair.split("=", 1)
        if key not in fields:
            raise SystemExit(
                f"unknown option {key!r}; choices: {', '.join(sorted(fields))}")
        fields[key] = type(fields[key])(float(raw))
    return RestorationOptions.from_dict(fields)


def _config_from_args(args) -> ScenarioConfig:
    return ScenarioConfig(
        seed=args.seed, gei_fraction=args.gei_fraction, n_horizon=args.horizon,
        dt_h=args.dt, start_h=args.start, end_h=args.end, run_dir=args.out,
        time_limit_s=args.time_limit, mip_gap=args.gap, backend=args.backend,
        options=_options_from_overrides(args.override))


def cmd_run(args) -> int:
    summary = run_scenario(_config_from_args(args))
    if args.figures:
        from flexstart import report
        for path in report.render_run_figures(args.out):
            print(path)
    print(json.dumps({
        "run_dir": args.out,
        "restored_load_hours": summary["restored_load_hours"],
        "houses_restored_final": summary["houses_restored_by_step"][-1],
        "fallback_windows": len(summary["fallback_events"]),
        "wall_time_s": summary["wall_time_s"],
    }, indent=2))
    return 1 if summary["fallback_events"] else 0


def cmd_flex(args) -> int:
    case = build_case(seed=args.seed, gei_fraction=args.gei_fraction)
    if args.house not in case.houses:
        have = ", ".join(sorted(case.houses))
        print(f"no house {args.house!r}; have: {have}", file=sys.stderr)
        return 1
    house = case.houses[args.house]
    fc = house_forecast_window(case, args.house, args.clock, args.steps)
    env = estimate_flexibility_envelope(
        house, fc, initial_house_state(case, args.house), args.dt,
        backend=args.backend)
    print("step,lower_kW,upper_kW")
    for k in range(len(env.lower_kw)):
        print(f"{k},{env.lower_kw[k]:.6f},{env.upper_kw[k]:.6f}")
    return 0


def _verify_one(case, blocks, doc, tol: float) -> dict:
    prior = PriorState.from_dict(doc["prior"])
    envelopes = {
        hid: FlexibilityEnvelope(
            lower_kw=tuple(e["lower_kw"]), upper_kw=tuple(e["upper_kw"]),
            horizon_start_h=doc["clock_h"], dt_h=doc["dt_h"])
        for hid, e in doc["envelopes"].items()}
    model, mvars = build_restoration_milp(
        case, blocks, prior, envelopes, list(doc["tg_avail"]), doc["dt_h"],
        doc["n_steps"], options=RestorationOptions.from_dict(doc["options"]))
    x = np.asarray(doc["x"], dtype=float)
    if x.size != model.num_vars:
        return {"ok": False, "failed_tags": [],
                "derived_problems": [f"stored point has {x.size} values, "
                                     f"model has {model.num_vars} variables"]}
    return verify_solution(case, model, mvars, x, prior, doc["dt_h"], tol=tol)


def cmd_verify(args) -> int:
    cfg_doc = read_json(os.path.join(args.run_dir, "config.json"))
    case = build_case(seed=cfg_doc["seed"], gei_fraction=cfg_doc["gei_fraction"])
    blocks = derive_bus_blocks(case)
    pattern = os.path.join(args.run_dir, "solutions", "step_*", "solution.json")
    paths = sorted(glob.glob(pattern))
    if args.step is not None:
        paths = [p for p in paths if f"step_{args.step:02d}" in p]
    if not paths:
        print("no stored solutions to verify", file=sys.stderr)
        return 1

    bad = 0
    for path in paths:
        doc = read_json(path)
        rep = _verify_one(case, blocks, doc, args.tol)
        step = os.path.basename(os.path.dirname(path))
        if rep["ok"]:
            n = len(rep.get("tags", {}))
            print(f"{step}: ok ({n} constraint families, clock {doc['clock_h']:.2f})")
        else:
            bad += 1
            print(f"{step}: FAILED")
            for tag in rep["failed_tags"]:
                info = rep["tags"][tag]
                print(f"  {tag}: max violation {info['max_violation']:.3e} "
                      f"over {info['rows']} rows")
            for prob in rep["derived_problems"]:
                print(f"  {prob}")
    print(f"{len(paths) - bad}/{len(paths)} windows verified")
    return 1 if bad else 0


def cmd_gen_ieee123(args) -> int:
    case = build_case(seed=args.seed, gei_fraction=args.gei_fraction)
    if args.out:
        dump_case_json(case, args.out)
        print(args.out)
    else:
        print(json.dumps(case_summary(case), indent=2))
    return 0


def cmd_sweep(args) -> int:
    fractions = [float(f) for f in args.fractions.split(",")]
    summaries, failures = [], 0
    for frac in fractions:
        sub = os.path.join(args.out, f"gei_{frac:.2f}")
        cfg = _config_from_args(args)
        cfg.gei_fraction = frac
        cfg.run_dir = sub
        logger.info("sweep: fraction %.2f -> %s", frac, sub)
        summary = run_scenario(cfg)
        summaries.append(summary)
        failures += len(summary["fallback_events"])
        print(f"gei={frac:.2f} restored_load_hours="
              f"{summary['restored_load_hours']:.3f} "
              f"houses={summary['houses_restored_by_step'][-1]}")
    write_json(os.path.join(args.out, "sweep.json"), {
        "fractions": fractions,
        "restored_load_hours": [s["restored_load_hours"] for s in summaries],
        "houses_restored_final": [s["houses_restored_by_step"][-1]
                                  for s in summaries],
        "run_dirs": [os.path.join(args.out, f"gei_{f:.2f}") for f in fractions],
    })
    from flexstart import report
    print(report.render_sweep_figure(args.out, summaries))
    return 1 if failures else 0


def cmd_report(args) -> int:
    if not os.path.exists(os.path.join(args.run_dir, "summary.json")):
        print(f"{args.run_dir} has no summary.json", file=sys.stderr)
        return 1
    from flexstart import report
    for path in report.render_run_figures(args.run_dir):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexstart",
        description="feeder black-start planning with house-level flexibility")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one restoration scenario")
    _add_run_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("flex", help="print one house's flexibility envelope")
    _add_case_args(p)
    p.add_argument("--house", required=True)
    p.add_argument("--clock", type=float, default=9.0)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--dt", type=float, default=0.25)
    p.add_argument("--backend", default=None)
    p.set_defaults(func=cmd_flex)

    p = sub.add_parser("verify", help="re-audit a run's stored solutions")
    p.add_argument("run_dir")
    p.add_argument("--step", type=int, default=None)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-ieee123", help="emit the synthesized feeder case")
    _add_case_args(p)
    p.add_argument("--out", default=None, help="write JSON here; default prints "
                   "a summary")
    p.set_defaults(func=cmd_gen_ieee123)

    p = sub.add_parser("sweep", help="run several flexibility fractions")
    _add_run_args(p)
    p.add_argument("--fractions", default="0.15,0.4,0.7,1.0")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render figures for a finished run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
