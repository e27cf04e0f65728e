"""Figures rendered from a finished run's delimited output.

Everything is read back from the run directory, never from live objects, so
reports can be regenerated long after the run.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from flexstart.runio import read_json, read_timeseries  # noqa: E402

FIG_SIZE = (10.0, 6.0)
DPI = 130


def _fig_dir(run_dir: str) -> str:
    d = os.path.join(run_dir, "figures")
    os.makedirs(d, exist_ok=True)
    return d


def render_timeline(run_dir: str) -> str:
    summary = read_json(os.path.join(run_dir, "summary.json"))
    header, rows = read_timeseries(os.path.join(run_dir, "timeseries", "blocks.csv"))
    ci, bi, li = header.index("clock_h"), header.index("block"), header.index("live")
    live: dict[str, list[tuple[float, int]]] = {}
    for r in rows:
        live.setdefault(r[bi], []).append((float(r[ci]), int(r[li])))

    clocks = summary["clock_by_step"]
    fig, axes = plt.subplots(3, 1, figsize=(FIG_SIZE[0], 9.0), sharex=True,
                             gridspec_kw={"height_ratios": [2, 2, 1.2]})

    blocks = sorted(live, key=lambda b: (len(b), b))
    for i, bid in enumerate(blocks):
        for t, on in live[bid]:
            if on:
                axes[0].barh(i, summary["config"]["dt_h"], left=t, height=0.62,
                             color="#2a7f3f", edgecolor="none")
    axes[0].set_yticks(range(len(blocks)), blocks)
    axes[0].set_ylabel("block")
    axes[0].set_title(f"energization timeline ({summary['case']})")
    for ev in summary.get("sync_events", []):
        axes[0].axvline(ev["clock_h"], color="#b03030", ls="--", lw=1.2)
        axes[0].text(ev["clock_h"], len(blocks) - 0.4, f" {ev['switch']}",
                     color="#b03030", fontsize=8)

    axes[1].stackplot(clocks, summary["non_gei_served_kw_by_step"],
                      summary["house_served_kw_by_step"],
                      labels=["feeder load", "house end use"],
                      colors=["#4878a8", "#e0a030"])
    axes[1].set_ylabel("restored kW")
    axes[1].legend(loc="upper left", fontsize=8)

    axes[2].step(clocks, summary["houses_restored_by_step"], where="post",
                 color="#333333")
    axes[2].set_ylabel("customers")
    axes[2].set_xlabel("hour of day")
    fig.tight_layout()
    path = os.path.join(_fig_dir(run_dir), "timeline.png")
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def render_frequency(run_dir: str) -> str:
    header, rows = read_timeseries(os.path.join(run_dir, "timeseries", "units.csv"))
    ci = header.index("clock_h")
    ui = header.index("unit")
    units = sorted({r[ui] for r in rows})
    fig, axes = plt.subplots(3, 1, figsize=(FIG_SIZE[0], 8.0), sharex=True)
    for stream, ax, label in (("freq_hz", axes[0], "frequency Hz"),
                              ("p_kw", axes[1], "output kW"),
                              ("energy_kwh", axes[2], "stored kWh")):
        si = header.index(stream)
        for uid in units:
            xs = [float(r[ci]) for r in rows if r[ui] == uid]
            ys = [float(r[si]) for r in rows if r[ui] == uid]
            ax.plot(xs, ys, marker="o", ms=3, label=uid)
        ax.set_ylabel(label)
        ax.legend(fontsize=8)
    axes[0].axhline(60.0, color="#888888", lw=0.8)
    axes[0].axhline(59.5, color="#b03030", lw=0.8, ls=":")
    axes[0].axhline(60.5, color="#b03030", lw=0.8, ls=":")
    axes[2].set_xlabel("hour of day")
    fig.tight_layout()
    path = os.path.join(_fig_dir(run_dir), "grid_forming_units.png")
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def render_houses(run_dir: str) -> str:
    header, rows = read_timeseries(os.path.join(run_dir, "timeseries",
                                                "house_states.csv"))
    ci, ti, ei = (header.index("clock_h"), header.index("t_room_degc"),
                  header.index("e_es_kwh"))
    by_clock: dict[float, list[tuple[float, float]]] = {}
    for r in rows:
        by_clock.setdefault(float(r[ci]), []).append((float(r[ti]), float(r[ei])))
    clocks = sorted(by_clock)
    t_min = [min(v[0] for v in by_clock[c]) for c in clocks]
    t_max = [max(v[0] for v in by_clock[c]) for c in clocks]
    t_avg = [sum(v[0] for v in by_clock[c]) / len(by_clock[c]) for c in clocks]
    e_tot = [sum(v[1] for v in by_clock[c]) for c in clocks]

    fig, axes = plt.subplots(2, 1, figsize=FIG_SIZE, sharex=True)
    axes[0].fill_between(clocks, t_min, t_max, color="#4878a8", alpha=0.25,
                         label="fleet range")
    axes[0].plot(clocks, t_avg, color="#4878a8", label="fleet mean")
    axes[0].set_ylabel("room temperature C")
    axes[0].legend(fontsize=8)
    axes[1].plot(clocks, e_tot, color="#e0a030")
    axes[1].set_ylabel("fleet stored kWh")
    axes[1].set_xlabel("hour of day")
    fig.tight_layout()
    path = os.path.join(_fig_dir(run_dir), "house_fleet.png")
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def render_run_figures(run_dir: str) -> list[str]:
    """All standard per-run figures; returns the file paths."""
    return [render_timeline(run_dir), render_frequency(run_dir),
            render_houses(run_dir)]


def render_sweep_figure(sweep_dir: str, summaries: list[dict]) -> str:
    """Cross-fraction comparison for a sweep of runs."""
    fracs = [s["config"]["gei_fraction"] for s in summaries]
    rlh = [s["restored_load_hours"] for s in summaries]
    final_rest = [s["houses_restored_by_step"][-1] if s["houses_restored_by_step"]
                  else 0 for s in summaries]

    fig, axes = plt.subplots(1, 2, figsize=FIG_SIZE)
    axes[0].plot(fracs, rlh, marker="o", color="#2a7f3f")
    axes[0].set_xlabel("flexible-house fraction")
    axes[0].set_ylabel("restored load (kWh)")
    axes[1].plot(fracs, final_rest, marker="s", color="#4878a8")
    axes[1].set_xlabel("flexible-house fraction")
    axes[1].set_ylabel("customers restored at end")
    fig.tight_layout()
    os.makedirs(sweep_dir, exist_ok=True)
    path = os.path.join(sweep_dir, "sweep_comparison.png")
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path
