"""Command-line entry point: ``gridadapt run|suite|plot|validate-feeder``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .grid_model import RadialityViolation, apply_delta, load_feeder, validate_radial
from .harness import (
    ConfigError,
    EstimatorMode,
    ScenarioConfig,
    TrajectoryAborted,
    format_report,
    read_trace,
    run_suite,
    run_trajectory,
)


def _load_config(path: str) -> ScenarioConfig:
    try:
        return ScenarioConfig.from_json(path)
    except (ConfigError, TypeError) as exc:
        raise SystemExit(f"invalid config {path}: {exc}")


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    try:
        metrics, trace = run_trajectory(cfg, args.seed, keep_trace=True)
    except TrajectoryAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or f"trace_seed{args.seed}.csv")
    trace.to_csv(out)
    print(json.dumps(asdict(metrics), indent=1))
    print(f"trace written to {out}", file=sys.stderr)
    return 0


def cmd_suite(args) -> int:
    cfg = _load_config(args.config)
    modes = args.modes or [cfg.estimator_mode]
    for m in modes:
        EstimatorMode(m)
    report = run_suite(cfg, args.n, args.out, modes=modes)
    print(format_report(report, cfg))
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    tr = read_trace(args.trace)
    mag = np.sqrt(np.maximum(tr["v"], 0.0))  # traces hold squared magnitudes
    buses = args.buses or list(range(1, mag.shape[1] + 1))
    fig, ax = plt.subplots(figsize=(8, 4))
    for b in buses:
        ax.plot(tr["step"], mag[:, b - 1], lw=0.8, label=f"bus {b}")
    ax.axhline(1.05, color="k", ls="--", lw=0.6)
    ax.axhline(0.95, color="k", ls="--", lw=0.6)
    for t, f in zip(tr["step"], tr["flags"]):
        if "topology_event" in f:
            ax.axvline(t, color="tab:red", lw=0.6, alpha=0.6)
    ax.set_xlabel("step")
    ax.set_ylabel("voltage magnitude (p.u.)")
    if len(buses) <= 12:
        ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    out = Path(args.out or Path(args.trace).with_suffix(".svg"))
    fig.savefig(out, format="svg")
    plt.close(fig)
    print(out)
    return 0


def cmd_validate_feeder(args) -> int:
    try:
        feeder = load_feeder(args.file)
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot read feeder: {exc}", file=sys.stderr)
        return 1
    net = feeder.network
    problems = []
    if not validate_radial(net):
        problems.append("network is not radial")
    bad_ctrl = [b for b in feeder.controlled if not 1 <= b <= net.N]
    if bad_ctrl:
        problems.append(f"controlled buses out of range: {bad_ctrl}")
    for k, delta in enumerate(feeder.reconfig_menu):
        try:
            apply_delta(net, delta)
        except (RadialityViolation, KeyError, ValueError) as exc:
            problems.append(f"reconfiguration {k + 1}: {exc}")
    print(f"{net.name or args.file}: {net.n_buses} buses, {len(net.lines)} lines, "
          f"{len(feeder.controlled)} controllers, {len(feeder.reconfig_menu)} reconfigurations")
    for p in problems:
        print(f"  error: {p}")
    print("ok" if not problems else "invalid")
    return 0 if not problems else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridadapt", description="Topology-aware volt-var control experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one trajectory and write its trace CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="trace CSV path (default trace_seed<n>.csv)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("suite", help="run many seeds and write summary tables")
    p.add_argument("--config", required=True)
    p.add_argument("--n", type=int, default=None, help="trajectories per mode (default from config)")
    p.add_argument("--out", default=None, help="output directory for runs.csv / summary.csv / summary.txt")
    p.add_argument("--modes", nargs="+", choices=[m.value for m in EstimatorMode])
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("plot", help="SVG chart of voltage magnitudes from a trace CSV")
    p.add_argument("--trace", required=True)
    p.add_argument("--out")
    p.add_argument("--buses", type=int, nargs="+")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("validate-feeder", help="check a feeder JSON file")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate_feeder)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
