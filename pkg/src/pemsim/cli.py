"""Command line entry point: ``pemsim VERB [options]``."""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import metrics as mx
from .scenario import ScenarioError, build_params, load
from .simulation import SimulationError, group_model, run_scenario


def _print_rows(rows, out=None):
    out = out or sys.stdout
    width = max((len(k) for k, _ in rows), default=0)
    for key, value in rows:
        if isinstance(value, float):
            value = f"{value:.6g}"
        print(f"{key:<{width}}  {value}", file=out)


def _groups(data, seed):
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[0])
    _, specs = build_params(data, rng)
    est = data.get("estimator", {})
    return [group_model(g, int(est.get("n_bins", 20)), float(est.get("dt", 60.0)),
                        float(data.get("device_dt", 1.0))) for g in specs]


def cmd_validate(args):
    data = load(args.scenario)
    n = sum(g["count"] for g in data["fleet"]["groups"])
    print(f"ok: {data['name']} ({n} devices, {data['duration']:g} s)")
    return 0


def cmd_run(args):
    data = load(args.scenario)
    out = Path(args.out) if args.out else Path("runs") / data["name"]
    result, _ = run_scenario(data, out, args.seed, args.time_mode, args.speedup)
    _print_rows(result.metrics.rows())
    print(f"wrote {len(result.files)} files to {out} in {result.wall_seconds:.1f} s")
    return 0


def cmd_baseline(args):
    data = load(args.scenario)
    rows = []
    for g in _groups(data, args.seed if args.seed is not None else data.get("seed", 0)):
        name = g.spec.name
        rows += [(f"{name}.beta_charge", g.beta[0]), (f"{name}.beta_discharge", g.beta[1]),
                 (f"{name}.baseline_kw", g.baseline_kw),
                 (f"{name}.mean_soc", g.model.mean_soc(g.state.q))]
    _print_rows(rows)
    if args.out:
        mx.write_csv(Path(args.out) / "baseline.csv", ["metric", "value"], rows)
    return 0


def cmd_limits(args):
    data = load(args.scenario)
    rows = []
    for g in _groups(data, args.seed if args.seed is not None else data.get("seed", 0)):
        lo, hi = g.model.limits()
        lo_x, hi_x = g.model.limits_soc_units()
        name = g.spec.name
        rows += [(f"{name}.z_lower", lo), (f"{name}.z_upper", hi),
                 (f"{name}.soc_lower", lo_x), (f"{name}.soc_upper", hi_x)]
    _print_rows(rows)
    if args.out:
        mx.write_csv(Path(args.out) / "limits.csv", ["metric", "value"], rows)
    return 0


def cmd_report(args):
    """Recompute tracking metrics from a stored trace.csv."""
    if not args.out:
        raise ScenarioError("report needs --out DIR holding trace.csv")
    out = Path(args.out)
    trace = mx.read_csv(out / "trace.csv")
    baseline = None
    warmup, steps, transient, duration, deadbands = 600.0, None, 300.0, None, None
    summary = out / "summary.csv"
    if summary.exists():
        with open(summary) as fh:
            for line in fh.read().splitlines()[1:]:
                key, value = line.split(",", 1)
                if key == "baseline_kw" and not math.isnan(float(value)):
                    baseline = float(value)
    if args.scenario:
        data = load(args.scenario)
        warmup = float(data.get("warmup", warmup))
        duration = float(data["duration"])
        transient = float(data.get("metrics", {}).get("step_transient", transient))
        if data["reference"]["kind"] == "steps":
            steps = [tuple(s) for s in data["reference"]["steps"]]
        rng = np.random.default_rng(0)
        _, specs = build_params(data, rng)
        deadbands = {g.name: (g.mean_params.lower, g.mean_params.upper) for g in specs}
    m = mx.compute_metrics(trace, warmup, baseline, steps, transient, duration, deadbands)
    rows = m.rows()
    _print_rows(rows)
    mx.write_csv(out / "report.csv", ["metric", "value"], rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pemsim", description="Packetized energy management co-simulator")
    sub = parser.add_subparsers(dest="verb", required=True)
    verbs = {
        "validate": (cmd_validate, "check a scenario file against the schema"),
        "run": (cmd_run, "run a scenario and write CSV outputs"),
        "baseline": (cmd_baseline, "solve the baseline operating point of each device group"),
        "limits": (cmd_limits, "compute the fleet SoC limits of each device group"),
        "report": (cmd_report, "recompute metrics from a stored trace"),
    }
    for name, (func, help_text) in verbs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--scenario", required=name != "report", help="scenario YAML file")
        p.add_argument("--seed", type=int, default=None, help="override the scenario's master seed")
        p.add_argument("--time-mode", choices=["VIRTUAL", "REAL_TIME"], default=None)
        p.add_argument("--speedup", type=float, default=None, help="REAL_TIME pacing factor (>= 1)")
        p.add_argument("--out", default=None, help="output directory")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, SimulationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
