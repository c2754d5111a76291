"""Command-line experiment runner.

    exitrisk estimate --scenario S [--methods ...] [--dt STEP] --out DIR
    exitrisk converge --scenario S --dt 0.1,0.05,0.025 --out DIR
    exitrisk batch    --template T --count 20 --rollouts 500 --out DIR
    exitrisk mc       --scenario S --rollouts 1000 --out DIR

Every command writes CSV files whose first line is a ``# exitrisk <file> v1``
schema comment, plus ``summary.txt``.  Floats are written with 17
significant digits so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .estimators import METHODS, TimePartition, run_method
from .exit_kernel import QuadratureSpec
from .monte_carlo import McConfig, estimate_mc
from .scenarios import ScenarioError, TemplateInfeasibleError, generate_batch, load_scenario, load_template

log = logging.getLogger("exitrisk")

SCHEMA_VERSION = 1
COLUMNS = {
    "risk.csv": ("method", "t_lo", "t_hi", "contribution", "cumulative", "mass"),
    "converge.csv": ("method", "dt", "total"),
    "batch.csv": ("scenario_id", "method", "total", "mc", "mc_se"),
    "stats.csv": ("method", "bias", "rmse", "mre", "conservative_rate"),
}
ALL_METHODS = METHODS + ("mc",)
MAX_FAILED_FRACTION = 0.2


class CliError(RuntimeError):
    pass


def fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(out_dir: Path, name: str, rows) -> Path:
    buf = io.StringIO()
    buf.write(f"# exitrisk {name} v{SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS[name])
    for r in rows:
        w.writerow([fmt(v) for v in r])
    path = out_dir / name
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_csv(path) -> list[dict]:
    """Parse an exitrisk CSV, validating the schema comment and header."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    expected = f"# exitrisk {path.name} v{SCHEMA_VERSION}"
    if not lines or lines[0] != expected:
        raise ValueError(f"{path}: missing schema line {expected!r}")
    rows = list(csv.DictReader(lines[1:]))
    if tuple(rows[0].keys() if rows else next(csv.reader(lines[1:2]))) != COLUMNS[path.name]:
        raise ValueError(f"{path}: unexpected columns")
    return rows


def batch_stats(records: dict, methods) -> list[tuple]:
    """``records[method]`` is a list of (estimate, mc) pairs over the same scenarios."""
    out = []
    for m in methods:
        est = np.array([e for e, _ in records[m]], dtype=float)
        mc = np.array([t for _, t in records[m]], dtype=float)
        err = est - mc
        pos = mc > 0
        mre = float(np.median(np.abs(err[pos]) / mc[pos])) if np.any(pos) else float("nan")
        cons = float(np.mean(est >= mc - 0.05 * mc))
        out.append((m, float(np.mean(err)), float(np.sqrt(np.mean(err ** 2))), mre, cons))
    return out


def _parse_methods(text: str):
    methods = tuple(m.strip() for m in text.split(",") if m.strip())
    if not methods:
        raise CliError("at least one method is required")
    bad = [m for m in methods if m not in ALL_METHODS]
    if bad:
        raise CliError(f"unknown method(s) {bad}; choose from {ALL_METHODS}")
    return methods


def _parse_dts(text):
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--dt must be a comma-separated list of numbers, got {text!r}")


def _quad(args) -> QuadratureSpec:
    return QuadratureSpec(points_per_axis=args.quad_points, box_halfwidth_sigmas=args.quad_box)


def _mc_config(args, rollouts=None) -> McConfig:
    return McConfig(num_rollouts=rollouts or args.rollouts, sim_substeps_per_control_tick=args.substeps,
                    rng_seed=args.seed)


def _run(method, scenario, partition, spec, threads=None):
    try:
        return run_method(method, scenario.system, scenario.safe_set, scenario.design, partition, spec,
                          initial=scenario.initial_belief, threads=threads)
    except Exception as exc:
        raise CliError(f"{method}: {exc}") from exc


def _mc(scenario, args, partition, rollouts=None):
    try:
        return estimate_mc(scenario.system, scenario.safe_set, scenario.policy, scenario.design, scenario.horizon,
                           partition.times, _mc_config(args, rollouts))
    except Exception as exc:
        raise CliError(f"mc: {exc}") from exc


def _mc_rows(res):
    t = res.partition
    cum = np.cumsum(res.first_exit_times) / res.num_rollouts
    for i in range(len(t) - 1):
        yield ("mc", t[i], t[i + 1], res.first_exit_times[i] / res.num_rollouts, cum[i], None)


def _report_rows(r):
    mass = r.diagnostics.get("mass")
    cum = r.cumulative
    for i in range(len(r.per_interval)):
        m = float(mass[i]) if mass is not None and i < len(mass) else None
        yield (r.method, r.t_lo[i], r.t_hi[i], r.per_interval[i], cum[i], m)


def cmd_estimate(args, out: Path, summary: list):
    sc = load_scenario(args.scenario)
    methods = _parse_methods(args.methods)
    dts = _parse_dts(args.dt)
    partition = sc.partition(dts[0] if dts else None)
    spec = _quad(args)
    rows = []
    for m in methods:
        if m == "mc":
            res = _mc(sc, args, partition)
            rows.extend(_mc_rows(res))
            summary.append(f"mc: {res.estimate:.6f} +/- {res.standard_error:.6f} ({res.num_rollouts} rollouts)")
        else:
            r = _run(m, sc, partition, spec)
            rows.extend(_report_rows(r))
            summary.append(f"{m}: {r.total:.6f}")
    write_csv(out, "risk.csv", rows)


def cmd_mc(args, out: Path, summary: list):
    sc = load_scenario(args.scenario)
    dts = _parse_dts(args.dt)
    partition = sc.partition(dts[0] if dts else None)
    res = _mc(sc, args, partition)
    write_csv(out, "risk.csv", _mc_rows(res))
    summary.append(f"mc: {res.estimate:.6f} +/- {res.standard_error:.6f} ({res.num_rollouts} rollouts)")


def cmd_converge(args, out: Path, summary: list):
    sc = load_scenario(args.scenario)
    methods = _parse_methods(args.methods)
    dts = _parse_dts(args.dt) or [0.1, 0.05, 0.025, 0.0125]
    if len(dts) < 3:
        raise CliError("converge needs at least three --dt values")
    if not all(b < a for a, b in zip(dts[:-1], dts[1:])):
        raise CliError("--dt values must be strictly decreasing")
    spec = _quad(args)
    rows = []
    for m in methods:
        if m == "mc":
            res = _mc(sc, args, sc.partition(dts[-1]))
            rows.append(("mc", dts[-1], res.estimate))
            summary.append(f"mc: {res.estimate:.6f} +/- {res.standard_error:.6f}")
            continue
        for dt in dts:
            r = _run(m, sc, TimePartition.uniform(sc.horizon, dt), spec)
            rows.append((m, dt, r.total))
            summary.append(f"{m} dt={dt:g}: {r.total:.6f}")
    write_csv(out, "converge.csv", rows)


def cmd_batch(args, out: Path, summary: list):
    if not args.template:
        raise CliError("batch needs --template")
    template = load_template(args.template)
    methods = [m for m in _parse_methods(args.methods) if m != "mc"]
    spec = _quad(args)
    try:
        batch = generate_batch(template, args.count, args.seed)
    except TemplateInfeasibleError as exc:
        raise CliError(str(exc)) from exc
    rows, records, failed = [], {m: [] for m in methods}, 0
    for sc in batch.scenarios:
        try:
            partition = sc.partition(_parse_dts(args.dt)[0] if args.dt else None)
            res = _mc(sc, args, partition)
            totals = {m: _run(m, sc, partition, spec).total for m in methods}
        except (CliError, ScenarioError) as exc:
            failed += 1
            log.warning("scenario %s failed: %s", sc.name, exc)
            continue
        for m in methods:
            rows.append((sc.name, m, totals[m], res.estimate, res.standard_error))
            records[m].append((totals[m], res.estimate))
    n = len(batch.scenarios)
    if failed > MAX_FAILED_FRACTION * n:
        raise CliError(f"{failed} of {n} scenarios failed")
    write_csv(out, "batch.csv", rows)
    stats = batch_stats(records, methods)
    write_csv(out, "stats.csv", stats)
    summary.append(f"batch: {n - failed} scenarios evaluated, {failed} failed; candidates {batch.rejection_stats}")
    for m, bias, rmse, mre, cons in stats:
        summary.append(f"{m}: bias={bias:+.4f} rmse={rmse:.4f} mre={mre:.4f} P(conservative)={cons:.2f}")


COMMANDS = {"estimate": cmd_estimate, "converge": cmd_converge, "batch": cmd_batch, "mc": cmd_mc}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exitrisk", description="Failure-probability estimation experiments")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--template", help="batch template JSON file (batch command)")
    p.add_argument("--count", type=int, default=20, help="scenarios to generate (batch command)")
    p.add_argument("--methods", default=",".join(ALL_METHODS), help="comma-separated subset of " + ",".join(ALL_METHODS))
    p.add_argument("--dt", help="partition step(s) in seconds, comma-separated")
    p.add_argument("--rollouts", type=int, default=1000)
    p.add_argument("--substeps", type=int, default=10, help="simulation substeps per control tick")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--quad-points", type=int, default=None)
    p.add_argument("--quad-box", type=float, default=5.0)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command != "batch" and not args.scenario:
        print(f"error: {args.command} needs --scenario", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary: list[str] = []
    try:
        COMMANDS[args.command](args, out, summary)
    except (CliError, ScenarioError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    (out / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print("\n".join(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
