"""Command-line front end: scenario execution, PER x string-length sweeps,
CSV emission, and plot-ready aggregates for the figure reproductions."""

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from . import metrics
from .engine import ScenarioConfig, config_from_dict, run
from .errors import CollisionError, ConfigError

OUT_ENV_VAR = "PLATOONSIM_OUT"

REPORT_FIELDS = [
    "mode", "n_vehicles", "per", "seed", "status", "p95_error", "p95_unit",
    "mean_speed_diff", "max_speed_diff", "max_amplification",
    "settle_decel_s", "settle_accel_s", "fallback_steps", "error",
]

FIGURE_IDS = ("fig5", "fig6", "fig7")


# ---------------------------------------------------------------------------
# sweep specification


@dataclass
class SweepSpec:
    modes: list = field(default_factory=lambda: ["CACC", "Platooning"])
    lengths: list = field(default_factory=lambda: [5, 10, 15, 20, 25])
    pers: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6])
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    template: dict = field(default_factory=dict)  # ScenarioConfig fields

    def __post_init__(self):
        if not self.modes or not self.lengths or not self.pers or not self.seeds:
            raise ConfigError("sweep", "modes/lengths/pers/seeds must be non-empty")
        for p in self.pers:
            if not 0.0 <= p <= 1.0:
                raise ConfigError("pers", f"must be within [0, 1], got {p}")

    def cells(self):
        for mode in self.modes:
            for n in self.lengths:
                for per in self.pers:
                    for seed in self.seeds:
                        yield mode, int(n), float(per), int(seed)

    def cell_config(self, mode, n, per, seed) -> ScenarioConfig:
        doc = dict(self.template)
        doc.update(n_vehicles=n, mode=mode, per=per, seed=seed)
        return config_from_dict(doc)


def sweep_from_dict(data: dict) -> SweepSpec:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    known = {"modes", "lengths", "pers", "seeds", "template"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    spec = SweepSpec(**{k: data[k] for k in known if k in data})
    if "n_vehicles" in spec.template or "mode" in spec.template:
        raise ConfigError("template", "n_vehicles/mode/per/seed come from the grid")
    # validate the template once against a sample cell
    spec.cell_config(spec.modes[0], spec.lengths[0], spec.pers[0], spec.seeds[0])
    return spec


# ---------------------------------------------------------------------------
# report rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def report_row(config: ScenarioConfig, report=None, error: str = "") -> dict:
    row = {k: "" for k in REPORT_FIELDS}
    row.update(mode=config.mode, n_vehicles=config.n_vehicles,
               per=_fmt(float(config.per)), seed=config.seed)
    if report is None:
        row["status"] = "collision" if "collision" in error else "error"
        row["error"] = error
        return row
    ratios = [r for rs in report.amplification_ratios.values() for r in rs
              if not math.isnan(r)]
    row.update(
        status="ok",
        p95_error=_fmt(report.p95_error),
        p95_unit=report.p95_unit,
        mean_speed_diff=_fmt(report.mean_speed_diff),
        max_speed_diff=_fmt(report.max_speed_diff),
        max_amplification=_fmt(max(ratios) if ratios else float("nan")),
        settle_decel_s=_fmt(report.settle_times.get("decel", (None,))[0]),
        settle_accel_s=_fmt(report.settle_times.get("accel", (None,))[0]),
        fallback_steps=report.fallback_steps,
    )
    return row


def write_rows(path, rows, fieldnames=REPORT_FIELDS) -> None:
    """Atomic CSV write (tmp + rename)."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow(row)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# subcommands


def run_scenario(config_path, out_dir, seed=None) -> int:
    with open(config_path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            print(f"error: {config_path}: line {exc.lineno}: {exc.msg}", file=sys.stderr)
            return 1
    try:
        if seed is not None:
            doc["seed"] = seed
        config = config_from_dict(doc)
    except ConfigError as exc:
        print(f"error: {config_path}: {exc}", file=sys.stderr)
        return 1

    os.makedirs(out_dir, exist_ok=True)
    try:
        trace = run(config)
    except CollisionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    trace.to_csv(os.path.join(out_dir, "trace.csv"))
    report = metrics.build_report(trace)
    write_rows(os.path.join(out_dir, "report.csv"), [report_row(config, report)])
    print(f"wrote {out_dir}/trace.csv and {out_dir}/report.csv")
    print(f"  mode={config.mode} n={config.n_vehicles} per={config.per} seed={config.seed}")
    print(f"  p95_error={report.p95_error:.4g} {report.p95_unit}"
          f"  mean_speed_diff={report.mean_speed_diff:.4g} m/s"
          f"  fallbacks={report.fallback_steps}")
    for name, (secs, settled) in report.settle_times.items():
        flag = "" if settled else " (not settled)"
        print(f"  settle_{name}={secs:.1f} s{flag}")
    return 0


def _cell_filename(mode, n, per, seed) -> str:
    return f"{mode}_n{n}_per{_fmt(per)}_s{seed}.csv"


def _run_cell(args):
    """Worker: one sweep cell -> report row (never raises)."""
    template, mode, n, per, seed = args
    spec = SweepSpec(modes=[mode], lengths=[n], pers=[per], seeds=[seed],
                     template=template)
    config = spec.cell_config(mode, n, per, seed)
    try:
        trace = run(config)
        return report_row(config, metrics.build_report(trace))
    except CollisionError as exc:
        return report_row(config, error=f"collision: {exc}")
    except Exception as exc:  # recorded per cell; the sweep continues
        return report_row(config, error=f"{type(exc).__name__}: {exc}")


def run_sweep(spec_path, out_dir, workers=1) -> int:
    with open(spec_path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            print(f"error: {spec_path}: line {exc.lineno}: {exc.msg}", file=sys.stderr)
            return 1
    try:
        spec = sweep_from_dict(doc)
    except ConfigError as exc:
        print(f"error: {spec_path}: {exc}", file=sys.stderr)
        return 1

    cell_dir = os.path.join(out_dir, "cells")
    os.makedirs(cell_dir, exist_ok=True)

    todo = []
    done = []
    for mode, n, per, seed in spec.cells():
        path = os.path.join(cell_dir, _cell_filename(mode, n, per, seed))
        if os.path.exists(path):
            with open(path, newline="") as fh:
                done.extend(list(csv.DictReader(fh)))
        else:
            todo.append((mode, n, per, seed, path))

    print(f"sweep: {len(done)} cells cached, {len(todo)} to run "
          f"({workers} worker{'s' if workers != 1 else ''})")
    jobs = [(spec.template, mode, n, per, seed) for mode, n, per, seed, _ in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(job) for job in jobs]
    for (mode, n, per, seed, path), row in zip(todo, rows):
        write_rows(path, [row])
        done.append(row)

    done.sort(key=lambda r: (r["mode"], int(r["n_vehicles"]), float(r["per"]),
                             int(r["seed"])))
    write_rows(os.path.join(out_dir, "aggregate.csv"), done)
    failures = [r for r in done if r["status"] != "ok"]
    print(f"wrote {out_dir}/aggregate.csv ({len(done)} cells, {len(failures)} failed)")
    for r in failures:
        print(f"  FAILED {r['mode']} n={r['n_vehicles']} per={r['per']} "
              f"seed={r['seed']}: {r['error']}", file=sys.stderr)
    return 2 if failures else 0


def _seed_average(rows, value_field):
    """Group rows by (mode, n, per) and average value_field over seeds."""
    groups = {}
    for r in rows:
        if r["status"] != "ok" or r[value_field] == "":
            continue
        key = (r["mode"], int(r["n_vehicles"]), float(r["per"]))
        groups.setdefault(key, []).append(float(r[value_field]))
    return {k: sum(v) / len(v) for k, v in groups.items()}


def emit_plot_data(aggregate_path, figure_id, out_dir) -> int:
    if figure_id not in FIGURE_IDS:
        print(f"error: unknown figure id {figure_id!r}; expected one of {FIGURE_IDS}",
              file=sys.stderr)
        return 1
    with open(aggregate_path, newline="") as fh:
        rows = list(csv.DictReader(fh))

    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, f"{figure_id}_plotdata.csv")
    header = ["series", "x", "y"]
    if not rows:
        write_rows(out_path, [], fieldnames=header)
        print(f"wrote {out_path} (empty aggregate)")
        return 0

    value_field = "p95_error" if figure_id == "fig6" else "mean_speed_diff"
    cells = _seed_average(rows, value_field)
    lengths = sorted({n for _, n, _ in cells})

    series = []
    if figure_id in ("fig5", "fig6"):
        modes = sorted({m for m, _, _ in cells if m in ("CACC", "Platooning")})
        pers = sorted({p for m, _, p in cells if m in ("CACC", "Platooning")})
        for mode in modes:
            for per in pers:
                series.append((f"{mode} PER={_fmt(per)}", mode, per))
    else:  # fig7: cooperation vs ACC at best/worst channel
        per_hi = max(p for _, _, p in cells)
        series.append(("ACC", "ACC", per_hi))
        for mode in ("CACC", "Platooning"):
            series.append((f"{mode} PER=0", mode, 0.0))
            series.append((f"{mode} PER={_fmt(per_hi)}", mode, per_hi))

    out_rows = []
    missing = []
    for label, mode, per in series:
        for n in lengths:
            key = (mode, n, per)
            if key not in cells:
                missing.append(key)
            else:
                out_rows.append({"series": label, "x": n, "y": repr(cells[key])})
    if missing:
        print("error: aggregate is missing cells:", file=sys.stderr)
        for mode, n, per in missing:
            print(f"  {mode} n={n} per={_fmt(per)}", file=sys.stderr)
        return 1
    write_rows(out_path, out_rows, fieldnames=header)
    print(f"wrote {out_path} ({len(out_rows)} points, {len(series)} series)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="platoonsim",
        description="Deterministic MPC string simulator: ACC / CACC / Platooning "
                    "under lossy V2V.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    default_out = os.environ.get(OUT_ENV_VAR, "out")

    p_run = sub.add_parser("run", help="run one scenario; write trace.csv + report.csv")
    p_run.add_argument("--config", required=True, help="scenario JSON path")
    p_run.add_argument("--out", default=default_out, help=f"output dir (default ${OUT_ENV_VAR} or ./out)")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_sweep = sub.add_parser("sweep", help="run a mode x length x PER x seed grid")
    p_sweep.add_argument("--config", required=True, help="sweep spec JSON path")
    p_sweep.add_argument("--out", default=default_out)
    p_sweep.add_argument("--workers", type=int, default=1, help="parallel worker processes")

    p_plot = sub.add_parser("plotdata", help="aggregate CSV -> plot-ready series CSV")
    p_plot.add_argument("--aggregate", required=True, help="aggregate.csv from a sweep")
    p_plot.add_argument("--figure", required=True, help=f"one of {', '.join(FIGURE_IDS)}")
    p_plot.add_argument("--out", default=default_out)

    args = parser.parse_args(argv)
    if args.command == "run":
        return run_scenario(args.config, args.out, seed=args.seed)
    if args.command == "sweep":
        return run_sweep(args.config, args.out, workers=args.workers)
    return emit_plot_data(args.aggregate, args.figure, args.out)


if __name__ == "__main__":
    sys.exit(main())
