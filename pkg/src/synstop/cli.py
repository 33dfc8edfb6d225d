"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime/divergence failure,
3 partial sweep failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .fed import DivergenceError
from .harness import (
    ConfigError,
    ExperimentConfig,
    atomic_write,
    dumps,
    load_grid,
    read_trace,
    report,
    run_cell,
    sweep,
)
from .model import ContractError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3

log = logging.getLogger("synstop")


def _cmd_run(args) -> int:
    config = ExperimentConfig.load(args.config)
    seeds = [args.seed] if args.seed is not None else list(config.seeds)
    try:
        results, summary = run_cell(config, seeds, halt_at_stop=args.halt_at_stop)
    except DivergenceError as exc:
        atomic_write(Path(config.output_dir) / config.cell_id / "failure.json", dumps(exc.as_record()) + "\n")
        log.error("%s", exc)
        return EXIT_RUNTIME
    for r in results:
        stop = f"r_near={r.r_near}" if r.stopped else f"no-stop (r_near={r.r_near})"
        print(f"{r.cell_id} seed={r.seed} r*={r.r_star} {stop} "
              f"speedup={r.speedup:.3f} diff={r.diff_pct:+.2f}%")
    print(f"mean speedup={summary['speedup_mean']:.3f} mean diff={summary['diff_pct_mean']:+.2f}%")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    config = ExperimentConfig.load(args.config)
    grid = load_grid(args.grid)
    rows = sweep(config, grid, force=args.force)
    failed = [r["cell_id"] for r in rows if r["status"] == "failed"]
    for r in rows:
        print(f"{r['status']:>6}  {r['cell_id']}")
    if failed:
        log.error("%d of %d cells failed: %s", len(failed), len(rows), ", ".join(failed))
        return EXIT_PARTIAL
    return EXIT_OK


def _cmd_report(args) -> int:
    rep = report(args.dir)
    for w in rep.warnings:
        log.warning("%s", w)
    for p in rep.problems:
        log.warning("unreadable run: %s", p)
    sys.stdout.write(rep.table)
    if not rep.consistent:
        bad = [r["run_id"] for r in rep.runs if not r["consistent"]]
        log.error("stored metrics disagree with traces: %s", ", ".join(bad))
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_trace(args) -> int:
    run_id = args.run.replace("__", "/")
    cell, _, seed = run_id.partition("/")
    csv_path = Path(args.dir) / cell / f"{seed}.csv"
    json_path = csv_path.with_suffix(".json")
    if not csv_path.exists():
        log.error("no trace for run %r at %s", args.run, csv_path)
        return EXIT_CONFIG
    trace = read_trace(csv_path)
    marks = {}
    if json_path.exists():
        stored = json.loads(json_path.read_text())
        marks[stored["r_star"]] = "r*"
        if stored["stopped"]:
            marks[stored["r_near"]] = marks.get(stored["r_near"], "") + " r_near"
    print(f"{'round':>5}  {'val_acc_syn':>11}  {'test_acc':>8}  {'global_loss':>11}")
    for i, rd in enumerate(trace["round"]):
        rd = int(rd)
        print(f"{rd:>5}  {trace['val_acc_syn'][i]:>11.4f}  {trace['test_acc'][i]:>8.4f}  "
              f"{trace['global_loss'][i]:>11.5f}  {marks.get(rd, '').strip()}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synstop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configuration over its seeds (or a single seed)")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--halt-at-stop", action="store_true",
                   help="stop training at the early-stop round instead of continuing to the round limit")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="run a grid of configurations")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--force", action="store_true", help="rerun cells that already have results")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="tabulate runs and cross-check stored metrics")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("trace", help="print one run's per-round trace")
    p.add_argument("--dir", required=True)
    p.add_argument("--run", required=True, help="run id, e.g. fedavg_alpha0.1_roentgen_eta50_p5/seed0")
    p.set_defaults(func=_cmd_trace)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DivergenceError, ContractError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
