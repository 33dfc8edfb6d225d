"""Experiment configuration, seeded runs, multi-seed aggregation, grid sweeps
and reporting.

On-disk layout under ``output_dir``::

    <cell_id>/seed<k>.csv      per-round trace (round 0 = initial model)
    <cell_id>/seed<k>.json     RunResult fields
    <cell_id>/summary.json     seed aggregate
    <cell_id>/failure.json     present only if a seed diverged
    sweep.csv                  one summary row per sweep cell
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .data import GeneratorConfig, TaskSpec, dirichlet_partition, make_proxy_valset, make_task, substream
from .earlystop import (
    EXACT_MATCH,
    METRIC_MODES,
    Decision,
    MonitorState,
    monitor_update,
    oracle_best_round,
    scan_stop_round,
)
from .fed import DivergenceError, FedConfig, RoundRecord, StrategyState, evaluate_global, run_round
from .model import Arch, ContractError, ModelParams, init_params

log = logging.getLogger(__name__)

_INIT = 31


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

TASK_KEYS = {"dim", "classes", "feature_noise", "train_size", "test_size", "bias", "prototype_seed"}
FED_KEYS = {
    "n_clients", "clients_per_round", "rounds", "local_steps", "batch_size",
    "lr", "method", "method_params", "hidden_dim",
}
GENERATOR_KEYS = {"preset", "name", "feature_noise", "label_flip", "mean_shift", "samples_per_class"}
TOP_KEYS = {"task", "fed", "generator", "patience", "alpha", "seeds", "metric_mode", "output_dir"}

DEFAULT_TASK = {
    "dim": 32, "classes": 14, "feature_noise": 0.3, "train_size": 10_000,
    "test_size": 2_000, "bias": 0.0, "prototype_seed": 0,
}


def _check_keys(obj: Any, allowed: set[str], where: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return obj


@dataclass(frozen=True)
class ExperimentConfig:
    task: dict = field(default_factory=lambda: dict(DEFAULT_TASK))
    fed: FedConfig = field(default_factory=FedConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    patience: int = 5
    alpha: float = 0.1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    metric_mode: str = EXACT_MATCH
    output_dir: str = "runs"

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be a positive integer")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.metric_mode not in METRIC_MODES:
            raise ConfigError(f"metric_mode must be one of {METRIC_MODES}")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _check_keys(raw, TOP_KEYS, "config")
        task = dict(DEFAULT_TASK)
        task.update(_check_keys(raw.get("task", {}), TASK_KEYS, "task"))
        fed_raw = dict(_check_keys(raw.get("fed", {}), FED_KEYS, "fed"))
        gen_raw = dict(_check_keys(raw.get("generator", {}), GENERATOR_KEYS, "generator"))
        try:
            fed = FedConfig(**fed_raw)
            preset = gen_raw.pop("preset", None)
            if preset is not None:
                base = asdict(GeneratorConfig.preset(preset))
                base.update(gen_raw)
                gen_raw = base
            generator = GeneratorConfig(**gen_raw)
            cfg = cls(
                task=task,
                fed=fed,
                generator=generator,
                patience=int(raw.get("patience", 5)),
                alpha=float(raw.get("alpha", 0.1)),
                seeds=tuple(int(s) for s in raw.get("seeds", (0, 1, 2, 3, 4))),
                metric_mode=raw.get("metric_mode", EXACT_MATCH),
                output_dir=str(raw.get("output_dir", "runs")),
            )
            cfg.task_spec()
        except (ContractError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        gen = asdict(self.generator)
        if isinstance(gen["mean_shift"], tuple):
            gen["mean_shift"] = list(gen["mean_shift"])
        return {
            "task": dict(self.task),
            "fed": asdict(self.fed),
            "generator": gen,
            "patience": self.patience,
            "alpha": self.alpha,
            "seeds": list(self.seeds),
            "metric_mode": self.metric_mode,
            "output_dir": self.output_dir,
        }

    def task_spec(self) -> TaskSpec:
        t = self.task
        return TaskSpec.build(
            dim=t["dim"], classes=t["classes"], feature_noise=t["feature_noise"],
            train_size=t["train_size"], test_size=t["test_size"], bias=t["bias"],
            prototype_seed=t["prototype_seed"],
        )

    @property
    def cell_id(self) -> str:
        g = self.generator
        return (
            f"{self.fed.method}_alpha{self.alpha:g}_{g.name}"
            f"_eta{g.samples_per_class}_p{self.patience}"
        )


# ---------------------------------------------------------------------------
# serialization

def _num(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def dumps(obj: Any, indent: int = 0) -> str:
    """JSON with every float written at 17 significant digits."""
    pad, inner = " " * indent, " " * (indent + 2)
    if obj is None or isinstance(obj, (bool, str)):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(float(obj))
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps(v, indent + 2)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v, indent + 2) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# ---------------------------------------------------------------------------
# single runs

TRACE_COLUMNS = ("round", "val_acc_syn", "test_acc", "global_loss")


@dataclass(frozen=True)
class TraceRow:
    round: int
    val_acc_syn: float
    test_acc: float
    global_loss: float


@dataclass
class RunResult:
    cell_id: str
    seed: int
    patience: int
    trace: list[TraceRow]
    r_near: int
    stopped: bool
    r_star: int
    acc_at_r_near: float
    acc_at_r_star: float
    speedup: float
    diff_pct: float
    records: list[RoundRecord] = field(default_factory=list, repr=False)
    model: ModelParams | None = field(default=None, repr=False)

    def summary_dict(self) -> dict:
        return {
            "cell_id": self.cell_id,
            "seed": self.seed,
            "patience": self.patience,
            "rounds_run": len(self.trace) - 1,
            "r_near": self.r_near,
            "stopped": self.stopped,
            "r_star": self.r_star,
            "acc_at_r_near": self.acc_at_r_near,
            "acc_at_r_star": self.acc_at_r_star,
            "speedup": self.speedup,
            "diff_pct": self.diff_pct,
        }

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in self.trace:
            w.writerow([row.round, _num(row.val_acc_syn), _num(row.test_acc), _num(row.global_loss)])
        return buf.getvalue()


def stop_metrics(test_acc: Sequence[float], r_near: int | None) -> dict:
    """Speed-up and accuracy deviation of a stop round against the test oracle.

    With no stop, the last evaluated round stands in for r_near and the
    speed-up is 1.0.
    """
    r_star = oracle_best_round(test_acc)
    stopped = r_near is not None
    if not stopped:
        r_near = len(test_acc) - 1
    acc_near, acc_star = float(test_acc[r_near]), float(test_acc[r_star])
    return {
        "r_near": r_near,
        "stopped": stopped,
        "r_star": r_star,
        "acc_at_r_near": acc_near,
        "acc_at_r_star": acc_star,
        "speedup": r_star / r_near if stopped else 1.0,
        "diff_pct": 100.0 * (acc_near - acc_star),
    }


def run_experiment(config: ExperimentConfig, seed: int, halt_at_stop: bool = False) -> RunResult:
    """One seeded federated run with the proxy-validation monitor attached.

    Training continues to the round limit after the stop decision (unless
    ``halt_at_stop``) so the test-optimal round is observable; the returned
    ``model`` is the snapshot at the stop round.
    """
    spec = config.task_spec()
    fed = config.fed
    train, test = make_task(spec, seed)
    shards = dirichlet_partition(train, fed.n_clients, config.alpha, seed)
    proxy = make_proxy_valset(spec, config.generator, seed)
    arch = Arch(spec.dim, fed.hidden_dim, spec.classes)
    params = init_params(arch, substream(seed, _INIT))

    val0, test0, loss0 = evaluate_global(params, train, shards, proxy, test, config.metric_mode)
    trace = [TraceRow(0, val0, test0, loss0)]
    records: list[RoundRecord] = []
    state = StrategyState()
    monitor = MonitorState.start(config.patience, val0)
    snapshot = None
    for r in range(fed.rounds):
        params, rec = run_round(r, params, shards, train, proxy, test, state, fed, seed, config.metric_mode)
        records.append(rec)
        trace.append(TraceRow(rec.model_round, rec.val_acc_syn, rec.test_acc, rec.global_loss))
        if not monitor.stopped:
            monitor, decision = monitor_update(monitor, r, rec.val_acc_syn)
            if decision is Decision.STOP:
                snapshot = params
                log.info("%s seed %d: stop at round %d", config.cell_id, seed, monitor.stopped_at)
                if halt_at_stop:
                    break

    metrics = stop_metrics([row.test_acc for row in trace], monitor.stopped_at)
    return RunResult(
        cell_id=config.cell_id,
        seed=seed,
        patience=config.patience,
        trace=trace,
        records=records,
        model=snapshot if snapshot is not None else params,
        **metrics,
    )


def run_paths(output_dir: str | Path, cell_id: str, seed: int) -> tuple[Path, Path]:
    base = Path(output_dir) / cell_id
    return base / f"seed{seed}.csv", base / f"seed{seed}.json"


def save_run(result: RunResult, config: ExperimentConfig) -> None:
    csv_path, json_path = run_paths(config.output_dir, result.cell_id, result.seed)
    atomic_write(csv_path, result.trace_csv())
    body = result.summary_dict()
    body["config"] = config.to_dict()
    atomic_write(json_path, dumps(body) + "\n")


# ---------------------------------------------------------------------------
# aggregation

AGG_METRICS = ("r_star", "r_near", "speedup", "diff_pct", "acc_at_r_near", "acc_at_r_star")


def aggregate(results: Sequence[RunResult | dict]) -> dict:
    """Mean and sample standard deviation of each metric across seeds.

    Speed-up is reported both as the mean of per-seed ratios (``speedup_mean``)
    and as the ratio of mean rounds (``speedup_ratio_of_means``).
    """
    rows = [r.summary_dict() if isinstance(r, RunResult) else r for r in results]
    if not rows:
        raise ContractError("nothing to aggregate")
    cells = {row["cell_id"] for row in rows}
    if len(cells) > 1:
        raise ContractError(f"cannot aggregate across configurations {sorted(cells)}")
    out: dict[str, Any] = {"cell_id": rows[0]["cell_id"], "n_seeds": len(rows),
                           "seeds": [row["seed"] for row in rows],
                           "n_stopped": sum(bool(row["stopped"]) for row in rows)}
    for m in AGG_METRICS:
        vals = np.array([float(row[m]) for row in rows])
        out[f"{m}_mean"] = float(np.mean(vals))
        out[f"{m}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    out["r_star_rounded"] = int(round(out["r_star_mean"]))
    out["r_near_rounded"] = int(round(out["r_near_mean"]))
    out["speedup_ratio_of_means"] = out["r_star_mean"] / out["r_near_mean"]
    out["abs_diff_pct_mean"] = float(np.mean([abs(float(row["diff_pct"])) for row in rows]))
    return out


def run_cell(config: ExperimentConfig, seeds: Iterable[int] | None = None,
             halt_at_stop: bool = False, save: bool = True) -> tuple[list[RunResult], dict]:
    results = []
    for seed in seeds if seeds is not None else config.seeds:
        res = run_experiment(config, seed, halt_at_stop=halt_at_stop)
        if save:
            save_run(res, config)
        results.append(res)
    summary = aggregate(results)
    if save:
        atomic_write(Path(config.output_dir) / config.cell_id / "summary.json", dumps(summary) + "\n")
    return results, summary


# ---------------------------------------------------------------------------
# sweeps

GRID_KEYS = ("alpha", "eta", "patience", "method", "generator")
SUMMARY_COLUMNS = (
    "cell_id", "method", "alpha", "generator", "eta", "patience", "status", "n_seeds", "n_stopped",
    "r_star_mean", "r_near_mean", "r_star_rounded", "r_near_rounded", "speedup_mean",
    "speedup_std", "speedup_ratio_of_means", "diff_pct_mean", "diff_pct_std",
)


def load_grid(path: str | Path) -> dict[str, list]:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid {path}: {exc}") from exc
    _check_keys(raw, set(GRID_KEYS), "grid")
    for k, v in raw.items():
        if not isinstance(v, list) or not v:
            raise ConfigError(f"grid axis {k!r} must be a non-empty list")
    return raw


def cell_config(base: ExperimentConfig, alpha=None, eta=None, patience=None, method=None, generator=None):
    gen = base.generator
    if generator is not None:
        gen = GeneratorConfig.preset(generator, gen.samples_per_class)
    if eta is not None:
        gen = replace(gen, samples_per_class=int(eta))
    fed = base.fed if method is None else replace(base.fed, method=method)
    return replace(
        base,
        fed=fed,
        generator=gen,
        alpha=base.alpha if alpha is None else float(alpha),
        patience=base.patience if patience is None else int(patience),
    )


def expand_grid(base: ExperimentConfig, grid: dict[str, list]) -> list[ExperimentConfig]:
    axes = [k for k in GRID_KEYS if k in grid]
    cells = []
    for combo in itertools.product(*(grid[k] for k in axes)):
        try:
            cells.append(cell_config(base, **dict(zip(axes, combo))))
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc
    return cells


def _summary_row(config: ExperimentConfig, summary: dict | None, status: str) -> dict:
    row = {
        "cell_id": config.cell_id, "method": config.fed.method, "alpha": config.alpha,
        "generator": config.generator.name, "eta": config.generator.samples_per_class,
        "patience": config.patience, "status": status,
    }
    for col in SUMMARY_COLUMNS[len(row):]:
        row[col] = summary.get(col, "") if summary else ""
    return row


def sweep(base: ExperimentConfig, grid: dict[str, list], force: bool = False) -> list[dict]:
    """Run every grid cell over the shared seed list; completed cells are skipped."""
    rows = []
    for cfg in expand_grid(base, grid):
        cell_dir = Path(cfg.output_dir) / cfg.cell_id
        summary_path = cell_dir / "summary.json"
        if summary_path.exists() and not force:
            log.info("skipping completed cell %s", cfg.cell_id)
            rows.append(_summary_row(cfg, json.loads(summary_path.read_text()), "cached"))
            continue
        try:
            _, summary = run_cell(cfg)
        except DivergenceError as exc:
            log.warning("cell %s failed: %s", cfg.cell_id, exc)
            atomic_write(cell_dir / "failure.json", dumps(exc.as_record()) + "\n")
            rows.append(_summary_row(cfg, None, "failed"))
            continue
        (cell_dir / "failure.json").unlink(missing_ok=True)
        rows.append(_summary_row(cfg, summary, "ok"))

    atomic_write(Path(base.output_dir) / "sweep.csv", _rows_csv(rows, SUMMARY_COLUMNS))
    return rows


def _rows_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_num(v) if isinstance(v, float) else v for v in (row[c] for c in columns)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# reporting

def read_trace(path: str | Path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ContractError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = list(reader)
    cols: dict[str, list[float]] = {c: [] for c in TRACE_COLUMNS}
    for i, row in enumerate(rows):
        if int(row["round"]) != i:
            raise ContractError(f"{path}: round {row['round']} out of sequence")
        for c in TRACE_COLUMNS:
            cols[c].append(float(row[c]))
    if not rows:
        raise ContractError(f"{path}: empty trace")
    return cols


def recompute_from_trace(trace: dict[str, list[float]], patience: int) -> dict:
    """Stop round and metrics re-derived from a raw trace via the batch scan."""
    return stop_metrics(trace["test_acc"], scan_stop_round(trace["val_acc_syn"], patience))


@dataclass
class Report:
    table: str
    runs: list[dict]
    problems: list[str]
    warnings: list[str]

    @property
    def consistent(self) -> bool:
        return all(r["consistent"] for r in self.runs)


def report(directory: str | Path, write: bool = True) -> Report:
    """Summarize every run under ``directory`` and cross-check stored metrics."""
    directory = Path(directory)
    runs, problems, warnings = [], [], []
    trace_out = directory / "traces"
    for json_path in sorted(directory.rglob("seed*.json")):
        if trace_out in json_path.parents:
            continue
        csv_path = json_path.with_suffix(".csv")
        try:
            stored = json.loads(json_path.read_text())
            trace = read_trace(csv_path)
            redo = recompute_from_trace(trace, int(stored["patience"]))
        except (OSError, ValueError, KeyError, ContractError) as exc:
            problems.append(f"{json_path.relative_to(directory)}: {exc}")
            continue
        mismatched = [k for k, v in redo.items() if stored.get(k) != v]
        run_id = f"{json_path.parent.name}/{json_path.stem}"
        runs.append({
            "run_id": run_id,
            "method": stored.get("config", {}).get("fed", {}).get("method", "?"),
            **{k: stored[k] for k in ("cell_id", "seed", "r_star", "r_near", "stopped", "speedup", "diff_pct")},
            "consistent": not mismatched,
            "mismatched": mismatched,
            "trace": trace,
        })
    if not runs:
        warnings.append(f"no runs found under {directory}")
    runs.sort(key=lambda r: (r["method"], r["cell_id"], r["seed"]))
    table = _render_table(runs)

    if write and runs:
        for r in runs:
            t = r["trace"]
            lines = ["round,val_acc_syn,test_acc"] + [
                f"{int(rd)},{_num(v)},{_num(a)}" for rd, v, a in zip(t["round"], t["val_acc_syn"], t["test_acc"])
            ]
            atomic_write(trace_out / f"{r['run_id'].replace('/', '__')}.csv", "\n".join(lines) + "\n")
        atomic_write(directory / "report.md", table)
        machine = {
            "runs": [{k: v for k, v in r.items() if k != "trace"} for r in runs],
            "problems": problems,
            "consistent": all(r["consistent"] for r in runs),
        }
        atomic_write(directory / "report.json", dumps(machine) + "\n")
    return Report(table, runs, problems, warnings)


def _render_table(runs: list[dict]) -> str:
    header = ["method", "cell", "seed", "r*", "r_near", "speed-up", "diff (%)", "check"]
    body = []
    for method, group in itertools.groupby(runs, key=lambda r: r["method"]):
        for r in group:
            speed = f"x{r['speedup']:.2f}" if r["stopped"] else "no-stop"
            body.append([method, r["cell_id"], str(r["seed"]), str(r["r_star"]), str(r["r_near"]),
                         speed, f"{r['diff_pct']:.2f}", "ok" if r["consistent"] else "MISMATCH"])
    widths = [max(len(h), *(len(row[i]) for row in body)) if body else len(h) for i, h in enumerate(header)]
    fmt = lambda cells: "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
    lines = [fmt(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    lines += [fmt(row) for row in body]
    return "\n".join(lines) + "\n"

