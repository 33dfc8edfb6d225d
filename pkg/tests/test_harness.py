import csv
import json
from pathlib import Path

import numpy as np
import pytest

from synstop import cli
from synstop.earlystop import oracle_best_round, scan_stop_round
from synstop.harness import (
    ConfigError,
    ExperimentConfig,
    aggregate,
    dumps,
    expand_grid,
    report,
    run_cell,
    run_experiment,
    sweep,
)

TINY = {
    "task": {"dim": 6, "classes": 4, "train_size": 400, "test_size": 200},
    "fed": {"n_clients": 10, "clients_per_round": 3, "rounds": 15, "local_steps": 2, "batch_size": 16, "lr": 1.0},
    "generator": {"preset": "roentgen", "samples_per_class": 10},
    "patience": 2,
    "alpha": 0.5,
    "seeds": [0, 1],
}


@pytest.fixture
def tiny(tmp_path):
    raw = json.loads(json.dumps(TINY))
    raw["output_dir"] = str(tmp_path / "out")
    return raw


def _diverging(raw):
    # feddyn's proximal pull overshoots without bound once lr * mu >> 1
    raw["fed"].update(method="feddyn", lr=1e308, method_params={"feddyn_mu": 10.0})


def _write(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


class TestConfig:
    def test_defaults_match_desk_scale(self):
        cfg = ExperimentConfig.from_dict({})
        assert cfg.fed.n_clients == 100 and cfg.fed.clients_per_round == 10 and cfg.fed.rounds == 100
        assert cfg.task["dim"] == 32 and cfg.task["classes"] == 14
        assert cfg.seeds == (0, 1, 2, 3, 4) and cfg.metric_mode == "exact_match"

    @pytest.mark.parametrize("raw", [
        {"bogus": 1},
        {"task": {"depth": 3}},
        {"fed": {"momentum": 0.9}},
        {"generator": {"temperature": 1.0}},
        {"fed": {"method_params": {"prox_mu": 0.1}}},
    ])
    def test_unknown_keys_rejected(self, raw):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(raw)

    @pytest.mark.parametrize("raw", [
        {"seeds": []},
        {"patience": 0},
        {"fed": {"clients_per_round": 200}},
        {"fed": {"method": "fedgamma"}},
        {"metric_mode": "f1"},
        {"generator": {"preset": "nope"}},
    ])
    def test_invalid_values_rejected(self, raw):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(raw)

    def test_preset_with_override(self):
        cfg = ExperimentConfig.from_dict({"generator": {"preset": "sd20", "samples_per_class": 100}})
        assert cfg.generator.name == "sd20" and cfg.generator.samples_per_class == 100
        assert cfg.generator.label_flip == 0.1

    def test_roundtrip(self, tiny):
        cfg = ExperimentConfig.from_dict(tiny)
        assert ExperimentConfig.from_dict(json.loads(dumps(cfg.to_dict()))) == cfg


def test_dumps_seventeen_digits():
    text = dumps({"a": 0.1, "b": [1, 2.5], "c": None, "d": True})
    assert '"a": 0.10000000000000001' in text
    assert json.loads(text) == {"a": 0.1, "b": [1, 2.5], "c": None, "d": True}


class TestRunExperiment:
    def test_trace_and_metrics(self, tiny):
        cfg = ExperimentConfig.from_dict(tiny)
        res = run_experiment(cfg, 0)
        assert len(res.trace) == cfg.fed.rounds + 1
        test_acc = [row.test_acc for row in res.trace]
        assert res.r_star == oracle_best_round(test_acc)
        assert res.acc_at_r_near <= res.acc_at_r_star
        assert res.diff_pct == 100.0 * (res.acc_at_r_near - res.acc_at_r_star)
        if res.stopped:
            assert res.r_near == scan_stop_round([row.val_acc_syn for row in res.trace], cfg.patience)
            assert res.speedup == res.r_star / res.r_near

    def test_zero_lr_stops_at_patience(self, tiny):
        tiny["fed"]["lr"] = 0.0
        for p in (1, 3, 6):
            tiny["patience"] = p
            res = run_experiment(ExperimentConfig.from_dict(tiny), 0)
            assert res.stopped and res.r_near == p

    def test_deterministic(self, tiny):
        cfg = ExperimentConfig.from_dict(tiny)
        a, b = run_experiment(cfg, 1), run_experiment(cfg, 1)
        assert a.summary_dict() == b.summary_dict() and a.trace_csv() == b.trace_csv()

    def test_halt_at_stop(self, tiny):
        tiny["fed"]["lr"] = 0.0
        tiny["patience"] = 3
        res = run_experiment(ExperimentConfig.from_dict(tiny), 0, halt_at_stop=True)
        assert len(res.trace) == 4 and res.r_near == 3

    def test_no_stop_reports_last_round(self, tiny):
        tiny["patience"] = 50
        res = run_experiment(ExperimentConfig.from_dict(tiny), 0)
        assert not res.stopped and res.r_near == 15 and res.speedup == 1.0

    def test_snapshot_is_stop_model(self, tiny):
        tiny["fed"]["rounds"] = 60
        cfg = ExperimentConfig.from_dict(tiny)
        full = run_experiment(cfg, 0)
        halted = run_experiment(cfg, 0, halt_at_stop=True)
        assert full.stopped and len(halted.trace) == full.r_near + 1
        assert full.model.values.tobytes() == halted.model.values.tobytes()


def _fake(cell="c", seed=0, r_star=10, r_near=5, speedup=2.0, diff=-0.5, stopped=True):
    return {"cell_id": cell, "seed": seed, "r_star": r_star, "r_near": r_near, "stopped": stopped,
            "speedup": speedup, "diff_pct": diff, "acc_at_r_near": 0.5, "acc_at_r_star": 0.505}


class TestAggregate:
    def test_single(self):
        s = aggregate([_fake()])
        assert s["speedup_mean"] == 2.0 and s["r_star_mean"] == 10 and s["speedup_std"] == 0.0

    def test_mean_of_ratios(self):
        s = aggregate([_fake(speedup=1.0, r_near=10), _fake(seed=1, speedup=3.0, r_star=30)])
        assert s["speedup_mean"] == 2.0
        assert s["speedup_ratio_of_means"] == pytest.approx(20 / 7.5)

    def test_mixed_configs(self):
        with pytest.raises(ValueError):
            aggregate([_fake("a"), _fake("b")])

    def test_matches_recomputation_from_files(self, tiny):
        tiny["seeds"] = [0, 1, 2, 3, 4]
        cfg = ExperimentConfig.from_dict(tiny)
        _, summary = run_cell(cfg)
        cell = cfg.output_dir + "/" + cfg.cell_id
        speedups, diffs, rstars = [], [], []
        for seed in range(5):
            with open(f"{cell}/seed{seed}.csv") as fh:
                rows = list(csv.DictReader(fh))
            test_acc = [float(r["test_acc"]) for r in rows]
            val = [float(r["val_acc_syn"]) for r in rows]
            best = max(range(len(test_acc)), key=lambda i: (test_acc[i], -i))
            stop = scan_stop_round(val, cfg.patience)
            near = stop if stop is not None else len(rows) - 1
            speedups.append(best / near if stop is not None else 1.0)
            diffs.append(100 * (test_acc[near] - test_acc[best]))
            rstars.append(best)
        assert summary["speedup_mean"] == pytest.approx(np.mean(speedups), abs=1e-15)
        assert summary["diff_pct_mean"] == pytest.approx(np.mean(diffs), abs=1e-12)
        assert summary["r_star_mean"] == pytest.approx(np.mean(rstars))
        on_disk = json.loads((Path(cell) / "summary.json").read_text())
        assert on_disk["speedup_mean"] == summary["speedup_mean"]


class TestSweep:
    def test_cardinality(self, tiny):
        cfg = ExperimentConfig.from_dict(tiny)
        cells = expand_grid(cfg, {"alpha": [0.001, 0.01, 0.1, 1.0], "patience": [1, 5, 10]})
        assert len(cells) == 12 and len({c.cell_id for c in cells}) == 12

    def test_one_cell_equals_run_cell(self, tiny, tmp_path):
        cfg = ExperimentConfig.from_dict(tiny)
        rows = sweep(cfg, {"method": ["fedavg"]})
        direct = ExperimentConfig.from_dict({**tiny, "output_dir": str(tmp_path / "direct")})
        _, summary = run_cell(direct)
        assert len(rows) == 1 and rows[0]["speedup_mean"] == summary["speedup_mean"]
        assert (tmp_path / "out" / "sweep.csv").exists()

    def test_resumable(self, tiny, monkeypatch):
        cfg = ExperimentConfig.from_dict(tiny)
        grid = {"method": ["fedavg", "feddyn"]}
        first = sweep(cfg, grid)
        assert [r["status"] for r in first] == ["ok", "ok"]

        import synstop.harness as harness
        monkeypatch.setattr(harness, "run_experiment", lambda *a, **k: pytest.fail("retrained"))
        second = sweep(cfg, grid)
        assert [r["status"] for r in second] == ["cached", "cached"]
        assert [r["speedup_mean"] for r in second] == [r["speedup_mean"] for r in first]

    def test_failure_recorded_and_sweep_continues(self, tiny):
        _diverging(tiny)
        cfg = ExperimentConfig.from_dict(tiny)
        rows = sweep(cfg, {"method": ["feddyn", "fedavg"]})
        assert [r["status"] for r in rows] == ["failed", "ok"]
        failure = json.loads((Path(cfg.output_dir) / rows[0]["cell_id"] / "failure.json").read_text())
        assert failure["error"] == "divergence"


class TestReport:
    def test_empty_dir(self, tmp_path):
        rep = report(tmp_path)
        assert rep.runs == [] and rep.warnings

    def test_one_run(self, tiny):
        cfg = ExperimentConfig.from_dict(tiny)
        run_cell(cfg, seeds=[0])
        rep = report(cfg.output_dir)
        assert len(rep.runs) == 1 and rep.consistent
        traces = list((Path(cfg.output_dir) / "traces").glob("*.csv"))
        assert len(traces) == 1
        lines = traces[0].read_text().splitlines()
        assert lines[0] == "round,val_acc_syn,test_acc" and len(lines) == 1 + cfg.fed.rounds + 1

    def test_grouped_by_method(self, tiny):
        cfg = ExperimentConfig.from_dict(tiny)
        sweep(cfg, {"method": ["fedsam", "fedavg"]})
        rep = report(cfg.output_dir)
        methods = [r["method"] for r in rep.runs]
        assert methods == sorted(methods) and set(methods) == {"fedavg", "fedsam"}

    def test_detects_tampering_and_corruption(self, tiny):
        cfg = ExperimentConfig.from_dict(tiny)
        run_cell(cfg)
        cell = Path(cfg.output_dir) / cfg.cell_id
        stored = json.loads((cell / "seed0.json").read_text())
        stored["speedup"] = stored["speedup"] + 1.0
        (cell / "seed0.json").write_text(json.dumps(stored))
        (cell / "seed1.csv").write_text("garbage\n")
        rep = report(cfg.output_dir)
        assert not rep.consistent
        assert len(rep.problems) == 1 and "seed1" in rep.problems[0]


class TestCli:
    def test_run_and_report(self, tiny, tmp_path, capsys):
        path = _write(tmp_path, "cfg.json", tiny)
        assert cli.main(["run", "--config", path, "--seed", "1"]) == 0
        assert cli.main(["report", "--dir", tiny["output_dir"]]) == 0
        out = capsys.readouterr().out
        assert "seed=1" in out and "| method" in out

    def test_trace(self, tiny, tmp_path, capsys):
        path = _write(tmp_path, "cfg.json", tiny)
        cli.main(["run", "--config", path, "--seed", "0"])
        cell = ExperimentConfig.from_dict(tiny).cell_id
        assert cli.main(["trace", "--dir", tiny["output_dir"], "--run", f"{cell}/seed0"]) == 0
        assert "r*" in capsys.readouterr().out

    def test_config_error_exit_code(self, tmp_path):
        assert cli.main(["run", "--config", _write(tmp_path, "bad.json", {"oops": 1})]) == 1
        assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == 1

    def test_divergence_exit_code(self, tiny, tmp_path):
        _diverging(tiny)
        assert cli.main(["run", "--config", _write(tmp_path, "cfg.json", tiny), "--seed", "0"]) == 2

    def test_partial_sweep_exit_code(self, tiny, tmp_path):
        _diverging(tiny)
        cfg = _write(tmp_path, "cfg.json", tiny)
        grid = _write(tmp_path, "grid.json", {"method": ["feddyn", "fedavg"]})
        assert cli.main(["sweep", "--config", cfg, "--grid", grid]) == 3

    def test_bad_grid(self, tiny, tmp_path):
        cfg = _write(tmp_path, "cfg.json", tiny)
        grid = _write(tmp_path, "grid.json", {"lr": [0.1]})
        assert cli.main(["sweep", "--config", cfg, "--grid", grid]) == 1
