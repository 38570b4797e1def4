import json
import subprocess
import sys

import numpy as np
import pytest

from mnl_bandit import core, harness, oracle
from mnl_bandit.cli import main
from mnl_bandit.core import kappa_bounds
from mnl_bandit.harness import (
    TRACE_HEADER,
    ConfigError,
    ExperimentConfig,
    default_checkpoints,
    parse_seeds,
    read_trace,
)

TINY = {"generator": "random", "params": {"K": 3, "d": 2, "S": 1.0, "n_actions": 5, "rng": 1}}


def write_config(path, **overrides):
    doc = {"instance": TINY, "policies": ["random"], "T": 100, "seeds": 1, "out": str(path / "out")}
    doc.update(overrides)
    cfg = path / "config.json"
    cfg.write_text(json.dumps(doc))
    return cfg


class TestConfig:
    def test_seed_forms(self):
        assert parse_seeds(3) == [0, 1, 2]
        assert parse_seeds([4, 9]) == [4, 9]
        assert parse_seeds("3,7,11") == [3, 7, 11]
        assert parse_seeds("2") == [0, 1]

    @pytest.mark.parametrize("bad", [0, [], "a,b", [1, 1], [-1], True])
    def test_bad_seeds(self, bad):
        with pytest.raises(ConfigError):
            parse_seeds(bad)

    @pytest.mark.parametrize("change", [
        {"policies": []}, {"policies": ["ucb"]}, {"T": 0}, {"T": 1.5},
        {"policy": {"colour": 1}}, {"policy": {"delta": 2.0}}, {"checkpoints": [0]},
        {"workers": 0}, {"instance": {}},
    ])
    def test_invalid(self, change):
        doc = {"instance": TINY, "policies": ["random"], "T": 10, "seeds": 1, **change}
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(doc)

    def test_unknown_and_missing_keys(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"instance": TINY, "policies": ["random"], "T": 5, "seeds": 1,
                                        "colour": "red"})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"instance": TINY, "policies": ["random"], "T": 5})

    def test_emit_block(self):
        cfg = ExperimentConfig.from_dict({"instance": TINY, "policies": "random", "T": 5, "seeds": 1,
                                          "emit": {"trace": False, "oracle": True}})
        assert cfg.policies == ["random"]
        assert (cfg.trace, cfg.aggregates, cfg.oracle) == (False, True, True)

    def test_checkpoint_grid(self):
        assert default_checkpoints(40_000) == [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000,
                                               5000, 10_000, 20_000, 40_000]
        assert default_checkpoints(1) == [1]
        assert all(1 <= c <= 37 for c in default_checkpoints(37))

    def test_env_var_sets_output(self, tmp_path, monkeypatch):
        monkeypatch.setenv(harness.OUT_ENV, str(tmp_path / "env_out"))
        cfg = ExperimentConfig.from_dict({"instance": TINY, "policies": ["random"], "T": 5, "seeds": 1})
        assert cfg.out_dir() == tmp_path / "env_out"


class TestRun:
    def test_minimal_random(self, tmp_path, capsys):
        assert main(["run", "--config", str(write_config(tmp_path))]) == 0
        trace = tmp_path / "out" / "trace_random_0.csv"
        lines = trace.read_text().splitlines()
        assert lines[0] == TRACE_HEADER
        assert len(lines) == 101
        cols = read_trace(trace)
        assert np.all(np.diff(cols["cum_regret"]) >= 0)
        assert np.max(np.abs(np.cumsum(cols["inst_regret"]) - cols["cum_regret"])) <= 1e-9
        assert json.loads(capsys.readouterr().out)["out"] == str(tmp_path / "out")

    def test_file_count(self, tmp_path):
        cfg = write_config(tmp_path, policies=["random", "greedy_mle"], seeds=20, T=50)
        assert main(["run", "--config", str(cfg)]) == 0
        out = tmp_path / "out"
        assert len(list(out.glob("trace_*.csv"))) == 40
        assert [p.name for p in out.glob("*.json")] == ["aggregates.json"]

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, policies=["kata_log"], seeds=[5], T=300)
        assert main(["run", "--config", str(cfg)]) == 0
        first = (tmp_path / "out" / "trace_kata_log_5.csv").read_bytes()
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
        assert (tmp_path / "again" / "trace_kata_log_5.csv").read_bytes() == first

    def test_workers_do_not_change_results(self, tmp_path):
        cfg = write_config(tmp_path, policies=["random", "kata_log"], seeds=2, T=150)
        assert main(["run", "--config", str(cfg)]) == 0
        assert main(["run", "--config", str(cfg), "--workers", "2", "--out", str(tmp_path / "par")]) == 0
        for f in (tmp_path / "out").glob("trace_*.csv"):
            assert (tmp_path / "par" / f.name).read_bytes() == f.read_bytes()

    def test_aggregates_match_traces(self, tmp_path):
        cfg = write_config(tmp_path, policies=["random", "kata_log"], seeds=3, T=200)
        assert main(["run", "--config", str(cfg)]) == 0
        out = tmp_path / "out"
        agg = json.loads((out / "aggregates.json").read_text())
        for policy, stats in agg["policies"].items():
            cums = np.stack([read_trace(out / f"trace_{policy}_{s}.csv")["cum_regret"]
                             for s in stats["seeds"]])
            for cp in stats["checkpoints"]:
                col = cums[:, cp["t"] - 1]
                assert cp["mean"] == pytest.approx(col.mean(), abs=1e-9)
                assert cp["median"] == pytest.approx(np.median(col), abs=1e-9)
                assert cp["q75"] - cp["q25"] == pytest.approx(cp["iqr"], abs=1e-12)
                assert cp["q25"] >= 0
            assert [c["t"] for c in stats["checkpoints"]][-1] == 200
        kata = agg["policies"]["kata_log"]
        assert kata["optimism"]["checks"] > 0
        assert agg["policies"]["random"]["optimism"]["rate"] is None

    def test_flags_override_config(self, tmp_path):
        cfg = write_config(tmp_path, T=100, seeds=5)
        assert main(["run", "--config", str(cfg), "--T", "20", "--seeds", "3,4",
                     "--policies", "greedy_mle", "--paper-constants"]) == 0
        names = sorted(p.name for p in (tmp_path / "out").glob("trace_*.csv"))
        assert names == ["trace_greedy_mle_3.csv", "trace_greedy_mle_4.csv"]
        assert len((tmp_path / "out" / names[0]).read_text().splitlines()) == 21

    def test_timing_column(self, tmp_path):
        cfg = write_config(tmp_path, T=30)
        assert main(["run", "--config", str(cfg)]) == 0
        assert np.all(read_trace(tmp_path / "out" / "trace_random_0.csv")["elapsed_ns"] == 0)
        assert main(["run", "--config", str(cfg), "--trace-timing"]) == 0
        assert np.all(read_trace(tmp_path / "out" / "trace_random_0.csv")["elapsed_ns"] > 0)

    def test_env_var_output(self, tmp_path, monkeypatch):
        monkeypatch.setenv(harness.OUT_ENV, str(tmp_path / "env"))
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"instance": TINY, "policies": ["random"], "T": 10, "seeds": 1}))
        assert main(["run", "--config", str(cfg)]) == 0
        assert (tmp_path / "env" / "trace_random_0.csv").exists()

    def test_instance_file(self, tmp_path):
        inst = harness.build_instance(TINY)
        inst.save(tmp_path / "inst.json")
        cfg = write_config(tmp_path, instance={"path": str(tmp_path / "inst.json")}, T=10)
        assert main(["run", "--config", str(cfg)]) == 0

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["run", "--config", str(bad)]) == 2
        assert main(["run", "--config", str(write_config(tmp_path, T=-3))]) == 2
        assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
        assert "error" in capsys.readouterr().err

    def test_runtime_failure_exits_1(self, tmp_path, monkeypatch, capsys):
        def explode(*args, **kwargs):
            raise RuntimeError("disk on fire")
        monkeypatch.setattr(harness, "run", explode)
        assert main(["run", "--config", str(write_config(tmp_path))]) == 1
        assert "disk on fire" in capsys.readouterr().err

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "mnl_bandit", "run", "--config",
                               str(write_config(tmp_path, T=5))], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr


class TestInstanceInfo:
    def info(self, capsys, *argv):
        assert main(["instance-info", *argv]) == 0
        return json.loads(capsys.readouterr().out)

    def test_closed_form_constant(self, capsys):
        doc = self.info(capsys, "--generator", "large_kappa_star", "--param", "K=3", "--param", "d=2",
                        "--param", "S=1.0", "--param", "n_actions=4")
        assert doc["kappa_star_closed_form"] == pytest.approx(4.0947, abs=5e-4)
        assert doc["kappa_star"] == pytest.approx(doc["kappa_star_closed_form"], rel=1e-9)

    def test_zero_parameter_has_flat_gaps(self, capsys, tmp_path):
        inst = harness.build_instance({"generator": "random",
                                       "params": {"K": 3, "d": 2, "S": 0.0, "n_actions": 6}})
        inst.save(tmp_path / "zero.json")
        doc = self.info(capsys, "--config", str(tmp_path / "zero.json"))
        assert doc["gaps"] == [0.0] * 6

    def test_bracket_is_pass_through(self, capsys, tmp_path):
        cfg = write_config(tmp_path, instance={"generator": "random",
                                               "params": {"K": 4, "d": 3, "S": 1.5, "n_actions": 5}})
        doc = self.info(capsys, "--config", str(cfg))
        lo, hi, valid = kappa_bounds(1.5, 1.0, 4)
        assert doc["kappa_bracket"] == {"lower": lo, "upper": hi, "lower_valid": valid}
        assert (doc["K"], doc["d"], doc["S"], doc["n_actions"]) == (4, 3, 1.5, 5)
        inst = harness.build_instance({"generator": "random",
                                       "params": {"K": 4, "d": 3, "S": 1.5, "n_actions": 5}})
        assert doc["x_star"] == inst.actions[inst.best_index].tolist()
        assert doc["gaps"] == inst.gaps.tolist()

    def test_invalid_spec_exits_2(self, capsys, tmp_path):
        assert main(["instance-info", "--generator", "random", "--param", "K=1"]) == 2
        assert main(["instance-info"]) == 2
        assert main(["instance-info", "--config", str(tmp_path / "nope.json")]) == 2


class TestVerify:
    def test_quick_passes(self, capsys, tmp_path):
        assert main(["verify", "--level", "quick", "--out", str(tmp_path)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == len(oracle.CHECKS)
        saved = json.loads((tmp_path / "oracle_reports.json").read_text())
        assert [r["name"] for r in saved] == list(oracle.CHECKS)

    def test_corrupted_gradient_fails(self, monkeypatch, capsys):
        good = core.log_loss_gradient
        monkeypatch.setattr(core, "log_loss_gradient", lambda th, x, y: good(th, x, y) + 1e-3)
        assert main(["verify"]) == 1

    def test_full_emits_one_report_per_check(self, monkeypatch, capsys, tmp_path):
        # full-level arguments shrunk to quick ones; the schema is what is checked
        small = {k: oracle.Check(c.fn, c.quick, c.quick) for k, c in oracle.CHECKS.items()}
        monkeypatch.setattr(oracle, "CHECKS", small)
        assert main(["verify", "--level", "full", "--out", str(tmp_path)]) == 0
        saved = json.loads((tmp_path / "oracle_reports.json").read_text())
        assert len(saved) == len(small)
        for rep in saved:
            assert set(rep) == {"name", "max_abs_err", "samples", "passed", "details", "tolerance"}
            assert rep["passed"] is True
