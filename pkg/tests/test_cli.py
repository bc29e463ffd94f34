import json

import numpy as np
import pytest

from gridvolt.agents import load_checkpoint, read_curve
from gridvolt.cli import main
from gridvolt.powerflow import format_grid, load_grid

TINY = {
    "grid": "ieee13",
    "scenario": {"n_steps": 8, "arrivals_per_day": 6.0, "stay_hours": [0.5, 1.5]},
    "train_scenarios": {"n": 2, "seed0": 100},
    "eval_scenarios": {"n": 1, "seed0": 900},
    "trainer": {"hidden": [8, 8], "batch_size": 4, "horizon": 3, "epochs": 2,
                "updates_per_episode": 3},
    "env": {"backend": "python"},
    "seeds": [0],
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(TINY))
    return p


def cli(*args):
    return main([str(a) for a in args])


class TestGenScenarios:
    def test_writes_and_is_deterministic(self, tmp_path, config):
        assert cli("gen-scenarios", "--config", config, "--n", 3, "--seed0", 7, "--out", tmp_path / "a") == 0
        assert cli("gen-scenarios", "--config", config, "--n", 3, "--seed0", 7, "--out", tmp_path / "b") == 0
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == ["scenario_00007.scn", "scenario_00008.scn", "scenario_00009.scn"]
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()

    def test_zero(self, tmp_path):
        assert cli("gen-scenarios", "--n", 0, "--out", tmp_path / "z") == 0
        assert list((tmp_path / "z").iterdir()) == []

    def test_invalid_config(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"scenario": {"n_steps": 0}}))
        assert cli("gen-scenarios", "--config", bad, "--out", tmp_path) == 2
        bad.write_text("{not json")
        assert cli("gen-scenarios", "--config", bad, "--out", tmp_path) == 2
        assert cli("gen-scenarios", "--config", tmp_path / "missing.json") == 2

    def test_env_var_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GRIDVOLT_OUT", str(tmp_path / "root"))
        assert cli("gen-scenarios", "--n", 1) == 0
        assert (tmp_path / "root" / "scenario_00000.scn").exists()


class TestTrain:
    def test_epochs_zero(self, tmp_path, config):
        assert cli("train", "--config", config, "--epochs", 0, "--out", tmp_path) == 0
        curve = read_curve(tmp_path / "curves_seed0.csv")
        assert [p.epoch for p in curve] == [0]
        assert (tmp_path / "ckpt_seed0.npz").exists()

    def test_seed_list_and_determinism(self, tmp_path, config):
        assert cli("train", "--config", config, "--seeds", 1, 2, 3, 4, 5, "--workers", 1,
                   "--out", tmp_path / "a") == 0
        curves = sorted(p.name for p in (tmp_path / "a").glob("curves_*.csv"))
        assert curves == [f"curves_seed{s}.csv" for s in range(1, 6)]
        assert cli("train", "--config", config, "--seeds", 1, "--workers", 1, "--out", tmp_path / "b") == 0
        assert (tmp_path / "a" / "curves_seed1.csv").read_bytes() == \
            (tmp_path / "b" / "curves_seed1.csv").read_bytes()

    def test_resume_continues_counters(self, tmp_path, config):
        assert cli("train", "--config", config, "--out", tmp_path / "a") == 0
        first = read_curve(tmp_path / "a" / "curves_seed0.csv")
        _, h1 = load_checkpoint(tmp_path / "a" / "ckpt_seed0.npz")
        assert cli("train", "--config", config, "--resume", tmp_path / "a" / "ckpt_seed0.npz",
                   "--out", tmp_path / "b") == 0
        second = read_curve(tmp_path / "b" / "curves_seed0.csv")
        assert second[0].epoch == first[-1].epoch == 2
        assert second[0].env_steps == first[-1].env_steps
        assert second[0].updates == first[-1].updates
        assert [p.epoch for p in second] == [2, 3, 4]
        assert second[-1].env_steps > first[-1].env_steps
        _, h2 = load_checkpoint(tmp_path / "b" / "ckpt_seed0.npz")
        assert h2["counters"]["critic"] > h1["counters"]["critic"]

    def test_missing_resume(self, tmp_path, config):
        assert cli("train", "--config", config, "--resume", tmp_path / "nope.npz", "--out", tmp_path) == 2

    def test_non_finite_exit_3(self, tmp_path):
        cfg = dict(TINY, reward={"lambda1": -1e308}, scenario=dict(TINY["scenario"], load_multiplier=2.0))
        p = tmp_path / "inf.json"
        p.write_text(json.dumps(cfg))
        assert cli("train", "--config", p, "--out", tmp_path / "o") == 3
        diag = json.loads((tmp_path / "o" / "diagnostics.json").read_text())
        assert diag["loss"].startswith("critic")


class TestEvaluate:
    def test_baselines_without_checkpoint(self, tmp_path, config):
        assert cli("evaluate", "--config", config, "--agents", "cafap", "none", "--out", tmp_path / "a",
                   "--traces") == 0
        assert (tmp_path / "a" / "summary.csv").exists()
        assert (tmp_path / "a" / "episode_cafap_0.csv").exists()

    def test_learning_agent_needs_checkpoint(self, tmp_path, config):
        assert cli("evaluate", "--config", config, "--agents", "pi-td3", "--out", tmp_path) == 2

    def test_byte_identical(self, tmp_path, config):
        cli("train", "--config", config, "--epochs", 1, "--out", tmp_path / "t")
        for d in ("a", "b"):
            assert cli("evaluate", "--config", config, "--agents", "pi-td3", "cafap", "--checkpoint",
                       tmp_path / "t" / "best_seed0.npz", "--traces", "--out", tmp_path / d) == 0
        for name in ("summary.csv", "summary.json", "episode_pi-td3_0.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_load_multiplier_sweep(self, tmp_path, config):
        cli("gen-scenarios", "--config", config, "--n", 2, "--out", tmp_path / "scn")
        assert cli("evaluate", "--config", config, "--agents", "none", "--scenarios", tmp_path / "scn",
                   "--load-multiplier", 0.5, 1.0, 1.5, "--out", tmp_path / "o") == 0
        vv = {}
        for m in ("0.5", "1", "1.5"):
            s = json.loads((tmp_path / "o" / f"load_x{m}" / "summary.json").read_text())
            assert s["n_scenarios"] == 2
            vv[m] = s["algorithms"]["none"]["vv_pu"]["mean"]
        assert vv["0.5"] <= vv["1"] <= vv["1.5"]


class TestBenchmarkK:
    def test_one_curve_per_k_and_seed(self, tmp_path, config):
        assert cli("benchmark-k", "--config", config, "--k", 1, 2, "--seeds", 0, 1, "--epochs", 1,
                   "--workers", 1, "--out", tmp_path) == 0
        names = sorted(p.name for p in tmp_path.glob("curves_*.csv"))
        assert names == ["curves_K1_seed0.csv", "curves_K1_seed1.csv", "curves_K2_seed0.csv",
                         "curves_K2_seed1.csv"]

    def test_bad_k(self, tmp_path, config):
        assert cli("benchmark-k", "--config", config, "--k", 0, "--out", tmp_path) == 2


class TestGridcheck:
    @pytest.mark.parametrize("name", ["2bus", "ieee13"])
    def test_bundled_pass(self, name, capsys):
        assert cli("gridcheck", name, "--n-random", 20) == 0
        out = capsys.readouterr().out
        if name == "2bus":
            assert "closed" in out.lower()

    def test_corrupted(self, tmp_path):
        text = format_grid(load_grid("ieee13")).splitlines()
        idx = text.index("[lines]") + 2
        text[idx] = text[idx].rsplit(",", 1)[0] + ", abc"
        p = tmp_path / "bad.grid"
        p.write_text("\n".join(text) + "\n")
        assert cli("gridcheck", p) == 2
