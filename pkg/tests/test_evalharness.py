import csv
import json

import numpy as np
import pytest

from gridvolt.agents import ActorPolicy, CafapPolicy, FixedPlanPolicy, NoChargingPolicy, TrainerConfig, make_agent
from gridvolt.env import EnvConfig
from gridvolt.evalharness import (METRICS, SUMMARY_HEADER, SearchSpaceError, brute_force_plan,
                                  evaluate_suite, export_report, load_summary, recount_metrics,
                                  run_episode)
from gridvolt.fleet import EVSession
from gridvolt.scenario import ScenarioConfig, generate_scenario

from test_env import two_bus_traj

PY = EnvConfig(backend="python")


def tiny_instance(soc0=0.735, price=0.1, n_steps=4):
    """1 charger, empty feeder, EV present for the whole horizon."""
    s = EVSession(0, 0, n_steps, soc0 * 50.0, 45.0, 0.0, 50.0, 11.0, 11.0, 0.2)
    traj = two_bus_traj(n_steps=n_steps, load_kw=0.0, sessions=[s], price=price)
    traj.q_load[:] = 0.0
    return traj


@pytest.fixture(scope="module")
def desk(grid13):
    return [generate_scenario(ScenarioConfig(), seed, grid13) for seed in range(3)]


class TestRunEpisode:
    def test_no_charging(self, grid13, desk):
        res = run_episode(NoChargingPolicy(), desk[0], grid13)
        m = res.metrics
        assert m.cost_eur == 0.0 and m.energy_charged_mwh == 0.0 and m.energy_discharged_mwh == 0.0

    def test_in_band_zero_violations(self, grid2):
        m = run_episode(CafapPolicy(), tiny_instance(), grid2).metrics
        assert m.vv_per_bus == m.vv_per_step == 0 and m.vv_pu == 0.0

    def test_invariants(self, grid13, desk):
        traj = desk[1].with_load_multiplier(1.4)
        m = run_episode(CafapPolicy(), traj, grid13).metrics
        assert m.vv_per_step <= m.vv_per_bus <= grid13.n_bus * traj.n_steps
        assert m.vv_per_step <= traj.n_steps and m.vv_pu >= 0
        assert m.satisfaction_pct == 100.0

    @pytest.mark.parametrize("policy", [CafapPolicy(), NoChargingPolicy()])
    def test_recount(self, grid13, desk, policy, tmp_path):
        for k, traj in enumerate(desk):
            traj = traj.with_load_multiplier(1.0 + 0.2 * k)
            res = run_episode(policy, traj, grid13, keep_trace=True)
            res.trace.write_csv(tmp_path / "t.csv")
            again = recount_metrics(tmp_path / "t.csv", traj)
            assert again.values() == res.metrics.values()

    def test_recount_random_actions(self, grid13, desk, tmp_path):
        rng = np.random.default_rng(0)
        plan = rng.uniform(-1, 1, (96, 26))
        res = run_episode(FixedPlanPolicy(plan), desk[2], grid13, keep_trace=True)
        res.trace.write_csv(tmp_path / "t.csv")
        assert recount_metrics(tmp_path / "t.csv", desk[2]).values() == res.metrics.values()

    def test_partial_on_divergence(self, grid2):
        m = run_episode(NoChargingPolicy(), two_bus_traj(load_kw=10_000.0), grid2).metrics
        assert m.partial


class TestSuite:
    def test_single_scenario_std_zero(self, grid13, desk):
        table, _ = evaluate_suite([CafapPolicy()], desk[:1], grid13)
        assert all(table.std("cafap", m) == 0.0 for m in METRICS)

    def test_duplicates(self, grid13, desk):
        one, _ = evaluate_suite([CafapPolicy()], desk[:1], grid13)
        dup, _ = evaluate_suite([CafapPolicy()], desk[:1] * 3, grid13)
        for m in METRICS:
            assert dup.mean("cafap", m) == pytest.approx(one.mean("cafap", m), rel=1e-15, abs=0)
            assert dup.std("cafap", m) == pytest.approx(0.0, abs=1e-12)

    def test_cafap_worst_vv(self, grid13, desk):
        rng = np.random.default_rng(0)
        agent = make_agent(grid13, desk[0], TrainerConfig(hidden=(32, 32)), rng)
        table, _ = evaluate_suite([CafapPolicy(), NoChargingPolicy(), ActorPolicy(agent)], desk, grid13)
        assert table.mean("cafap", "vv_pu") >= table.mean("none", "vv_pu")
        assert table.mean("cafap", "vv_pu") >= table.mean("pi-td3", "vv_pu")

    def test_empty(self, grid13):
        with pytest.raises(ValueError):
            evaluate_suite([CafapPolicy()], [], grid13)


class TestExport:
    def test_schema_and_round_trip(self, grid13, desk, tmp_path):
        table, traces = evaluate_suite([CafapPolicy(), NoChargingPolicy()], desk[:2], grid13,
                                       keep_traces=True)
        export_report(table, tmp_path, traces)
        with open(tmp_path / "summary.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == SUMMARY_HEADER
        assert {r[1] for r in rows[1:]} >= set(METRICS)
        assert not any("time" in r[1] for r in rows[1:])
        back = load_summary(tmp_path / "summary.json")
        assert back.rows == json.loads(json.dumps(table.rows))
        assert back.config_hash == table.config_hash and back.n_scenarios == 2
        assert (tmp_path / "episode_cafap_1.csv").exists() and (tmp_path / "timing.csv").exists()

    def test_byte_identical_reexport(self, grid13, desk, tmp_path):
        outs = []
        for k in range(2):
            table, traces = evaluate_suite([CafapPolicy()], desk[:1], grid13, keep_traces=True)
            export_report(table, tmp_path / str(k), traces)
            outs.append(tmp_path / str(k))
        for name in ("summary.csv", "summary.json", "episode_cafap_0.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_bad_schema(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps({"schema": "other"}))
        with pytest.raises(ValueError):
            load_summary(tmp_path / "s.json")


class TestBruteForce:
    def test_charges_exactly_to_target(self, grid2):
        # step = 0.25 * 11 / 50 = 0.055; three charges take 0.735 to 0.9. Each charge
        # costs 0.25 * 0.1 * 11 = 0.275 and removes 0.55 of psi penalty per remaining
        # below-target step, so charging early is optimal and a fourth charge is pure cost.
        res = brute_force_plan(grid2, tiny_instance(), horizon=4, env_config=PY)
        assert res.actions[:, 0].tolist() == [1.0, 1.0, 1.0, 0.0]
        psi = 10 * (0.11 + 0.055)
        assert res.objective == pytest.approx(-(psi + 3 * 0.275), abs=1e-9)
        assert res.n_plans == 81

    def test_horizon_zero(self, grid2):
        res = brute_force_plan(grid2, tiny_instance(), horizon=0)
        assert res.actions.shape == (0, 1) and res.objective == 0.0

    def test_search_space_bound(self, grid13, desk):
        with pytest.raises(SearchSpaceError, match="reduce"):
            brute_force_plan(grid13, desk[0], horizon=10)

    def test_beats_heuristics(self, grid2):
        s = [EVSession(0, 0, 5, 15.0, 45.0, 0.0, 50.0, 11.0, 11.0, 0.2),
             EVSession(1, 1, 5, 30.0, 40.0, 0.0, 50.0, 7.4, 7.4, 0.2)]
        traj = two_bus_traj(n_steps=5, load_kw=400.0, sessions=s, n_chargers=2)
        res = brute_force_plan(grid2, traj, env_config=PY)
        assert run_episode(FixedPlanPolicy(res.actions), traj, grid2, PY).total_reward == \
            pytest.approx(res.objective, abs=1e-9)
        assert res.objective >= run_episode(CafapPolicy(), traj, grid2, PY).total_reward
        rng = np.random.default_rng(1)
        for _ in range(100):
            plan = rng.choice([-1.0, 0.0, 1.0], size=(5, 2))
            assert res.objective >= run_episode(FixedPlanPolicy(plan), traj, grid2, PY).total_reward - 1e-9
