import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridvolt.scenario import (EpisodeRecord, ScenarioConfig, ScenarioError, ScenarioParseError,
                               TrajectoryStore, format_trajectory, generate_scenario,
                               load_trajectory, parse_trajectory, sample_segment, save_trajectory)


@pytest.fixture(scope="module")
def traj(request):
    from gridvolt.powerflow import load_grid
    return generate_scenario(ScenarioConfig(), 7, load_grid("ieee13"))


def fake_episode(length, tag, n_ch=2):
    exo = {"price_ch": np.arange(length + 1, dtype=float) + 1000 * tag}
    obs = np.arange(length + 1, dtype=float)[:, None] + 1000 * tag
    dones = np.zeros(length, dtype=bool)
    dones[-1] = True
    return EpisodeRecord(exo, obs, np.zeros((length + 1, n_ch)), np.zeros((length, n_ch)),
                         np.arange(length, dtype=float) + 1000 * tag, dones)


class TestGeneration:
    def test_deterministic_bytes(self, tmp_path, grid13):
        a = generate_scenario(ScenarioConfig(), 3, grid13)
        b = generate_scenario(ScenarioConfig(), 3, grid13)
        save_trajectory(a, tmp_path / "a.scn")
        save_trajectory(b, tmp_path / "b.scn")
        assert (tmp_path / "a.scn").read_bytes() == (tmp_path / "b.scn").read_bytes()
        assert generate_scenario(ScenarioConfig(), 4, grid13) != a

    def test_shapes(self, traj):
        assert traj.n_steps == 96 and traj.n_buses == 13 and traj.n_chargers == 26
        assert traj.dt == 0.25
        frames = traj.frames
        assert len(frames) == 96 and frames[5].p_load.shape == (13,)
        assert np.all(traj.price_ch >= 0) and np.all(traj.price_dis >= 0)
        assert np.all(traj.p_pv <= 0)

    def test_load_multiplier_zero(self, grid13):
        t = generate_scenario(ScenarioConfig(load_multiplier=0.0), 1, grid13)
        assert np.all(t.p_load == 0) and np.all(t.q_load == 0)

    @pytest.mark.parametrize("m", [0.5, 1.0, 1.5])
    def test_multiplier_sweep(self, traj, m):
        scaled = traj.with_load_multiplier(m)
        np.testing.assert_allclose(scaled.p_load, traj.p_load * m)
        assert np.array_equal(scaled.p_pv, traj.p_pv) and scaled.sessions == traj.sessions

    def test_double_peak_load(self, grid13):
        t = generate_scenario(ScenarioConfig(load_noise=0.0), 0, grid13)
        total = t.p_load.sum(axis=1)
        night = total[(t.hours >= 2) & (t.hours < 5)].mean()
        assert total[(t.hours >= 7) & (t.hours < 10)].mean() > night
        assert total[(t.hours >= 17) & (t.hours < 21)].mean() > night

    def test_session_feasibility(self, grid13):
        for seed in range(10):
            t = generate_scenario(ScenarioConfig(arrivals_per_day=4.0), seed, grid13)
            assert t.sessions
            for s in t.sessions:
                assert s.e_target <= s.e_arrival + s.p_ch_max * (s.t_depart - s.t_arrival) * t.dt + 1e-9
                assert s.t_depart <= t.n_steps

    def test_price_ratio(self, grid13):
        t = generate_scenario(ScenarioConfig(price_dis_ratio=0.5), 2, grid13)
        np.testing.assert_allclose(t.price_dis, 0.5 * t.price_ch)

    def test_retry_bound(self, grid13):
        cfg = ScenarioConfig(arrivals_per_day=500.0, stay_hours=(20.0, 23.0), max_retries=3)
        with pytest.raises(ScenarioError):
            generate_scenario(cfg, 0, grid13)

    @pytest.mark.parametrize("kw", [dict(n_steps=0), dict(dt=-1.0), dict(stay_hours=(3.0, 1.0)),
                                    dict(soc_target_range=(0.9, 0.8)), dict(load_multiplier=-1.0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ScenarioError):
            ScenarioConfig(**kw).validate()

    def test_config_dict_round_trip(self):
        cfg = ScenarioConfig(n_steps=12, arrival_peaks=(9.0,))
        assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ScenarioError):
            ScenarioConfig.from_dict({"bogus": 1})


class TestFileFormat:
    def test_round_trip(self, traj, tmp_path):
        save_trajectory(traj, tmp_path / "s.scn")
        back = load_trajectory(tmp_path / "s.scn")
        assert back == traj
        assert format_trajectory(back) == format_trajectory(traj)

    def test_truncated(self, traj):
        text = format_trajectory(traj)
        with pytest.raises(ScenarioParseError):
            parse_trajectory(text[: len(text) // 2])

    def test_version(self, traj):
        text = format_trajectory(traj).replace("gridvolt-scenario v1", "gridvolt-scenario v0", 1)
        with pytest.raises(ScenarioParseError, match="version"):
            parse_trajectory(text)

    def test_bad_field_has_line(self, traj):
        lines = format_trajectory(traj).splitlines()
        idx = next(i for i, ln in enumerate(lines) if ln.strip() == "[frames]") + 3
        lines[idx] = lines[idx].replace(",", ",x", 1)
        with pytest.raises(ScenarioParseError) as exc:
            parse_trajectory("\n".join(lines) + "\n")
        assert exc.value.line is not None


class TestStore:
    def test_fifo_eviction(self):
        store = TrajectoryStore(capacity=25)
        for tag in range(4):
            store.add(fake_episode(10, tag))
        assert len(store) <= 25
        assert [ep.rewards[0] for ep in store.episodes] == [2000.0, 3000.0]

    def test_not_ready(self, rng):
        store = TrajectoryStore()
        store.add(fake_episode(5, 0))
        assert sample_segment(store, 3, 10, rng) is None
        assert sample_segment(store, 3, 3, rng) is not None

    def test_k_larger_than_t(self, rng):
        store = TrajectoryStore()
        store.add(fake_episode(5, 0))
        with pytest.raises(ValueError):
            sample_segment(store, 6, 1, rng)

    def test_k1_is_transition(self, rng):
        store = TrajectoryStore()
        store.add(fake_episode(8, 0))
        seg = sample_segment(store, 1, 8, rng)
        assert seg.horizon == 1
        np.testing.assert_array_equal(seg.next_obs[:, 0], seg.obs[:, 0] + 1)
        np.testing.assert_array_equal(seg.reward, seg.starts.astype(float))
        np.testing.assert_array_equal(seg.done, seg.head_done)

    @given(st.lists(st.integers(1, 12), min_size=1, max_size=5), st.integers(1, 12), st.integers(0, 10**6))
    @settings(max_examples=100, deadline=None)
    def test_never_crosses_boundary(self, lengths, k, seed):
        store = TrajectoryStore()
        for tag, n in enumerate(lengths):
            store.add(fake_episode(n, tag))
        if k > max(lengths):
            with pytest.raises(ValueError):
                sample_segment(store, k, 4, np.random.default_rng(seed))
            return
        seg = sample_segment(store, k, 4, np.random.default_rng(seed))
        if seg is None:
            assert store.eligible_counts(k).sum() < 4
            return
        ex = seg.exo["price_ch"]
        assert ex.shape == (4, k + 1)
        tags = ex // 1000
        assert np.all(tags == tags[:, :1])
        assert np.all(np.diff(ex, axis=1) == 1)
        for b in range(4):
            n = lengths[seg.episodes[b]]
            assert seg.starts[b] + k <= n
            assert seg.done[b] == (seg.starts[b] + k == n)

    def test_uniform_starts_chi_square(self):
        store = TrajectoryStore()
        for tag, n in enumerate((20, 30, 14)):
            store.add(fake_episode(n, tag))
        k = 5
        cells = int(store.eligible_counts(k).sum())
        rng = np.random.default_rng(2024)
        segs = [sample_segment(store, k, 50, rng) for _ in range(2000)]
        key = np.concatenate([s.episodes * 100 + s.starts for s in segs])
        _, counts = np.unique(key, return_counts=True)
        assert len(counts) == cells
        expected = 100_000 / cells
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        # df = cells - 1 = 51; the 0.999 quantile is about 87.0
        assert chi2 < 87.0
