import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PROPERTY_CASES
from mgpf import harness
from mgpf.errors import DegenerateMixtureError
from mgpf.filters import MgpfState
from mgpf.harness import (
    Episode,
    ExperimentConfig,
    RunResult,
    Summary,
    TrajectoryResult,
    build_episode,
    compute_metrics,
    is_success,
    load_results,
    mae,
    rmse,
    run_experiment,
    run_filter,
    run_trajectory,
    sampling_diagnostics,
    save_results,
    summary_table,
)
from mgpf.mixture import GaussianMixture
from mgpf.world import MapSpec, generate_map, generate_trajectory

SMALL = dict(trajectories=3, steps=12, k=20, maps=2)


def synthetic_result(error_rows, task="global", **cfg):
    config = ExperimentConfig(task=task, steps=len(error_rows[0]), **cfg)
    trajs = []
    for i, errs in enumerate(error_rows):
        errs = np.asarray(errs, float)
        truths = np.zeros((len(errs), 3))
        est = np.column_stack([errs, np.zeros_like(errs), np.zeros_like(errs)])
        trajs.append(TrajectoryResult(i, 0, truths, est))
    return RunResult(config, tuple(trajs))


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = ExperimentConfig(task="semi2", filter="pf", k=77, reduce="sample", odo_sigma_xy=1.5)
        cfg.save(tmp_path / "c.txt")
        loaded = ExperimentConfig.load(tmp_path / "c.txt")
        assert loaded == cfg
        assert loaded.to_text() == cfg.to_text()

    def test_comments_and_partial_files(self):
        cfg = ExperimentConfig.from_text("# global run\nk = 5\n\nseed = 3  # master seed\n")
        assert cfg.k == 5 and cfg.seed == 3 and cfg.task == "global"

    @pytest.mark.parametrize("text", ["k = 0", "steps = 0", "task = lost", "filter = ekf", "reduce = all", "colour = red", "k 5"])
    def test_rejects_invalid(self, text):
        with pytest.raises(ValueError):
            ExperimentConfig.from_text(text)


class TestMetrics:
    def test_constant_error(self):
        assert mae([10.0] * 7) == 10.0 and rmse([10.0] * 7) == 10.0

    def test_hand_computed(self):
        assert mae([0.0, 20.0]) == pytest.approx(10.0)
        assert rmse([0.0, 20.0]) == pytest.approx(math.sqrt(200.0))

    def test_success_boundary(self):
        assert is_success([500.0] * 45 + [99.0] * 15)
        assert not is_success([0.0] * 59 + [100.0])
        assert not is_success([99.0] * 10)

    @settings(max_examples=PROPERTY_CASES)
    @given(st.lists(st.floats(0, 1e4), min_size=1, max_size=100))
    def test_rmse_not_below_mae(self, errors):
        assert rmse(errors) >= mae(errors) >= 0

    @settings(max_examples=PROPERTY_CASES)
    @given(st.lists(st.lists(st.floats(0, 300), min_size=20, max_size=20), min_size=1, max_size=6))
    def test_success_rate_monotone_in_threshold(self, rows):
        result = synthetic_result(rows, success_window=5)
        rates = [compute_metrics(result, threshold_cm=t).success_rate for t in (100.0, 75.0, 50.0)]
        assert rates[0] >= rates[1] >= rates[2]

    def test_tracking_uses_leading_steps(self):
        rows = [[10.0] * 24 + [1000.0] * 36, [30.0] * 24 + [1000.0] * 36]
        s = compute_metrics(synthetic_result(rows, task="tracking"))
        assert s.mae == pytest.approx(20.0)
        assert s.rmse == pytest.approx(math.sqrt(500.0))
        assert [r[1] for r in s.per_trajectory] == [10.0, 30.0]

    def test_failures_count_as_unsuccessful(self):
        result = synthetic_result([[0.0] * 20, [0.0] * 20])
        nan = np.full((20, 3), np.nan)
        broken = TrajectoryResult(2, 0, nan, nan, "SingularityError: boom")
        s = compute_metrics(RunResult(result.config, result.trajectories + (broken,)))
        assert s.failures == 1 and s.success_rate == pytest.approx(2 / 3)
        assert s.mae == 0.0


class TestRuns:
    def test_noise_free_sanity(self):
        # exact odometry, zero transition noise, flat observations, belief on the truth
        cfg = ExperimentConfig(task="tracking", k=1, steps=30, odo_sigma_xy=0, odo_sigma_theta=0,
                               filter_sigma_xy=0, filter_sigma_theta=0)
        m = generate_map(MapSpec(rooms=(4, 4)), seed=0)
        traj = generate_trajectory(m, 30, seed=1)
        flat = GaussianMixture(np.zeros((1, 3)), [np.diag([1e12, 1e12, 1e2])], [0.0], exponential=True)
        ep = Episode(0, m, tuple(p for p, _ in traj), tuple(u for _, u in traj[1:]), (flat,) * 30)
        start = GaussianMixture([list(traj[0][0])], [np.diag([1e-4, 1e-4, 1e-6])], [0.0])
        est = run_filter(cfg, ep, np.random.default_rng(0), initial=MgpfState(start, 1))
        truth = np.asarray(ep.poses[1:])
        assert np.max(np.hypot(*(est[:, :2] - truth[:, :2]).T)) < 1e-3

    def test_deterministic_csv(self, tmp_path):
        cfg = ExperimentConfig(**SMALL)
        save_results(run_experiment(cfg), tmp_path / "a")
        save_results(run_experiment(cfg), tmp_path / "b")
        for name in ("steps.csv", "trajectories.csv", "summary.txt", "config.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_worker_count_invariance(self):
        cfg = ExperimentConfig(filter="pf", **SMALL)
        one, two = run_experiment(cfg, workers=1), run_experiment(cfg, workers=2)
        assert harness.steps_csv(one) == harness.steps_csv(two)

    def test_order_invariance(self):
        cfg = ExperimentConfig(**SMALL)
        batch = run_experiment(cfg)
        alone = run_trajectory(cfg, 2)
        np.testing.assert_array_equal(batch.trajectories[2].estimates, alone.estimates)

    def test_filters_share_observations(self):
        a = build_episode(ExperimentConfig(filter="mgpf", **SMALL), 1)
        harness._cached_episode.cache_clear()
        b = build_episode(ExperimentConfig(filter="pf", k=99, **{k: v for k, v in SMALL.items() if k != "k"}), 1)
        assert a is not b
        for x, y in zip(a.observations, b.observations):
            assert (x is None) == (y is None)
            if x is not None:
                np.testing.assert_array_equal(x.means, y.means)
                np.testing.assert_array_equal(x.covs, y.covs)
                np.testing.assert_array_equal(x.log_weights, y.log_weights)
        assert a.odometry == b.odometry

    def test_failure_recorded_not_raised(self, monkeypatch):
        real = harness.run_filter

        def flaky(cfg, episode, rng, initial=None):
            if episode.poses[0] == build_episode(cfg, 1).poses[0]:
                raise DegenerateMixtureError("forced")
            return real(cfg, episode, rng, initial)

        monkeypatch.setattr(harness, "run_filter", flaky)
        result = run_experiment(ExperimentConfig(**SMALL))
        assert [t.failed for t in result.trajectories] == [False, True, False]
        assert "forced" in result.trajectories[1].failure
        assert compute_metrics(result).failures == 1

    def test_per_trajectory_rmse_not_below_mae(self):
        s = compute_metrics(run_experiment(ExperimentConfig(**SMALL)))
        for _, m, r, _ in s.per_trajectory:
            assert r >= m >= 0


class TestPersistence:
    def test_round_trip(self, tmp_path):
        result = run_experiment(ExperimentConfig(task="tracking", **SMALL))
        summary = save_results(result, tmp_path)
        back = load_results(tmp_path)
        assert back.config == result.config
        assert compute_metrics(back).mae == pytest.approx(summary.mae, abs=1e-5)
        assert harness.steps_csv(back) == harness.steps_csv(result)

    def test_fixed_column_count(self, tmp_path):
        save_results(run_experiment(ExperimentConfig(**SMALL)), tmp_path)
        for name, cols in (("steps.csv", harness.STEP_COLUMNS), ("trajectories.csv", harness.TRAJ_COLUMNS)):
            lines = (tmp_path / name).read_text().splitlines()
            assert lines[0].split(",") == list(cols)
            assert {len(line.split(",")) for line in lines} == {len(cols)}

    def test_summary_table_rows(self):
        summaries = [Summary("global", f, k, 10, 0, 0.5, 100.0, 120.0) for f in ("mgpf", "pf") for k in (100, 300, 600)]
        summaries += [Summary("tracking", "pf", 100, 10, 0, 1.0, 12.0, 15.0)]
        table = summary_table(summaries).splitlines()
        assert len(table) == 1 + 6
        assert table[0].split() == ["filter", "K", "tracking", "MAE", "tracking", "RMSE", "global"]
        assert "50.0%" in table[1] and table[4].split()[:2] == ["pf", "100"]
        assert len({len(line) for line in table}) == 1


class TestDiagnostics:
    def test_single_pair_exact(self):
        rows = sampling_diagnostics(dims=2, k_values=(1, 4, 16), trials=5, components=1)
        assert all(r.mean_error < 1e-10 for r in rows)

    def test_error_shrinks(self):
        rows = sampling_diagnostics(dims=2, k_values=(8, 512), trials=40)
        assert rows[1].mean_error < rows[0].mean_error

    def test_csv(self):
        text = harness.diagnostics_csv(sampling_diagnostics(k_values=(8,), trials=3))
        assert text.splitlines()[0] == "K,mean_error,std" and len(text.splitlines()) == 2
