"""Seeded batch experiments: MGPF against the particle filter on generated buildings.

Every random quantity of trajectory ``i`` is drawn from generators seeded by
``(seed, stream, i)``, so a batch gives the same bytes regardless of worker
count or execution order. MGPF and PF runs with the same seed see the same
maps, trajectories, odometry readings and observation mixtures.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateMixtureError, MapError, SingularityError, TrajectoryError
from .filters import (
    TASKS,
    MgpfState,
    TransitionModel,
    estimate_pose,
    initialize,
    mgpf_correct,
    mgpf_predict,
    pf_correct,
    pf_predict,
    pf_resample,
)
from .mixture import GaussianMixture, evaluate, product_plan, sample_product
from .observation import observe
from .world import MapSpec, WallMap, generate_map, generate_trajectory, noisy_odometry, simulate_scan

log = logging.getLogger(__name__)

FILTERS = ("mgpf", "pf")
REDUCE_FLAGS = {"topk": "top_k", "sample": "sample"}

# generator streams per trajectory
STREAM_MAP, STREAM_TRAJ, STREAM_ODO, STREAM_OBS, STREAM_FILTER = range(5)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "global"
    filter: str = "mgpf"
    k: int = 100
    reduce: str = "topk"
    steps: int = 60
    trajectories: int = 50
    seed: int = 0
    maps: int = 10
    rooms_min: int = 4
    rooms_max: int = 4
    odo_sigma_xy: float = 2.0
    odo_sigma_theta: float = 0.02
    filter_sigma_xy: float = 2.0
    filter_sigma_theta: float = 0.02
    success_window: int = 15
    success_threshold_cm: float = 100.0
    tracking_steps: int = 24

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.filter not in FILTERS:
            raise ValueError(f"filter must be one of {FILTERS}, got {self.filter!r}")
        if self.reduce not in REDUCE_FLAGS:
            raise ValueError(f"reduce must be one of {tuple(REDUCE_FLAGS)}, got {self.reduce!r}")
        for name in ("k", "steps", "trajectories", "maps", "success_window", "tracking_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 1 <= self.rooms_min <= self.rooms_max:
            raise ValueError("need 1 <= rooms_min <= rooms_max")
        if min(self.odo_sigma_xy, self.odo_sigma_theta, self.filter_sigma_xy, self.filter_sigma_theta) < 0:
            raise ValueError("noise standard deviations must be non-negative")

    @property
    def map_spec(self) -> MapSpec:
        return MapSpec(rooms=(self.rooms_min, self.rooms_max))

    @property
    def odometry_cov(self) -> np.ndarray:
        return np.diag(np.square([self.odo_sigma_xy, self.odo_sigma_xy, self.odo_sigma_theta]))

    @property
    def transition(self) -> TransitionModel:
        return TransitionModel.from_sigmas(self.filter_sigma_xy, self.filter_sigma_xy, self.filter_sigma_theta)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        defaults = cls()
        kinds = {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep or key not in kinds:
                raise ValueError(f"line {lineno}: expected 'key = value' with a known key, got {line!r}")
            values[key] = kinds[key](value)
        return cls(**values)

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# episodes (world + sensing, shared by both filters)
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Episode:
    map_index: int
    wall_map: WallMap
    poses: tuple  # steps + 1 true poses
    odometry: tuple  # steps noisy readings, odometry[t] moves poses[t] -> poses[t+1]
    observations: tuple  # steps entries, GaussianMixture or None, taken at poses[1:]


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


@lru_cache(maxsize=16)
def _cached_map(seed: int, map_index: int, spec: MapSpec) -> WallMap:
    return generate_map(spec, seed=[seed, STREAM_MAP, map_index])


@lru_cache(maxsize=256)
def _cached_episode(seed, index, maps, spec, steps, odo_sigmas) -> Episode:
    map_index = index % maps
    wall_map = _cached_map(seed, map_index, spec)
    traj = generate_trajectory(wall_map, steps, seed=_rng(seed, STREAM_TRAJ, index))
    cov = np.diag(np.square([odo_sigmas[0], odo_sigmas[0], odo_sigmas[1]]))
    odo_rng = _rng(seed, STREAM_ODO, index)
    odometry = tuple(noisy_odometry(u, cov, odo_rng) for _, u in traj[1:])
    obs_rng = _rng(seed, STREAM_OBS, index)
    observations = tuple(observe(simulate_scan(wall_map, p), wall_map, obs_rng) for p, _ in traj[1:])
    return Episode(map_index, wall_map, tuple(p for p, _ in traj), odometry, observations)


def build_episode(cfg: ExperimentConfig, index: int) -> Episode:
    """World, ground truth, odometry and observations of trajectory ``index``."""
    return _cached_episode(cfg.seed, index, cfg.maps, cfg.map_spec, cfg.steps,
                           (cfg.odo_sigma_xy, cfg.odo_sigma_theta))


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrajectoryResult:
    index: int
    map_index: int
    truths: np.ndarray  # (steps, 3) true poses after each step
    estimates: np.ndarray  # (steps, 3)
    failure: str = ""
    seconds_per_step: float = 0.0

    @property
    def errors(self) -> np.ndarray:
        """Euclidean (x, y) error per step in cm."""
        return np.hypot(*(self.estimates[:, :2] - self.truths[:, :2]).T)

    @property
    def failed(self) -> bool:
        return bool(self.failure)


@dataclass(frozen=True, eq=False)
class RunResult:
    config: ExperimentConfig
    trajectories: tuple

    def __len__(self):
        return len(self.trajectories)


def run_filter(cfg: ExperimentConfig, episode: Episode, rng: np.random.Generator, initial=None) -> np.ndarray:
    """Run one filter over an episode; returns (steps, 3) pose estimates.

    ``initial`` replaces the task's initial belief (an MgpfState or ParticleSet).
    """
    state = initial
    if state is None:
        state = initialize(cfg.task, episode.poses[0], episode.wall_map, cfg.k, rng,
                           kind=cfg.filter, reduction=REDUCE_FLAGS[cfg.reduce])
    model = cfg.transition
    estimates = np.empty((cfg.steps, 3))
    for t, (u, obs) in enumerate(zip(episode.odometry, episode.observations)):
        if isinstance(state, MgpfState):
            state = mgpf_predict(state, u, model)
            if obs is not None:
                state = mgpf_correct(state, obs, rng)
        else:
            state = pf_predict(state, u, model, rng)
            if obs is not None:
                state = pf_resample(pf_correct(state, obs), rng)
        estimates[t] = estimate_pose(state)
    return estimates


RECORDED_ERRORS = (DegenerateMixtureError, SingularityError, MapError, TrajectoryError, FloatingPointError)


def run_trajectory(cfg: ExperimentConfig, index: int) -> TrajectoryResult:
    """One trajectory; module errors are recorded as a failure instead of raised."""
    nan = np.full((cfg.steps, 3), np.nan)
    map_index = index % cfg.maps
    try:
        episode = build_episode(cfg, index)
        truths = np.asarray(episode.poses[1:], float)
        start = time.perf_counter()
        estimates = run_filter(cfg, episode, _rng(cfg.seed, STREAM_FILTER, index))
        elapsed = (time.perf_counter() - start) / cfg.steps
    except RECORDED_ERRORS as err:
        log.warning("trajectory %d failed: %s", index, err)
        return TrajectoryResult(index, map_index, nan, nan, f"{type(err).__name__}: {err}")
    return TrajectoryResult(index, map_index, truths, estimates, "", elapsed)


def _run_one(args):
    return run_trajectory(*args)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> RunResult:
    jobs = [(cfg, i) for i in range(cfg.trajectories)]
    if workers <= 1:
        results = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    return RunResult(cfg, tuple(results))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def mae(errors) -> float:
    return float(np.mean(np.asarray(errors, float)))


def rmse(errors) -> float:
    e = np.asarray(errors, float)
    # the quadratic mean can round a hair below the mean for constant errors
    return max(float(np.sqrt(np.mean(e * e))), mae(e))


def is_success(errors, window: int = 15, threshold_cm: float = 100.0) -> bool:
    """True when every one of the last ``window`` errors is strictly below the threshold."""
    e = np.asarray(errors, float)
    return bool(len(e) >= window and np.all(e[-window:] < threshold_cm))


@dataclass(frozen=True)
class Summary:
    task: str
    filter: str
    k: int
    trajectories: int
    failures: int
    success_rate: float
    mae: float
    rmse: float
    per_trajectory: tuple = field(default=(), compare=False)  # (index, mae, rmse, success)


def compute_metrics(result: RunResult, threshold_cm: Optional[float] = None) -> Summary:
    """Success rate plus pooled MAE/RMSE.

    Tracking runs are scored on the first ``tracking_steps`` steps, other
    tasks on the whole trajectory. Failed trajectories count as unsuccessful
    and are left out of the error averages.
    """
    cfg = result.config
    threshold = cfg.success_threshold_cm if threshold_cm is None else threshold_cm
    span = cfg.tracking_steps if cfg.task == "tracking" else cfg.steps
    pooled, rows = [], []
    successes = failures = 0
    for tr in result.trajectories:
        if tr.failed:
            failures += 1
            rows.append((tr.index, math.nan, math.nan, False))
            continue
        e = tr.errors
        ok = is_success(e, cfg.success_window, threshold)
        successes += ok
        pooled.append(e[:span])
        rows.append((tr.index, mae(e[:span]), rmse(e[:span]), ok))
    allerr = np.concatenate(pooled) if pooled else np.array([math.nan])
    n = len(result.trajectories)
    return Summary(cfg.task, cfg.filter, cfg.k, n, failures, successes / n if n else 0.0,
                   mae(allerr), rmse(allerr) if pooled else math.nan, tuple(rows))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

STEP_COLUMNS = ("trajectory", "map", "step", "true_x_cm", "true_y_cm", "true_theta_rad",
                "est_x_cm", "est_y_cm", "est_theta_rad", "error_cm")
TRAJ_COLUMNS = ("trajectory", "map", "mae_cm", "rmse_cm", "success", "failure")


def _fmt(x: float) -> str:
    # shortest repr that round-trips, so reloaded results recompute identical errors
    return "nan" if not np.isfinite(x) else repr(float(x))


def steps_csv(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STEP_COLUMNS)
    for tr in result.trajectories:
        err = tr.errors
        for t in range(len(err)):
            w.writerow([tr.index, tr.map_index, t + 1, *map(_fmt, tr.truths[t]), *map(_fmt, tr.estimates[t]), _fmt(err[t])])
    return buf.getvalue()


def trajectories_csv(result: RunResult, summary: Optional[Summary] = None) -> str:
    summary = summary or compute_metrics(result)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJ_COLUMNS)
    for tr, (idx, m, r, ok) in zip(result.trajectories, summary.per_trajectory):
        w.writerow([idx, tr.map_index, _fmt(m), _fmt(r), int(ok), tr.failure])
    return buf.getvalue()


def summary_text(summary: Summary) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(summary).items() if k != "per_trajectory")


def save_results(result: RunResult, out_dir) -> Summary:
    """Write config.txt, steps.csv, trajectories.csv and summary.txt into ``out_dir``.

    Wall-clock timings are not written so that files are reproducible byte
    for byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = compute_metrics(result)
    result.config.save(out / "config.txt")
    (out / "steps.csv").write_text(steps_csv(result))
    (out / "trajectories.csv").write_text(trajectories_csv(result, summary))
    (out / "summary.txt").write_text(summary_text(summary))
    return summary


def load_results(out_dir) -> RunResult:
    out = Path(out_dir)
    cfg = ExperimentConfig.load(out / "config.txt")
    failures = {}
    with open(out / "trajectories.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            failures[int(row["trajectory"])] = (int(row["map"]), row["failure"])
    steps = {i: [] for i in failures}
    with open(out / "steps.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            steps[int(row["trajectory"])].append([float(row[c]) for c in STEP_COLUMNS[3:9]])
    trajectories = []
    for i, (map_index, failure) in sorted(failures.items()):
        arr = np.asarray(steps[i], float).reshape(-1, 6)
        trajectories.append(TrajectoryResult(i, map_index, arr[:, :3], arr[:, 3:], failure))
    return RunResult(cfg, tuple(trajectories))


def summary_table(summaries: Sequence[Summary]) -> str:
    """Aligned text table: one row per (filter, K); MAE/RMSE for tracking, success % per other task."""
    tasks = [t for t in TASKS if any(s.task == t for s in summaries)]
    columns = []
    for t in tasks:
        columns += [("tracking", "MAE"), ("tracking", "RMSE")] if t == "tracking" else [(t, "success")]
    cells = {}
    for s in summaries:
        key = (s.filter, s.k)
        if s.task == "tracking":
            cells[key, ("tracking", "MAE")] = f"{s.mae:.1f}"
            cells[key, ("tracking", "RMSE")] = f"{s.rmse:.1f}"
        else:
            cells[key, (s.task, "success")] = f"{100 * s.success_rate:.1f}%"
    rows = sorted({(s.filter, s.k) for s in summaries}, key=lambda r: (FILTERS.index(r[0]), r[1]))
    header = ["filter", "K"] + [f"{t} {m}" if t == "tracking" else t for t, m in columns]
    body = [[f, str(k)] + [cells.get(((f, k), c), "-") for c in columns] for f, k in rows]
    widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in [header] + body]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# sampled-product accuracy
# ---------------------------------------------------------------------------

def random_mixture(n: int, dims: int, rng: np.random.Generator, spread: float = 3.0) -> GaussianMixture:
    means = rng.uniform(-spread, spread, size=(n, dims))
    a = rng.normal(size=(n, dims, dims)) * 0.6
    covs = a @ a.transpose(0, 2, 1) + 0.5 * np.eye(dims)
    return GaussianMixture(means, covs, np.log(rng.dirichlet(np.ones(n))))


@dataclass(frozen=True)
class DiagnosticRow:
    k: int
    mean_error: float
    std: float


def sampling_diagnostics(dims: int = 2, k_values=(8, 32, 128, 512), trials: int = 200, seed: int = 0,
                         components: int = 4, grid_points: int = 100, mode: str = "exponential"):
    """Sup relative error of sampled products against the exact product, per budget K.

    Two random ``components``-term mixtures are multiplied; the exact product
    is evaluated on ``grid_points`` points drawn from it. For each K the
    sampled product (scaled by its log-normalizer) is compared on that grid
    over ``trials`` independent draws.
    """
    setup = np.random.default_rng([seed, 0])
    a = random_mixture(components, dims, setup)
    b = random_mixture(components, dims, setup)
    plan = product_plan(a, b, mode=mode)
    exact = plan.materialize()
    probs = np.exp(plan.pair_log_weights - plan.log_total)
    rows = setup.choice(len(plan), size=grid_points, p=probs / probs.sum())
    grid = np.stack([setup.multivariate_normal(exact.means[r], exact.covs[r]) for r in rows])
    truth = evaluate(exact, grid)
    out = []
    for k in k_values:
        rng = np.random.default_rng([seed, 1, k])
        errs = np.empty(trials)
        for t in range(trials):
            approx = sample_product(plan, k, rng)
            est = np.exp(approx.log_normalizer) * evaluate(approx, grid)
            errs[t] = np.max(np.abs(est - truth) / truth)
        out.append(DiagnosticRow(int(k), float(errs.mean()), float(errs.std())))
    return out


def diagnostics_csv(rows: Sequence[DiagnosticRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("K", "mean_error", "std"))
    for r in rows:
        w.writerow((r.k, f"{r.mean_error:.6f}", f"{r.std:.6f}"))
    return buf.getvalue()
