"""Multiplicative Gaussian particle filter and the particle-filter baseline.

Both filters track planar poses (x cm, y cm, theta rad) and consume the same
additive odometry transition and the same Gaussian-mixture observation
likelihood, so they differ only in how the correction is carried out.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateMixtureError, MapError
from .gaussian import wrap_angle
from .mixture import (
    GaussianMixture,
    log_evaluate,
    normalize,
    product_plan,
    sample_product,
    to_normalized,
    top_k_product,
)
from .world import Odometry, Pose, WallMap

log = logging.getLogger(__name__)

POSE_PERIODIC = (2,)
REDUCTIONS = ("top_k", "sample")
TASKS = ("tracking", "semi1", "semi2", "global")

TRACKING_CENTER_SIGMA = np.array([30.0, 30.0, math.radians(30.0)])
INIT_SIGMA = {
    "tracking": np.array([4.0, 4.0, 0.1]),
    "semi1": np.array([40.0, 40.0, 1.0]),
    "semi2": np.array([40.0, 40.0, 1.0]),
    "global": np.array([200.0, 200.0, 1.0]),
}


@dataclass(frozen=True, eq=False)
class TransitionModel:
    """p(x | u, x') = N(x; x' + u, noise_cov) with a diagonal noise covariance."""

    noise_cov: np.ndarray

    def __post_init__(self):
        cov = np.array(self.noise_cov, dtype=float)
        if cov.shape != (3, 3):
            raise ValueError("transition noise must be a 3x3 covariance")
        if np.any(np.diag(cov) < 0) or np.any(cov != np.diag(np.diag(cov))):
            raise ValueError("transition noise must be diagonal and non-negative")
        cov.setflags(write=False)
        object.__setattr__(self, "noise_cov", cov)

    @classmethod
    def from_sigmas(cls, sx: float, sy: float, stheta: float) -> "TransitionModel":
        return cls(np.diag(np.square([sx, sy, stheta])))

    @property
    def noise_std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.noise_cov))


@dataclass(frozen=True, eq=False)
class MgpfState:
    belief: GaussianMixture
    k: int
    reduction: str = "top_k"
    step: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("budget K must be positive")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}")


@dataclass(frozen=True, eq=False)
class ParticleSet:
    particles: np.ndarray
    log_weights: np.ndarray
    step: int = 0

    def __post_init__(self):
        p = np.array(self.particles, dtype=float, ndmin=2)
        lw = np.array(self.log_weights, dtype=float, ndmin=1)
        if p.shape[1] != 3 or lw.shape != (p.shape[0],):
            raise ValueError("particles must be (N, 3) with N log-weights")
        object.__setattr__(self, "particles", p)
        object.__setattr__(self, "log_weights", lw)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    def __len__(self):
        return self.particles.shape[0]


def _as_vector(u) -> np.ndarray:
    return np.asarray(tuple(u), dtype=float)


# ---------------------------------------------------------------------------
# MGPF
# ---------------------------------------------------------------------------

def mgpf_predict(state: MgpfState, u: Odometry, model: TransitionModel) -> MgpfState:
    """Closed-form prediction: convolve each component with N(u, noise_cov)."""
    b = state.belief
    means = b.means + _as_vector(u)
    means[:, 2] = wrap_angle(means[:, 2])
    belief = replace(b, means=means, covs=b.covs + model.noise_cov)
    return replace(state, belief=belief, step=state.step + 1)


def mgpf_correct(state: MgpfState, obs: GaussianMixture, rng: Optional[np.random.Generator] = None) -> MgpfState:
    """Multiply the belief by the observation mixture and reduce back to K terms.

    The product runs on max-norm (unit-peak exponential) representations. If
    every pair weight vanishes the predicted belief is kept.
    """
    plan = product_plan(state.belief, obs, mode="exponential", periodic=POSE_PERIODIC)
    try:
        if state.reduction == "top_k":
            reduced = top_k_product(plan, state.k)
        else:
            if rng is None:
                raise ValueError("sampled reduction needs a random generator")
            reduced = sample_product(plan, state.k, rng)
    except DegenerateMixtureError:
        log.warning("step %d: belief and observation are disjoint; keeping the prediction", state.step)
        return state
    return replace(state, belief=normalize(to_normalized(reduced)))


# ---------------------------------------------------------------------------
# particle filter
# ---------------------------------------------------------------------------

def pf_predict(p: ParticleSet, u: Odometry, model: TransitionModel, rng: np.random.Generator) -> ParticleSet:
    noise = rng.standard_normal(p.particles.shape) * model.noise_std
    moved = p.particles + _as_vector(u) + noise
    moved[:, 2] = wrap_angle(moved[:, 2])
    return replace(p, particles=moved, step=p.step + 1)


def pf_correct(p: ParticleSet, obs: GaussianMixture) -> ParticleSet:
    """Reweight particles by the observation likelihood read off at each particle."""
    lw = p.log_weights + log_evaluate(obs, p.particles, periodic=POSE_PERIODIC)
    total = logsumexp(lw)
    if not np.isfinite(total):
        log.warning("step %d: every particle has zero likelihood; resetting to uniform", p.step)
        return replace(p, log_weights=np.full(len(p), -math.log(len(p))))
    return replace(p, log_weights=lw - total)


def systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    cumulative = np.cumsum(weights / weights.sum())
    cumulative[-1] = 1.0
    positions = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cumulative, positions, side="right"), n - 1)


def pf_resample(p: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    """Low-variance (systematic) resampling to N equally weighted particles."""
    idx = systematic_indices(p.weights, rng)
    n = len(p)
    return replace(p, particles=p.particles[idx], log_weights=np.full(n, -math.log(n)))


# ---------------------------------------------------------------------------
# shared
# ---------------------------------------------------------------------------

def estimate_pose(state: Union[MgpfState, ParticleSet]) -> Pose:
    """Weighted mean position with a circular weighted mean heading."""
    if isinstance(state, MgpfState):
        pts = state.belief.means
        w = np.exp(state.belief.log_weights - logsumexp(state.belief.log_weights))
    else:
        pts, w = state.particles, state.weights
    x, y = w @ pts[:, 0], w @ pts[:, 1]
    theta = math.atan2(w @ np.sin(pts[:, 2]), w @ np.cos(pts[:, 2]))
    return Pose(float(x), float(y), wrap_angle(theta))


def _cells_of_rooms(wall_map: WallMap, rooms) -> np.ndarray:
    cells = wall_map.free_cells()
    inside = np.zeros(len(cells), dtype=bool)
    for x0, y0, x1, y1 in (wall_map.rooms[r] for r in rooms):
        inside |= (cells[:, 0] >= x0) & (cells[:, 0] < x1) & (cells[:, 1] >= y0) & (cells[:, 1] < y1)
    return cells[inside]


def _uniform_in_cells(cells: np.ndarray, n: int, cell_size: float, rng) -> np.ndarray:
    if len(cells) == 0:
        raise MapError("no free cells to place hypotheses in")
    pick = cells[rng.integers(len(cells), size=n)]
    xy = (pick + rng.random((n, 2))) * cell_size
    theta = rng.uniform(-math.pi, math.pi, size=n)
    return np.column_stack([xy, theta])


def initial_centers(task: str, true_pose: Pose, wall_map: WallMap, k: int, rng: np.random.Generator) -> np.ndarray:
    if task == "tracking":
        centers = np.asarray(true_pose, float) + rng.standard_normal((k, 3)) * TRACKING_CENTER_SIGMA
        centers[:, 2] = wrap_angle(centers[:, 2])
        return centers
    if task in ("semi1", "semi2"):
        rooms = [wall_map.nearest_room(true_pose.x, true_pose.y)]
        if task == "semi2" and len(wall_map.rooms) > 1:
            others = [r for r in range(len(wall_map.rooms)) if r != rooms[0]]
            rooms.append(others[int(rng.integers(len(others)))])
        return _uniform_in_cells(_cells_of_rooms(wall_map, rooms), k, wall_map.cell_size, rng)
    if task == "global":
        return _uniform_in_cells(wall_map.free_cells(), k, wall_map.cell_size, rng)
    raise ValueError(f"unknown task {task!r}")


def initialize(task: str, true_pose: Pose, wall_map: WallMap, k: int, rng: np.random.Generator,
               kind: str = "mgpf", reduction: str = "top_k") -> Union[MgpfState, ParticleSet]:
    """Initial belief for a localization task; the PF variant uses the same centres as particles."""
    centers = initial_centers(task, true_pose, wall_map, k, rng)
    uniform = np.full(k, -math.log(k))
    if kind == "pf":
        return ParticleSet(centers, uniform)
    if kind != "mgpf":
        raise ValueError(f"unknown filter kind {kind!r}")
    covs = np.broadcast_to(np.diag(INIT_SIGMA[task] ** 2), (k, 3, 3))
    return MgpfState(GaussianMixture(centers, covs, uniform), k, reduction)
