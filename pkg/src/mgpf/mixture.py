"""Weighted sums of Gaussians and approximate products of such sums.

A mixture is stored as stacked arrays (means, covariances, log-weights)
so that the K1*K2 pairwise products of a filter correction run as one
batched computation. Two representations share the type:

* normalized: value(x) = sum_i w_i N(x; mu_i, S_i)
* exponential: value(x) = sum_i w_i exp(-(x - mu_i)^T S_i^{-1} (x - mu_i) / 2)

``max_norm_reweight`` / ``to_normalized`` move between them without
changing the pointwise value.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateMixtureError, DimensionError, SingularityError
from .gaussian import (
    LOG_2PI,
    Gaussian,
    factor_spd,
    log_density_batch,
    multiply_batch,
    pair_log_scales,
    symmetrize,
)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    means: np.ndarray
    covs: np.ndarray
    log_weights: np.ndarray
    exponential: bool = False
    # log of the mass removed by the most recent normalization; lets callers
    # recover the scale of an unnormalized product after reduction
    log_normalizer: float = 0.0

    def __post_init__(self):
        means = np.array(self.means, dtype=float, ndmin=2)
        covs = np.array(self.covs, dtype=float, ndmin=3)
        lw = np.array(self.log_weights, dtype=float, ndmin=1).reshape(-1)
        n, d = means.shape
        if n < 1:
            raise ValueError("a mixture needs at least one component")
        if covs.shape != (n, d, d) or lw.shape != (n,):
            raise DimensionError(
                f"inconsistent mixture shapes: means {means.shape}, covs {covs.shape}, weights {lw.shape}"
            )
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise ValueError("log-weights must be finite or -inf")
        for name, arr in (("means", means), ("covs", symmetrize(covs)), ("log_weights", lw)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "log_normalizer", float(self.log_normalizer))
        self._factor  # validates positive definiteness

    @classmethod
    def from_components(cls, components: Sequence[Gaussian], weights=None, log_weights=None, **kw):
        components = list(components)
        if not components:
            raise ValueError("a mixture needs at least one component")
        if len({g.dim for g in components}) != 1:
            raise DimensionError("components differ in dimension")
        if log_weights is None:
            w = np.ones(len(components)) if weights is None else np.asarray(weights, float)
            with np.errstate(divide="ignore"):
                log_weights = np.log(w)
        return cls(
            np.stack([g.mean for g in components]),
            np.stack([g.cov for g in components]),
            log_weights,
            **kw,
        )

    @cached_property
    def _factor(self):
        try:
            return factor_spd(self.covs, "component covariance")
        except SingularityError as err:
            raise SingularityError(f"component {err.index}: {err}", err.index) from None

    def __len__(self):
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def log_peaks(self) -> np.ndarray:
        """Log of each normalized component's maximum density."""
        return -0.5 * (self.dim * LOG_2PI + self._factor[2])

    @property
    def components(self) -> list[Gaussian]:
        return [Gaussian(m, c) for m, c in zip(self.means, self.covs)]

    def subset(self, rows) -> "GaussianMixture":
        rows = np.asarray(rows)
        return replace(self, means=self.means[rows], covs=self.covs[rows], log_weights=self.log_weights[rows])

    def component_log_values(self, x, periodic=None) -> np.ndarray:
        """log of each unweighted component at x; shape (..., n)."""
        _, inv, logdet = self._factor
        out = log_density_batch(x, self.means, inv, logdet, periodic)
        if self.exponential:
            out = out - self.log_peaks
        return out


def log_evaluate(m: GaussianMixture, x, periodic=None):
    x = np.asarray(x, float)
    if x.shape[-1] != m.dim:
        raise DimensionError(f"point dimension {x.shape[-1]} vs mixture dimension {m.dim}")
    vals = logsumexp(m.component_log_values(x, periodic) + m.log_weights, axis=-1)
    return float(vals) if np.ndim(vals) == 0 else vals


def evaluate(m: GaussianMixture, x, periodic=None):
    """Pointwise value of the weighted sum at ``x`` (a point or a stack of points)."""
    return np.exp(log_evaluate(m, x, periodic))


def normalize(m: GaussianMixture) -> GaussianMixture:
    total = logsumexp(m.log_weights)
    if not np.isfinite(total):
        raise DegenerateMixtureError("all mixture weights are zero")
    return replace(m, log_weights=m.log_weights - total, log_normalizer=m.log_normalizer + total)


def max_norm_reweight(m: GaussianMixture) -> GaussianMixture:
    """Fold each component's peak density into its weight.

    Components become unit-peak exponentials; the represented function is
    unchanged. Already-exponential mixtures are returned as they are.
    """
    if m.exponential:
        return m
    return replace(m, log_weights=m.log_weights + m.log_peaks, exponential=True)


def to_normalized(m: GaussianMixture) -> GaussianMixture:
    """Inverse of :func:`max_norm_reweight`."""
    if not m.exponential:
        return m
    return replace(m, log_weights=m.log_weights - m.log_peaks, exponential=False)


# ---------------------------------------------------------------------------
# products
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ProductPlan:
    """All K1*K2 pair terms of a mixture product, before any reduction.

    ``pair_log_weights[r]`` is log(w_i v_j scale_ij) for ``index_pairs[r] = (i, j)``,
    where scale is the normalized constant c or the exponential constant s.
    """

    index_pairs: np.ndarray
    pair_log_weights: np.ndarray
    left: GaussianMixture
    right: GaussianMixture
    periodic: Optional[tuple] = None

    @property
    def exponential(self) -> bool:
        return self.left.exponential

    @property
    def log_total(self) -> float:
        return float(logsumexp(self.pair_log_weights))

    def __len__(self):
        return self.index_pairs.shape[0]

    def materialize(self, rows=None) -> GaussianMixture:
        """Product components for the selected plan rows (all rows by default)."""
        pairs = self.index_pairs if rows is None else self.index_pairs[np.asarray(rows)]
        lw = self.pair_log_weights if rows is None else self.pair_log_weights[np.asarray(rows)]
        i, j = pairs[:, 0], pairs[:, 1]
        a, b = self.left, self.right
        try:
            mean3, cov3, _, _ = multiply_batch(a.means[i], a.covs[i], b.means[j], b.covs[j], self.periodic)
        except SingularityError as err:
            pi, pj = pairs[err.index]
            raise SingularityError(f"product of pair ({pi}, {pj}): {err}", (int(pi), int(pj))) from None
        return GaussianMixture(mean3, cov3, lw, exponential=self.exponential)


def product_plan(a: GaussianMixture, b: GaussianMixture, mode: str = "normalized", periodic=None) -> ProductPlan:
    """Weights of every pair term of a * b without building the components."""
    if a.dim != b.dim:
        raise DimensionError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if mode == "normalized":
        a, b = to_normalized(a), to_normalized(b)
    elif mode == "exponential":
        a, b = max_norm_reweight(a), max_norm_reweight(b)
    else:
        raise ValueError(f"unknown product mode {mode!r}")
    i, j = np.divmod(np.arange(len(a) * len(b)), len(b))
    try:
        log_c, log_s = pair_log_scales(a.means[i], a.covs[i], b.means[j], b.covs[j], periodic)
    except SingularityError as err:
        pi, pj = int(i[err.index]), int(j[err.index])
        raise SingularityError(f"product of pair ({pi}, {pj}): {err}", (pi, pj)) from None
    scale = log_s if mode == "exponential" else log_c
    lw = a.log_weights[i] + b.log_weights[j] + scale
    periodic = tuple(periodic) if periodic is not None else None
    return ProductPlan(np.stack([i, j], axis=1), lw, a, b, periodic)


def full_product(a: GaussianMixture, b: GaussianMixture, mode: str = "normalized", periodic=None):
    """Exact K1*K2-term product. Returns ``(mixture, plan)``; weights are raw, not normalized."""
    plan = product_plan(a, b, mode, periodic)
    return plan.materialize(), plan


def _plan_probabilities(plan: ProductPlan):
    total = plan.log_total
    if not np.isfinite(total):
        raise DegenerateMixtureError("every pair weight of the product is zero")
    p = np.exp(plan.pair_log_weights - total)
    return p / p.sum(), total


def sample_product(
    plan: ProductPlan,
    k: int,
    rng: np.random.Generator,
    components: Optional[GaussianMixture] = None,
    merge_duplicates: bool = True,
) -> GaussianMixture:
    """Draw ``k`` pair terms i.i.d. (with replacement) from the normalized plan weights.

    Each draw carries weight 1/k. With ``merge_duplicates`` repeated pairs are
    coalesced into one component with summed weight, which leaves the
    represented function unchanged. The plan's total log-mass is stored as
    ``log_normalizer`` so the unbiased estimate of the raw product is
    exp(log_normalizer) * value(x).
    """
    if k < 1:
        raise ValueError("sample size must be at least 1")
    p, total = _plan_probabilities(plan)
    draws = rng.choice(len(p), size=k, replace=True, p=p)
    if merge_duplicates:
        rows, counts = np.unique(draws, return_counts=True)
    else:
        rows, counts = draws, np.ones(k, dtype=int)
    if components is None:
        out = plan.materialize(rows)
    else:
        out = components.subset(rows)
    return replace(out, log_weights=np.log(counts / k), log_normalizer=total)


def top_k_product(plan: ProductPlan, k: int, components: Optional[GaussianMixture] = None) -> GaussianMixture:
    """Keep the ``k`` heaviest pair terms and renormalize.

    Ties are broken by ascending (i, j). Survivors are returned in plan order,
    so with k >= K1*K2 the result equals ``normalize(full_product(...))``.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    lw = plan.pair_log_weights
    i, j = plan.index_pairs[:, 0], plan.index_pairs[:, 1]
    if k >= len(lw):
        keep = np.arange(len(lw))
    else:
        keep = np.sort(np.lexsort((j, i, -lw))[:k])
    kept = lw[keep]
    total = logsumexp(kept)
    if not np.isfinite(total):
        raise DegenerateMixtureError("every retained pair weight is zero")
    out = plan.materialize(keep) if components is None else components.subset(keep)
    return replace(out, log_weights=kept - total, log_normalizer=float(total))


def mixture_from_arrays(means: Iterable, covs: Iterable, weights: Iterable) -> GaussianMixture:
    with np.errstate(divide="ignore"):
        return GaussianMixture(np.asarray(means, float), np.asarray(covs, float), np.log(np.asarray(weights, float)))
