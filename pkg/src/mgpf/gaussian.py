"""Dense multivariate Gaussians and their canonical (information) form.

Every scale factor is carried as a natural log. Products of Gaussians in
three or more dimensions underflow after a handful of filter steps otherwise.

The batched kernels at the bottom (``factor_spd``, ``pair_log_scales``,
``multiply_batch``) operate on stacked arrays and back the mixture layer;
the object API above them is what callers and tests normally use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Union

import numpy as np

from .errors import DimensionError, SingularityError

LOG_2PI = math.log(2.0 * math.pi)
COND_LIMIT = 1e12


def wrap_angle(a):
    """Wrap angles (scalar or array) into [-pi, pi)."""
    out = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return float(out) if out.ndim == 0 else out


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


# ---------------------------------------------------------------------------
# batched symmetric-positive-definite helpers
# ---------------------------------------------------------------------------

def _chol_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve (L L^T) X = B for stacked lower-triangular L by substitution."""
    d = L.shape[-1]
    Y = np.empty(np.broadcast_shapes(L.shape[:-2], B.shape[:-2]) + B.shape[-2:])
    for k in range(d):
        acc = B[..., k, :]
        if k:
            acc = acc - np.einsum("...j,...jm->...m", L[..., k, :k], Y[..., :k, :])
        Y[..., k, :] = acc / L[..., k, k, None]
    X = np.empty_like(Y)
    for k in range(d - 1, -1, -1):
        acc = Y[..., k, :]
        if k < d - 1:
            acc = acc - np.einsum("...j,...jm->...m", L[..., k + 1:, k], X[..., k + 1:, :])
        X[..., k, :] = acc / L[..., k, k, None]
    return X


def _first_not_pd(S: np.ndarray) -> int:
    flat = S.reshape((-1,) + S.shape[-2:])
    for n, m in enumerate(flat):
        if not np.all(np.isfinite(m)) or np.linalg.eigvalsh(m)[0] <= 0.0:
            return n
    return 0


def factor_spd(S: np.ndarray, what: str = "matrix"):
    """Factor stacked SPD matrices.

    Returns ``(chol, inverse, logdet)``. Raises :class:`SingularityError`
    carrying the flat batch index of the first offending matrix when a
    matrix is not positive definite or its 1-norm condition number exceeds
    ``COND_LIMIT``.
    """
    S = symmetrize(np.asarray(S, dtype=float))
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        idx = _first_not_pd(S)
        raise SingularityError(f"{what} is not positive definite (batch index {idx})", idx) from None
    d = S.shape[-1]
    inv = symmetrize(_chol_solve(L, np.broadcast_to(np.eye(d), S.shape)))
    cond = np.abs(S).sum(-2).max(-1) * np.abs(inv).sum(-2).max(-1)
    bad = ~np.isfinite(cond) | (cond > COND_LIMIT)
    if np.any(bad):
        idx = int(np.flatnonzero(bad.reshape(-1))[0])
        raise SingularityError(f"{what} is ill-conditioned (batch index {idx})", idx)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)
    return L, inv, logdet


def _periodic_mask(periodic, d: int):
    if periodic is None:
        return None
    mask = np.zeros(d, dtype=bool)
    mask[list(periodic)] = True
    return mask if mask.any() else None


def _wrap_dims(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    x = np.array(x, dtype=float, copy=True)
    x[..., mask] = wrap_angle(x[..., mask])
    return x


def pair_log_scales(m1, S1, m2, S2, periodic=None):
    """Log product constants for stacked Gaussian pairs.

    Returns ``(log_c, log_s)`` where ``c`` is the constant in
    N(x; m1, S1) N(x; m2, S2) = c N(x; m3, S3) and ``s`` the constant in the
    same identity between unit-peak exponentials. Dimensions listed in
    ``periodic`` compare means by wrapped angular difference.
    """
    m1, m2 = np.asarray(m1, float), np.asarray(m2, float)
    d = m1.shape[-1]
    _, inv, logdet = factor_spd(np.asarray(S1) + np.asarray(S2), "sum of covariances")
    diff = _wrap_dims(m2 - m1, _periodic_mask(periodic, d))
    q = np.einsum("...i,...ij,...j->...", diff, inv, diff)
    log_s = -0.5 * q
    log_c = log_s - 0.5 * (d * LOG_2PI + logdet)
    return log_c, log_s


def multiply_batch(m1, S1, m2, S2, periodic=None):
    """Stacked Gaussian products: returns ``(mean3, cov3, log_c, log_s)``."""
    m1, m2 = np.asarray(m1, float), np.asarray(m2, float)
    S1, S2 = np.asarray(S1, float), np.asarray(S2, float)
    d = m1.shape[-1]
    mask = _periodic_mask(periodic, d)
    _, inv, logdet = factor_spd(S1 + S2, "sum of covariances")
    diff = _wrap_dims(m2 - m1, mask)
    inv_diff = np.einsum("...ij,...j->...i", inv, diff)
    q = np.einsum("...i,...i->...", diff, inv_diff)
    mean3 = _wrap_dims(m1 + np.einsum("...ij,...j->...i", S1, inv_diff), mask)
    cov3 = symmetrize(S1 @ inv @ S2)
    log_s = -0.5 * q
    log_c = log_s - 0.5 * (d * LOG_2PI + logdet)
    return mean3, cov3, log_c, log_s


def log_density_batch(x, means, inv, logdet, periodic=None):
    """log N(x; mean_k, cov_k) for every point/component combination.

    ``x`` is (..., d); ``means`` (K, d) with precomputed inverses and
    log-determinants. Result has shape (..., K).
    """
    x = np.asarray(x, float)
    d = means.shape[-1]
    diff = _wrap_dims(x[..., None, :] - means, _periodic_mask(periodic, d))
    q = np.einsum("...ki,kij,...kj->...k", diff, inv, diff)
    return -0.5 * (q + d * LOG_2PI + logdet)


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Gaussian:
    """Normalized density N(x; mean, cov). The covariance is symmetrized."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float, ndmin=1).reshape(-1)
        cov = np.array(self.cov, dtype=float, ndmin=2)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise DimensionError(f"covariance shape {cov.shape} does not match mean dimension {d}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("Gaussian parameters must be finite")
        cov = symmetrize(cov)
        if np.linalg.eigvalsh(cov)[0] <= 0.0:
            raise SingularityError("covariance is not positive definite")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @cached_property
    def _factor(self):
        return factor_spd(self.cov, "covariance")

    @property
    def logdet(self) -> float:
        return float(self._factor[2])

    @property
    def precision(self) -> np.ndarray:
        return self._factor[1]

    @property
    def log_peak(self) -> float:
        """log of the density at its mode, -(d log 2pi + log det cov) / 2."""
        return -0.5 * (self.dim * LOG_2PI + self.logdet)

    def mahalanobis2(self, x) -> np.ndarray:
        diff = np.asarray(x, float) - self.mean
        return np.einsum("...i,ij,...j->...", diff, self.precision, diff)

    def logpdf(self, x):
        return self.log_peak - 0.5 * self.mahalanobis2(x)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    __call__ = pdf

    def __repr__(self):
        return f"Gaussian(mean={self.mean.tolist()}, cov={self.cov.tolist()})"


@dataclass(frozen=True, eq=False)
class ScaledGaussian:
    """exp(log_scale) times a Gaussian.

    With ``exponential=True`` the scale multiplies the unit-peak exponential
    exp(-q/2) rather than the normalized density.
    """

    log_scale: float
    gaussian: Gaussian
    exponential: bool = False

    def __post_init__(self):
        if not math.isfinite(self.log_scale):
            raise ValueError("log_scale must be finite")
        object.__setattr__(self, "log_scale", float(self.log_scale))

    @property
    def mean(self):
        return self.gaussian.mean

    @property
    def cov(self):
        return self.gaussian.cov

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)

    def log_value(self, x):
        g = self.gaussian
        base = -0.5 * g.mahalanobis2(x)
        if not self.exponential:
            base = base + g.log_peak
        return self.log_scale + base

    def __call__(self, x):
        return np.exp(self.log_value(x))


@dataclass(frozen=True, eq=False)
class CanonicalForm:
    """C(x; K, h, g) = exp(-x^T K x / 2 + h^T x + g)."""

    K: np.ndarray
    h: np.ndarray
    g: float

    def __post_init__(self):
        h = np.array(self.h, dtype=float, ndmin=1).reshape(-1)
        K = np.array(self.K, dtype=float, ndmin=2)
        if K.shape != (h.shape[0], h.shape[0]):
            raise DimensionError(f"K shape {K.shape} does not match h length {h.shape[0]}")
        object.__setattr__(self, "K", _frozen(symmetrize(K)))
        object.__setattr__(self, "h", _frozen(h))
        object.__setattr__(self, "g", float(self.g))

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    def log_value(self, x):
        x = np.asarray(x, float)
        return -0.5 * np.einsum("...i,ij,...j->...", x, self.K, x) + x @ self.h + self.g

    def __call__(self, x):
        return np.exp(self.log_value(x))


@dataclass(frozen=True, eq=False)
class BlockGaussian:
    """A Gaussian over stacked variables (x, x') split after ``split`` entries."""

    gaussian: Gaussian
    split: int

    def __post_init__(self):
        if not 0 < self.split < self.gaussian.dim:
            raise DimensionError("split must fall strictly inside the joint dimension")

    @classmethod
    def from_blocks(cls, mean_x, mean_xp, cov_xx, cov_xxp, cov_xpxp):
        mean_x = np.atleast_1d(np.asarray(mean_x, float))
        mean_xp = np.atleast_1d(np.asarray(mean_xp, float))
        cov = np.block([
            [np.atleast_2d(cov_xx), np.atleast_2d(cov_xxp)],
            [np.atleast_2d(cov_xxp).T, np.atleast_2d(cov_xpxp)],
        ])
        return cls(Gaussian(np.concatenate([mean_x, mean_xp]), cov), mean_x.shape[0])

    @property
    def mean_x(self):
        return self.gaussian.mean[: self.split]

    @property
    def mean_xp(self):
        return self.gaussian.mean[self.split:]

    @property
    def cov_xx(self):
        return self.gaussian.cov[: self.split, : self.split]

    @property
    def cov_xxp(self):
        return self.gaussian.cov[: self.split, self.split:]

    @property
    def cov_xpxp(self):
        return self.gaussian.cov[self.split:, self.split:]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def _check_same_dim(a, b):
    if a.dim != b.dim:
        raise DimensionError(f"dimension mismatch: {a.dim} vs {b.dim}")


def multiply(a: Gaussian, b: Gaussian) -> ScaledGaussian:
    """N(x; a) N(x; b) = c N(x; m3, S3), with c returned in log space."""
    _check_same_dim(a, b)
    m3, S3, log_c, _ = multiply_batch(a.mean, a.cov, b.mean, b.cov)
    return ScaledGaussian(float(log_c), Gaussian(m3, S3))


def multiply_exponential(a: Gaussian, b: Gaussian) -> ScaledGaussian:
    """Product of the unit-peak exponentials of ``a`` and ``b``.

    The returned scale is s = exp(-(m1-m2)^T (S1+S2)^{-1} (m1-m2) / 2).
    """
    _check_same_dim(a, b)
    m3, S3, _, log_s = multiply_batch(a.mean, a.cov, b.mean, b.cov)
    return ScaledGaussian(float(log_s), Gaussian(m3, S3), exponential=True)


def convolve(a: Gaussian, b: Gaussian) -> Gaussian:
    _check_same_dim(a, b)
    return Gaussian(a.mean + b.mean, a.cov + b.cov)


def to_canonical(g: Union[Gaussian, ScaledGaussian]) -> CanonicalForm:
    log_scale = 0.0
    if isinstance(g, ScaledGaussian):
        if g.exponential:
            # exp(-q/2) = (2pi)^{d/2} sqrt(det) N
            log_scale = g.log_scale - g.gaussian.log_peak
        else:
            log_scale = g.log_scale
        g = g.gaussian
    K = g.precision
    h = K @ g.mean
    const = -0.5 * g.mean @ h + g.log_peak + log_scale
    return CanonicalForm(K, h, const)


def from_canonical(c: CanonicalForm) -> ScaledGaussian:
    """Moment parameters plus the residual log-scale of a canonical form."""
    _, cov, _ = factor_spd(c.K, "canonical K")
    mean = cov @ c.h
    g = Gaussian(mean, cov)
    g_normalized = -0.5 * mean @ c.h + g.log_peak
    return ScaledGaussian(c.g - g_normalized, g)


def extend_scope(c: CanonicalForm, dim: int, positions: Sequence[int]) -> CanonicalForm:
    """Embed ``c`` into ``dim`` variables, placing its own at ``positions``."""
    positions = list(positions)
    if len(positions) != c.dim or len(set(positions)) != c.dim or max(positions) >= dim:
        raise DimensionError("positions must name distinct slots inside the new scope")
    K = np.zeros((dim, dim))
    h = np.zeros(dim)
    K[np.ix_(positions, positions)] = c.K
    h[positions] = c.h
    return CanonicalForm(K, h, c.g)


def canonical_multiply(a: CanonicalForm, b: CanonicalForm) -> CanonicalForm:
    _check_same_dim(a, b)
    return CanonicalForm(a.K + b.K, a.h + b.h, a.g + b.g)


def canonical_marginalize(c: CanonicalForm, keep: int) -> CanonicalForm:
    """Integrate out every variable after the first ``keep`` ones."""
    if not 0 < keep < c.dim:
        raise DimensionError("keep must fall strictly inside the scope")
    Kxx, Kxy = c.K[:keep, :keep], c.K[:keep, keep:]
    Kyy = c.K[keep:, keep:]
    hx, hy = c.h[:keep], c.h[keep:]
    _, Kyy_inv, logdet_yy = factor_spd(Kyy, "K_yy block")
    dy = c.dim - keep
    K = Kxx - Kxy @ Kyy_inv @ Kxy.T
    h = hx - Kxy @ Kyy_inv @ hy
    g = c.g + 0.5 * (dy * LOG_2PI - logdet_yy + hy @ Kyy_inv @ hy)
    return CanonicalForm(K, h, g)


def block_to_canonical(b: BlockGaussian) -> CanonicalForm:
    return to_canonical(b.gaussian)


def linear_gaussian_transition(offset, noise_cov, gain=None) -> CanonicalForm:
    """Conditional p(x | x') = N(x; gain x' + offset, noise_cov) over (x, x').

    The result is a canonical form with a singular K (a conditional is not a
    joint density); it becomes integrable once multiplied by a belief on x'.
    """
    u = np.atleast_1d(np.asarray(offset, float))
    d = u.shape[0]
    F = np.eye(d) if gain is None else np.atleast_2d(np.asarray(gain, float))
    _, P, logdet = factor_spd(np.atleast_2d(noise_cov), "noise covariance")
    Pu = P @ u
    K = np.block([[P, -P @ F], [-F.T @ P, F.T @ P @ F]])
    h = np.concatenate([Pu, -F.T @ Pu])
    g = -0.5 * u @ Pu - 0.5 * (d * LOG_2PI + logdet)
    return CanonicalForm(K, h, g)


def transition_update_general(
    belief: Union[Gaussian, ScaledGaussian],
    transition: Union[BlockGaussian, CanonicalForm],
) -> ScaledGaussian:
    """Integrate a belief over x' against a transition over (x, x').

    Computes int bel(x') T(x, x') dx' as a scaled Gaussian over x through the
    canonical pipeline: extend scope, multiply, marginalize x', convert back.
    """
    tc = block_to_canonical(transition) if isinstance(transition, BlockGaussian) else transition
    bc = to_canonical(belief)
    d = bc.dim
    if tc.dim != 2 * d:
        raise DimensionError(f"transition scope {tc.dim} is not twice the belief dimension {d}")
    joint = canonical_multiply(extend_scope(bc, 2 * d, range(d, 2 * d)), tc)
    return from_canonical(canonical_marginalize(joint, d))
