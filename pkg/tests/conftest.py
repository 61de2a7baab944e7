import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from mgpf.world import WallMap

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# invariant suites run at least this many generated cases each
PROPERTY_CASES = 1000


def random_spd(rng, d, lo=0.2, hi=5.0):
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return (q * rng.uniform(lo, hi, size=d)) @ q.T


@st.composite
def spd_matrices(draw, d, lo=0.2, hi=5.0):
    """SPD matrix with eigenvalues in [lo, hi] and a random orientation."""
    eig = draw(st.lists(st.floats(lo, hi), min_size=d, max_size=d))
    seed = draw(st.integers(0, 2**32 - 1))
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, d)))
    return (q * np.asarray(eig)) @ q.T


@st.composite
def vectors(draw, d, bound=5.0):
    return np.asarray(draw(st.lists(st.floats(-bound, bound), min_size=d, max_size=d)))


@st.composite
def gaussian_params(draw, d=None):
    d = draw(st.integers(1, 3)) if d is None else d
    return draw(vectors(d)), draw(spd_matrices(d))


@st.composite
def mixture_params(draw, d=None, max_components=4):
    d = draw(st.integers(1, 3)) if d is None else d
    n = draw(st.integers(1, max_components))
    means = np.stack([draw(vectors(d)) for _ in range(n)])
    covs = np.stack([draw(spd_matrices(d)) for _ in range(n)])
    w = np.asarray(draw(st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n)))
    return means, covs, w / w.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def corner_map() -> WallMap:
    """800 x 800 cm room with a closed closet in the upper right.

    The closet's outside corner at (410, 510) cm is the only reflex corner,
    and the arms of the L differ in width so its two views are distinct.
    """
    g = np.ones((82, 82), dtype=bool)
    g[1:-1, 1:-1] = False
    g[51, 41:] = True
    g[51:, 41] = True
    return WallMap(g, 10.0, [(1, 1, 81, 51), (1, 51, 41, 81)])
