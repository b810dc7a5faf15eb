import numpy as np
import pytest

from pita.grid import Grid, Trajectory


def central_fd(fn, x, h=1e-6):
    """Central finite-difference gradient of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def grid1d():
    return Grid.periodic_1d(16, 1.0, 0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_trajectory(rng, ndim=1, channels=1, nx=8, ny=8, nt=4):
    if ndim == 1:
        g = Grid.periodic_1d(nx, 1.0 + rng.random(), 0.01 + rng.random())
    else:
        g = Grid.periodic_2d(nx, ny, 1.0 + rng.random(), 2.0 + rng.random(), 0.01 + rng.random())
    return Trajectory(g, rng.normal(size=(nt, channels) + g.shape))
