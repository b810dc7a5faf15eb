import numpy as np
import pytest

from pita.derivs import StencilConfig, d_dt, d_dt_array, d_dx, stencil
from pita.errors import InsufficientFrames, UnsupportedOrder
from pita.grid import Grid, Trajectory

POLY = StencilConfig(method="poly", poly_width=5, poly_degree=4)


def test_d_dt_constant_and_ramp():
    g = Grid.periodic_1d(8, 1.0, 0.1)
    const = Trajectory(g, np.full((6, 1, 8), 3.0))
    assert np.all(d_dt(const).data == 0.0)
    ramp = Trajectory(g, np.broadcast_to((np.arange(6) * 0.1)[:, None, None], (6, 1, 8)))
    assert np.max(np.abs(d_dt(ramp).data - 1.0)) < 1e-12


def test_d_dt_sine():
    dt = 0.01
    t = np.arange(200) * dt
    err = np.abs(d_dt_array(np.sin(t), dt) - np.cos(t))
    assert err[1:-1].max() < 2e-5
    # one-sided second-order ends: leading error dt^2/3 * |f'''|
    assert err[0] <= dt**2 / 3 * 1.01 and err[-1] <= dt**2 / 3 * 1.01


def test_d_dt_needs_three_frames():
    with pytest.raises(InsufficientFrames):
        d_dt_array(np.zeros((2, 4)), 0.1)
    assert d_dt_array(np.arange(3.0), 1.0).tolist() == [1.0, 1.0, 1.0]


def test_d_dx_ramp_interior():
    x = np.arange(16.0)[:, None] * 0.5
    for cfg in (StencilConfig(), POLY):
        out = d_dx(x, "x", 1, cfg, spacing=0.5)
        assert np.allclose(out[3:-3], 1.0, atol=1e-12)


@pytest.mark.parametrize("cfg", [StencilConfig(), POLY])
@pytest.mark.parametrize("order", [1, 2, 3])
def test_d_dx_constant(cfg, order):
    assert np.all(np.abs(d_dx(np.full((16, 8), 2.5), "x", order, cfg)) < 1e-10)
    assert np.all(np.abs(d_dx(np.full((16, 8), 2.5), "y", order, cfg)) < 1e-10)


def test_d_dx_sine():
    L, nx = 3.0, 256
    x = np.arange(nx) * L / nx
    u = np.sin(2 * np.pi * x / L)[:, None]
    exact = (2 * np.pi / L) * np.cos(2 * np.pi * x / L)[:, None]
    scale = 2 * np.pi / L
    central = d_dx(u, "x", 1, StencilConfig(), L / nx)
    poly = d_dx(u, "x", 1, POLY, L / nx)
    assert np.max(np.abs(central - exact)) / scale < 1e-3
    assert np.max(np.abs(poly - exact)) / scale < 1e-6


def test_linearity_and_shift_equivariance():
    r = np.random.default_rng(0)
    u, v = r.normal(size=(32, 8)), r.normal(size=(32, 8))
    for cfg in (StencilConfig(), POLY):
        for order in (1, 2, 3):
            for ax, axis in (("x", 0), ("y", 1)):
                lhs = d_dx(2.0 * u - 0.7 * v, ax, order, cfg) if ax == "x" or order * 2 + 1 <= 8 else None
                if lhs is None:
                    continue
                rhs = 2.0 * d_dx(u, ax, order, cfg) - 0.7 * d_dx(v, ax, order, cfg)
                assert np.max(np.abs(lhs - rhs)) < 1e-12 * max(1.0, np.abs(rhs).max())
                shifted = d_dx(np.roll(u, 3, axis), ax, order, cfg)
                assert np.allclose(shifted, np.roll(d_dx(u, ax, order, cfg), 3, axis), atol=1e-12)


def test_poly_matches_central_to_second_order():
    errs = []
    for nx in (64, 128):
        dx = 2 * np.pi / nx
        x = np.arange(nx) * dx
        u = np.sin(x)[:, None]
        diff = d_dx(u, "x", 2, POLY, dx) - d_dx(u, "x", 2, StencilConfig(), dx)
        errs.append(np.abs(diff).max())
    assert errs[0] / errs[1] > 3.5


def test_unsupported_order_and_validation():
    with pytest.raises(UnsupportedOrder):
        d_dx(np.zeros((16, 1)), "x", 4)
    with pytest.raises(UnsupportedOrder):
        stencil(0, 1.0)
    with pytest.raises(ValueError):
        StencilConfig(method="poly", poly_width=4)
    with pytest.raises(ValueError):
        d_dx(np.zeros((4, 1)), "x", 2, POLY)
