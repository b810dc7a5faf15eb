import numpy as np
import pytest

from pita.grid import Grid, Rng
from pita.library import LibraryConfig, build_system
from pita.solvers import Family, PdeSpec, RandomFourier, burgers_grid, solve
from pita.stridge import (
    StridgeConfig,
    coefficients_objective,
    least_squares_baseline,
    objective,
    pseudoinverse_baseline,
    ridge_solve,
    stridge_all,
    stridge_channel,
)


@pytest.fixture(scope="module")
def burgers_system():
    spec = PdeSpec(Family.BURGERS_1D, {"beta": 0.1}, init=RandomFourier(5, 0.5, 3), substeps=4)
    traj = solve(spec, burgers_grid(256, dt=0.01), 60, Rng(0))
    return build_system(traj)


def test_ridge_identity_examples():
    assert np.array_equal(ridge_solve(np.eye(2), np.array([2.0, 0.0]), 0.0), [2.0, 0.0])
    assert np.allclose(ridge_solve(np.eye(2), np.array([2.0, 0.0]), 1.0), [1.0, 0.0], atol=1e-15)


def test_ridge_against_dense_solve():
    r = np.random.default_rng(3)
    A = r.normal(size=(50, 9))
    b = r.normal(size=50)
    for alpha in (0.0, 0.3):
        x = ridge_solve(A, b, alpha)
        oracle = np.linalg.solve(A.T @ A + alpha * np.eye(9), A.T @ b)
        assert np.max(np.abs((A @ x - b) - (A @ oracle - b))) < 1e-10


def test_ridge_singular_falls_back():
    A = np.ones((5, 2))
    x = ridge_solve(A, np.full(5, 2.0), 0.0)
    assert np.allclose(x, [1.0, 1.0])
    assert np.all(np.isfinite(ridge_solve(np.zeros((3, 2)), np.ones(3), 0.0)))


def test_stridge_stacked_identity():
    phi = np.vstack([np.eye(2), np.eye(2)])
    ut = np.array([2.0, 0.0, 2.0, 0.0])
    lam, support, _ = stridge_channel(phi, ut, StridgeConfig(threshold=0.5, ridge=0.0))
    assert np.allclose(lam, [2.0, 0.0], rtol=1e-14, atol=0) and support.tolist() == [True, False]
    lam, support, _ = stridge_channel(phi, ut, StridgeConfig(threshold=0.5))
    assert np.allclose(lam, [2.0, 0.0], rtol=1e-4) and support.tolist() == [True, False]


def test_zero_target():
    lam, support, _ = stridge_channel(np.random.default_rng(0).normal(size=(20, 4)), np.zeros(20))
    assert not lam.any() and not support.any()


def test_burgers_recovery(burgers_system):
    lib, ut = burgers_system
    coeffs = stridge_all(lib, ut)
    active = {lib.displays[i] for i in np.flatnonzero(coeffs.support[:, 0])}
    assert active == {"u*u_x", "u_xx"}
    lam = dict(zip(lib.displays, coeffs.lambda_[:, 0]))
    assert abs(lam["u*u_x"] + 1.0) < 0.1 and abs(lam["u_xx"] - 0.1) < 0.01
    assert np.all(coeffs.lambda_[~coeffs.support] == 0)


def test_single_channel_matches_channel_solver(burgers_system):
    lib, ut = burgers_system
    lam, support, _ = stridge_channel(lib.phi, ut[:, 0])
    coeffs = stridge_all(lib, ut)
    assert np.array_equal(coeffs.lambda_[:, 0], lam) and np.array_equal(coeffs.support[:, 0], support)


def test_identical_channels(burgers_system):
    lib, ut = burgers_system
    coeffs = stridge_all(lib, np.hstack([ut, ut]))
    assert np.array_equal(coeffs.lambda_[:, 0], coeffs.lambda_[:, 1])


def test_diffusion_reaction_recovery():
    g = Grid.periodic_2d(32, 32, 2.0, 2.0, 0.05)
    spec = PdeSpec(Family.DIFFUSION_REACTION_2D, init=RandomFourier(5, 0.5, 3))
    traj = solve(spec, g, 20, Rng(0))
    lib, ut = build_system(traj, LibraryConfig(max_poly=3, max_deriv=2))
    coeffs = stridge_all(lib, ut, StridgeConfig(threshold=0.002))
    lam = [dict(zip(lib.displays, coeffs.lambda_[:, c])) for c in range(2)]
    for key, ref in (("u_xx", 1e-3), ("u_yy", 1e-3)):
        assert abs(lam[0][key] - ref) < 0.15 * ref
    for key, ref in (("v_xx", 5e-3), ("v_yy", 5e-3)):
        assert abs(lam[1][key] - ref) < 0.15 * ref


def test_support_non_increasing(burgers_system):
    lib, ut = burgers_system
    r = np.random.default_rng(1)
    for cfg in (StridgeConfig(), StridgeConfig(threshold=0.2), StridgeConfig(normalize=False, threshold=0.05)):
        for target in (ut[:, 0], ut[:, 0] + 0.3 * r.normal(size=ut.shape[0])):
            _, _, hist = stridge_channel(lib.phi, target, cfg)
            sizes = [int(s.sum()) for s, _ in hist]
            assert all(b <= a for a, b in zip(sizes[1:], sizes[2:]))
            # nested supports: thresholded columns never re-enter
            for (a, _), (b, _) in zip(hist, hist[1:]):
                assert not np.any(b & ~a)


def test_objective_bookkeeping(burgers_system):
    """Each refit is the best fit on its support; the sparse result beats the zero model."""
    lib, ut = burgers_system
    cfg = StridgeConfig()
    lam, support, hist = stridge_channel(lib.phi, ut[:, 0], cfg)
    assert np.isclose(hist[-1][1], objective(lib.phi, lam, ut[:, 0], cfg.l0_weight), rtol=1e-12)
    assert hist[-1][1] < objective(lib.phi, np.zeros(lib.n_terms), ut[:, 0], cfg.l0_weight)
    dense = least_squares_baseline(lib, ut[:, 0])
    best_on_support = np.zeros(lib.n_terms)
    best_on_support[support] = np.linalg.lstsq(lib.phi[:, support], ut[:, 0], rcond=None)[0]
    r = lib.phi @ best_on_support - ut[:, 0]
    # the ridge term makes the refit marginally worse than plain least squares on its support
    assert hist[-1][1] <= (r @ r + cfg.l0_weight * support.sum()) * (1 + 1e-3)
    assert np.allclose(dense, pseudoinverse_baseline(lib, ut[:, 0]), rtol=1e-6, atol=1e-8)
    assert np.allclose(coefficients_objective(lib, ut, stridge_all(lib, ut), cfg.l0_weight), hist[-1][1])


def test_scale_covariance(burgers_system):
    lib, ut = burgers_system
    base, sup, _ = stridge_channel(lib.phi, ut[:, 0])
    scaled, sup2, _ = stridge_channel(lib.phi, 3.0 * ut[:, 0])
    assert np.array_equal(sup, sup2) and np.allclose(scaled, 3.0 * base, rtol=1e-10, atol=0)
    raw_cfg = StridgeConfig(normalize=False, threshold=0.05)
    raw, rsup, _ = stridge_channel(lib.phi, ut[:, 0], raw_cfg)
    raw3, rsup3, _ = stridge_channel(lib.phi, 3.0 * ut[:, 0], StridgeConfig(normalize=False, threshold=0.15))
    assert np.array_equal(rsup, rsup3) and np.allclose(raw3, 3.0 * raw, rtol=1e-8, atol=1e-14)
    col = np.random.default_rng(0).uniform(0.1, 10.0, lib.n_terms)
    _, sup_col, _ = stridge_channel(lib.phi * col, ut[:, 0])
    assert np.array_equal(sup_col, sup)
