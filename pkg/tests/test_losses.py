import math

import numpy as np
import pytest

from pita import autodiff as ad
from pita.errors import DomainError, InsufficientFrames, ShapeError, ZeroNormFrame
from pita.grid import Grid, Trajectory
from pita.library import DownsampleSpec, LibraryConfig, build_system, generate_terms
from pita.losses import (
    LossBreakdown,
    Manual,
    PitaConfig,
    Uncertainty,
    consistency_loss,
    data_loss,
    data_loss_on_tape,
    downsampled_view,
    optimal_delta,
    physics_loss,
    physics_loss_and_grad,
    total_loss,
    uncertainty_total_on_tape,
)
from pita.stridge import StridgeConfig

from .conftest import central_fd, rel_err


def test_data_loss_examples(rng):
    truth = rng.normal(size=(3, 2, 16, 1))
    assert data_loss(truth, truth) == 0.0
    assert data_loss(2 * truth, truth) == 1.0


def test_data_loss_against_loop_oracle(rng):
    pred, truth = rng.normal(size=(3, 2, 8, 1)), rng.normal(size=(3, 2, 8, 1))
    acc = 0.0
    for i in range(3):
        num = math.sqrt(sum(float(v) ** 2 for v in (pred[i] - truth[i]).ravel()))
        den = math.sqrt(sum(float(v) ** 2 for v in truth[i].ravel()))
        acc += num / den
    assert abs(data_loss(pred, truth) - acc / 3) < 1e-12


def test_data_loss_zero_frame(rng):
    truth = rng.normal(size=(2, 1, 8, 1))
    truth[1] = 0.0
    with pytest.raises(ZeroNormFrame):
        data_loss(truth + 1.0, truth)
    assert np.isfinite(data_loss(truth + 1.0, truth, eps=1e-8))
    with pytest.raises(ShapeError):
        data_loss(truth[:1], truth)


def test_data_loss_on_tape_matches_batch_mean(rng):
    truth = rng.normal(size=(4, 2, 1, 8, 1))
    pred = rng.normal(size=(4, 2, 1, 8, 1))
    tape = ad.Tape()
    value = data_loss_on_tape([tape.constant(pred[:, t]) for t in range(2)], truth).value
    ref = np.mean([data_loss(pred[b], truth[b]) for b in range(4)])
    assert abs(float(value) - ref) < 1e-14


def _advection_window(a=0.7, nx=16, nt=3):
    """u(t, x) = x - a t: linear in x and t, so central stencils are exact away from the wrap."""
    g = Grid.periodic_1d(nx, 1.6, 0.1)
    x = np.arange(nx) * g.dx
    t = np.arange(nt) * g.dt
    data = (x[None, :] - a * t[:, None])[:, None, :, None]
    return Trajectory(g, data)


def _cfg(**kw):
    return PitaConfig(down=DownsampleSpec(spatial_factor=1, temporal_keep=3), **kw)


def test_physics_exact_satisfaction():
    traj = _advection_window()
    cfg = _cfg()
    terms = generate_terms(1, ("x",), cfg.library)
    lam = np.zeros((len(terms), 1))
    lam[[t.display for t in terms].index("u_x"), 0] = -0.7
    interior = np.arange(2, 14)
    loss = physics_loss(traj, cfg, lam, points=interior)
    assert abs(loss - cfg.l0_weight * 1) < 1e-20 + 1e-12 * cfg.l0_weight


def test_physics_zero_coefficients(rng):
    g = Grid.periodic_1d(16, 1.0, 0.1)
    traj = Trajectory(g, rng.normal(size=(5, 2, 16)))
    cfg = _cfg()
    lam = np.zeros((len(generate_terms(2, ("x",), cfg.library)), 2))
    lib, ut = build_system(downsampled_view(traj, cfg, np.arange(16)))
    expected = np.sum(ut**2) / ut.shape[0]
    assert abs(physics_loss(traj, cfg, lam, points=np.arange(16)) - expected) < 1e-12 * expected


def test_physics_gradient_fd(rng):
    g = Grid.periodic_1d(16, 1.0, 0.1)
    traj = Trajectory(g, rng.normal(size=(3, 1, 16)))
    cfg = _cfg(library=LibraryConfig(max_poly=2, max_deriv=3))
    lam = rng.normal(size=(len(generate_terms(1, ("x",), cfg.library)), 1))
    pts = np.array([0, 3, 4, 9, 15])
    value, grad = physics_loss_and_grad(traj, cfg, lam, points=pts)

    def fn(data):
        return physics_loss(Trajectory(g, data), cfg, lam, points=pts)

    assert rel_err(grad, central_fd(fn, traj.data)) < 1e-4
    assert value == fn(traj.data)


def test_physics_gradient_fd_2d(rng):
    g = Grid.periodic_2d(8, 8, 1.0, 1.0, 0.1)
    traj = Trajectory(g, rng.normal(size=(3, 2, 8, 8)))
    cfg = PitaConfig(down=DownsampleSpec(spatial_factor=4, temporal_keep=3))
    lam = rng.normal(size=(len(generate_terms(2, ("x", "y"), cfg.library)), 2))
    pts = np.arange(0, 64, 4)
    _, grad = physics_loss_and_grad(traj, cfg, lam, points=pts)
    num = central_fd(lambda d: physics_loss(Trajectory(g, d), cfg, lam, points=pts), traj.data)
    assert rel_err(grad, num) < 1e-4


def test_physics_needs_frames(rng):
    g = Grid.periodic_1d(16, 1.0, 0.1)
    cfg = _cfg()
    with pytest.raises(InsufficientFrames):
        physics_loss(Trajectory(g, rng.normal(size=(2, 1, 16))), cfg, np.zeros((9, 1)))


def test_consistency_examples(rng):
    a = rng.normal(size=(9, 2))
    assert consistency_loss(a, [a, a]) == 0.0
    assert consistency_loss(np.array([1.0, 0.0]), [np.array([0.0, 1.0])]) == 2.0
    b, c = rng.normal(size=(9, 2)), rng.normal(size=(9, 2))
    oracle = sum((a[i, j] - b[i, j]) ** 2 + (a[i, j] - c[i, j]) ** 2 for i in range(9) for j in range(2))
    assert abs(consistency_loss(a, [b, c]) - oracle) < 1e-12
    assert abs(consistency_loss(a, [b, c], reduce="mean") - oracle / 2) < 1e-12
    with pytest.raises(ShapeError):
        consistency_loss(a, [a[:3]])


def test_total_loss_examples():
    assert total_loss((1.0, 1.0, 1.0), (1.0, 1.0, 1.0)) == 1.5
    assert total_loss((1.0, 1.0, 1.0), weighting=Manual(0.5, 0.5)) == 2.0
    best = total_loss((4.0, 1.0, 1.0), optimal_delta((4.0, 1.0, 1.0)))
    assert abs(best - (1.5 + math.log(2.0))) < 1e-14
    with pytest.raises(DomainError):
        total_loss((1.0, 1.0, 1.0), (1.0, 0.0, 1.0))


def test_delta_stationarity():
    parts = (0.37, 2.5, 0.011)
    opt = optimal_delta(parts)
    for i in range(3):
        # differentiate in log(delta) so the check is scale free: d/dlog(d) = d * d/dd
        def f(logd):
            delta = list(opt)
            delta[i] = math.exp(float(logd[0]))
            return total_loss(parts, delta)

        x0 = [math.log(opt[i])]
        assert abs(central_fd(f, x0, h=1e-4)[0]) < 1e-8
        assert abs(-parts[i] / opt[i] ** 3 + 1 / opt[i]) < 1e-8 * (1 / opt[i])
        assert f([x0[0] + 0.1]) > f(x0) and f([x0[0] - 0.1]) > f(x0)


def test_log_space_total_matches_closed_form():
    parts, s = (0.3, 0.2, 0.9), np.array([0.1, -0.4, 0.7])
    tape = ad.Tape()
    leaves = [tape.leaf(v) for v in s]
    out = uncertainty_total_on_tape(*[tape.constant(p) for p in parts], leaves)
    delta = tuple(np.exp(0.5 * s))
    assert abs(float(out.value) - total_loss(parts, delta)) < 1e-14


def test_breakdown_invariant():
    parts, delta = (0.2, 0.1, 0.05), (0.5, 0.7, 1.3)
    LossBreakdown(*parts, delta, total_loss(parts, delta)).check()
    with pytest.raises(ArithmeticError):
        LossBreakdown(*parts, delta, total_loss(parts, delta) + 1e-6).check()
    LossBreakdown(*parts, (1, 1, 1), 0.2 + 0.1 + 0.05, Manual(1.0, 1.0)).check()


def test_config_flags():
    assert PitaConfig().uses_physics() and PitaConfig().uses_consistency()
    cfg = PitaConfig(weighting=Manual(0.0, 0.0))
    assert not cfg.uses_physics() and not cfg.uses_consistency()
    assert PitaConfig(stridge=StridgeConfig(l0_weight=0.3)).l0_weight == 0.3
    with pytest.raises(ValueError):
        PitaConfig(ado_period=0)
    assert isinstance(PitaConfig().weighting, Uncertainty)


def test_log_space_gradient_vanishes_at_optimum():
    parts = (0.37, 2.5, 0.011)
    tape = ad.Tape()
    leaves = [tape.leaf(math.log(p)) for p in parts]
    out = uncertainty_total_on_tape(*[tape.constant(p) for p in parts], leaves)
    grads = tape.backward(out).flat(leaves)
    assert np.max(np.abs(grads)) < 1e-12
