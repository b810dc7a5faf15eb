"""Data, physics-residual and coefficient-consistency losses with uncertainty weighting.

Uncertainty weighting combines the three losses as::

    total = data / (2 d1^2) + phys / (2 d2^2) + con / (2 d3^2) + log(d1 d2 d3)

For fixed losses the optimum over each ``d_i`` is ``d_i^2 = L_i``.  During
training ``d_i`` is carried as ``s_i = log d_i^2`` with ``d_i^2 >= 1e-6``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .derivs import AXIS_INDEX, stencil, time_derivative_matrix
from .errors import DomainError, InsufficientFrames, ShapeError, ZeroNormFrame
from .grid import Rng, Trajectory
from .library import (
    DownsampleSpec,
    DownsampledView,
    LibraryConfig,
    evaluate_terms,
    generate_terms,
    resolve_axes,
)
from .stridge import StridgeConfig

DELTA_SQ_FLOOR = 1e-6
LOG_DELTA_SQ_FLOOR = math.log(DELTA_SQ_FLOOR)


@dataclass(frozen=True)
class Uncertainty:
    """Learned weights ``1 / (2 d_i^2)`` plus ``log(d1 d2 d3)``."""

    name = "uncertainty"


@dataclass(frozen=True)
class Manual:
    """``data + alpha_phys * phys + alpha_con * con``.  A zero weight disables its term."""

    alpha_phys: float = 0.5
    alpha_con: float = 0.5
    name = "manual"

    def __post_init__(self):
        if self.alpha_phys < 0 or self.alpha_con < 0:
            raise ValueError("manual weights must be >= 0")


@dataclass(frozen=True)
class PitaConfig:
    stridge: StridgeConfig = field(default_factory=StridgeConfig)
    library: LibraryConfig = field(default_factory=LibraryConfig)
    down: DownsampleSpec = field(default_factory=DownsampleSpec)
    weighting: object = field(default_factory=Uncertainty)
    ado_period: int = 50
    lambda_star_policy: str = "per_trajectory_cached"
    detach_library: bool = False  # True: only d/dt carries gradient, library columns are constants
    zero_norm_eps: float | None = None  # None: zero-norm truth frames raise

    def __post_init__(self):
        if self.ado_period < 1:
            raise ValueError("ado_period must be >= 1")
        if self.lambda_star_policy != "per_trajectory_cached":
            raise ValueError(f"unknown lambda_star_policy {self.lambda_star_policy!r}")
        if not isinstance(self.weighting, (Uncertainty, Manual)):
            raise TypeError("weighting must be Uncertainty() or Manual(a1, a2)")

    @property
    def l0_weight(self):
        return self.stridge.l0_weight

    def uses_physics(self):
        return isinstance(self.weighting, Uncertainty) or self.weighting.alpha_phys > 0

    def uses_consistency(self):
        return isinstance(self.weighting, Uncertainty) or self.weighting.alpha_con > 0


@dataclass(frozen=True)
class LossBreakdown:
    data: float
    phys: float
    con: float
    delta: tuple
    total: float
    weighting: object = field(default_factory=Uncertainty)

    def recompute(self):
        return total_loss((self.data, self.phys, self.con), self.delta, self.weighting)

    def check(self, tol=1e-12):
        ref = self.recompute()
        if abs(ref - self.total) > tol * max(1.0, abs(ref)):
            raise ArithmeticError(f"logged total {self.total!r} disagrees with recomputed {ref!r}")


# ---------------------------------------------------------------- data loss


def _frames(x):
    return x.data if isinstance(x, Trajectory) else np.asarray(x, dtype=float)


def data_loss(pred, truth, eps=None):
    """Mean over frames of ``|u_i - u_hat_i| / |u_i|`` (L2 over channels and space)."""
    p, t = _frames(pred), _frames(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ")
    n = p.shape[0]
    err = np.sqrt(np.sum((p - t).reshape(n, -1) ** 2, axis=1))
    ref = np.sqrt(np.sum(t.reshape(n, -1) ** 2, axis=1))
    ref = _guard_norms(ref, eps)
    return float(np.mean(err / ref))


def _guard_norms(ref, eps):
    if eps is None:
        bad = np.flatnonzero(ref == 0)
        if bad.size:
            raise ZeroNormFrame(f"truth frame {int(bad[0])} has zero L2 norm")
        return ref
    return np.maximum(ref, eps)


def data_loss_on_tape(preds, truth, eps=None):
    """Batch mean of :func:`data_loss`; ``preds`` is a list of ``(B, C, ...)`` Vars, ``truth`` ``(B, T, C, ...)``."""
    truth = np.asarray(truth, dtype=float)
    b, t_ar = truth.shape[0], truth.shape[1]
    if len(preds) != t_ar:
        raise ShapeError(f"{len(preds)} predicted frames for {t_ar} truth frames")
    terms = []
    for i, p in enumerate(preds):
        tr = truth[:, i]
        ref = _guard_norms(np.sqrt(np.sum(tr.reshape(b, -1) ** 2, axis=1)), eps)
        diff = (p - tr).reshape(b, -1)
        err = ad.sqrt(ad.vsum(diff * diff, axis=1))
        terms.append(err * (1.0 / ref))
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return ad.vsum(acc) * (1.0 / (b * t_ar))


# ---------------------------------------------------------------- physics loss


def physics_terms(channels, grid, cfg):
    lib = cfg.library if isinstance(cfg, PitaConfig) else cfg
    return tuple(generate_terms(channels, resolve_axes(grid, lib), lib))


def residual_on_tape(window, grid, lambdas, terms, points, library, detach_library=False):
    """``sum_c |d_t U_c - Phi Lambda_c|^2 / rows`` for one window Var ``(T, C, nx, ny)``.

    ``points`` are flat spatial indices; rows are (frame, point), frame-major.
    """
    nt, c = window.shape[0], window.shape[1]
    if nt < 3:
        raise InsufficientFrames(f"physics loss needs >= 3 frames, got {nt}")
    lam = np.asarray(getattr(lambdas, "lambda_", lambdas), dtype=float)
    if lam.shape != (len(terms), c):
        raise ShapeError(f"coefficients {lam.shape} do not match {len(terms)} terms x {c} channels")
    points = np.asarray(points)
    n = grid.n
    rows = nt * points.size

    def select(field):  # (nt, nx, ny) -> (rows,)
        return ad.take(field.reshape(nt, n), points, axis=1).reshape(rows)

    ut = ad.apply_matrix(window, time_derivative_matrix(nt, grid.dt), axis=0)
    source = window.tape.constant(window.value) if detach_library else window
    channel_rows = [select(source[:, k]) for k in range(c)]
    active = [j for j in range(len(terms)) if np.any(lam[j])]
    needed = {terms[j].deriv for j in active if terms[j].deriv is not None}
    deriv_rows = {}
    for ch, axis, order in sorted(needed):
        offsets, weights = stencil(order, grid.spacing(axis), library.stencil)
        d = ad.stencil(source[:, ch], offsets, weights, AXIS_INDEX[axis])
        deriv_rows[(ch, axis, order)] = select(d)
    cols = evaluate_terms([terms[j] for j in active], channel_rows, deriv_rows, np.ones(rows))
    total = None
    for k in range(c):
        r = select(ut[:, k])
        for j, col in zip(active, cols):
            if lam[j, k] != 0:
                r = r - col * lam[j, k]
        sq = ad.vsum(r * r)
        total = sq if total is None else total + sq
    return total * (1.0 / rows)


def l0_penalty(lambdas, l0_weight):
    lam = getattr(lambdas, "lambda_", lambdas)
    return l0_weight * int(np.count_nonzero(lam))


def _window_points(window, cfg, points, rng):
    down = cfg.down if isinstance(cfg, PitaConfig) else DownsampleSpec()
    if points is not None:
        return np.asarray(points)
    n = window.grid.n
    w = down.retained(n)
    rng = rng if rng is not None else Rng(down.seed)
    return np.arange(n) if w == n else np.sort(rng.choice(n, size=w, replace=False))


def _last_frames(window, cfg):
    keep = cfg.down.temporal_keep
    if window.nt < keep:
        raise InsufficientFrames(f"window has {window.nt} frames, temporal_keep={keep}")
    return window.data[window.nt - keep :]


def physics_loss_and_grad(pred_window, cfg, lambdas, points=None, rng=None):
    """Value and gradient (w.r.t. the retained frames) of :func:`physics_loss`."""
    frames = _last_frames(pred_window, cfg)
    pts = _window_points(pred_window, cfg, points, rng)
    terms = physics_terms(pred_window.channels, pred_window.grid, cfg)
    tape = ad.Tape()
    w = tape.leaf(frames)
    res = residual_on_tape(w, pred_window.grid, lambdas, terms, pts, cfg.library, cfg.detach_library)
    value = float(res.value) + l0_penalty(lambdas, cfg.l0_weight)
    grad = tape.backward(res)[w]
    return value, grad


def physics_loss(pred_window, cfg, lambdas, points=None, rng=None):
    """Normalized residual ``|d_t U - Phi Lambda|^2 / rows + alpha |Lambda|_0`` on the last ``T_C`` frames.

    ``lambdas`` is one :class:`SparseCoefficients` (or array) or a list of them for
    several windows, in which case ``pred_window`` must be a matching list and the
    per-window losses are summed.
    """
    if isinstance(lambdas, (list, tuple)):
        if not isinstance(pred_window, (list, tuple)) or len(pred_window) != len(lambdas):
            raise ShapeError("need one window per coefficient set")
        pts = points if points is not None else [None] * len(lambdas)
        return sum(physics_loss(w, cfg, lam, p, rng) for w, lam, p in zip(pred_window, lambdas, pts))
    return physics_loss_and_grad(pred_window, cfg, lambdas, points, rng)[0]


def downsampled_view(pred_window, cfg, points):
    """The view the coefficient refresh regresses on: last ``T_C`` frames at ``points``."""
    from .grid import slice_window

    keep = cfg.down.temporal_keep
    start = pred_window.nt - keep
    return DownsampledView(slice_window(pred_window, start, keep), np.asarray(points), start)


# ---------------------------------------------------------------- consistency and total


def consistency_loss(lambda_star, lambdas, reduce="sum"):
    """``sum_i |Lambda* - Lambda_i|_F^2`` (``reduce="mean"`` divides by the window count)."""
    ref = np.asarray(getattr(lambda_star, "lambda_", lambda_star), dtype=float)
    if not isinstance(lambdas, (list, tuple)):
        lambdas = [lambdas]
    total = 0.0
    for lam in lambdas:
        lam = np.asarray(getattr(lam, "lambda_", lam), dtype=float)
        if lam.shape != ref.shape:
            raise ShapeError(f"coefficient shapes {ref.shape} and {lam.shape} differ")
        total += float(np.sum((ref - lam) ** 2))
    if reduce == "mean":
        return total / len(lambdas)
    if reduce != "sum":
        raise ValueError(f"unknown reduce {reduce!r}")
    return total


def total_loss(parts, delta=(1.0, 1.0, 1.0), weighting=Uncertainty()):
    data, phys, con = parts
    if isinstance(weighting, Manual):
        out = data
        if weighting.alpha_phys:
            out = out + weighting.alpha_phys * phys
        if weighting.alpha_con:
            out = out + weighting.alpha_con * con
        return out
    d = [float(x) for x in delta]
    if len(d) != 3 or min(d) <= 0:
        raise DomainError(f"delta components must be > 0, got {delta}")
    return (
        data / (2 * d[0] ** 2) + phys / (2 * d[1] ** 2) + con / (2 * d[2] ** 2) + math.log(d[0] * d[1] * d[2])
    )


def optimal_delta(parts):
    """Stationary point ``d_i = sqrt(L_i)`` of the uncertainty-weighted total for fixed losses."""
    if min(parts) <= 0:
        raise DomainError("optimal delta needs strictly positive losses")
    return tuple(math.sqrt(p) for p in parts)


def delta_from_log_sq(s):
    return tuple(math.exp(0.5 * max(float(v), LOG_DELTA_SQ_FLOOR)) for v in s)


def uncertainty_total_on_tape(data, phys, con, s):
    """Tape version of the uncertainty total with ``s_i = log d_i^2`` leaves (scalars)."""
    out = None
    for loss, si in zip((data, phys, con), s):
        term = loss * ad.exp(-si) * 0.5 + si * 0.5
        out = term if out is None else out + term
    return out
