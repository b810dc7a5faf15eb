"""Finite-difference and local-polynomial derivative estimates on periodic grids.

Every spatial estimator here is a fixed periodic stencil, i.e. a linear map
``u -> sum_j w_j * u[i + o_j]``.  Keeping them as explicit ``(offsets, weights)``
pairs lets the autodiff tape apply the exact transpose during backprop.

Array layout follows :class:`pita.grid.Trajectory`: the ``x`` axis is always
``-2`` and the ``y`` axis ``-1`` (length 1 for 1D grids).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InsufficientFrames, UnsupportedOrder

AXIS_INDEX = {"x": -2, "y": -1}


class Method(str, enum.Enum):
    CENTRAL_FD = "central"
    POLY_INTERP = "poly"


@dataclass(frozen=True)
class StencilConfig:
    method: Method = Method.CENTRAL_FD
    order: int = 2
    poly_width: int = 5
    poly_degree: int = 4

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not 1 <= self.order <= 3:
            raise UnsupportedOrder(f"order must be in 1..3, got {self.order}")
        if self.method is Method.POLY_INTERP:
            if self.poly_width % 2 != 1:
                raise ValueError("poly_width must be odd")
            if self.poly_width < self.poly_degree + 1:
                raise ValueError("poly_width must be >= poly_degree + 1")
            if self.order > self.poly_degree:
                raise ValueError("order must not exceed poly_degree")


# Second-order central stencils in units of dx**order.
_CENTRAL = {
    1: ((-1, 1), (-0.5, 0.5)),
    2: ((-1, 0, 1), (1.0, -2.0, 1.0)),
    3: ((-2, -1, 1, 2), (-0.5, 1.0, -1.0, 0.5)),
}


@lru_cache(maxsize=None)
def _poly_weights(width, degree, order):
    half = width // 2
    offsets = np.arange(-half, half + 1, dtype=float)
    vander = np.vander(offsets, degree + 1, increasing=True)
    # Row `order` of the pseudo-inverse maps samples to the fitted coefficient a_order;
    # the order-th derivative of the polynomial at 0 is order! * a_order.
    coef = np.linalg.pinv(vander)[order] * math.factorial(order)
    return tuple(range(-half, half + 1)), tuple(coef)


def stencil(order, spacing, cfg=StencilConfig()):
    """Return ``(offsets, weights)`` for the ``order``-th derivative at grid spacing ``spacing``."""
    if order not in (1, 2, 3):
        raise UnsupportedOrder(f"derivative order {order} not supported (1..3)")
    if cfg.method is Method.CENTRAL_FD:
        offsets, unit = _CENTRAL[order]
    else:
        if order > cfg.poly_degree:
            raise UnsupportedOrder(f"order {order} exceeds poly_degree {cfg.poly_degree}")
        offsets, unit = _poly_weights(cfg.poly_width, cfg.poly_degree, order)
    weights = np.asarray(unit, dtype=float) / spacing**order
    return np.asarray(offsets, dtype=int), weights


def stencil_width(order, cfg):
    return cfg.poly_width if cfg.method is Method.POLY_INTERP else 2 * order + 1


def apply_stencil(u, offsets, weights, axis):
    """Periodic stencil application along ``axis``."""
    out = np.zeros_like(u, dtype=float)
    for o, w in zip(offsets, weights):
        out += w * np.roll(u, -int(o), axis=axis)
    return out


def apply_stencil_transpose(g, offsets, weights, axis):
    return apply_stencil(g, -np.asarray(offsets), weights, axis)


def d_dx(field, axis, order, cfg=StencilConfig(), spacing=1.0):
    """Spatial derivative of ``field`` along ``axis`` ('x' or 'y'), periodic wrap."""
    ax = AXIS_INDEX[axis]
    if order not in (1, 2, 3):
        raise UnsupportedOrder(f"derivative order {order} not supported (1..3)")
    need = stencil_width(order, cfg)
    if field.shape[ax] < need:
        raise ValueError(f"axis {axis} has {field.shape[ax]} points, stencil needs {need}")
    offsets, weights = stencil(order, spacing, cfg)
    return apply_stencil(np.asarray(field, dtype=float), offsets, weights, ax)


@lru_cache(maxsize=64)
def _time_matrix(nt, dt):
    m = np.zeros((nt, nt))
    m[0, :3] = (-1.5, 2.0, -0.5)
    m[-1, -3:] = (0.5, -2.0, 1.5)
    for i in range(1, nt - 1):
        m[i, i - 1] = -0.5
        m[i, i + 1] = 0.5
    m /= dt
    m.flags.writeable = False
    return m


def time_derivative_matrix(nt, dt):
    """``(nt, nt)`` matrix of the second-order time derivative (central inside, one-sided ends)."""
    if nt < 3:
        raise InsufficientFrames(f"time derivative needs nt >= 3, got {nt}")
    return _time_matrix(int(nt), float(dt))


def d_dt_array(data, dt):
    """Time derivative along axis 0 of an array shaped ``(nt, ...)``."""
    data = np.asarray(data, dtype=float)
    m = time_derivative_matrix(data.shape[0], dt)
    return np.tensordot(m, data, axes=(1, 0))


def d_dt(traj):
    from .grid import Trajectory

    return Trajectory(traj.grid, d_dt_array(traj.data, traj.grid.dt))
