"""Sequential thresholded ridge regression (STRidge) for sparse PDE coefficients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ShapeError

_RCOND = 1e-12


@dataclass(frozen=True)
class StridgeConfig:
    """``threshold`` is compared against normalized coefficients when ``normalize`` is set.

    With normalization each coefficient is expressed as ``lambda_j * |phi_j| / |u_t|``,
    i.e. the share of the time derivative a term accounts for, which makes the
    threshold independent of the units of both the library and ``u_t``.
    """

    threshold: float = 0.05
    max_iter: int = 10
    ridge: float = 1e-5
    l0_weight: float = 1e-5
    normalize: bool = True

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.ridge < 0 or self.l0_weight < 0:
            raise ValueError("ridge and l0_weight must be >= 0")


@dataclass(frozen=True, eq=False)
class SparseCoefficients:
    lambda_: np.ndarray  # (S, C)
    support: np.ndarray  # (S, C) bool
    objective: np.ndarray  # (C,)
    history: tuple = field(default=(), repr=False)  # per channel: list of (support, objective)

    @property
    def shape(self):
        return self.lambda_.shape

    @classmethod
    def zeros(cls, n_terms, channels):
        return cls(
            np.zeros((n_terms, channels)),
            np.zeros((n_terms, channels), dtype=bool),
            np.zeros(channels),
        )


def ridge_solve(A, b, alpha=0.0):
    """Solve ``(A^T A + alpha I) x = A^T b``.

    Cholesky on the normal equations first; if that fails or the system is
    too ill-conditioned, column-pivoted QR on the augmented least-squares
    problem, and truncated SVD when QR finds it rank deficient.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    if A.shape[0] < 1 or A.shape[1] < 1:
        raise ShapeError(f"A must have at least one row and column, got {A.shape}")
    if b.shape[0] != A.shape[0]:
        raise ShapeError(f"A has {A.shape[0]} rows but b has {b.shape[0]}")
    n = A.shape[1]
    gram = A.T @ A
    if alpha:
        gram = gram + alpha * np.eye(n)
    rhs = A.T @ b
    try:
        factor, lower = scipy.linalg.cho_factor(gram, check_finite=False)
        diag = np.abs(np.diag(factor))
        if diag.min() > 0 and (diag.min() / diag.max()) ** 2 > _RCOND:
            x = scipy.linalg.cho_solve((factor, lower), rhs, check_finite=False)
            if np.all(np.isfinite(x)):
                return x
    except np.linalg.LinAlgError:
        pass
    return _qr_solve(A, b, alpha)


def _qr_solve(A, b, alpha):
    n = A.shape[1]
    if alpha:
        A = np.vstack([A, np.sqrt(alpha) * np.eye(n)])
        pad = np.zeros((n,) + b.shape[1:])
        b = np.concatenate([b, pad])
    q, r, perm = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == n and diag[0] > 0 and diag[-1] > _RCOND * diag[0]:
        y = scipy.linalg.solve_triangular(r, q.T @ b)
        x = np.empty_like(y)
        x[perm] = y
        return x
    return np.linalg.pinv(A, rcond=_RCOND) @ b


def objective(phi, lam, ut, l0_weight):
    """``|phi @ lam - ut|^2 + l0_weight * |lam|_0``."""
    r = phi @ lam - ut
    return float(r @ r) + l0_weight * int(np.count_nonzero(lam))


def stridge_channel(phi, ut, cfg=StridgeConfig()):
    """Sparse coefficients for one channel.

    Returns ``(lambda, support, history)`` where ``history`` lists
    ``(support, objective)`` after the initial solve and after every refit.
    Thresholded coefficients never re-enter the support.
    """
    phi = np.asarray(phi, dtype=float)
    ut = np.asarray(ut, dtype=float).reshape(-1)
    if phi.ndim != 2 or phi.shape[0] != ut.shape[0]:
        raise ShapeError(f"phi {phi.shape} and ut {ut.shape} disagree on rows")
    S = phi.shape[1]
    zero = np.zeros(S)
    if not np.any(ut):
        return zero, np.zeros(S, dtype=bool), [(np.zeros(S, dtype=bool), 0.0)]

    if cfg.normalize:
        col_scale = np.linalg.norm(phi, axis=0)
        usable = col_scale > 0
        col_scale[~usable] = 1.0
        ut_scale = np.linalg.norm(ut)
    else:
        col_scale = np.ones(S)
        usable = np.ones(S, dtype=bool)
        ut_scale = 1.0
    A = phi / col_scale
    b = ut / ut_scale

    def to_original(coef_n):
        return coef_n * ut_scale / col_scale

    coef = np.zeros(S)
    coef[usable] = np.linalg.lstsq(A[:, usable], b, rcond=None)[0]
    support = usable & (coef != 0)
    history = [(support.copy(), objective(phi, to_original(coef), ut, cfg.l0_weight))]

    for _ in range(cfg.max_iter):
        keep = support & (np.abs(coef) >= cfg.threshold)
        coef = np.zeros(S)
        if keep.any():
            coef[keep] = ridge_solve(A[:, keep], b, cfg.ridge)
        stable = np.array_equal(keep, support)
        support = keep
        history.append((support.copy(), objective(phi, to_original(coef), ut, cfg.l0_weight)))
        if stable or not support.any():
            break

    lam = to_original(coef)
    lam[~support] = 0.0
    return lam, support, history


def stridge_all(lib, ut, cfg=StridgeConfig()):
    """Apply :func:`stridge_channel` to every column of ``ut``."""
    phi = getattr(lib, "phi", lib)
    ut = np.asarray(ut, dtype=float)
    if ut.ndim == 1:
        ut = ut[:, None]
    if ut.shape[0] != phi.shape[0]:
        raise ShapeError(f"library has {phi.shape[0]} rows, ut has {ut.shape[0]}")
    S, C = phi.shape[1], ut.shape[1]
    lam = np.zeros((S, C))
    support = np.zeros((S, C), dtype=bool)
    obj = np.zeros(C)
    history = []
    for c in range(C):
        lam[:, c], support[:, c], hist = stridge_channel(phi, ut[:, c], cfg)
        obj[c] = objective(phi, lam[:, c], ut[:, c], cfg.l0_weight)
        history.append(hist)
    return SparseCoefficients(lam, support, obj, tuple(history))


def coefficients_objective(lib, ut, coeffs, l0_weight):
    """Per-channel objective of given coefficients on a (possibly different) system."""
    phi = getattr(lib, "phi", lib)
    lam = getattr(coeffs, "lambda_", coeffs)
    ut = np.asarray(ut).reshape(phi.shape[0], -1)
    return np.array([objective(phi, lam[:, c], ut[:, c], l0_weight) for c in range(ut.shape[1])])


def least_squares_baseline(lib, ut):
    """Unthresholded normal-equation solution (dense)."""
    phi = getattr(lib, "phi", lib)
    return ridge_solve(phi, np.asarray(ut, dtype=float), 0.0)


def pseudoinverse_baseline(lib, ut):
    phi = getattr(lib, "phi", lib)
    return np.linalg.pinv(phi, rcond=_RCOND) @ np.asarray(ut, dtype=float)
