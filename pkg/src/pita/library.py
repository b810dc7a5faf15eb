"""Candidate-term libraries for sparse regression, spatial/temporal downsampling and equation rendering.

Columns are ``monomial * derivative`` products.  Monomials range over all
channel products of total degree ``<= P`` (constant included); derivative
factors are ``none`` or ``d^k/d axis^k`` of one channel for ``1 <= k <= Dmax``.
Hence ``S = binom(P + C, C) * (1 + C * ndim * Dmax)``, which for one channel is
``(P + 1) * (1 + ndim * Dmax)``.

Columns are grouped by derivative factor (none, then order 1 over axes and
channels, then order 2, ...), and within a group by monomial degree.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .derivs import AXIS_INDEX, StencilConfig, apply_stencil, stencil, time_derivative_matrix
from .errors import EmptyLibrary, InsufficientFrames

CHANNEL_NAMES = ("u", "v", "w")


def channel_name(c):
    return CHANNEL_NAMES[c] if c < len(CHANNEL_NAMES) else f"c{c}"


@dataclass(frozen=True)
class TermDescriptor:
    poly_power: tuple
    deriv_channel: int | None = None
    deriv_axis: str | None = None
    deriv_order: int = 0

    @property
    def deriv(self):
        if self.deriv_order == 0:
            return None
        return (self.deriv_channel, self.deriv_axis, self.deriv_order)

    @property
    def is_constant(self):
        return self.deriv_order == 0 and sum(self.poly_power) == 0

    @property
    def display(self):
        parts = []
        for c, p in enumerate(self.poly_power):
            if p == 1:
                parts.append(channel_name(c))
            elif p > 1:
                parts.append(f"{channel_name(c)}^{p}")
        if self.deriv_order:
            parts.append(f"{channel_name(self.deriv_channel)}_{self.deriv_axis * self.deriv_order}")
        return "*".join(parts) if parts else "1"

    def __str__(self):
        return self.display


@dataclass(frozen=True)
class LibraryConfig:
    max_poly: int = 2
    max_deriv: int = 2
    stencil: StencilConfig = field(default_factory=StencilConfig)
    axes: tuple | None = None

    def __post_init__(self):
        if self.max_poly < 1 or self.max_deriv < 1:
            raise ValueError("max_poly and max_deriv must be >= 1")
        if self.max_deriv > 3:
            raise ValueError("max_deriv must be <= 3")


@dataclass(frozen=True)
class DownsampleSpec:
    """Keep ``ceil(n / spatial_factor)`` random spatial points and the last ``temporal_keep`` frames."""

    spatial_factor: int = 4
    temporal_keep: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.spatial_factor < 1:
            raise ValueError("spatial_factor must be >= 1")
        if self.temporal_keep < 2:
            raise ValueError("temporal_keep must be >= 2")

    def retained(self, n):
        return math.ceil(n / self.spatial_factor)


@dataclass(frozen=True, eq=False)
class DownsampledView:
    """Last ``T_C`` frames of a trajectory plus the retained spatial (flat) indices.

    Derivatives are still taken on the full grid of ``window``; only rows at
    ``points`` enter the library.
    """

    window: object
    points: np.ndarray
    time_offset: int

    @property
    def grid(self):
        return self.window.grid

    @property
    def nt(self):
        return self.window.nt

    @property
    def channels(self):
        return self.window.channels


@dataclass(frozen=True, eq=False)
class CandidateLibrary:
    phi: np.ndarray
    terms: tuple
    row_index: np.ndarray  # (rows, 2): (frame, flat spatial point)

    @property
    def n_terms(self):
        return len(self.terms)

    @property
    def displays(self):
        return [t.display for t in self.terms]


def monomials(channels, max_poly):
    """Exponent tuples of total degree ``<= max_poly``, ordered by degree then lexicographically."""
    out = []
    for deg in range(max_poly + 1):
        for combo in itertools.combinations_with_replacement(range(channels), deg):
            powers = [0] * channels
            for c in combo:
                powers[c] += 1
            out.append(tuple(powers))
    return out


def derivative_descriptors(channels, axes, max_deriv):
    return [(c, a, k) for k in range(1, max_deriv + 1) for a in axes for c in range(channels)]


def generate_terms(channels, axes, cfg):
    mons = monomials(channels, cfg.max_poly)
    terms = [TermDescriptor(m) for m in mons]
    for c, a, k in derivative_descriptors(channels, axes, cfg.max_deriv):
        terms.extend(TermDescriptor(m, c, a, k) for m in mons)
    return terms


def expected_term_count(channels, ndim, max_poly, max_deriv):
    return math.comb(max_poly + channels, channels) * (1 + channels * ndim * max_deriv)


def ablation_mask(terms, mode):
    """Terms to drop for the library-completeness ablation: 'complete', 'one-order' or 'none'."""
    if mode == "complete":
        return []
    if mode == "one-order":
        return [t for t in terms if t.deriv_order >= 2]
    if mode == "none":
        return [t for t in terms if t.deriv_order >= 1]
    raise ValueError(f"unknown ablation mode {mode!r}")


def _apply_mask(terms, mask):
    if not mask:
        return list(terms)
    drop = set()
    for m in mask:
        drop.add(m.display if isinstance(m, TermDescriptor) else m)
    kept = []
    for i, t in enumerate(terms):
        if t.display in drop or i in drop:
            continue
        kept.append(t)
    if not kept:
        raise EmptyLibrary("library is empty after masking")
    return kept


def downsample(traj, spec, rng):
    """Random spatial subsample (same for all frames/channels) of the last ``T_C`` frames."""
    if spec.temporal_keep > traj.nt:
        raise InsufficientFrames(f"temporal_keep={spec.temporal_keep} exceeds nt={traj.nt}")
    from .grid import slice_window

    start = traj.nt - spec.temporal_keep
    window = slice_window(traj, start, spec.temporal_keep)
    n = traj.grid.n
    w = spec.retained(n)
    points = np.arange(n) if w == n else np.sort(rng.choice(n, size=w, replace=False))
    return DownsampledView(window, points, start), points


def resolve_axes(grid, cfg):
    return tuple(cfg.axes) if cfg.axes else grid.axes


def evaluate_terms(terms, channel_rows, deriv_rows, ones):
    """Product columns for ``terms``; operands may be numpy arrays or tape variables."""
    cache = {}

    def mono(powers):
        if powers in cache:
            return cache[powers]
        col = None
        for c, p in enumerate(powers):
            for _ in range(p):
                col = channel_rows[c] if col is None else col * channel_rows[c]
        cache[powers] = col
        return col

    cols = []
    for t in terms:
        col = mono(t.poly_power)
        if t.deriv is not None:
            d = deriv_rows[t.deriv]
            col = d if col is None else col * d
        cols.append(ones if col is None else col)
    return cols


def _source(traj):
    if isinstance(traj, DownsampledView):
        return traj.window, traj.points
    return traj, np.arange(traj.grid.n)


def build_library(traj, cfg=LibraryConfig(), mask=None):
    """Assemble the candidate matrix; rows are (frame, retained point), frame-major."""
    window, points = _source(traj)
    grid = window.grid
    if not np.all(np.isfinite(window.data)):
        raise ValueError("trajectory must be finite")
    axes = resolve_axes(grid, cfg)
    terms = _apply_mask(generate_terms(window.channels, axes, cfg), mask)
    nt, C = window.nt, window.channels

    def rows(arr):  # arr: (nt, nx, ny) -> (nt * w,)
        return arr.reshape(nt, -1)[:, points].reshape(-1)

    channel_rows = [rows(window.data[:, c]) for c in range(C)]
    needed = {t.deriv for t in terms if t.deriv is not None}
    deriv_rows = {}
    for c, a, k in needed:
        offsets, weights = stencil(k, grid.spacing(a), cfg.stencil)
        full = apply_stencil(window.data[:, c], offsets, weights, AXIS_INDEX[a])
        deriv_rows[(c, a, k)] = rows(full)
    ones = np.ones(nt * len(points))
    cols = evaluate_terms(terms, channel_rows, deriv_rows, ones)
    phi = np.stack(cols, axis=1)
    if not np.all(np.isfinite(phi).any(axis=0)):
        raise ValueError("library has an entirely non-finite column")
    row_index = np.stack(np.meshgrid(np.arange(nt), points, indexing="ij"), -1).reshape(-1, 2)
    return CandidateLibrary(phi, tuple(terms), row_index)


def time_derivative_rows(traj):
    """``(rows, C)`` matrix of time derivatives aligned with :func:`build_library` rows."""
    window, points = _source(traj)
    if window.nt < 3:
        raise InsufficientFrames(f"time derivative needs nt >= 3, got {window.nt}")
    m = time_derivative_matrix(window.nt, window.grid.dt)
    ut = np.tensordot(m, window.data, axes=(1, 0))  # (nt, C, nx, ny)
    nt, C = window.nt, window.channels
    return ut.reshape(nt, C, -1)[:, :, points].transpose(0, 2, 1).reshape(-1, C)


def build_system(traj, cfg=LibraryConfig(), mask=None):
    return build_library(traj, cfg, mask), time_derivative_rows(traj)


def _coefficient_matrix(coeffs):
    lam = getattr(coeffs, "lambda_", coeffs)
    lam = np.asarray(lam, dtype=float)
    return lam[:, None] if lam.ndim == 1 else lam


def render_equation(coeffs, terms, channel=0):
    """``"u_t = c1*term1 + c2*term2"`` over nonzero coefficients, 4 significant digits."""
    lam = _coefficient_matrix(coeffs)
    if lam.shape[0] != len(terms):
        raise ValueError(f"{lam.shape[0]} coefficients for {len(terms)} terms")
    lhs = f"{channel_name(channel)}_t"
    pieces = []
    for value, term in zip(lam[:, channel], terms):
        if value == 0:
            continue
        mag = f"{abs(value):#.4g}"
        body = mag if term.is_constant else f"{mag}*{term.display}"
        pieces.append(("-" if value < 0 else "+", body))
    if not pieces:
        return f"{lhs} = 0"
    sign, body = pieces[0]
    rhs = ("-" if sign == "-" else "") + body
    for sign, body in pieces[1:]:
        rhs += f" {sign} {body}"
    return f"{lhs} = {rhs}"
