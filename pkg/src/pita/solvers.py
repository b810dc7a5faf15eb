"""Reference solvers for synthetic periodic trajectories.

* ``burgers1d``: ``u_t + u u_x = beta u_xx``. Fourier collocation, 2/3-rule
  dealiasing of the nonlinear term, integrating-factor RK4 in time.
* ``advection_diffusion1d``: ``u_t + a u_x = nu u_xx`` advanced with the exact
  Fourier multiplier ``exp((-i a k - nu k^2) dt)``.
* ``diffusion_reaction2d``: FitzHugh-Nagumo system
  ``u_t = Du lap(u) + u - u^3 - k - v``, ``v_t = Dv lap(v) + u - v`` with
  second-order central differences and classical RK4.

``PdeSpec.substeps`` splits each output frame interval into that many solver
steps; the stability bound is checked against the solver step.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFinite, SampleError, UnstableTimestep
from .grid import Grid, Rng, Trajectory


class Family(str, enum.Enum):
    BURGERS_1D = "burgers1d"
    ADVECTION_DIFFUSION_1D = "advection_diffusion1d"
    DIFFUSION_REACTION_2D = "diffusion_reaction2d"


DEFAULT_PARAMS = {
    Family.BURGERS_1D: {"beta": 0.1},
    Family.ADVECTION_DIFFUSION_1D: {"a": 1.0, "nu": 0.1},
    Family.DIFFUSION_REACTION_2D: {"Du": 1e-3, "Dv": 5e-3, "k": 5e-3},
}


@dataclass(frozen=True)
class RandomFourier:
    """``sum_j A_j sin(2 pi l_j x / Lx + p_j) [cos(2 pi m_j y / Ly + q_j)]``.

    ``A_j ~ U[-amplitude, amplitude]``, wavenumbers uniform in ``1..max_wavenumber``,
    phases uniform in ``[0, 2 pi)``.  Each channel is drawn independently.
    """

    modes: int = 5
    amplitude: float = 0.5
    max_wavenumber: int = 3
    seed: int | None = None


@dataclass(frozen=True)
class Gaussian:
    center: tuple = (0.5,)  # fraction of the domain length per axis
    width: float = 0.1  # fraction of the domain length
    amplitude: float = 1.0


@dataclass(frozen=True, eq=False)
class Custom:
    field: np.ndarray  # (C, nx) or (C, nx, ny) or (nx,) for single-channel 1D


@dataclass(frozen=True)
class PdeSpec:
    family: Family
    params: dict = field(default_factory=dict)
    init: object = field(default_factory=RandomFourier)
    substeps: int = 1

    def __post_init__(self):
        fam = Family(self.family)
        object.__setattr__(self, "family", fam)
        merged = dict(DEFAULT_PARAMS[fam])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"unknown parameters for {fam.value}: {sorted(unknown)}")
        merged.update(self.params)
        object.__setattr__(self, "params", merged)
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if fam is Family.BURGERS_1D and not merged["beta"] > 0:
            raise ValueError("Burgers viscosity beta must be > 0")
        if fam is Family.ADVECTION_DIFFUSION_1D and merged["nu"] < 0:
            raise ValueError("diffusivity nu must be >= 0")
        if fam is Family.DIFFUSION_REACTION_2D and not (merged["Du"] > 0 and merged["Dv"] > 0):
            raise ValueError("diffusivities Du, Dv must be > 0")

    @property
    def channels(self):
        return 2 if self.family is Family.DIFFUSION_REACTION_2D else 1

    @property
    def ndim(self):
        return 2 if self.family is Family.DIFFUSION_REACTION_2D else 1

    def max_diffusivity(self):
        p = self.params
        if self.family is Family.BURGERS_1D:
            return p["beta"]
        if self.family is Family.ADVECTION_DIFFUSION_1D:
            return p["nu"]
        return max(p["Du"], p["Dv"])


def stable_step_limit(spec, grid):
    """Largest diffusive-stable solver step: ``dx^2/(2D)`` in 1D, ``dx^2/(4D)`` in 2D."""
    d = spec.max_diffusivity()
    if d == 0:
        return math.inf
    h = min(grid.dx, grid.dy) if grid.ndim == 2 else grid.dx
    return h * h / ((4.0 if grid.ndim == 2 else 2.0) * d)


def initial_condition(spec, grid, rng):
    C = spec.channels
    X, Y = grid.coords()
    Lx, Ly = grid.lengths
    init = spec.init
    if isinstance(init, RandomFourier):
        r = Rng(init.seed) if init.seed is not None else rng
        u0 = np.zeros((C,) + grid.shape)
        for c in range(C):
            for _ in range(init.modes):
                amp = r.uniform(-init.amplitude, init.amplitude)
                lx = r.integers(1, init.max_wavenumber + 1)
                px = r.uniform(0.0, 2 * np.pi)
                term = amp * np.sin(2 * np.pi * lx * X / Lx + px)
                if grid.ndim == 2:
                    ly = r.integers(1, init.max_wavenumber + 1)
                    py = r.uniform(0.0, 2 * np.pi)
                    term = term * np.cos(2 * np.pi * ly * Y / Ly + py)
                u0[c] += term
        return u0
    if isinstance(init, Gaussian):
        center = tuple(init.center) + (0.5,) * (2 - len(init.center))
        dist2 = _periodic_dist(X, center[0] * Lx, Lx) ** 2
        scale2 = (init.width * Lx) ** 2
        if grid.ndim == 2:
            dist2 = dist2 + _periodic_dist(Y, center[1] * Ly, Ly) ** 2
        g = init.amplitude * np.exp(-dist2 / (2 * scale2))
        return np.repeat(g[None], C, axis=0)
    if isinstance(init, Custom):
        f = np.asarray(init.field, dtype=float)
        if grid.ndim == 1 and f.ndim == 1:
            f = f[None]
        if grid.ndim == 1 and f.ndim == 2:
            f = f[..., None]
        if f.shape != (C,) + grid.shape:
            raise ValueError(f"custom field shape {f.shape} does not match {(C,) + grid.shape}")
        return f.copy()
    raise TypeError(f"unsupported initial condition {init!r}")


def _periodic_dist(x, x0, L):
    d = np.abs(x - x0)
    return np.minimum(d, L - d)


def solve(spec, grid, nt, rng=None):
    """Integrate ``spec`` on ``grid``; returns ``nt`` frames starting with the initial condition."""
    if grid.ndim != spec.ndim:
        raise ValueError(f"{spec.family.value} needs a {spec.ndim}D grid")
    if nt < 1:
        raise ValueError("nt must be >= 1")
    h = grid.dt / spec.substeps
    limit = stable_step_limit(spec, grid)
    if h > limit:
        raise UnstableTimestep(
            f"solver step {h:g} exceeds diffusive stability limit {limit:g} "
            f"(dt={grid.dt:g}, substeps={spec.substeps})"
        )
    rng = rng if rng is not None else Rng(0)
    u0 = initial_condition(spec, grid, rng)
    stepper = _STEPPERS[spec.family](spec, grid, h)
    frames = np.empty((nt,) + u0.shape)
    frames[0] = u0
    state = stepper.start(u0)
    for t in range(1, nt):
        for _ in range(spec.substeps):
            state = stepper.step(state)
        frames[t] = stepper.field(state)
        if not np.all(np.isfinite(frames[t])):
            raise NonFinite(f"solution blew up at frame {t}", frame=t)
    return Trajectory(grid, frames)


class _Burgers:
    def __init__(self, spec, grid, h):
        n = grid.nx
        k = 2 * np.pi * np.fft.rfftfreq(n, d=grid.dx)
        self.n = n
        self.h = h
        beta = spec.params["beta"]
        self.E = np.exp(-beta * k**2 * h)
        self.E2 = np.exp(-beta * k**2 * h / 2)
        kmax = np.abs(np.fft.rfftfreq(n) * n)
        self.dealias = kmax < n / 3.0
        self.nl = -0.5j * k * self.dealias

    def _N(self, v):
        u = np.fft.irfft(v, n=self.n)
        return self.nl * np.fft.rfft(u * u)

    def start(self, u0):
        return np.fft.rfft(u0[0, :, 0])

    def step(self, v):
        h, E, E2 = self.h, self.E, self.E2
        a = self._N(v)
        b = self._N(E2 * (v + 0.5 * h * a))
        c = self._N(E2 * v + 0.5 * h * b)
        d = self._N(E * v + h * E2 * c)
        return E * v + h * (E * a + 2 * E2 * (b + c) + d) / 6

    def field(self, v):
        return np.fft.irfft(v, n=self.n)[None, :, None]


class _AdvectionDiffusion:
    def __init__(self, spec, grid, h):
        k = 2 * np.pi * np.fft.fftfreq(grid.nx, d=grid.dx)
        a, nu = spec.params["a"], spec.params["nu"]
        self.mult = np.exp((-1j * a * k - nu * k**2) * h)
        self.n = grid.nx

    def start(self, u0):
        return np.fft.fft(u0[0, :, 0])

    def step(self, v):
        return v * self.mult

    def field(self, v):
        return np.fft.ifft(v).real[None, :, None]


class _DiffusionReaction:
    def __init__(self, spec, grid, h):
        p = spec.params
        self.Du, self.Dv, self.k = p["Du"], p["Dv"], p["k"]
        self.idx2, self.idy2 = 1.0 / grid.dx**2, 1.0 / grid.dy**2
        self.h = h

    def _lap(self, f):
        return (np.roll(f, 1, 0) - 2 * f + np.roll(f, -1, 0)) * self.idx2 + (
            np.roll(f, 1, 1) - 2 * f + np.roll(f, -1, 1)
        ) * self.idy2

    def _rhs(self, s):
        u, v = s
        du = self.Du * self._lap(u) + u - u**3 - self.k - v
        dv = self.Dv * self._lap(v) + u - v
        return np.stack([du, dv])

    def start(self, u0):
        return u0.copy()

    def step(self, s):
        h = self.h
        k1 = self._rhs(s)
        k2 = self._rhs(s + 0.5 * h * k1)
        k3 = self._rhs(s + 0.5 * h * k2)
        k4 = self._rhs(s + h * k3)
        return s + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6

    def field(self, s):
        return s.copy()


_STEPPERS = {
    Family.BURGERS_1D: _Burgers,
    Family.ADVECTION_DIFFUSION_1D: _AdvectionDiffusion,
    Family.DIFFUSION_REACTION_2D: _DiffusionReaction,
}


def batch_generate(spec, grid, nt, samples, seed, workers=1):
    """``samples`` trajectories; sample ``i`` uses ``Rng(seed).child(i)`` so results
    do not depend on ``workers`` or scheduling order."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    root = Rng(seed)

    def one(i):
        try:
            return solve(spec, grid, nt, root.child(i))
        except Exception as exc:
            raise SampleError(i, exc) from exc

    if workers <= 1:
        return [one(i) for i in range(samples)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(samples)))


def burgers_grid(nx=256, length=2 * np.pi, dt=0.01):
    return Grid.periodic_1d(nx, length, dt)
