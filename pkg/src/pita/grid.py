"""Uniform periodic grids, trajectories, seeded randomness and the ``.pita`` file format.

File layout (all little-endian)::

    offset  size  field
    0       4     magic b"PITA"
    4       2     format version (u16, currently 1)
    6       1     ndim (u8)
    7       1     channels (u8)
    8       12    nx, ny, nt (u32 each)
    20      24    dx, dy, dt (f64 each)
    44      ...   data, f64, [t][c][x][y] row-major
"""

from __future__ import annotations

import enum
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, ShapeError, Truncated, TrajectoryIOError, VersionMismatch

MAGIC = b"PITA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBBIIIddd")
HEADER_SIZE = _HEADER.size  # 44


class Boundary(enum.Enum):
    PERIODIC = "periodic"


@dataclass(frozen=True)
class Grid:
    """Uniform grid on a periodic box ``[0, nx*dx) x [0, ny*dy)``."""

    ndim: int
    nx: int
    dx: float
    dt: float
    ny: int = 1
    dy: float = 1.0
    boundary: Boundary = Boundary.PERIODIC

    def __post_init__(self):
        if self.ndim not in (1, 2):
            raise ValueError(f"ndim must be 1 or 2, got {self.ndim}")
        if self.nx < 8:
            raise ValueError(f"nx must be >= 8, got {self.nx}")
        if not (self.dx > 0 and self.dt > 0):
            raise ValueError("dx and dt must be positive")
        if self.ndim == 1:
            object.__setattr__(self, "ny", 1)
            object.__setattr__(self, "dy", 1.0)
        else:
            if self.ny < 8:
                raise ValueError(f"ny must be >= 8 for 2D grids, got {self.ny}")
            if not self.dy > 0:
                raise ValueError("dy must be positive")

    @classmethod
    def periodic_1d(cls, nx, length, dt):
        return cls(ndim=1, nx=nx, dx=length / nx, dt=dt)

    @classmethod
    def periodic_2d(cls, nx, ny, length_x, length_y, dt):
        return cls(ndim=2, nx=nx, ny=ny, dx=length_x / nx, dy=length_y / ny, dt=dt)

    @property
    def n(self):
        return self.nx * self.ny

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def spatial_shape(self):
        """Shape of one channel without the dummy y axis in 1D."""
        return (self.nx,) if self.ndim == 1 else (self.nx, self.ny)

    @property
    def lengths(self):
        return (self.nx * self.dx, self.ny * self.dy)

    @property
    def axes(self):
        return ("x",) if self.ndim == 1 else ("x", "y")

    def spacing(self, axis):
        return {"x": self.dx, "y": self.dy}[axis]

    def coords(self):
        """Cell coordinates, each of shape ``(nx, ny)``."""
        x = np.arange(self.nx) * self.dx
        y = np.arange(self.ny) * self.dy
        return np.meshgrid(x, y, indexing="ij")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-ordered stack of multi-channel fields, ``data[t, c, x, y]`` in float64.

    The array is copied on construction and made read-only.
    """

    grid: Grid
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim == 3 and self.grid.ndim == 1:
            data = data[..., None]
        if data.ndim != 4:
            raise ShapeError(f"trajectory data must be 4D [t,c,x,y], got shape {data.shape}")
        nt, c, nx, ny = data.shape
        if (nx, ny) != self.grid.shape:
            raise ShapeError(f"data spatial shape {(nx, ny)} does not match grid {self.grid.shape}")
        if c < 1 or nt < 1:
            raise ShapeError(f"need at least one channel and one frame, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("trajectory contains non-finite values")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def nt(self):
        return self.data.shape[0]

    @property
    def channels(self):
        return self.data.shape[1]

    def frame(self, t):
        return self.data[t]

    def fields(self):
        """Data without the dummy y axis in 1D: ``(nt, C, nx)`` or ``(nt, C, nx, ny)``."""
        return self.data[..., 0] if self.grid.ndim == 1 else self.data

    def with_data(self, data):
        return Trajectory(self.grid, data)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


class Rng:
    """Seeded random stream backed by numpy's PCG64 bit generator.

    PCG64 output is specified bit-for-bit and identical across platforms.
    ``child(i)`` derives an independent stream from ``(seed, i)`` through
    numpy's ``SeedSequence`` hashing, so per-sample streams do not depend on
    the order in which they are created.
    """

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, index):
        return Rng(derive_seed(self.seed, index))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def raw(self, size):
        """Raw 64-bit outputs of the bit generator."""
        return self._gen.bit_generator.random_raw(size)

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def derive_seed(seed, index):
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def write_trajectory(traj, path):
    """Write ``traj`` to ``path`` atomically; no partial file is left on failure."""
    g = traj.grid
    nt, c, nx, ny = traj.data.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, g.ndim, c, nx, ny, nt, g.dx, g.dy, g.dt)
    payload = traj.data.astype("<f8", copy=False).tobytes(order="C")
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    tmp = None
    try:
        fd, tmp = tempfile.mkstemp(prefix=".pita-", dir=directory)
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
        tmp = None
    except OSError as exc:
        raise TrajectoryIOError(path, exc) from exc
    finally:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)


def read_trajectory(path):
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise TrajectoryIOError(path, exc) from exc
    return decode_trajectory(blob)


def decode_trajectory(blob):
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < HEADER_SIZE:
        raise Truncated(f"header needs {HEADER_SIZE} bytes, file has {len(blob)}")
    _, version, ndim, c, nx, ny, nt, dx, dy, dt = _HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {version}, expected {FORMAT_VERSION}")
    expected = HEADER_SIZE + 8 * nt * c * nx * ny
    if len(blob) < expected:
        raise Truncated(f"payload needs {expected} bytes, file has {len(blob)}")
    if len(blob) > expected:
        raise Truncated(f"trailing bytes: expected {expected}, file has {len(blob)}")
    grid = Grid(ndim=ndim, nx=nx, ny=ny, dx=dx, dy=dy, dt=dt)
    data = np.frombuffer(blob, dtype="<f8", offset=HEADER_SIZE).reshape(nt, c, nx, ny)
    return Trajectory(grid, data)


def slice_window(traj, start, length):
    """Frames ``[start, start+length)`` as a new trajectory (deep copy)."""
    if start < 0 or length < 1 or start + length > traj.nt:
        raise IndexError(f"window [{start}, {start + length}) out of range for nt={traj.nt}")
    return Trajectory(traj.grid, traj.data[start : start + length])
