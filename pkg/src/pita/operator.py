"""FNO-style spectral neural operator, auto-regressive rollout and optimizer.

Layout conventions
------------------
Frames use the trajectory layout ``(C, nx, ny)`` (``ny == 1`` in 1D).  Inside
the network activations are channels-last, ``(batch, nx, ny, width)``.  The
``T_in`` input frames are stacked frame-major into ``C * T_in`` channels and
the normalized grid coordinates ``x / Lx`` (and ``y / Ly``) are appended.

Each of the ``L`` blocks computes ``gelu(K(h) + h @ W + b)`` where ``K`` is a
spectral convolution keeping the lowest ``modes`` frequencies: ``modes`` along
x in 1D, and ``2 * modes`` (both signs) along x times ``modes`` along y in 2D.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import PitaError, ShapeError
from .grid import Rng, Trajectory

CHECKPOINT_MAGIC = b"PITP"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHHHHHHHQ")


@dataclass(frozen=True)
class OperatorHyper:
    channels: int = 1
    t_in: int = 10
    width: int = 32
    layers: int = 4
    modes: int = 12
    ndim: int = 1

    def __post_init__(self):
        for name in ("channels", "t_in", "width", "layers", "modes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.ndim not in (1, 2):
            raise ValueError("ndim must be 1 or 2")

    @classmethod
    def default(cls, ndim, channels=1, t_in=10):
        if ndim == 1:
            return cls(channels, t_in, 32, 4, 12, 1)
        return cls(channels, t_in, 20, 4, 8, 2)

    @property
    def in_channels(self):
        return self.channels * self.t_in + self.ndim

    @property
    def spectral_shape(self):
        """``(kx, ky)`` extent of the kept frequency block."""
        return (self.modes, 1) if self.ndim == 1 else (2 * self.modes, self.modes)

    def layout(self):
        """Ordered ``(name, shape)`` pairs of the flat parameter vector."""
        w, kx, ky = self.width, *self.spectral_shape
        out = [("lift.w", (self.in_channels, w)), ("lift.b", (w,))]
        for i in range(self.layers):
            out += [
                (f"block{i}.spec", (w, w, kx, ky, 2)),
                (f"block{i}.w", (w, w)),
                (f"block{i}.b", (w,)),
            ]
        out += [("proj.w", (w, self.channels)), ("proj.b", (self.channels,))]
        return out

    def param_count(self):
        """``(C*T_in + ndim)*W + W + L*(2*W^2*Kx*Ky + W^2 + W) + W*C + C``."""
        w, c, kx, ky = self.width, self.channels, *self.spectral_shape
        return self.in_channels * w + w + self.layers * (2 * w * w * kx * ky + w * w + w) + w * c + c


@dataclass(frozen=True, eq=False)
class OperatorParams:
    hyper: OperatorHyper
    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if vec.size != self.hyper.param_count():
            raise ShapeError(f"parameter vector has {vec.size} entries, hyper needs {self.hyper.param_count()}")
        object.__setattr__(self, "vector", vec)

    def named(self):
        """Views of the flat vector keyed by layout name."""
        out, pos = {}, 0
        for name, shape in self.hyper.layout():
            size = int(np.prod(shape))
            out[name] = self.vector[pos : pos + size].reshape(shape)
            pos += size
        return out

    def with_vector(self, vector):
        return OperatorParams(self.hyper, vector)


@dataclass(frozen=True)
class RolloutConfig:
    t_in: int = 10
    t_ar: int = 1

    def __post_init__(self):
        if self.t_in < 1 or self.t_ar < 1:
            raise ValueError("t_in and t_ar must be >= 1")


def init_scale(name, hyper):
    """Half-width of the uniform initializer for the tensor ``name``."""
    if name.startswith("lift"):
        return 1.0 / math.sqrt(hyper.in_channels)
    if name.startswith("proj") or name.endswith((".w", ".b")):
        return 1.0 / math.sqrt(hyper.width)
    kx, ky = hyper.spectral_shape
    return 1.0 / (hyper.width * kx * ky)


def init_params(hyper, rng):
    """Uniform ``[-s, s]`` init; ``s = 1/sqrt(fan_in)`` for pointwise maps and
    ``1/(fan_in * modes)`` for both parts of each complex spectral weight."""
    rng = rng if isinstance(rng, Rng) else Rng(rng)
    parts = []
    for name, shape in hyper.layout():
        s = init_scale(name, hyper)
        parts.append(rng.uniform(-s, s, size=int(np.prod(shape))))
    return OperatorParams(hyper, np.concatenate(parts))


def zero_params(hyper):
    return OperatorParams(hyper, np.zeros(hyper.param_count()))


# ---------------------------------------------------------------- forward pass


def bind(tape, params):
    """One tape leaf per named tensor, in layout order."""
    return {name: tape.leaf(value) for name, value in params.named().items()}


def _fft_axes(ndim):
    return (1,) if ndim == 1 else (1, 2)


def spectral_conv(h, weight, modes, ndim):
    """Spectral convolution of channels-last ``h`` (batch, nx, ny, width).

    ``weight`` is ``(w_in, w_out, kx, ky, 2)``; out-of-band frequencies are zeroed.
    """
    _, nx, ny, _ = h.shape
    axes = _fft_axes(ndim)
    spec = ad.rdft(h, axes)
    if ndim == 1:
        if modes > nx // 2 + 1:
            raise ShapeError(f"modes={modes} exceeds the {nx // 2 + 1} frequencies of nx={nx}")
        kept = spec[:, :modes]
    else:
        if 2 * modes > nx or modes > ny // 2 + 1:
            raise ShapeError(f"modes={modes} too large for a {nx}x{ny} grid")
        kept = ad.concat([spec[:, :modes, :modes], spec[:, nx - modes :, :modes]], axis=1)
    hr, hi = kept[..., 0], kept[..., 1]
    wr, wi = weight[..., 0], weight[..., 1]
    eq = "bkli,iokl->bklo"
    re = ad.einsum(eq, hr, wr) - ad.einsum(eq, hi, wi)
    im = ad.einsum(eq, hr, wi) + ad.einsum(eq, hi, wr)
    out = ad.stack([re, im], axis=-1)
    if ndim == 1:
        return ad.irdft(out, (nx,), axes)
    b, w = out.shape[0], out.shape[-2]
    gap = np.zeros((b, nx - 2 * modes, modes, w, 2))
    full = ad.concat([out[:, :modes], gap, out[:, modes:]], axis=1)
    return ad.irdft(full, (nx, ny), axes)


def coordinate_channels(grid):
    """``(nx, ny, ndim)`` coordinates normalized to ``[0, 1)``."""
    X, Y = grid.coords()
    Lx, Ly = grid.lengths
    chans = [X / Lx] if grid.ndim == 1 else [X / Lx, Y / Ly]
    return np.stack(chans, axis=-1)


def forward(pv, hyper, grid, window):
    """One step on the tape: ``window`` (batch, T_in, C, nx, ny) -> (batch, C, nx, ny)."""
    tape = pv["lift.w"].tape
    if not isinstance(window, ad.Var):
        window = tape.constant(window)
    b, t_in, c, nx, ny = window.shape
    if (t_in, c) != (hyper.t_in, hyper.channels) or (nx, ny) != grid.shape:
        raise ShapeError(
            f"window shape {window.shape} does not match T_in={hyper.t_in}, C={hyper.channels}, grid {grid.shape}"
        )
    x = ad.transpose(window.reshape(b, t_in * c, nx, ny), (0, 2, 3, 1))
    coords = np.broadcast_to(coordinate_channels(grid), (b, nx, ny, grid.ndim))
    x = ad.concat([x, coords], axis=-1)
    h = x @ pv["lift.w"] + pv["lift.b"]
    for i in range(hyper.layers):
        k = spectral_conv(h, pv[f"block{i}.spec"], hyper.modes, hyper.ndim)
        h = ad.gelu(k + h @ pv[f"block{i}.w"] + pv[f"block{i}.b"])
    out = h @ pv["proj.w"] + pv["proj.b"]
    return ad.transpose(out, (0, 3, 1, 2))


def predict(params, grid, windows):
    """Numeric forward pass for a batch of windows ``(batch, T_in, C, nx, ny)``."""
    tape = ad.Tape()
    pv = {name: tape.constant(v) for name, v in params.named().items()}
    return forward(pv, params.hyper, grid, np.asarray(windows, dtype=float)).value


def step(params, window):
    """Next frame from a ``T_in``-frame trajectory window, shaped ``(C, nx[, ny])``."""
    if window.nt != params.hyper.t_in:
        raise ShapeError(f"window has {window.nt} frames, operator expects T_in={params.hyper.t_in}")
    out = predict(params, window.grid, window.data[None])[0]
    return out[..., 0] if window.grid.ndim == 1 else out


def copy_last_frame(window_data):
    """Diagnostic operator that repeats the most recent input frame."""
    return np.array(window_data[-1], dtype=float)


def _as_callable(model, grid):
    if isinstance(model, OperatorParams):
        return lambda w: predict(model, grid, w[None])[0]
    return model


def rollout(model, init, cfg):
    """Auto-regressive rollout of ``cfg.t_ar`` frames from the last ``cfg.t_in`` frames of ``init``.

    ``model`` is :class:`OperatorParams` or any callable mapping a window
    ``(T_in, C, nx, ny)`` to the next frame ``(C, nx, ny)``.
    """
    if init.nt < cfg.t_in:
        raise ShapeError(f"init has {init.nt} frames, rollout needs T_in={cfg.t_in}")
    if isinstance(model, OperatorParams) and model.hyper.t_in != cfg.t_in:
        raise ShapeError(f"operator T_in={model.hyper.t_in} but rollout T_in={cfg.t_in}")
    fn = _as_callable(model, init.grid)
    window = np.array(init.data[init.nt - cfg.t_in :])
    preds = np.empty((cfg.t_ar,) + window.shape[1:])
    for t in range(cfg.t_ar):
        preds[t] = fn(window)
        window = np.concatenate([window[1:], preds[t : t + 1]])
    return Trajectory(init.grid, preds)


def rollout_on_tape(pv, hyper, grid, inputs, t_ar):
    """Differentiable rollout; ``inputs`` (batch, T_in, C, nx, ny). Returns ``t_ar`` frame Vars."""
    tape = pv["lift.w"].tape
    frames = [tape.constant(inputs[:, t]) for t in range(inputs.shape[1])]
    preds = []
    for _ in range(t_ar):
        window = ad.stack(frames[-hyper.t_in :], axis=1)
        nxt = forward(pv, hyper, grid, window)
        preds.append(nxt)
        frames.append(nxt)
    return preds


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params, path):
    h = params.hyper
    head = _CKPT_HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, h.channels, h.t_in, h.width, h.layers, h.modes, h.ndim, params.vector.size
    )
    with open(path, "wb") as f:
        f.write(head)
        f.write(params.vector.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _CKPT_HEADER.size:
        raise PitaError(f"{path}: checkpoint header truncated")
    magic, version, c, t_in, width, layers, modes, ndim, count = _CKPT_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise PitaError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise PitaError(f"{path}: checkpoint version {version} unsupported")
    hyper = OperatorHyper(c, t_in, width, layers, modes, ndim)
    if count != hyper.param_count():
        raise ShapeError(f"{path}: stored {count} parameters, hyper implies {hyper.param_count()}")
    payload = blob[_CKPT_HEADER.size :]
    if len(payload) != 8 * count:
        raise PitaError(f"{path}: expected {8 * count} payload bytes, found {len(payload)}")
    return OperatorParams(hyper, np.frombuffer(payload, dtype="<f8").astype(np.float64))


# ---------------------------------------------------------------- optimization


class Adam:
    """Adam with L2 weight decay folded into the gradient.

    Defaults follow the FNO column of the training table: ``lr=1e-3``,
    ``betas=(0.9, 0.9)``, ``weight_decay=1e-6``.
    """

    def __init__(self, size, betas=(0.9, 0.9), eps=1e-8, weight_decay=1e-6):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def update(self, x, grad, lr):
        if self.weight_decay:
            grad = grad + self.weight_decay * x
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return x - lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_by_norm(grad, max_norm):
    if not max_norm:
        return grad
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


def cosine_lr(step_index, total_steps, base_lr, warmup_steps=0):
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if warmup_steps and step_index < warmup_steps:
        return base_lr * (step_index + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    frac = min((step_index - warmup_steps) / span, 1.0)
    return 0.5 * base_lr * (1 + math.cos(math.pi * frac))
