"""Rollout metrics: nRMSE, rolling-step MSE, SSIM and the shortcut (copy-last-frame) diagnostic.

SSIM conventions: 11-tap Gaussian window with sigma 1.5 applied separably with
periodic wrap, ``C1 = (0.01 R)^2`` and ``C2 = (0.03 R)^2`` where ``R`` is the
dynamic range (max - min) over both fields, floored at ``1e-8``.  The SSIM map
is averaged over all positions and then over channels.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError
from .grid import Trajectory
from .losses import data_loss

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
RANGE_FLOOR = 1e-8
REPORT_COLUMNS = ("step", "nrmse", "rolling_mse", "ssim_temporal", "ssim_frame")


def _frames(x):
    return x.data if isinstance(x, Trajectory) else np.asarray(x, dtype=float)


def nrmse(pred, truth, eps=None):
    """Mean over steps of ``|u_i - u_hat_i|_2 / |u_i|_2``; same formula as the data loss."""
    return data_loss(pred, truth, eps)


def per_step_nrmse(pred, truth):
    p, t = _frames(pred), _frames(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ")
    n = p.shape[0]
    err = np.linalg.norm((p - t).reshape(n, -1), axis=1)
    ref = np.linalg.norm(t.reshape(n, -1), axis=1)
    return err / ref


def per_step_mse(pred, truth):
    p, t = _frames(pred), _frames(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ")
    return ((p - t) ** 2).reshape(p.shape[0], -1).mean(axis=1)


def rolling_mse(pred, truth, window=1):
    """Per-step MSE smoothed by a trailing mean over up to ``window`` steps.

    The first ``window - 1`` entries average over the steps available so far.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    mse = per_step_mse(pred, truth)
    return np.array([mse[max(0, i - window + 1) : i + 1].mean() for i in range(mse.size)])


def _gaussian_taps():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=float)
    w = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return w / w.sum()


def _blur(f, taps):
    out = f
    for axis in range(f.ndim):
        if f.shape[axis] > 1:
            out = correlate1d(out, taps, axis=axis, mode="wrap")
    return out


def _ssim_channel(a, b):
    r = max(float(max(a.max(), b.max()) - min(a.min(), b.min())), RANGE_FLOOR)
    c1, c2 = (SSIM_K1 * r) ** 2, (SSIM_K2 * r) ** 2
    taps = _gaussian_taps()
    mu_a, mu_b = _blur(a, taps), _blur(b, taps)
    saa = _blur(a * a, taps) - mu_a * mu_a
    sbb = _blur(b * b, taps) - mu_b * mu_b
    sab = _blur(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(a, b):
    """SSIM of two fields shaped ``(C, nx[, ny])`` (or a single-channel spatial array)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"ssim needs equal shapes, got {a.shape} and {b.shape}")
    if a.ndim == 1:
        a, b = a[None], b[None]
    return float(np.mean([_ssim_channel(a[c], b[c]) for c in range(a.shape[0])]))


@dataclass
class ShortcutDiagnostic:
    ssim_temporal: np.ndarray  # step 1 has no predecessor and is NaN
    ssim_frame: np.ndarray
    shortcut_crossover: int | None  # 1-based step, or None


def shortcut_diagnostic(pred, truth, last_input=None):
    """SSIM of each predicted frame against its predecessor and against the truth.

    Steps are 1-based.  Without ``last_input`` step 1 has no predecessor; the
    crossover is the first step whose temporal SSIM exceeds the frame SSIM.
    """
    p, t = _frames(pred), _frames(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ")
    if p.shape[0] < 2:
        raise ValueError("shortcut diagnostic needs a horizon of at least 2 steps")
    n = p.shape[0]
    temporal = np.full(n, np.nan)
    if last_input is not None:
        temporal[0] = ssim(p[0], np.asarray(last_input))
    for i in range(1, n):
        temporal[i] = ssim(p[i], p[i - 1])
    frame = np.array([ssim(p[i], t[i]) for i in range(n)])
    crossover = None
    for i in range(n):
        if not math.isnan(temporal[i]) and temporal[i] > frame[i]:
            crossover = i + 1
            break
    return ShortcutDiagnostic(temporal, frame, crossover)


@dataclass
class EvalReport:
    nrmse_short: float
    nrmse_full: float
    rolling_mse: np.ndarray
    ssim_temporal: np.ndarray
    ssim_frame: np.ndarray
    shortcut_crossover: int | None
    step_nrmse: np.ndarray = field(default=None)
    label: str = ""

    @property
    def horizon(self):
        return len(self.rolling_mse)

    def to_csv(self):
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for i in range(self.horizon):
            w.writerow(
                [
                    i + 1,
                    repr(float(self.step_nrmse[i])),
                    repr(float(self.rolling_mse[i])),
                    repr(float(self.ssim_temporal[i])),
                    repr(float(self.ssim_frame[i])),
                ]
            )
        return out.getvalue()

    def summary(self):
        return {
            "label": self.label,
            "horizon": self.horizon,
            "nrmse_short": self.nrmse_short,
            "nrmse_full": self.nrmse_full,
            "shortcut_crossover": self.shortcut_crossover,
        }

    def summary_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def evaluate(model, traj, t_in, horizon, short=10, rolling_window=5, label=""):
    """Roll ``model`` out from the first ``t_in`` frames of ``traj`` for ``horizon`` steps."""
    from .operator import RolloutConfig, rollout

    if traj.nt < t_in + horizon:
        raise ShapeError(f"trajectory has {traj.nt} frames, needs T_in + horizon = {t_in + horizon}")
    init = Trajectory(traj.grid, traj.data[:t_in])
    pred = rollout(model, init, RolloutConfig(t_in, horizon))
    truth = traj.data[t_in : t_in + horizon]
    diag = shortcut_diagnostic(pred, truth)
    k = min(short, horizon)
    return EvalReport(
        nrmse_short=nrmse(pred.data[:k], truth[:k]),
        nrmse_full=nrmse(pred, truth),
        rolling_mse=rolling_mse(pred, truth, rolling_window),
        ssim_temporal=diag.ssim_temporal,
        ssim_frame=diag.ssim_frame,
        shortcut_crossover=diag.shortcut_crossover,
        step_nrmse=per_step_nrmse(pred, truth),
        label=label,
    )
