"""Alternating training of the neural operator with sparse-regression physics losses.

Each alternation samples a batch of windows, then

1. refreshes the per-window coefficients by running STRidge on the
   *predicted* window (last ``T_C`` frames of ground-truth inputs followed by
   the predictions, at freshly drawn downsampled points), and
2. takes ``ado_period`` optimizer steps on that batch with the coefficients
   frozen.

Reference coefficients for the consistency term are discovered once per
trajectory from its first ``T_in`` ground-truth frames at full resolution and
cached.  The plain auto-regressive baseline (:func:`train_autoregressive`)
shares the window sampler, the optimizer and the batch schedule, so with the
physics and consistency weights set to zero both loops produce identical logs.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, TrainingError
from .grid import Rng, Trajectory, slice_window
from .library import build_system, render_equation
from .losses import (
    LOG_DELTA_SQ_FLOOR,
    LossBreakdown,
    Manual,
    PitaConfig,
    Uncertainty,
    consistency_loss,
    data_loss_on_tape,
    delta_from_log_sq,
    downsampled_view,
    l0_penalty,
    physics_terms,
    residual_on_tape,
    uncertainty_total_on_tape,
)
from .operator import Adam, bind, clip_by_norm, cosine_lr, predict, rollout_on_tape
from .stridge import coefficients_objective, stridge_all

LOG_COLUMNS = ("step", "epoch", "data", "phys", "con", "delta1", "delta2", "delta3", "total")


@dataclass(frozen=True)
class TrainConfig:
    t_in: int = 10
    t_ar: int = 1
    batch_size: int = 20
    lr: float = 1e-3
    delta_lr: float = 1e-2
    weight_decay: float = 1e-6
    betas: tuple = (0.9, 0.9)
    grad_clip: float = 1.0
    warmup_frac: float = 0.1

    def __post_init__(self):
        if self.t_in < 1 or self.t_ar < 1 or self.batch_size < 1:
            raise ValueError("t_in, t_ar and batch_size must be >= 1")
        if self.lr < 0 or self.delta_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must be in [0, 1)")


@dataclass
class TrainingLog:
    weighting: object
    rows: list = field(default_factory=list)  # LossBreakdown per step
    epochs: list = field(default_factory=list)
    equations: list = field(default_factory=list)  # (step, window, trajectory, [equation per channel])
    refresh: list = field(default_factory=list)  # (step, objective_new, objective_previous) per window

    def append(self, epoch, breakdown):
        breakdown.check()
        self.rows.append(breakdown)
        self.epochs.append(epoch)

    def to_text(self):
        """Tab-separated table, header first; floats in shortest round-trip form."""
        out = io.StringIO()
        out.write("\t".join(LOG_COLUMNS) + "\n")
        for i, (ep, b) in enumerate(zip(self.epochs, self.rows)):
            vals = [b.data, b.phys, b.con, *b.delta, b.total]
            out.write("\t".join([str(i), str(ep)] + [repr(float(v)) for v in vals]) + "\n")
        return out.getvalue()

    def equations_text(self):
        out = io.StringIO()
        for step, w, traj, eqs in self.equations:
            for eq in eqs:
                out.write(f"{step}\t{w}\t{traj}\t{eq}\n")
        return out.getvalue()

    def epoch_means(self, column="data"):
        ep = np.asarray(self.epochs)
        vals = np.asarray([getattr(b, column) for b in self.rows])
        return np.array([vals[ep == e].mean() for e in np.unique(ep)])


def read_log_text(text):
    lines = text.strip().splitlines()
    header = lines[0].split("\t")
    if tuple(header) != LOG_COLUMNS:
        raise ValueError(f"unexpected log header {header}")
    return [dict(zip(header, map(float, ln.split("\t")))) for ln in lines[1:]]


class WindowSampler:
    """Uniform sampling over all (trajectory, start) pairs with ``T_in + T_ar`` frames."""

    def __init__(self, dataset, t_in, t_ar, rng):
        self.span = t_in + t_ar
        self.counts = []
        for k, traj in enumerate(dataset):
            if traj.nt < self.span:
                raise ShapeError(f"trajectory {k} has {traj.nt} frames, needs T_in + T_ar = {self.span}")
            self.counts.append(traj.nt - self.span + 1)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)])
        self.rng = rng

    @property
    def n_windows(self):
        return int(self.offsets[-1])

    def sample(self, size):
        flat = self.rng.integers(0, self.n_windows, size=size)
        traj = np.searchsorted(self.offsets, flat, side="right") - 1
        return [(int(k), int(f - self.offsets[k])) for k, f in zip(traj, flat)]


def _check_dataset(dataset, params):
    if not dataset:
        raise ValueError("dataset is empty")
    grid = dataset[0].grid
    for k, traj in enumerate(dataset):
        if traj.grid != grid:
            raise ShapeError(f"trajectory {k} uses a different grid")
        if traj.channels != params.hyper.channels:
            raise ShapeError(f"trajectory {k} has {traj.channels} channels, operator expects {params.hyper.channels}")
    if grid.ndim != params.hyper.ndim:
        raise ShapeError(f"operator is {params.hyper.ndim}D but data is {grid.ndim}D")
    return grid


def _stack_batch(dataset, batch, t_in, t_ar):
    inputs = np.stack([dataset[k].data[s : s + t_in] for k, s in batch])
    truth = np.stack([dataset[k].data[s + t_in : s + t_in + t_ar] for k, s in batch])
    return inputs, truth


def _schedule(sampler, train, epochs, period):
    steps_per_epoch = math.ceil(sampler.n_windows / train.batch_size)
    total = epochs * steps_per_epoch
    warmup = int(train.warmup_frac * total)
    return steps_per_epoch, total, warmup


def _rollout_numeric(params, grid, inputs, t_ar, t_in):
    frames = list(np.moveaxis(inputs, 1, 0))
    preds = []
    for _ in range(t_ar):
        window = np.stack(frames[-t_in:], axis=1)
        nxt = predict(params, grid, window)
        preds.append(nxt)
        frames.append(nxt)
    return np.stack(preds, axis=1)


def lambda_star(traj, cfg, t_in):
    """Reference coefficients from the first ``T_in`` ground-truth frames, full resolution."""
    system = build_system(slice_window(traj, 0, t_in), cfg.library)
    return stridge_all(*system, cfg.stridge)


def refresh_coefficients(params, grid, dataset, batch, cfg, train, rng, previous=None):
    """STRidge on each predicted window of ``batch``.

    Returns ``(lambdas, points, records)``.  When ``previous`` coefficients are
    given and score better on a refreshed window's objective they are kept for
    that channel, so the refresh never increases the objective.
    """
    inputs, _ = _stack_batch(dataset, batch, train.t_in, train.t_ar)
    preds = _rollout_numeric(params, grid, inputs, train.t_ar, train.t_in)
    full = np.concatenate([inputs, preds], axis=1)
    n = grid.n
    w = cfg.down.retained(n)
    lambdas, points, records = [], [], []
    for b in range(len(batch)):
        window = Trajectory(grid, full[b])
        pts = np.arange(n) if w == n else np.sort(rng.choice(n, size=w, replace=False))
        lib, ut = build_system(downsampled_view(window, cfg, pts), cfg.library)
        fresh = stridge_all(lib, ut, cfg.stridge)
        obj_new = coefficients_objective(lib, ut, fresh, cfg.l0_weight)
        lam = fresh.lambda_.copy()
        if previous is not None:
            prev = previous[b]
            obj_prev = coefficients_objective(lib, ut, prev, cfg.l0_weight)
            worse = obj_prev < obj_new
            lam[:, worse] = prev[:, worse]
            obj_new = np.where(worse, obj_prev, obj_new)
        else:
            obj_prev = np.full_like(obj_new, np.inf)
        lambdas.append(lam)
        points.append(pts)
        records.append((float(obj_new.sum()), float(obj_prev.sum())))
    return lambdas, points, records


def batch_objective(params, s, inputs, truth, lambdas, stars, points, cfg, train, grid, terms):
    """Tape, leaves and scalar parts of the training objective for one batch.

    Returns ``(tape, theta_leaves, s_leaves, total, (data, phys, con))``; ``phys``
    includes the constant l0 offset.
    """
    tape = ad.Tape()
    pv = bind(tape, params)
    s_leaves = [tape.leaf(np.asarray(v, dtype=float)) for v in s] if s is not None else []
    preds = rollout_on_tape(pv, params.hyper, grid, inputs, train.t_ar)
    data = data_loss_on_tape(preds, truth, cfg.zero_norm_eps)
    weighting = cfg.weighting
    phys_var, phys_offset, con = None, 0.0, 0.0
    if cfg.uses_physics():
        keep = cfg.down.temporal_keep
        if keep > train.t_in + train.t_ar:
            raise ShapeError(f"temporal_keep={keep} exceeds T_in + T_ar = {train.t_in + train.t_ar}")
        frames = [tape.constant(inputs[:, t]) for t in range(inputs.shape[1])] + preds
        frames = frames[len(frames) - keep :]
        stacked = ad.stack(frames, axis=1)  # (B, T_C, C, nx, ny)
        per_window = []
        for b in range(inputs.shape[0]):
            res = residual_on_tape(stacked[b], grid, lambdas[b], terms, points[b], cfg.library, cfg.detach_library)
            per_window.append(res)
            phys_offset += l0_penalty(lambdas[b], cfg.l0_weight)
        acc = per_window[0]
        for r in per_window[1:]:
            acc = acc + r
        nb = inputs.shape[0]
        phys_var = acc * (1.0 / nb) + phys_offset / nb
    if cfg.uses_consistency():
        con = sum(consistency_loss(star, lam) for star, lam in zip(stars, lambdas)) / len(lambdas)
    if isinstance(weighting, Uncertainty):
        total = uncertainty_total_on_tape(data, phys_var, con, s_leaves)
    else:
        total = data
        if weighting.alpha_phys:
            total = total + phys_var * weighting.alpha_phys
        if weighting.alpha_con:
            total = total + con * weighting.alpha_con
    phys = float(phys_var.value) if phys_var is not None else 0.0
    return tape, list(pv.values()), s_leaves, total, (float(data.value), phys, float(con))


def _run(params, dataset, cfg, train, epochs, rng, discover):
    rng = rng if isinstance(rng, Rng) else Rng(rng)
    grid = _check_dataset(dataset, params)
    if params.hyper.t_in != train.t_in:
        raise ShapeError(f"operator T_in={params.hyper.t_in} but training T_in={train.t_in}")
    sampler = WindowSampler(dataset, train.t_in, train.t_ar, rng.child(0))
    down_rng = rng.child(1)
    steps_per_epoch, total_steps, warmup = _schedule(sampler, train, epochs, cfg.ado_period)
    weighting = cfg.weighting
    uncertain = isinstance(weighting, Uncertainty)
    log = TrainingLog(weighting)
    theta = params.vector.copy()
    opt = Adam(theta.size, train.betas, weight_decay=train.weight_decay)
    s = np.zeros(3) if uncertain else None
    s_opt = Adam(3, train.betas, weight_decay=0.0) if uncertain else None
    terms = physics_terms(params.hyper.channels, grid, cfg) if discover else None
    stars_cache = {}
    previous = None
    step = 0
    alternation = 0
    while step < total_steps:
        epoch = step // steps_per_epoch
        try:
            batch = sampler.sample(train.batch_size)
            inputs, truth = _stack_batch(dataset, batch, train.t_in, train.t_ar)
            lambdas = points = stars = None
            if discover:
                current = params.with_vector(theta)
                lambdas, points, records = refresh_coefficients(
                    current, grid, dataset, batch, cfg, train, down_rng, previous
                )
                previous = lambdas
                for k, _ in batch:
                    if k not in stars_cache:
                        stars_cache[k] = lambda_star(dataset[k], cfg, train.t_in).lambda_
                stars = [stars_cache[k] for k, _ in batch]
                log.refresh.extend((step, new, old) for new, old in records)
                eqs = [render_equation(lambdas[0], terms, c) for c in range(params.hyper.channels)]
                log.equations.append((step, alternation, batch[0][0], eqs))
            for _ in range(cfg.ado_period):
                if step >= total_steps:
                    break
                epoch = step // steps_per_epoch
                current = params.with_vector(theta)
                tape, leaves, s_leaves, total, parts = batch_objective(
                    current, s, inputs, truth, lambdas, stars, points, cfg, train, grid, terms
                )
                grads = tape.backward(total)
                delta = delta_from_log_sq(s) if uncertain else (1.0, 1.0, 1.0)
                log.append(epoch, LossBreakdown(*parts, delta, float(total.value), weighting))
                lr = cosine_lr(step, total_steps, train.lr, warmup)
                g = clip_by_norm(grads.flat(leaves), train.grad_clip)
                theta = opt.update(theta, g, lr)
                if uncertain:
                    gs = grads.flat(s_leaves)
                    s = np.maximum(s_opt.update(s, gs, cosine_lr(step, total_steps, train.delta_lr, warmup)),
                                   LOG_DELTA_SQ_FLOOR)
                if not np.all(np.isfinite(theta)):
                    raise FloatingPointError("parameters became non-finite")
                step += 1
        except TrainingError:
            raise
        except Exception as exc:
            raise TrainingError(epoch, alternation, exc) from exc
        alternation += 1
    return params.with_vector(theta), log


def ado_train(model, dataset, cfg=PitaConfig(), epochs=1, rng=0, train=TrainConfig()):
    """Alternate coefficient refreshes and ``cfg.ado_period`` gradient steps.

    With a :class:`Manual` weighting whose weights are both zero no coefficients
    are discovered and the run coincides with :func:`train_autoregressive`.
    """
    discover = cfg.uses_physics() or cfg.uses_consistency()
    return _run(model, dataset, cfg, train, epochs, rng, discover)


def train_autoregressive(model, dataset, epochs=1, rng=0, train=TrainConfig(), ado_period=50):
    """Plain data-loss training with the same sampler and batch schedule as :func:`ado_train`."""
    rng = rng if isinstance(rng, Rng) else Rng(rng)
    grid = _check_dataset(dataset, model)
    if model.hyper.t_in != train.t_in:
        raise ShapeError(f"operator T_in={model.hyper.t_in} but training T_in={train.t_in}")
    sampler = WindowSampler(dataset, train.t_in, train.t_ar, rng.child(0))
    steps_per_epoch, total_steps, warmup = _schedule(sampler, train, epochs, ado_period)
    weighting = Manual(0.0, 0.0)
    log = TrainingLog(weighting)
    theta = model.vector.copy()
    opt = Adam(theta.size, train.betas, weight_decay=train.weight_decay)
    step = 0
    batch_index = 0
    while step < total_steps:
        epoch = step // steps_per_epoch
        try:
            batch = sampler.sample(train.batch_size)
            inputs, truth = _stack_batch(dataset, batch, train.t_in, train.t_ar)
            for _ in range(ado_period):
                if step >= total_steps:
                    break
                epoch = step // steps_per_epoch
                tape = ad.Tape()
                pv = bind(tape, model.with_vector(theta))
                preds = rollout_on_tape(pv, model.hyper, grid, inputs, train.t_ar)
                loss = data_loss_on_tape(preds, truth)
                grads = tape.backward(loss)
                value = float(loss.value)
                log.append(epoch, LossBreakdown(value, 0.0, 0.0, (1.0, 1.0, 1.0), value, weighting))
                g = clip_by_norm(grads.flat(list(pv.values())), train.grad_clip)
                theta = opt.update(theta, g, cosine_lr(step, total_steps, train.lr, warmup))
                if not np.all(np.isfinite(theta)):
                    raise FloatingPointError("parameters became non-finite")
                step += 1
        except TrainingError:
            raise
        except Exception as exc:
            raise TrainingError(epoch, batch_index, exc) from exc
        batch_index += 1
    return model.with_vector(theta), log
