"""Command line entry point: ``pita {generate,discover,train,evaluate,diagnose}``.

Configuration is a JSON document with the sections ``pde``, ``discovery``,
``model``, ``training`` and ``eval`` (see :data:`DEFAULTS` for every key).
Unknown keys are rejected.  Each command prints the fully resolved config and
stores it as ``resolved_config.json`` in the output directory; running again
with that file reproduces the outputs exactly.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.

Evaluation tables (``<trajectory>.csv``) have the columns
``step, nrmse, rolling_mse, ssim_temporal, ssim_frame`` with 1-based steps.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .derivs import Method, StencilConfig
from .errors import (
    BadMagic,
    EmptyLibrary,
    InsufficientFrames,
    NonFinite,
    PitaError,
    SampleError,
    ShapeError,
    TrainingError,
    TrajectoryFormatError,
    TrajectoryIOError,
    UnstableTimestep,
    ZeroNormFrame,
)
from .grid import Grid, Rng, Trajectory, read_trajectory, write_trajectory
from .library import (
    DownsampleSpec,
    LibraryConfig,
    ablation_mask,
    build_system,
    downsample,
    generate_terms,
    render_equation,
    resolve_axes,
)
from .losses import Manual, PitaConfig, Uncertainty
from .stridge import StridgeConfig, stridge_all

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "PITA_NUM_THREADS"

DEFAULTS = {
    "pde": {
        "family": "burgers1d",
        "params": {},
        "grid": {"nx": 256, "ny": 1, "length_x": 2 * math.pi, "length_y": 1.0, "dt": 0.01},
        "substeps": 4,
        "nt": 60,
        "samples": 16,
        "seed": 0,
        "noise": 0.0,
        "init": {"modes": 5, "amplitude": 0.5, "max_wavenumber": 3},
    },
    "discovery": {
        "max_poly": 2,
        "max_deriv": 2,
        "stencil": "central",
        "poly_width": 5,
        "poly_degree": 4,
        "threshold": 0.05,
        "max_iter": 10,
        "ridge": 1e-5,
        "l0_weight": 1e-5,
        "normalize": True,
        "spatial_factor": 4,
        "temporal_keep": 3,
        "mask": "complete",
        "seed": 0,
    },
    "model": {"width": 32, "layers": 4, "modes": 12, "seed": 0},
    "training": {
        "epochs": 20,
        "lr": 1e-3,
        "delta_lr": 1e-2,
        "batch_size": 20,
        "t_in": 10,
        "t_ar": 1,
        "weighting": "uncertainty",
        "alpha_phys": 0.5,
        "alpha_con": 0.5,
        "ado_period": 1,
        "weight_decay": 1e-6,
        "grad_clip": 1.0,
        "warmup_frac": 0.1,
        "detach_library": False,
        "seed": 0,
    },
    "eval": {"horizons": [10, 40], "rolling_window": 5},
}

# keys whose values are free-form mappings
_OPEN_SECTIONS = {("pde", "params")}


class ConfigError(PitaError):
    pass


class UsageError(PitaError):
    pass


def _merge(defaults, given, path=()):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {'.'.join(path + (key,))!r}")
        if isinstance(defaults[key], dict) and path + (key,) not in _OPEN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{'.'.join(path + (key,))} must be a mapping")
            out[key] = _merge(defaults[key], value, path + (key,))
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(given=None):
    """Defaults overlaid with ``given``; unknown keys raise :class:`ConfigError`."""
    return _merge(DEFAULTS, given or {})


def load_config(path):
    if path is None:
        return resolve_config({})
    try:
        with open(path) as f:
            given = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(given, dict):
        raise ConfigError("config must be a JSON object")
    return resolve_config(given)


# ---------------------------------------------------------------- config -> objects


def make_grid(pde):
    g = pde["grid"]
    from .solvers import Family

    if Family(pde["family"]) is Family.DIFFUSION_REACTION_2D:
        return Grid.periodic_2d(g["nx"], g["ny"], g["length_x"], g["length_y"], g["dt"])
    return Grid.periodic_1d(g["nx"], g["length_x"], g["dt"])


def make_spec(pde):
    from .solvers import PdeSpec, RandomFourier

    init = RandomFourier(**pde["init"])
    return PdeSpec(pde["family"], dict(pde["params"]), init, pde["substeps"])


def library_config(disc):
    stencil_cfg = StencilConfig(Method(disc["stencil"]), 2, disc["poly_width"], disc["poly_degree"])
    return LibraryConfig(disc["max_poly"], disc["max_deriv"], stencil_cfg)


def stridge_config(disc):
    return StridgeConfig(disc["threshold"], disc["max_iter"], disc["ridge"], disc["l0_weight"], disc["normalize"])


def downsample_spec(disc):
    return DownsampleSpec(disc["spatial_factor"], disc["temporal_keep"], disc["seed"])


def pita_config(cfg):
    disc, tr = cfg["discovery"], cfg["training"]
    if tr["weighting"] == "uncertainty":
        weighting = Uncertainty()
    elif tr["weighting"] == "manual":
        weighting = Manual(tr["alpha_phys"], tr["alpha_con"])
    else:
        raise ConfigError(f"training.weighting must be 'uncertainty' or 'manual', got {tr['weighting']!r}")
    return PitaConfig(
        stridge=stridge_config(disc),
        library=library_config(disc),
        down=downsample_spec(disc),
        weighting=weighting,
        ado_period=tr["ado_period"],
        detach_library=tr["detach_library"],
    )


def train_config(tr):
    from .training import TrainConfig

    return TrainConfig(
        t_in=tr["t_in"],
        t_ar=tr["t_ar"],
        batch_size=tr["batch_size"],
        lr=tr["lr"],
        delta_lr=tr["delta_lr"],
        weight_decay=tr["weight_decay"],
        grad_clip=tr["grad_clip"],
        warmup_frac=tr["warmup_frac"],
    )


# ---------------------------------------------------------------- helpers


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _prepare_out(out):
    if out is None:
        raise UsageError("an output directory (--out) is required")
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TrajectoryIOError(str(path), exc) from exc
    return path


def _echo_config(cfg, out, stream):
    text = json.dumps(cfg, indent=2, sort_keys=True)
    (out / "resolved_config.json").write_text(text + "\n")
    stream.write(text + "\n")


def _write_manifest(out, command, cfg, files, extra=None):
    entries = [{"path": os.path.relpath(f, out), "sha256": sha256_file(f), **meta} for f, meta in files]
    doc = {"command": command, "config": cfg, "files": entries}
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _input_files(inputs):
    files = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files.extend(sorted(p.glob("*.pita")))
        else:
            files.append(p)
    if not files:
        raise UsageError("no input trajectories given")
    return files


def default_workers():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return 1
    try:
        n = int(value)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}") from exc
    return max(n, 1)


def add_noise(traj, scale, rng):
    if scale == 0:
        return traj
    return traj.with_data(traj.data + rng.normal(0.0, scale, size=traj.data.shape))


# ---------------------------------------------------------------- commands


def cmd_generate(cfg, out, workers=None, stream=sys.stdout):
    """Write one ``.pita`` file per sample plus ``manifest.json``."""
    from .solvers import batch_generate

    pde = cfg["pde"]
    grid = make_grid(pde)
    spec = make_spec(pde)
    out = _prepare_out(out)
    _echo_config(cfg, out, stream)
    trajs = batch_generate(spec, grid, pde["nt"], pde["samples"], pde["seed"], workers or default_workers())
    root = Rng(pde["seed"])
    files = []
    for i, traj in enumerate(trajs):
        traj = add_noise(traj, pde["noise"], root.child(i).child(0))
        path = out / f"sample_{i:05d}.pita"
        write_trajectory(traj, path)
        files.append((path, {"sample": i, "seed": root.child(i).seed}))
    _write_manifest(out, "generate", cfg, files, {"params": spec.params, "family": spec.family.value})
    return files


def library_flags(terms):
    """Warnings about physically important term classes missing from the library."""
    flags = []
    if not any(t.deriv_order == 1 and sum(t.poly_power) >= 1 for t in terms):
        flags.append("missing convective terms (field times first derivative)")
    if not any(t.deriv_order == 2 for t in terms):
        flags.append("missing diffusion terms (second derivatives)")
    return flags


def discover_trajectory(traj, disc, rng):
    lib_cfg = library_config(disc)
    down = downsample_spec(disc)
    terms = generate_terms(traj.channels, resolve_axes(traj.grid, lib_cfg), lib_cfg)
    mask = ablation_mask(terms, disc["mask"])
    view, _ = downsample(traj, down, rng)
    lib, ut = build_system(view, lib_cfg, mask)
    coeffs = stridge_all(lib, ut, stridge_config(disc))
    return lib, ut, coeffs


def cmd_discover(cfg, inputs, out, stream=sys.stdout):
    """Per-trajectory equations plus aggregate coefficient statistics in ``discovery.json``."""
    disc = cfg["discovery"]
    out = _prepare_out(out)
    _echo_config(cfg, out, stream)
    files = _input_files(inputs)
    root = Rng(disc["seed"])
    per_file, coeff_table = [], {}
    terms = None
    for i, path in enumerate(files):
        traj = read_trajectory(path)
        try:
            lib, ut, coeffs = discover_trajectory(traj, disc, root.child(i))
        except EmptyLibrary as exc:
            raise EmptyLibrary(f"{path}: {exc}") from exc
        terms = lib.terms
        channels = []
        for c in range(traj.channels):
            lam = coeffs.lambda_[:, c]
            support = [t.display for t, s in zip(lib.terms, coeffs.support[:, c]) if s]
            channels.append(
                {
                    "equation": render_equation(coeffs, lib.terms, c),
                    "coefficients": {t.display: float(v) for t, v in zip(lib.terms, lam) if v != 0},
                    "support": support,
                    "objective": float(coeffs.objective[c]),
                }
            )
            for t, v in zip(lib.terms, lam):
                coeff_table.setdefault((c, t.display), []).append(float(v))
        per_file.append({"file": str(path), "channels": channels})
        stream.write(f"{path.name}: " + "; ".join(ch["equation"] for ch in channels) + "\n")
    aggregate = {}
    n = len(files)
    for (c, name), values in sorted(coeff_table.items()):
        vals = np.asarray(values)
        aggregate.setdefault(str(c), {})[name] = {
            "selected_fraction": float(np.count_nonzero(vals) / n),
            "mean": float(vals.mean()),
            "std": float(vals.std()),
        }
    report = {
        "files": per_file,
        "aggregate": aggregate,
        "library": [t.display for t in terms],
        "flags": library_flags(terms),
    }
    report_path = out / "discovery.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "discover", cfg, [(report_path, {})], {"inputs": [str(f) for f in files]})
    return report


def _load_dataset(inputs):
    return [read_trajectory(p) for p in _input_files(inputs)]


def cmd_train(cfg, inputs, out, strategy="pita", stream=sys.stdout):
    """Train from scratch; writes ``checkpoint.pitp``, ``train_log.tsv`` and ``equations.tsv``."""
    from .operator import OperatorHyper, init_params, save_checkpoint
    from .training import ado_train, train_autoregressive

    if strategy not in ("pita", "autoregressive"):
        raise UsageError(f"unknown strategy {strategy!r}")
    tr, mdl = cfg["training"], cfg["model"]
    out = _prepare_out(out)
    _echo_config(cfg, out, stream)
    dataset = _load_dataset(inputs)
    grid = dataset[0].grid
    hyper = OperatorHyper(dataset[0].channels, tr["t_in"], mdl["width"], mdl["layers"], mdl["modes"], grid.ndim)
    params = init_params(hyper, Rng(mdl["seed"]))
    tcfg = train_config(tr)
    if strategy == "autoregressive":
        params, log = train_autoregressive(params, dataset, tr["epochs"], tr["seed"], tcfg, tr["ado_period"])
    else:
        params, log = ado_train(params, dataset, pita_config(cfg), tr["epochs"], tr["seed"], tcfg)
    ckpt = out / "checkpoint.pitp"
    save_checkpoint(params, ckpt)
    log_path = out / "train_log.tsv"
    log_path.write_text(log.to_text())
    eq_path = out / "equations.tsv"
    eq_path.write_text(log.equations_text())
    _write_manifest(out, "train", cfg, [(ckpt, {}), (log_path, {}), (eq_path, {})], {"strategy": strategy})
    means = log.epoch_means()
    stream.write(f"trained {strategy}: data loss {means[0]:.6g} -> {means[-1]:.6g}\n")
    return params, log


def _load_models(checkpoints, fixture):
    from .operator import copy_last_frame, load_checkpoint

    models = []
    for spec in checkpoints or []:
        label, _, path = spec.rpartition("=")
        try:
            models.append((label or Path(path).parent.name or Path(path).stem, load_checkpoint(path)))
        except OSError as exc:
            raise TrajectoryIOError(path, exc) from exc
    if fixture:
        models.append(("copy-last", copy_last_frame))
    if not models:
        raise UsageError("give at least one --checkpoint or --fixture copy-last")
    return models


def _model_t_in(model, cfg):
    hyper = getattr(model, "hyper", None)
    return hyper.t_in if hyper is not None else cfg["training"]["t_in"]


def cmd_evaluate(cfg, checkpoints, inputs, out, fixture=False, stream=sys.stdout):
    """Roll out each model on each trajectory; per-trajectory CSVs and ``summary.json``."""
    from .eval import evaluate

    ev = cfg["eval"]
    horizons = sorted(int(h) for h in ev["horizons"])
    if not horizons or horizons[0] < 2:
        raise ConfigError("eval.horizons must contain values >= 2")
    out = _prepare_out(out)
    _echo_config(cfg, out, stream)
    models = _load_models(checkpoints, fixture)
    files = _input_files(inputs)
    dataset = [read_trajectory(p) for p in files]
    horizon = horizons[-1]
    written, summary = [], {"horizons": horizons, "arms": {}}
    for label, model in models:
        t_in = _model_t_in(model, cfg)
        arm_dir = out / label
        arm_dir.mkdir(exist_ok=True)
        rows = []
        for path, traj in zip(files, dataset):
            rep = evaluate(model, traj, t_in, horizon, short=horizons[0], rolling_window=ev["rolling_window"],
                           label=label)
            csv_path = arm_dir / f"{path.stem}.csv"
            csv_path.write_text(rep.to_csv())
            written.append((csv_path, {"arm": label}))
            at = {str(h): float(np.mean(rep.step_nrmse[:h])) for h in horizons}
            rows.append({"file": str(path), "nrmse": at, "shortcut_crossover": rep.shortcut_crossover})
        agg = {str(h): float(np.mean([r["nrmse"][str(h)] for r in rows])) for h in horizons}
        summary["arms"][label] = {"trajectories": rows, "mean_nrmse": agg}
        stream.write(f"{label}: " + ", ".join(f"nRMSE@{h}={agg[str(h)]:.6g}" for h in horizons) + "\n")
    table = out / "comparison.csv"
    lines = ["arm," + ",".join(f"nrmse_{h}" for h in horizons)]
    for label, arm in summary["arms"].items():
        lines.append(label + "," + ",".join(repr(arm["mean_nrmse"][str(h)]) for h in horizons))
    table.write_text("\n".join(lines) + "\n")
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    written += [(table, {}), (summary_path, {})]
    _write_manifest(out, "evaluate", cfg, written)
    return summary


def cmd_diagnose(cfg, checkpoints, inputs, out, fixture=False, stream=sys.stdout):
    """Temporal-vs-frame SSIM series and shortcut crossover per model and trajectory."""
    from .eval import shortcut_diagnostic
    from .operator import RolloutConfig, rollout

    horizon = max(int(h) for h in cfg["eval"]["horizons"])
    out = _prepare_out(out)
    _echo_config(cfg, out, stream)
    models = _load_models(checkpoints, fixture)
    files = _input_files(inputs)
    result, written = {}, []
    for label, model in models:
        t_in = _model_t_in(model, cfg)
        entries = []
        for path in files:
            traj = read_trajectory(path)
            if traj.nt < t_in + horizon:
                raise ShapeError(f"{path}: {traj.nt} frames, needs {t_in + horizon}")
            init = Trajectory(traj.grid, traj.data[:t_in])
            pred = rollout(model, init, RolloutConfig(t_in, horizon))
            diag = shortcut_diagnostic(pred, traj.data[t_in : t_in + horizon])
            csv_path = out / f"{label}_{path.stem}_ssim.csv"
            lines = ["step,ssim_temporal,ssim_frame"]
            lines += [f"{i + 1},{diag.ssim_temporal[i]!r},{diag.ssim_frame[i]!r}" for i in range(horizon)]
            csv_path.write_text("\n".join(lines) + "\n")
            written.append((csv_path, {"arm": label}))
            entries.append({"file": str(path), "shortcut_crossover": diag.shortcut_crossover})
            stream.write(f"{label} {path.name}: crossover {diag.shortcut_crossover}\n")
        result[label] = entries
    summary_path = out / "diagnostic.json"
    summary_path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "diagnose", cfg, written + [(summary_path, {})])
    return result


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="pita", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_inputs=True):
        sp.add_argument("--config", help="JSON config; omitted keys take their defaults")
        sp.add_argument("--out", required=True, help="output directory")
        if needs_inputs:
            sp.add_argument("inputs", nargs="+", help=".pita files or directories containing them")

    g = sub.add_parser("generate", help="simulate trajectories")
    common(g, needs_inputs=False)
    g.add_argument("--workers", type=int, default=None, help=f"solver threads (default ${THREADS_ENV} or 1)")

    d = sub.add_parser("discover", help="sparse-regression equation discovery")
    common(d)

    t = sub.add_parser("train", help="train a neural operator")
    common(t)
    t.add_argument("--strategy", choices=("pita", "autoregressive"), default="pita")

    for name, text in (("evaluate", "rollout metrics"), ("diagnose", "shortcut diagnostic")):
        e = sub.add_parser(name, help=text)
        common(e)
        e.add_argument("--checkpoint", action="append", help="checkpoint path, optionally LABEL=PATH")
        e.add_argument("--fixture", choices=("copy-last",), help="evaluate a built-in diagnostic operator")
    return p


def _exit_code(exc):
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, TrainingError):
        return _exit_code(exc.cause) if isinstance(exc.cause, Exception) else EXIT_NUMERIC
    if isinstance(exc, SampleError):
        return _exit_code(exc.cause)
    if isinstance(exc, (NonFinite, UnstableTimestep, ZeroNormFrame, FloatingPointError, ArithmeticError)):
        return EXIT_NUMERIC
    if isinstance(
        exc,
        (TrajectoryFormatError, BadMagic, TrajectoryIOError, ShapeError, InsufficientFrames, EmptyLibrary, OSError),
    ):
        return EXIT_DATA
    if isinstance(exc, (ValueError, TypeError, KeyError)):
        return EXIT_USAGE
    if isinstance(exc, PitaError):
        return EXIT_DATA
    raise exc


def main(argv=None, stream=None):
    stream = stream or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        if args.command == "generate":
            cmd_generate(cfg, args.out, args.workers, stream)
        elif args.command == "discover":
            cmd_discover(cfg, args.inputs, args.out, stream)
        elif args.command == "train":
            cmd_train(cfg, args.inputs, args.out, args.strategy, stream)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint, args.inputs, args.out, bool(args.fixture), stream)
        else:
            cmd_diagnose(cfg, args.checkpoint, args.inputs, args.out, bool(args.fixture), stream)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        code = _exit_code(exc)
        sys.stderr.write(f"pita: error: {exc}\n")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
