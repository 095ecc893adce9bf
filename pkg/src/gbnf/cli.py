"""Command line interface: train, grid, sample, eval, partition.

Config files are INI text with a fixed key list per section; unknown
sections or keys are rejected by name so a typo cannot silently fall back to
a default. Every output file carries the sha256 of the raw config bytes, so
any number or figure traces back to the run that produced it.

CSV datasets standardize to train-split mean/std by default (data.standardize).
The transform is recorded in every checkpoint the run writes, and grid, sample,
and eval apply it so their inputs and outputs stay in the original data units.

Exit codes are a stable contract: 0 success, 2 config or input error,
3 training abort (partial artifacts are kept), 4 model-state error (for
example sampling a multiplicative model, or a stale partition estimate).

Output layout of `gbnf train --config cfg.ini --out out`:

    out/<run id>/config.ini        verbatim copy of the config
    out/<run id>/stage_01.gbnf     checkpoint after each stage (+ .meta.json)
    out/<run id>/model.gbnf        final model
    out/<run id>/records.jsonl     one stage record per line
    out/<run id>/manifest.json     paths, resolved config, timings

Checkpoints are bit-deterministic per (config, seed); the manifest holds the
wall-clock timings so nothing time-dependent leaks into them.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import time
import warnings
from dataclasses import asdict

import numpy as np

from . import boosting as bc
from . import training as tr
from .errors import (
    CheckpointError,
    ConfigError,
    GBNFError,
    ModelStateError,
    StalePartitionError,
    TrainingAbort,
)
from .targets import ENERGY_NAMES, TOY_NAMES, EnergyTarget, TabularDataset, ToySampler, load_tabular

# section -> key -> parser
_BOOL_WORDS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _parse_bool(raw: str) -> bool:
    try:
        return _BOOL_WORDS[raw.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {raw!r}") from None


_CONFIG_SCHEMA = {
    "run": {"id": str, "mode": str},
    "data": {"toy": str, "csv": str, "n": int, "seed": int, "standardize": _parse_bool,
             "header": _parse_bool},
    "target": {"energy": str},
    "model": {"components": int, "flow_steps": int, "hidden": int, "kind": str, "combine": str},
    "train": {"lr": float, "schedule": str, "batch": int, "max_steps": int, "eval_every": int,
              "patience": int, "seed": int, "lam": float, "beta": float, "n_mc": int,
              "val_mc": int, "partition_samples": int},
    "rho": {"strategy": str, "grid_size": int, "step": float, "decay": float, "tol": float,
            "max_iters": int, "batch": int},
    "finetune": {"passes": int, "steps": int},
}

# config (section, key) -> TrainConfig field
_FIELD_MAP = {
    ("run", "mode"): "mode",
    ("model", "components"): "components",
    ("model", "flow_steps"): "flow_steps",
    ("model", "hidden"): "hidden",
    ("model", "kind"): "kind",
    ("model", "combine"): "combine",
    ("train", "lr"): "lr",
    ("train", "schedule"): "schedule",
    ("train", "batch"): "batch",
    ("train", "max_steps"): "max_steps",
    ("train", "eval_every"): "eval_every",
    ("train", "patience"): "patience",
    ("train", "seed"): "seed",
    ("train", "lam"): "lam",
    ("train", "beta"): "beta",
    ("train", "n_mc"): "n_mc",
    ("train", "val_mc"): "val_mc",
    ("train", "partition_samples"): "partition_samples",
    ("rho", "strategy"): "rho_strategy",
    ("rho", "grid_size"): "rho_grid_size",
    ("rho", "step"): "rho_step",
    ("rho", "decay"): "rho_decay",
    ("rho", "tol"): "rho_tol",
    ("rho", "max_iters"): "rho_max_iters",
    ("rho", "batch"): "rho_batch",
    ("finetune", "passes"): "finetune_passes",
    ("finetune", "steps"): "finetune_steps",
    ("target", "energy"): "target",
}


def parse_config(path):
    """Read an INI run config. Returns (raw values dict, sha256 hex digest).

    Strict by design: unknown sections or keys raise ConfigError naming the
    offender, as do values that fail to parse under the schema.
    """
    try:
        with open(path, "rb") as f:
            raw_bytes = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    sha = hashlib.sha256(raw_bytes).hexdigest()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(raw_bytes.decode("utf-8"))
    except (UnicodeDecodeError, configparser.Error) as e:
        raise ConfigError(f"config {path} does not parse: {e}") from e
    values = {}
    for section in parser.sections():
        if section not in _CONFIG_SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _CONFIG_SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            convert = _CONFIG_SCHEMA[section][key]
            try:
                values[(section, key)] = convert(raw)
            except ConfigError:
                raise
            except ValueError as e:
                raise ConfigError(f"bad value for {section}.{key}: {e}") from e
    if ("run", "id") not in values:
        raise ConfigError("config is missing run.id")
    if ("run", "mode") not in values:
        raise ConfigError("config is missing run.mode")
    run_id = values[("run", "id")]
    if not run_id or any(ch not in "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-" for ch in run_id):
        raise ConfigError(f"run.id must be a simple name, got {run_id!r}")
    return values, sha


def _dataset_from_config(values):
    """Build the training data or energy target named by the config."""
    mode = values[("run", "mode")]
    has_data = any(sec == "data" for sec, _ in values)
    has_target = ("target", "energy") in values
    if mode == tr.DENSITY_MATCHING:
        if not has_target:
            raise ConfigError("density matching needs target.energy")
        if has_data:
            raise ConfigError("density matching takes no [data] section")
        name = values[("target", "energy")]
        if name not in ENERGY_NAMES:
            raise ConfigError(f"unknown target.energy {name!r}; choose from {ENERGY_NAMES}")
        return EnergyTarget(name=name), 2
    if has_target:
        raise ConfigError("density estimation takes no [target] section")
    toy = values.get(("data", "toy"))
    csv = values.get(("data", "csv"))
    if (toy is None) == (csv is None):
        raise ConfigError("set exactly one of data.toy or data.csv")
    seed = values.get(("data", "seed"), 0)
    if csv is not None:
        ds = load_tabular(
            csv,
            seed=seed,
            header=values.get(("data", "header"), False),
            standardize=values.get(("data", "standardize"), True),
        )
        return ds, ds.dim
    if toy not in TOY_NAMES:
        raise ConfigError(f"unknown data.toy {toy!r}; choose from {TOY_NAMES}")
    n = values.get(("data", "n"), 20_000)
    if n < 100:
        raise ConfigError(f"data.n must be >= 100, got {n}")
    pts = ToySampler(name=toy).sample(n, np.random.default_rng(seed))
    n_tr, n_va = int(0.8 * n), int(0.9 * n)
    ds = TabularDataset(
        train=pts[:n_tr], val=pts[n_tr:n_va], test=pts[n_va:],
        mean=np.zeros(2), std=np.ones(2),
    )
    return ds, 2


def _standardize_meta(data):
    """Checkpoint metadata entry for a dataset's standardization, or None.

    Models train in the dataset's standardized coordinates. Recording the
    train-split mean/std in the checkpoint lets eval, sample, and grid keep
    working in the original data units; an identity transform is omitted.
    """
    mean = getattr(data, "mean", None)
    std = getattr(data, "std", None)
    if mean is None or std is None:
        return None
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if not np.any(mean != 0.0) and not np.any(std != 1.0):
        return None
    return {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}


def _standardize_from_meta(data, dim):
    """(mean, std) recorded in a checkpoint, or None when absent."""
    entry = data.meta.get("standardize")
    if entry is None:
        return None
    mean = np.asarray(entry.get("mean"), dtype=np.float64)
    std = np.asarray(entry.get("std"), dtype=np.float64)
    if mean.shape != (dim,) or std.shape != (dim,) or not np.all(std > 0):
        raise CheckpointError(
            f"checkpoint standardize metadata does not fit a {dim}-D model"
        )
    return mean, std


def build_train_config(values, dim) -> tr.TrainConfig:
    kwargs = {"dim": dim}
    for key, field in _FIELD_MAP.items():
        if key in values:
            kwargs[field] = values[key]
    return tr.TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    values, sha = parse_config(args.config)
    data, dim = _dataset_from_config(values)
    config = build_train_config(values, dim)
    extra_meta = {"config_sha256": sha}
    transform = _standardize_meta(data)
    if transform is not None:
        extra_meta["standardize"] = transform
    run_id = values[("run", "id")]
    run_dir = os.path.join(args.out, run_id)
    if os.path.exists(run_dir):
        raise ConfigError(f"run id {run_id!r} already exists at {run_dir}")
    os.makedirs(run_dir)

    with open(args.config, "rb") as src, open(os.path.join(run_dir, "config.ini"), "wb") as dst:
        dst.write(src.read())

    records_path = os.path.join(run_dir, "records.jsonl")
    stage_paths = []
    stage_seconds = []
    started = time.perf_counter()
    last_mark = started

    def on_stage_end(model, record):
        nonlocal last_mark
        now = time.perf_counter()
        stage_seconds.append(now - last_mark)
        last_mark = now
        ckpt = os.path.join(run_dir, f"stage_{record.stage:02d}.gbnf")
        tr.save_checkpoint(model, ckpt, config=config, extra_meta=extra_meta)
        stage_paths.append(os.path.basename(ckpt))
        with open(records_path, "a", encoding="utf-8") as f:
            f.write(record.to_json_line() + "\n")

    model, _records = tr.run_boosting(data, config, on_stage_end=on_stage_end)

    final_path = os.path.join(run_dir, "model.gbnf")
    tr.save_checkpoint(model, final_path, config=config, extra_meta=extra_meta)
    manifest = {
        "run_id": run_id,
        "mode": config.mode,
        "config_path": os.path.abspath(args.config),
        "config_copy": "config.ini",
        "config_sha256": sha,
        "config_resolved": asdict(config),
        "records": "records.jsonl",
        "stage_checkpoints": stage_paths,
        "final_checkpoint": "model.gbnf",
        "timings": {
            "total_seconds": time.perf_counter() - started,
            "stage_seconds": stage_seconds,
        },
    }
    for rel in [manifest["config_copy"], manifest["records"], manifest["final_checkpoint"], *stage_paths]:
        if not os.path.exists(os.path.join(run_dir, rel)):
            raise GBNFError(f"manifest would reference a missing file: {rel}")
    with open(os.path.join(run_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"run {run_id}: {model.n_components} components -> {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# grid


def _parse_bbox(raw):
    parts = raw.split(",")
    if len(parts) != 4:
        raise ConfigError(f"--bbox wants x0,x1,y0,y1; got {raw!r}")
    try:
        x0, x1, y0, y1 = (float(p) for p in parts)
    except ValueError as e:
        raise ConfigError(f"--bbox wants numbers: {e}") from e
    if not (x0 < x1 and y0 < y1):
        raise ConfigError("--bbox needs x0 < x1 and y0 < y1")
    return x0, x1, y0, y1


def _load_model(path):
    data = tr.load_checkpoint(path)
    sha = data.meta.get("config_sha256", "unknown")
    return data, sha


def cmd_grid(args) -> int:
    if args.res < 2:
        raise ConfigError(f"--res must be >= 2, got {args.res}")
    data, sha = _load_model(args.checkpoint)
    model = data.model
    if model.dim != 2:
        raise ConfigError(f"grid rendering needs a 2-D model, got dim {model.dim}")
    x0, x1, y0, y1 = _parse_bbox(args.bbox)
    res = args.res
    xs = x0 + (np.arange(res) + 0.5) * (x1 - x0) / res
    ys = y0 + (np.arange(res) + 0.5) * (y1 - y0) / res
    # Image convention: first row is the top of the picture (largest y).
    rows_y = ys[::-1]
    gx, gy = np.meshgrid(xs, rows_y, indexing="xy")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    transform = _standardize_from_meta(data, model.dim)
    query = pts if transform is None else (pts - transform[0]) / transform[1]
    try:
        log_density = model.log_prob(query)
    except StalePartitionError as e:
        raise StalePartitionError(
            f"{e}; run `gbnf partition --checkpoint {args.checkpoint}` first"
        ) from e
    if transform is not None:
        # Change of variables back to data units: p(x) = q((x-m)/s) / prod(s).
        log_density = log_density - float(np.sum(np.log(transform[1])))

    prefix = args.out if args.out else args.checkpoint + ".grid"
    csv_path = prefix + ".csv"
    pgm_path = prefix + ".pgm"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(f"# config_sha256 {sha}\n")
        f.write("# columns: x,y,log_density\n")
        for (x, y), ld in zip(pts, log_density):
            f.write(f"{x:.17g},{y:.17g},{ld:.17g}\n")

    # Min-max normalize the linear density; shifting by the max log first
    # leaves the ratio unchanged and cannot overflow.
    dens = np.exp(log_density - np.max(log_density)).reshape(res, res)
    lo, hi = float(dens.min()), float(dens.max())
    scaled = np.zeros_like(dens) if hi == lo else (dens - lo) / (hi - lo)
    pixels = np.rint(255.0 * scaled).astype(np.uint8)
    with open(pgm_path, "wb") as f:
        f.write(b"P5\n")
        f.write(f"# config_sha256 {sha}\n".encode("ascii"))
        f.write(f"{res} {res}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    print(f"grid {res}x{res} on [{x0},{x1}]x[{y0},{y1}] -> {csv_path}, {pgm_path}")
    return 0


# ---------------------------------------------------------------------------
# sample


def cmd_sample(args) -> int:
    if args.n < 0:
        raise ConfigError(f"--n must be >= 0, got {args.n}")
    data, sha = _load_model(args.checkpoint)
    model = data.model
    if model.mode != bc.ADDITIVE:
        raise ModelStateError("sampling is defined for additive mixtures only")
    out = args.out if args.out else args.checkpoint + ".samples.csv"
    if args.n == 0:
        points = np.zeros((0, model.dim))
        ids = np.zeros(0, dtype=int)
    else:
        points, ids = bc.sample_mixture(model, args.n, np.random.default_rng(args.seed))
    transform = _standardize_from_meta(data, model.dim)
    if transform is not None:
        points = points * transform[1] + transform[0]
    cols = ",".join([f"x{i}" for i in range(points.shape[1])] + ["component"])
    with open(out, "w", encoding="utf-8") as f:
        f.write(f"# config_sha256 {sha}\n")
        f.write(f"# columns: {cols}\n")
        for row, cid in zip(points, ids):
            f.write(",".join(f"{v:.17g}" for v in row) + f",{int(cid)}\n")
    print(f"{args.n} samples (seed {args.seed}) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    data, sha = _load_model(args.checkpoint)
    model = data.model
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # empty input is handled below
            rows = np.loadtxt(args.data, delimiter=",", comments="#", ndmin=2)
    except OSError as e:
        raise ConfigError(f"cannot read {args.data}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"{args.data} is not a numeric CSV: {e}") from e
    if rows.size == 0:
        raise ConfigError(f"{args.data} has no data rows")
    if rows.shape[1] != model.dim:
        raise ConfigError(f"data has {rows.shape[1]} columns, model wants {model.dim}")
    transform = _standardize_from_meta(data, model.dim)
    scored = rows if transform is None else (rows - transform[0]) / transform[1]
    lp = np.asarray(model.log_prob(scored), dtype=np.float64)
    if transform is not None:
        lp = lp - float(np.sum(np.log(transform[1])))
    qs = np.quantile(lp, [0.05, 0.25, 0.5, 0.75, 0.95])
    metrics = {
        "config_sha256": sha,
        "checkpoint": os.path.basename(args.checkpoint),
        "n": int(rows.shape[0]),
        "mean_log_likelihood": float(np.mean(lp)),
        "quantiles": {
            "q05": float(qs[0]),
            "q25": float(qs[1]),
            "q50": float(qs[2]),
            "q75": float(qs[3]),
            "q95": float(qs[4]),
        },
    }
    out = args.out if args.out else args.checkpoint + ".metrics.json"
    with open(out, "w", encoding="utf-8") as f:
        json.dump(metrics, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"mean log-likelihood {metrics['mean_log_likelihood']:.4f} nats over n={metrics['n']} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# partition


def cmd_partition(args) -> int:
    data, sha = _load_model(args.checkpoint)
    model = data.model
    if model.mode != bc.MULTIPLICATIVE:
        raise ModelStateError("partition estimation applies to multiplicative models only")
    log_z, stderr = bc.estimate_log_partition(
        model, args.samples, np.random.default_rng(args.seed)
    )
    model = bc.with_partition(model, log_z, stderr)
    config = None
    if data.meta.get("config"):
        config = tr.TrainConfig(**data.meta["config"])
    extra = {"config_sha256": sha} if sha != "unknown" else {}
    if data.meta.get("standardize") is not None:
        extra["standardize"] = data.meta["standardize"]
    tr.save_checkpoint(model, args.checkpoint, config=config, extra_meta=extra or None)
    print(f"log partition {log_z:.6f} +/- {stderr:.6f} ({args.samples} samples, seed {args.seed})")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gbnf",
        description="Boosted coupling-flow mixtures: train, render, sample, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run stagewise boosting from a config file")
    p_train.add_argument("--config", required=True, help="INI run config")
    p_train.add_argument("--out", default="out", help="parent directory for run outputs")
    p_train.set_defaults(func=cmd_train)

    p_grid = sub.add_parser("grid", help="evaluate the density on a grid (CSV + PGM)")
    p_grid.add_argument("--checkpoint", required=True)
    p_grid.add_argument("--bbox", default="-4,4,-4,4", help="x0,x1,y0,y1")
    p_grid.add_argument("--res", type=int, default=200, help="grid resolution per axis")
    p_grid.add_argument("--out", default=None, help="output path prefix")
    p_grid.set_defaults(func=cmd_grid)

    p_sample = sub.add_parser("sample", help="draw samples from an additive model")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--n", type=int, default=10_000)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out", default=None, help="output CSV path")
    p_sample.set_defaults(func=cmd_sample)

    p_eval = sub.add_parser("eval", help="log-likelihood metrics on a CSV dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="numeric CSV, one point per row")
    p_eval.add_argument("--out", default=None, help="metrics JSON path")
    p_eval.set_defaults(func=cmd_eval)

    p_part = sub.add_parser("partition", help="re-estimate a multiplicative model's normalizer")
    p_part.add_argument("--checkpoint", required=True)
    p_part.add_argument("--samples", type=int, default=100_000)
    p_part.add_argument("--seed", type=int, default=0)
    p_part.set_defaults(func=cmd_partition)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingAbort as e:
        print(f"error: training aborted: {e}", file=sys.stderr)
        return 3
    except ModelStateError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except GBNFError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
