"""Command-line entry point: dataset generation, training, evaluation,
sampling, prediction, ablations, and real-data ingestion.

Every command echoes its fully resolved configuration (flags merged with
config-file values and defaults) plus the seed, so any output file can be
regenerated from its own log.  Commands exit 0 only if every output was
written and validated; partially written outputs are removed on failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import nn
from . import processes as proc
from . import training
from .model import VARIANTS, ClpfModel, ModelConfig


def _echo_config(args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print("resolved config: " + json.dumps(resolved, sort_keys=True, default=str))


class _OutputGuard:
    """Removes the listed output paths if the command fails midway."""

    def __init__(self, *paths):
        self.paths = [p for p in paths if p]

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            for p in self.paths:
                if os.path.exists(p):
                    os.remove(p)
        return False


def _meta_path(checkpoint: str) -> str:
    return checkpoint + ".meta.json"


def save_model(model: ClpfModel, checkpoint: str) -> None:
    nn.save_checkpoint(model.store, checkpoint)
    with open(_meta_path(checkpoint), "w") as fh:
        fh.write(model.config.to_json() + "\n")


def load_model(checkpoint: str) -> ClpfModel:
    with open(_meta_path(checkpoint)) as fh:
        config = ModelConfig.from_json(fh.read())
    store = nn.load_checkpoint(checkpoint)
    return ClpfModel(config, store=store)


def _model_from_args(args, data_dim: int) -> ClpfModel:
    cfg = ModelConfig(
        data_dim=data_dim,
        latent_dim=args.latent_dim,
        variant=args.variant,
        flow_type=args.flow,
        em_h=args.em_h,
    )
    return ClpfModel(cfg, seed=args.seed)


def _split(series: list, val_fraction: float):
    n_val = max(1, int(round(len(series) * val_fraction)))
    if n_val >= len(series):
        raise SystemExit("dataset too small to hold out a validation split")
    return series[:-n_val], series[-n_val:]


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> None:
    _echo_config(args)
    with _OutputGuard(args.out):
        ds = proc.generate_dataset(
            args.process, args.n, getattr(args, "lambda"), args.horizon, args.seed
        )
        ds.save(args.out)
        proc.DatasetFile.load(args.out)  # validate what we wrote
    mean_len = float(np.mean([len(s) for s in ds.series]))
    print(
        f"wrote {args.out}: {len(ds)} sequences, "
        f"mean length {mean_len:.2f}, seed {args.seed}"
    )


def cmd_train(args) -> None:
    cfg = (
        training.parse_train_config(args.config)
        if args.config
        else training.TrainConfig()
    )
    if args.epochs is not None:
        cfg.epochs = args.epochs
    cfg.seed = args.seed
    for key, value in sorted(vars(cfg).items()):
        print(f"train config: {key} = {value}")
    _echo_config(args)

    ds = proc.DatasetFile.load(args.dataset)
    if args.val_dataset:
        train_series = ds.series
        val_series = proc.DatasetFile.load(args.val_dataset).series
    else:
        train_series, val_series = _split(ds.series, args.val_fraction)
    model = _model_from_args(args, ds.dim)
    print(f"model: {model.store.n_parameters()} parameters, "
          f"variant {args.variant}, seed {args.seed}")
    with _OutputGuard(args.checkpoint, _meta_path(args.checkpoint)):
        result = training.train(
            model, train_series, val_series, cfg,
            checkpoint_path=None, log=print,
        )
        save_model(model, args.checkpoint)
        load_model(args.checkpoint)  # validate
    print(
        f"best val nll/obs {result.best_val_nll:.4f}; "
        f"{result.n_updates} updates in {result.wall_clock_s:.1f}s; "
        f"clip rate {result.clip_rate:.2e}; wrote {args.checkpoint}"
    )


def cmd_evaluate(args) -> None:
    _echo_config(args)
    model = load_model(args.checkpoint)
    ds = proc.DatasetFile.load(args.dataset)
    nll, se = training.evaluate_nll(model, ds.series, args.K, seed=args.seed)
    print(f"nll/obs {nll:.6f} se {se:.6f} (K={args.K}, "
          f"{len(ds)} sequences, seed {args.seed})")


def cmd_sample(args) -> None:
    _echo_config(args)
    lam = getattr(args, "lambda")
    if (lam is None) == (args.dense_step is None):
        raise SystemExit("specify exactly one of --lambda or --dense-step")
    model = load_model(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    plot_out = args.plot_out or os.path.splitext(args.out)[0] + ".csv"
    with _OutputGuard(args.out, plot_out):
        series = []
        for _ in range(args.n):
            if lam is not None:
                grid = proc.sample_poisson_grid(lam, args.horizon, rng)
            else:
                times = np.arange(args.dense_step, args.horizon + args.dense_step / 2,
                                  args.dense_step)
                grid = proc.TimeGrid(times, args.horizon)
            series.append(model.sample_trajectory(grid, rng))
        metadata = {
            "process": "model_samples",
            "params": {"checkpoint": args.checkpoint,
                       "lambda": lam, "dense_step": args.dense_step},
            "lambda": lam if lam is not None else 0.0,
            "T": args.horizon,
            "seed": args.seed,
            "d": model.config.data_dim,
            "n_sequences": args.n,
        }
        proc.DatasetFile(metadata, series).save(args.out)
        proc.DatasetFile.load(args.out)  # validate
        first = series[0]
        with open(plot_out, "w") as fh:
            fh.write("t," + ",".join(f"x{j + 1}" for j in range(first.dim)) + "\n")
            for t, row in zip(first.grid.times, first.values):
                fh.write(",".join(f"{v:.12g}" for v in (t, *row)) + "\n")
    print(f"wrote {args.n} trajectories to {args.out}; plot data in {plot_out}")


def cmd_predict(args) -> None:
    _echo_config(args)
    model = load_model(args.checkpoint)
    ds = proc.DatasetFile.load(args.dataset)
    series = ds.series[: args.max_sequences] if args.max_sequences else ds.series
    rows = []
    for i, s in enumerate(series):
        if len(s) < 2:
            continue
        res = training.sequential_predict(model, s, args.S, seed=args.seed + i)
        rows.append((i, res["l2_mean"], res["l2_q25"], res["l2_q75"]))
    if not rows:
        raise SystemExit("no sequence has at least two observations")
    with _OutputGuard(args.out):
        if args.out:
            with open(args.out, "w") as fh:
                fh.write("sequence,l2_mean,l2_q25,l2_q75\n")
                for row in rows:
                    fh.write(f"{row[0]},{row[1]:.6f},{row[2]:.6f},{row[3]:.6f}\n")
    means = np.array([r[1] for r in rows])
    print(
        f"sequential prediction over {len(rows)} sequences "
        f"(S={args.S}): mean L2 {means.mean():.6f}, "
        f"quartiles [{np.percentile(means, 25):.6f}, "
        f"{np.percentile(means, 75):.6f}]"
        + (f"; wrote {args.out}" if args.out else "")
    )


def cmd_ablate(args) -> None:
    _echo_config(args)
    cfg = (
        training.parse_train_config(args.config)
        if args.config
        else training.TrainConfig()
    )
    ds = proc.DatasetFile.load(args.dataset)
    if args.val_dataset:
        train_series = ds.series
        val_series = proc.DatasetFile.load(args.val_dataset).series
    else:
        train_series, val_series = _split(ds.series, args.val_fraction)
    test_series = (
        proc.DatasetFile.load(args.test_dataset).series
        if args.test_dataset
        else val_series
    )
    variants = [v.strip() for v in args.variants.split(",")]
    for v in variants:
        if v not in VARIANTS:
            raise SystemExit(f"unknown variant {v!r}; choose from {VARIANTS}")
    seeds = [int(s) for s in args.seeds.split(",")]

    def make_model(variant, seed):
        cfg_m = ModelConfig(
            data_dim=ds.dim, latent_dim=args.latent_dim, variant=variant,
            flow_type=args.flow, em_h=args.em_h,
        )
        return ClpfModel(cfg_m, seed=seed)

    with _OutputGuard(args.out):
        table = training.run_ablation(
            make_model, args.dataset_name, train_series, val_series,
            test_series, variants, seeds, cfg, log=print,
        )
        if args.out:
            table.to_csv(args.out)
    print(table.format_text())


def _nearest_index(t: float, scale: float, n: int) -> int:
    """Nearest rescaled index; equidistant ties resolve to the earlier one."""
    idx = int(math.ceil(t / scale - 0.5))
    return min(max(idx, 0), n - 1)


def ingest_csv(input_path: str, length: float, lam: float, seed: int):
    """Irregularize a rectangular CSV of synchronous sequences.

    The first column is a sequence id delimiting sequences; remaining columns
    are the observed dimensions, one row per integer time index.  Indices are
    rescaled to [0, length), Poisson(lam) timestamps are drawn, each maps to
    the value at its nearest rescaled index, and all timestamps shift by +0.2.
    """
    groups: dict[str, list] = {}
    order = []
    with open(input_path) as fh:
        width = None
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise ValueError("need a sequence-id column plus values")
            elif len(row) != width:
                raise ValueError(f"{input_path}:{lineno}: ragged row")
            sid = row[0]
            if sid not in groups:
                groups[sid] = []
                order.append(sid)
            groups[sid].append([float(v) for v in row[1:]])
    if not order:
        raise ValueError("empty input")

    rng = np.random.default_rng(seed)
    series = []
    for sid in order:
        values = np.asarray(groups[sid])
        n = values.shape[0]
        if n == 0:
            raise ValueError(f"empty sequence {sid!r}")
        scale = length / n
        grid = proc.sample_poisson_grid(lam, length, rng)
        picked_t, picked_x = [], []
        for t in grid.times:
            if picked_t and t <= picked_t[-1]:
                continue  # duplicates would break strict monotonicity
            picked_t.append(float(t))
            picked_x.append(values[_nearest_index(float(t), scale, n)])
        shifted = np.asarray(picked_t) + 0.2
        series.append(
            proc.TimeSeries(
                proc.TimeGrid(shifted, length + 0.2), np.asarray(picked_x)
            )
        )
    metadata = {
        "process": "ingested",
        "params": {"source": os.path.basename(input_path), "length": length},
        "lambda": lam,
        "T": length + 0.2,
        "seed": seed,
        "d": series[0].dim,
        "n_sequences": len(series),
    }
    return proc.DatasetFile(metadata, series)


def cmd_ingest(args) -> None:
    _echo_config(args)
    with _OutputGuard(args.out):
        ds = ingest_csv(args.input, args.length, getattr(args, "lambda"), args.seed)
        ds.save(args.out)
        proc.DatasetFile.load(args.out)  # validate
    mean_len = float(np.mean([len(s) for s in ds.series]))
    print(f"wrote {args.out}: {len(ds)} sequences, mean length {mean_len:.2f}")


# ---------------------------------------------------------------------------
# argument parsing


def _add_model_flags(p):
    p.add_argument("--variant", default="CLPF", choices=VARIANTS)
    p.add_argument("--latent-dim", type=int, default=2)
    p.add_argument("--flow", default="affine",
                   choices=("affine", "anode", "identity"))
    p.add_argument("--em-h", type=float, default=0.05)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clpf",
        description="Latent SDE generative modeling of irregular time series "
                    "with continuously indexed flow decoders.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("generate", help="generate a synthetic benchmark dataset")
    p.add_argument("--process", required=True, choices=sorted(proc.PROCESS_DIMS))
    p.add_argument("--lambda", type=float, default=2.0)
    p.add_argument("--horizon", type=float, default=30.0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--val-dataset")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate NLL/obs on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--K", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sample", help="sample trajectories from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--lambda", type=float)
    p.add_argument("--dense-step", type=float)
    p.add_argument("--horizon", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plot-out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("predict", help="sequential one-step-ahead prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--S", type=int, default=25)
    p.add_argument("--max-sequences", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train and compare model variants")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dataset-name", default="dataset")
    p.add_argument("--val-dataset")
    p.add_argument("--test-dataset")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--config")
    p.add_argument("--variants", default="CLPF,CLPF-Independent")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out")
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("ingest", help="irregularize a rectangular CSV dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--length", type=float, default=30.0,
                   help="rescaled index interval length (30 or 120)")
    p.add_argument("--lambda", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except SystemExit:
        raise
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
