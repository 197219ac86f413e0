"""Training loop, likelihood evaluation, sequential prediction, ablations.

Training minimizes the negative multi-sample bound per observation with Adam
and global-norm gradient clipping, tracking the best validation bound.  All
randomness flows from explicit seeds, so a rerun with the same configuration
reproduces the same parameters bit for bit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import flows
from . import nn
from . import processes as proc
from .autodiff import value_of
from .model import ClpfModel


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-2
    k_train: int = 3
    k_eval: int = 25
    clip_norm: float = 10.0
    seed: int = 0
    obs_noise_std: float = 0.0  # jitter added to observations during training
    eval_every: int = 1
    max_seconds: float = 0.0  # 0 disables the wall-clock budget


def parse_train_config(path: str) -> TrainConfig:
    """Read a flat ``key = value`` file; ``#`` starts a comment."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    kwargs = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown option {key!r}")
            caster = int if known[key] in (int, "int") else float
            kwargs[key] = caster(raw)
    return TrainConfig(**kwargs)


@dataclass
class TrainResult:
    history: list  # one dict per logged epoch
    best_val_nll: float
    wall_clock_s: float
    clip_rate: float
    n_updates: int


def _u_element_count(model: ClpfModel, series: proc.TimeSeries, K: int) -> int:
    """How many Girsanov drift-correction entries one bound evaluation sees."""
    cfg = model.config
    if cfg.is_ctfp:
        return 0
    total = 0
    t_prev = 0.0
    for t in series.grid.times:
        total += max(1, math.ceil((float(t) - t_prev) / cfg.em_h))
        t_prev = float(t)
    return total * K * cfg.latent_dim


def train(
    model: ClpfModel,
    train_series: list,
    val_series: list,
    cfg: TrainConfig,
    checkpoint_path: str | None = None,
    log=None,
) -> TrainResult:
    """Minibatch Adam on the negative per-observation bound.

    The model's parameter store is left at the best-validation parameters;
    ``checkpoint_path`` (if given) also holds them on disk.
    """
    order_rng = np.random.default_rng(cfg.seed)
    sample_rng = np.random.default_rng(cfg.seed + 1)
    noise_rng = np.random.default_rng(cfg.seed + 2)
    start = time.monotonic()
    best_val = math.inf
    best_store = model.store.copy()
    history = []
    clip_events = 0
    clip_total = 0
    n_updates = 0
    stop = False

    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(train_series))
        epoch_loss = 0.0
        epoch_obs = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            grads = None
            for i in batch:
                series = train_series[i]
                if cfg.obs_noise_std > 0:
                    series = proc.TimeSeries(
                        series.grid,
                        series.values
                        + cfg.obs_noise_std
                        * noise_rng.standard_normal(series.values.shape),
                    )
                try:
                    loss, g, est = model.loss_and_grads(
                        series, cfg.k_train, sample_rng
                    )
                except ad.NonFiniteError as exc:
                    raise RuntimeError(
                        f"training aborted: non-finite value at epoch {epoch}, "
                        f"sequence {i}, update {n_updates}: {exc}"
                    ) from exc
                grads = nn.accumulate_grads(grads, g)
                epoch_loss += loss * len(series)
                epoch_obs += len(series)
                clip_events += est.clip_events
                clip_total += _u_element_count(model, series, cfg.k_train)
            grads = {k: v / len(batch) for k, v in grads.items()}
            grads, _ = nn.clip_grads_by_global_norm(grads, cfg.clip_norm)
            nn.adam_step(model.store, grads, cfg.lr)
            n_updates += 1
            if cfg.max_seconds and time.monotonic() - start > cfg.max_seconds:
                stop = True
                break

        record = {"epoch": epoch, "train_nll": epoch_loss / max(epoch_obs, 1)}
        if val_series and (epoch % cfg.eval_every == 0 or stop
                           or epoch == cfg.epochs - 1):
            val_nll, val_se = evaluate_nll(
                model, val_series, cfg.k_eval, seed=cfg.seed + 3
            )
            record.update(val_nll=val_nll, val_se=val_se)
            if val_nll < best_val:
                best_val = val_nll
                best_store = model.store.copy()
                if checkpoint_path is not None:
                    nn.save_checkpoint(model.store, checkpoint_path)
        history.append(record)
        if log is not None:
            log(
                "epoch {epoch}: train nll/obs {train_nll:.4f}".format(**record)
                + (
                    ", val nll/obs {val_nll:.4f} (se {val_se:.4f})".format(**record)
                    if "val_nll" in record
                    else ""
                )
            )
        if stop:
            break

    if not val_series:
        best_val = history[-1]["train_nll"] if history else math.inf
        best_store = model.store.copy()
        if checkpoint_path is not None:
            nn.save_checkpoint(model.store, checkpoint_path)
    model.store = best_store
    return TrainResult(
        history,
        best_val,
        time.monotonic() - start,
        clip_events / clip_total if clip_total else 0.0,
        n_updates,
    )


def evaluate_nll(model: ClpfModel, series_list: list, K: int, seed: int = 0):
    """Per-observation negative bound averaged over sequences, with its
    standard error across sequences."""
    rng = np.random.default_rng(seed)
    per_seq = np.empty(len(series_list))
    for i, series in enumerate(series_list):
        est = model.iwae_bound(series, K, rng)
        per_seq[i] = -est.total_value / len(series)
    mean = float(per_seq.mean())
    se = float(per_seq.std(ddof=1) / math.sqrt(len(per_seq))) if len(per_seq) > 1 else 0.0
    return mean, se


def gbm_oracle_nll(series_list: list, mu: float | None = None,
                   sigma: float | None = None, x0: float | None = None):
    """Exact per-observation NLL of geometric Brownian motion data.

    Defaults to the benchmark parameterization; the first observation is
    scored from the deterministic initial value.
    """
    p = proc.GBM_PARAMS
    mu = p["mu"] if mu is None else mu
    sigma = p["sigma"] if sigma is None else sigma
    x0 = p["x0"] if x0 is None else x0
    per_seq = np.empty(len(series_list))
    for i, series in enumerate(series_list):
        ll = 0.0
        x_prev, t_prev = np.array([x0]), 0.0
        for t, x in zip(series.grid.times, series.values):
            ll += float(proc.gbm_exact_logpdf(x_prev, x, float(t) - t_prev, mu, sigma).sum())
            x_prev, t_prev = x, float(t)
        per_seq[i] = -ll / len(series)
    mean = float(per_seq.mean())
    se = float(per_seq.std(ddof=1) / math.sqrt(len(per_seq))) if len(per_seq) > 1 else 0.0
    return mean, se


def sequential_predict(
    model: ClpfModel, series: proc.TimeSeries, n_continuations: int = 25,
    seed: int = 0,
):
    """One-step-ahead prediction along a sequence.

    The posterior filter absorbs observations up to t_{i-1}; the prediction
    at t_i is the mean over ``n_continuations`` prior continuations from the
    filtered state.  Returns predictions (skipping the first observation) and
    the mean / quartiles of the per-step L2 errors.
    """
    cfg = model.config
    params = model.store.tensors(None)
    core = (
        None
        if cfg.independent_decoder
        else flows.prepare_flow(model.flow_spec, params)
    )
    rng = np.random.default_rng(seed)
    S = n_continuations
    d = cfg.data_dim
    m = cfg.latent_dim
    wiener = cfg.wiener_base or cfg.is_ctfp
    times = series.grid.times
    xs = series.values
    n = len(series)

    def decode(z_batch, o_batch, t):
        if cfg.independent_decoder:
            out = nn.mlp_apply(
                model.decoder_spec, params, "decoder", model._with_time(z_batch, t)
            )
            return out[:, :d]
        ctx = flows.FlowContext(
            np.zeros(0) if cfg.is_ctfp else z_batch, t
        )
        return value_of(
            flows.flow_forward(model.flow_spec, params, o_batch, ctx,
                               core_params=core).value
        )

    def invert_obs(x, z, t):
        ctx = flows.FlowContext(np.zeros(0) if cfg.is_ctfp else z, t)
        return value_of(
            flows.flow_inverse(model.flow_spec, params, x, ctx,
                               core_params=core).value
        )

    enc_state = np.zeros((1, cfg.gru_hidden))
    z_prev = np.broadcast_to(params["z0"], (1, m)).copy() if not cfg.is_ctfp else None
    o_prev = None
    t_prev = 0.0
    preds = np.empty((n - 1, d))
    errors = np.empty(n - 1)

    for i in range(n):
        t_i = float(times[i])
        dt = t_i - t_prev
        if i > 0:
            # predict x_{t_i} from the filtered state at t_{i-1}
            if cfg.is_ctfp:
                z_end = None
            else:
                z_tile = np.broadcast_to(z_prev[0], (S, m)).copy()
                z_end = model.solve_prior_interval(
                    params, z_tile, t_prev, t_i, rng
                ).endpoint
            if cfg.independent_decoder:
                x_hat = decode(z_end, None, t_i)
            else:
                o_tile = np.broadcast_to(o_prev, (S, d))
                if wiener:
                    o_next = o_tile + math.sqrt(dt) * rng.standard_normal((S, d))
                else:
                    o_next = proc.ou_sample(o_tile, dt, rng)
                x_hat = decode(z_end, o_next, t_i)
            pred = x_hat.mean(axis=0)
            preds[i - 1] = pred
            errors[i - 1] = float(np.linalg.norm(pred - xs[i]))
        # absorb the true observation x_{t_i}
        if cfg.is_ctfp:
            o_prev = invert_obs(xs[i], None, t_i)
        else:
            enc_state, phi = model.encode_step(
                params, enc_state, xs[i], z_prev, t_i, t_prev
            )
            path = model.solve_posterior_interval(
                params, phi, z_prev, t_prev, t_i, rng
            )
            z_prev = path.endpoint
            if not cfg.independent_decoder:
                o_prev = invert_obs(
                    np.broadcast_to(xs[i], (1, d)), z_prev, t_i
                )[0]
        t_prev = t_i

    q25, q75 = (
        np.percentile(errors, [25, 75]) if errors.size else (math.nan, math.nan)
    )
    return {
        "predictions": preds,
        "errors": errors,
        "l2_mean": float(errors.mean()) if errors.size else math.nan,
        "l2_q25": float(q25),
        "l2_q75": float(q75),
    }


# ---------------------------------------------------------------------------
# ablations / metrics


class MetricsTable:
    """Accumulates (dataset, variant, seed) result rows; CSV + aligned text."""

    COLUMNS = ("dataset", "variant", "seed", "nll", "se", "wall_clock_s",
               "clip_rate")

    def __init__(self):
        self.rows = []

    def add(self, **row):
        missing = set(self.COLUMNS) - set(row)
        if missing:
            raise ValueError(f"missing metric fields: {sorted(missing)}")
        self.rows.append(row)

    def _cell(self, row, col) -> str:
        v = row[col]
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    def to_csv(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for row in self.rows:
                fh.write(",".join(self._cell(row, c) for c in self.COLUMNS) + "\n")

    def format_text(self) -> str:
        cells = [list(self.COLUMNS)] + [
            [self._cell(r, c) for c in self.COLUMNS] for r in self.rows
        ]
        widths = [max(len(row[j]) for row in cells) for j in range(len(self.COLUMNS))]
        lines = [
            "  ".join(cell.rjust(w) for cell, w in zip(row, widths))
            for row in cells
        ]
        return "\n".join(lines)


def run_ablation(
    make_model,
    dataset_name: str,
    train_series: list,
    val_series: list,
    test_series: list,
    variants: list,
    seeds: list,
    cfg: TrainConfig,
    log=None,
) -> MetricsTable:
    """Train each variant for each seed and score it on the test split.

    ``make_model(variant, seed)`` constructs a fresh model.
    """
    table = MetricsTable()
    for variant in variants:
        for seed in seeds:
            model = make_model(variant, seed)
            run_cfg = TrainConfig(**{
                f.name: getattr(cfg, f.name) for f in fields(TrainConfig)
            })
            run_cfg.seed = seed
            result = train(model, train_series, val_series, run_cfg, log=log)
            nll, se = evaluate_nll(model, test_series, cfg.k_eval, seed=seed + 10)
            table.add(
                dataset=dataset_name, variant=variant, seed=seed, nll=nll,
                se=se, wall_clock_s=result.wall_clock_s,
                clip_rate=result.clip_rate,
            )
            if log is not None:
                log(f"{dataset_name} {variant} seed {seed}: "
                    f"test nll/obs {nll:.4f} (se {se:.4f})")
    return table
