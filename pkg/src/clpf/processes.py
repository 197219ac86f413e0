"""Random time grids, Wiener paths, Euler-Maruyama, exact reference
processes (OU, GBM), and the four synthetic benchmark dataset generators.

Everything is deterministic given its RNG.  Dataset generation splits the
RNG per sequence (sequence seed = dataset seed + index), so regeneration is
bit-identical regardless of batching.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, value_of

DT_MIN = 1e-9  # floor below which transition variances become singular


@dataclass
class TimeGrid:
    """Strictly increasing observation timestamps within (0, horizon]."""

    times: np.ndarray
    horizon: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.ndim != 1 or self.times.size < 1:
            raise ValueError("a grid must contain at least one timestamp")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.times[0] <= 0 or self.times[-1] > self.horizon:
            raise ValueError("timestamps must lie in (0, horizon]")

    def __len__(self):
        return self.times.size


@dataclass
class TimeSeries:
    """Observed values on an irregular grid; values has shape (n, d)."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.shape[0] != len(self.grid):
            raise ValueError("value rows must match grid length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite observation values")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return len(self.grid)


@dataclass
class SdeSpec:
    """Drift and diagonal diffusion of an m-dimensional SDE."""

    dim: int
    drift: object  # (state, time, params) -> m-vector
    diffusion: object  # (state, time, params) -> m-vector, >= sigma_min
    params: object = None


@dataclass
class WienerPath:
    """Per-step Wiener increments over consecutive steps from time t0."""

    t0: float
    dts: np.ndarray
    dws: np.ndarray  # shape (n_steps, k)
    seed: int | None = None

    def __post_init__(self):
        self.dts = np.asarray(self.dts, dtype=np.float64)
        self.dws = np.asarray(self.dws, dtype=np.float64)
        if np.any(self.dts <= 0):
            raise ValueError("step sizes must be positive")
        if self.dws.shape[0] != self.dts.shape[0]:
            raise ValueError("increment count must match step count")

    @property
    def n_steps(self) -> int:
        return self.dts.size


def sample_poisson_grid(lam: float, horizon: float, rng) -> TimeGrid:
    """Arrival times of a homogeneous Poisson process, truncated at horizon.

    An empty draw is retried: every grid carries at least one observation.
    """
    if lam <= 0 or horizon <= 0:
        raise ValueError("intensity and horizon must be positive")
    while True:
        times = []
        t = rng.exponential(1.0 / lam)
        while t <= horizon:
            times.append(t)
            t += rng.exponential(1.0 / lam)
        if times:
            return TimeGrid(np.array(times), horizon)


def wiener_path(k: int, step_sizes, rng, t0: float = 0.0, seed=None) -> WienerPath:
    step_sizes = np.asarray(step_sizes, dtype=np.float64)
    if step_sizes.size == 0:
        return WienerPath(t0, np.empty(0), np.empty((0, k)), seed)
    dws = rng.standard_normal((step_sizes.size, k)) * np.sqrt(step_sizes)[:, None]
    return WienerPath(t0, step_sizes, dws, seed)


def euler_maruyama(spec: SdeSpec, z0, path: WienerPath):
    """Fixed-step Euler-Maruyama along a realized Wiener path.

    Returns (times, states) where states[k] is the state after k steps.
    The update is differentiable when drift/diffusion are tape-recorded and
    z0 is a Tensor; with plain arrays it runs untracked.
    """
    if path.dws.shape[1] != spec.dim:
        raise ValueError("Wiener path dimension must match SDE dimension")
    states = [z0]
    times = np.concatenate([[path.t0], path.t0 + np.cumsum(path.dts)])
    z = z0
    t = path.t0
    for k in range(path.n_steps):
        dt = float(path.dts[k])
        mu = spec.drift(z, t, spec.params)
        sig = spec.diffusion(z, t, spec.params)
        z = z + mu * dt + sig * path.dws[k]
        if not np.all(np.isfinite(value_of(z))):
            raise NonFiniteError(f"non-finite state at Euler-Maruyama step {k}")
        states.append(z)
        t += dt
    return times, states


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck base process (unit: theta=1, stationary variance 1,
# i.e. drift -o and diffusion sqrt(2))


def _ou_moments(dt: float):
    if dt < DT_MIN:
        raise ValueError(f"dt below minimum {DT_MIN}")
    decay = math.exp(-dt)
    var = -math.expm1(-2.0 * dt)
    return decay, var


def ou_transition_logpdf(o_prev, o_next, dt: float):
    """Log-density of the unit OU transition, summed over dimensions.

    Accepts Tensors (differentiable) or arrays; the last axis is the data
    dimension, leading axes are batch.
    """
    decay, var = _ou_moments(dt)
    resid = o_next - o_prev * decay
    const = -0.5 * math.log(2.0 * math.pi * var)
    return ad.sum_(const - ad.square(resid) / (2.0 * var), axis=-1)


def ou_sample(o_prev, dt: float, rng) -> np.ndarray:
    """Exact draw from the unit OU transition."""
    decay, var = _ou_moments(dt)
    o_prev = np.asarray(o_prev, dtype=np.float64)
    return o_prev * decay + math.sqrt(var) * rng.standard_normal(o_prev.shape)


def standard_normal_logpdf(o):
    """Log-density of N(0, I) summed over the last axis (OU stationary law)."""
    d = value_of(o).shape[-1]
    return ad.sum_(-ad.square(o) / 2.0, axis=-1) - 0.5 * d * math.log(2.0 * math.pi)


def wiener_transition_logpdf(o_prev, o_next, dt: float):
    """Log-density of the Wiener transition N(o_prev, dt I); base-process
    variant used by the Wiener-base and CTFP model wirings."""
    if dt < DT_MIN:
        raise ValueError(f"dt below minimum {DT_MIN}")
    resid = o_next - o_prev
    const = -0.5 * math.log(2.0 * math.pi * dt)
    return ad.sum_(const - ad.square(resid) / (2.0 * dt), axis=-1)


def wiener_marginal_logpdf(o, t: float):
    if t < DT_MIN:
        raise ValueError(f"t below minimum {DT_MIN}")
    const = -0.5 * math.log(2.0 * math.pi * t)
    return ad.sum_(const - ad.square(o) / (2.0 * t), axis=-1)


# ---------------------------------------------------------------------------
# geometric Brownian motion (exact transitions)


def gbm_exact_sample(x_prev, dt: float, mu: float, sigma: float, rng):
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if np.any(x_prev <= 0):
        raise ValueError("GBM state must be positive")
    if dt < DT_MIN:
        raise ValueError(f"dt below minimum {DT_MIN}")
    mean = np.log(x_prev) + (mu - 0.5 * sigma * sigma) * dt
    return np.exp(mean + sigma * math.sqrt(dt) * rng.standard_normal(x_prev.shape))


def gbm_exact_logpdf(x_prev, x_next, dt: float, mu: float, sigma: float):
    """Lognormal transition log-density, including the -log(x_next) Jacobian."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    x_next = np.asarray(x_next, dtype=np.float64)
    if np.any(x_prev <= 0) or np.any(x_next <= 0):
        raise ValueError("GBM values must be positive")
    if dt < DT_MIN:
        raise ValueError(f"dt below minimum {DT_MIN}")
    var = sigma * sigma * dt
    mean = np.log(x_prev) + (mu - 0.5 * sigma * sigma) * dt
    resid = np.log(x_next) - mean
    return -0.5 * np.log(2.0 * math.pi * var) - resid * resid / (2.0 * var) - np.log(
        x_next
    )


# ---------------------------------------------------------------------------
# benchmark dataset generation

GBM_PARAMS = {"mu": 0.2, "sigma": 0.1, "x0": 1.0}
CAR_A = np.array(
    [
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.002, 0.005, -0.003, -0.002],
    ]
)
CAR_E = np.array([0.0, 0.0, 0.0, 1.0])
SLC_PARAMS = {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}
SLC_ALPHA = np.array([0.1, 0.28, 0.3])

PROCESS_DIMS = {"gbm": 1, "lsde": 1, "car": 1, "slc": 3}


@dataclass
class DatasetFile:
    """An ordered collection of series plus the metadata that regenerates it."""

    metadata: dict
    series: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.metadata["d"])

    def __len__(self):
        return len(self.series)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps(self.metadata, sort_keys=True) + "\n")
            for ts in self.series:
                row = {
                    "t": [float(t) for t in ts.grid.times],
                    "x": [[float(v) for v in r] for r in ts.values],
                }
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def load(cls, path: str) -> "DatasetFile":
        with open(path) as fh:
            metadata = json.loads(fh.readline())
            horizon = float(metadata["T"])
            series = []
            for line in fh:
                row = json.loads(line)
                grid = TimeGrid(np.array(row["t"]), horizon)
                series.append(TimeSeries(grid, np.array(row["x"])))
        return cls(metadata, series)


def _lsde_drift(x, t):
    return 0.5 * math.sin(t) * x + 0.5 * math.cos(t)


def _lsde_diffusion(x, t):
    return np.full_like(x, 0.2 / (1.0 + math.exp(-t)))


def _car_drift(y, t):
    return y @ CAR_A.T


def _car_diffusion(y, t):
    return np.broadcast_to(CAR_E, y.shape)


def _slc_drift(s, t):
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    p = SLC_PARAMS
    return np.stack(
        [p["sigma"] * (y - x), x * (p["rho"] - z) - y, x * y - p["beta"] * z], axis=-1
    )


def _slc_diffusion(s, t):
    return np.broadcast_to(SLC_ALPHA, s.shape)


def _simulate_fine_em(drift, diffusion, x0, horizon, h, rngs, obs_steps, chunk=8192):
    """Batched fixed-step EM over [0, horizon] with per-sequence RNG streams.

    ``obs_steps[i]`` are the (sorted) step indices at which sequence i is read
    off.  Noise is drawn chunk-wise from each sequence's own generator, so the
    realized paths do not depend on batching.
    """
    n_seq, d = x0.shape
    n_steps = int(round(horizon / h))
    out = [np.empty((len(s), d)) for s in obs_steps]
    pending: dict[int, list] = {}
    for i, steps in enumerate(obs_steps):
        for j, s in enumerate(steps):
            pending.setdefault(int(s), []).append((i, j))
    x = x0.copy()
    for i, j in pending.get(0, []):
        out[i][j] = x[i]
    sqrt_h = math.sqrt(h)
    step = 0
    while step < n_steps:
        n_chunk = min(chunk, n_steps - step)
        noise = np.stack(
            [rng.standard_normal((n_chunk, d)) for rng in rngs], axis=1
        )
        for k in range(n_chunk):
            t = (step + k) * h
            x = x + drift(x, t) * h + diffusion(x, t) * (sqrt_h * noise[k])
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(f"non-finite state at fine EM step {step + k}")
            for i, j in pending.get(step + k + 1, []):
                out[i][j] = x[i]
        step += n_chunk
    return out


def generate_dataset(
    process: str,
    n_sequences: int,
    lam: float,
    horizon: float,
    seed: int,
    fine_step: float = 1e-4,
) -> DatasetFile:
    """Generate one of the synthetic benchmark datasets.

    GBM uses exact lognormal transitions on the sampled grid; LSDE, CAR, and
    SLC use fine-step Euler-Maruyama and are read off at the grid point
    nearest each sampled timestamp (within one fine step).
    """
    process = process.lower()
    if process not in PROCESS_DIMS:
        raise ValueError(f"unknown process {process!r}")
    if n_sequences <= 0 or lam <= 0 or horizon <= 0:
        raise ValueError("n_sequences, intensity, and horizon must be positive")

    rngs = [np.random.default_rng(seed + i) for i in range(n_sequences)]
    grids = [sample_poisson_grid(lam, horizon, rng) for rng in rngs]

    if process == "gbm":
        mu, sigma, x0 = GBM_PARAMS["mu"], GBM_PARAMS["sigma"], GBM_PARAMS["x0"]
        series = []
        for grid, rng in zip(grids, rngs):
            gaps = np.diff(np.concatenate([[0.0], grid.times]))
            incr = (mu - 0.5 * sigma * sigma) * gaps + sigma * np.sqrt(
                gaps
            ) * rng.standard_normal(gaps.size)
            x = x0 * np.exp(np.cumsum(incr))
            series.append(TimeSeries(grid, x[:, None]))
        params = dict(GBM_PARAMS)
    else:
        if process == "lsde":
            drift, diffusion, sim_dim = _lsde_drift, _lsde_diffusion, 1
            x0s = np.zeros((n_sequences, 1))
            params = {"form": "0.5*sin(t)*x + 0.5*cos(t) dt + 0.2/(1+e^-t) dW"}
        elif process == "car":
            drift, diffusion, sim_dim = _car_drift, _car_diffusion, 4
            x0s = np.zeros((n_sequences, 4))
            params = {"a": [0.002, 0.005, -0.003, -0.002]}
        else:  # slc
            drift, diffusion, sim_dim = _slc_drift, _slc_diffusion, 3
            x0s = np.stack([rng.standard_normal(3) for rng in rngs])
            params = dict(SLC_PARAMS, alpha=list(SLC_ALPHA))
        n_steps = int(round(horizon / fine_step))
        obs_steps = [
            np.minimum(np.round(g.times / fine_step).astype(int), n_steps)
            for g in grids
        ]
        raw = _simulate_fine_em(
            drift, diffusion, x0s, horizon, fine_step, rngs, obs_steps
        )
        series = []
        for grid, values in zip(grids, raw):
            if process == "car":
                values = values[:, :1]
            series.append(TimeSeries(grid, values))
        params["fine_step"] = fine_step

    metadata = {
        "process": process,
        "params": params,
        "lambda": lam,
        "T": horizon,
        "seed": seed,
        "d": PROCESS_DIMS[process],
        "n_sequences": n_sequences,
    }
    return DatasetFile(metadata, series)
