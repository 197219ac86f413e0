"""The latent-SDE generative model with flow decoding, its piecewise
variational machinery, and the ablation/baseline wirings.

A model couples four learnable pieces: a prior latent SDE (drift + diagonal
diffusion), a per-interval posterior drift conditioned on an encoder context,
a continuously indexed flow decoder over an OU (or Wiener) base process, and
a learned initial latent state.  The evidence bound is assembled interval by
interval: the encoder absorbs the newest observation, the posterior SDE is
solved over the interval while the Girsanov log-weight accumulates, and the
observation is scored through the inverse flow against the base transition.

All per-sequence computations are batched over the K bound samples; the same
code runs tape-recorded (training) or on plain arrays (evaluation).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import flows
from . import nn
from . import processes as proc
from .autodiff import value_of

VARIANTS = (
    "CLPF",
    "CLPF-Global",
    "CLPF-Independent",
    "CLPF-Wiener",
    "CTFP",
    "LatentSDE",
)


@dataclass
class ModelConfig:
    data_dim: int
    latent_dim: int
    context_dim: int = 16
    gru_hidden: int = 16
    drift_hidden: tuple = (32, 32)
    sigma_min: float = 1e-3
    u_clip: float = 20.0
    em_h: float = 0.01
    flow_type: str = "affine"  # affine | anode | identity
    flow_blocks: int = 5
    anode_hidden: tuple = (8, 32, 32, 8)
    anode_rk4_steps: int = 16
    affine_index_hidden: tuple = (32, 32)
    affine_core_hidden: tuple = (8, 32, 32, 8)
    decoder_hidden: tuple = (16, 64, 64, 16)
    variant: str = "CLPF"
    tied_posterior: bool = False  # posterior drift == prior drift (exact wiring)
    identity_init: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.flow_type not in ("affine", "anode", "identity"):
            raise ValueError(f"unknown flow type {self.flow_type!r}")

    @property
    def global_posterior(self) -> bool:
        return self.variant in ("CLPF-Global", "LatentSDE")

    @property
    def independent_decoder(self) -> bool:
        return self.variant in ("CLPF-Independent", "LatentSDE")

    @property
    def wiener_base(self) -> bool:
        return self.variant == "CLPF-Wiener"

    @property
    def is_ctfp(self) -> bool:
        return self.variant == "CTFP"

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        for key in (
            "drift_hidden",
            "anode_hidden",
            "affine_index_hidden",
            "affine_core_hidden",
            "decoder_hidden",
        ):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class LatentPath:
    """One posterior interval solve: trajectory, endpoint, Girsanov weight."""

    states: list
    endpoint: object
    log_weight: object
    increments: np.ndarray
    clip_events: int = 0


@dataclass
class ElboEstimate:
    total: object  # Tensor or float scalar
    per_interval_loglik: np.ndarray  # (n, K)
    per_interval_logweight: np.ndarray  # (n, K)
    K: int
    per_sample_joint: object  # (K,)
    clip_events: int
    mode: str  # "elbo" or "iwae"

    @property
    def total_value(self) -> float:
        return float(value_of(self.total))


class ClpfModel:
    def __init__(self, config: ModelConfig, store: nn.ParamStore | None = None,
                 seed: int = 0):
        self.config = config
        cfg = config
        m, d, c = cfg.latent_dim, cfg.data_dim, cfg.context_dim

        flow_latent = 0 if cfg.is_ctfp else m
        if cfg.flow_type == "anode":
            self.flow_spec = flows.AnodeFlowSpec(
                d, flow_latent, cfg.flow_blocks, cfg.anode_hidden,
                cfg.anode_rk4_steps,
            )
        elif cfg.flow_type == "affine":
            self.flow_spec = flows.AffineFlowSpec(
                d, flow_latent, cfg.flow_blocks,
                cfg.affine_index_hidden, cfg.affine_core_hidden,
            )
        else:
            self.flow_spec = flows.IdentityFlowSpec(d, flow_latent)

        if cfg.is_ctfp:
            # no latent SDE, encoder, or decoder networks: the flow indexed
            # by t alone gives an exact likelihood
            self.prior_spec = self.diffusion_spec = self.posterior_spec = None
            self.gru_spec = self.proj_spec = self.decoder_spec = None
        else:
            self.prior_spec = nn.MlpSpec([m + 1, *cfg.drift_hidden, m])
            self.diffusion_spec = nn.MlpSpec(
                [m + 1, *cfg.drift_hidden, m], output_activation="softplus"
            )
            self.posterior_spec = nn.MlpSpec([m + 1 + c, *cfg.drift_hidden, m])
            self.gru_spec = nn.GruSpec(d + m + 3, cfg.gru_hidden)
            self.proj_spec = nn.MlpSpec([cfg.gru_hidden, c])
            self.decoder_spec = nn.MlpSpec([m + 1, *cfg.decoder_hidden, 2 * d])

        if store is not None:
            self.store = store
        else:
            self.store = nn.ParamStore()
            self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> None:
        cfg = self.config
        store = self.store
        if not cfg.is_ctfp:
            # zero-initialized final drift layers start training at the
            # prior-equals-posterior regime (all log-weights exactly zero)
            nn.init_mlp(store, "prior_drift", self.prior_spec, rng, zero_final=True)
            nn.init_mlp(store, "diffusion", self.diffusion_spec, rng, zero_final=True)
            if not cfg.tied_posterior:
                nn.init_mlp(
                    store, "posterior_drift", self.posterior_spec, rng,
                    zero_final=True,
                )
            nn.init_gru(store, "encoder", self.gru_spec, rng)
            nn.init_mlp(store, "context_proj", self.proj_spec, rng)
            store.add("z0", np.zeros(cfg.latent_dim))
        if cfg.independent_decoder:
            nn.init_mlp(store, "decoder", self.decoder_spec, rng)
        else:
            flows.init_flow(
                store, "flow", self.flow_spec, rng,
                identity_init=cfg.identity_init,
            )

    # ------------------------------------------------------------------
    # drift / diffusion / encoder components

    @staticmethod
    def _with_time(z, t: float, extra=None):
        zv = value_of(z)
        if zv.ndim == 1:
            parts = [z, np.array([t])]
        else:
            parts = [z, np.full((zv.shape[0], 1), t)]
        if extra is not None:
            parts.append(extra)
        return ad.concat(parts, axis=-1)

    def _prior_drift(self, params, z, t: float):
        return nn.mlp_apply(
            self.prior_spec, params, "prior_drift", self._with_time(z, t)
        )

    def _diffusion(self, params, z, t: float):
        raw = nn.mlp_apply(
            self.diffusion_spec, params, "diffusion", self._with_time(z, t)
        )
        return raw + self.config.sigma_min

    def _posterior_drift(self, params, z, t: float, phi):
        if self.config.tied_posterior:
            return self._prior_drift(params, z, t)
        return nn.mlp_apply(
            self.posterior_spec, params, "posterior_drift",
            self._with_time(z, t, extra=phi),
        )

    def encode_step(self, params, state, x_i, z_prev, t_i: float, t_prev: float):
        """Absorb observation x_{t_i}; returns (new state, context phi_i)."""
        zv = value_of(z_prev)
        k = zv.shape[0]
        d = self.config.data_dim
        inp = ad.concat(
            [
                np.broadcast_to(np.asarray(x_i, dtype=np.float64), (k, d)),
                z_prev,
                np.broadcast_to(
                    np.array([t_i, t_prev, t_i - t_prev]), (k, 3)
                ).copy(),
            ],
            axis=-1,
        )
        state = nn.gru_step(self.gru_spec, params, "encoder", inp, state)
        phi = nn.mlp_apply(self.proj_spec, params, "context_proj", state)
        return state, phi

    def _global_context(self, params, series: proc.TimeSeries):
        """Encoder run over the whole sequence first; one shared context.

        Latent inputs are zeroed: in the global wiring no latent states have
        been sampled when the context is produced.
        """
        cfg = self.config
        state = np.zeros((1, cfg.gru_hidden))
        z_stub = np.zeros((1, cfg.latent_dim))
        t_prev = 0.0
        for t_i, x_i in zip(series.grid.times, series.values):
            state, phi = self.encode_step(params, state, x_i, z_stub, float(t_i),
                                          t_prev)
            t_prev = float(t_i)
        return phi

    # ------------------------------------------------------------------
    # interval solvers

    def _interval_steps(self, t0: float, t1: float):
        if t1 <= t0:
            raise ValueError("interval must have positive length")
        n_steps = max(1, math.ceil((t1 - t0) / self.config.em_h))
        return n_steps, (t1 - t0) / n_steps

    def solve_posterior_interval(self, params, phi, z_start, t0, t1, rng):
        """Euler-Maruyama under the posterior drift with the Girsanov
        log-weight accumulated along the same Wiener increments."""
        cfg = self.config
        n_steps, dt = self._interval_steps(t0, t1)
        z = z_start
        shape = value_of(z_start).shape
        states = [z]
        log_weight = 0.0
        clip_events = 0
        sqrt_dt = math.sqrt(dt)
        all_dw = rng.standard_normal((n_steps,) + shape) * sqrt_dt
        for k in range(n_steps):
            t = t0 + k * dt
            mu_prior = self._prior_drift(params, z, t)
            mu_post = self._posterior_drift(params, z, t, phi)
            sigma = self._diffusion(params, z, t)
            u_raw = (mu_post - mu_prior) / sigma
            clip_events += int(np.sum(np.abs(value_of(u_raw)) > cfg.u_clip))
            u = ad.clip(u_raw, -cfg.u_clip, cfg.u_clip)
            dw = all_dw[k]
            log_weight = (
                log_weight
                - ad.sum_(ad.square(u), axis=-1) * (dt / 2.0)
                - ad.sum_(u * dw, axis=-1)
            )
            z = z + mu_post * dt + sigma * dw
            states.append(z)
        if not np.all(np.isfinite(value_of(z))) or not np.all(
            np.isfinite(value_of(log_weight))
        ):
            raise ad.NonFiniteError("non-finite posterior state or log-weight")
        return LatentPath(states, z, log_weight, all_dw, clip_events)

    def solve_prior_interval(self, params, z_start, t0, t1, rng):
        n_steps, dt = self._interval_steps(t0, t1)
        z = z_start
        shape = value_of(z_start).shape
        states = [z]
        sqrt_dt = math.sqrt(dt)
        all_dw = rng.standard_normal((n_steps,) + shape) * sqrt_dt
        for k in range(n_steps):
            t = t0 + k * dt
            mu = self._prior_drift(params, z, t)
            sigma = self._diffusion(params, z, t)
            z = z + mu * dt + sigma * all_dw[k]
            states.append(z)
        if not np.all(np.isfinite(value_of(z))):
            raise ad.NonFiniteError("non-finite prior state")
        return LatentPath(states, z, 0.0, all_dw)

    # ------------------------------------------------------------------
    # observation terms

    def _base_transition(self, o_prev, o_next, dt: float):
        if self.config.wiener_base or self.config.is_ctfp:
            return proc.wiener_transition_logpdf(o_prev, o_next, dt)
        return proc.ou_transition_logpdf(o_prev, o_next, dt)

    def _base_marginal(self, o, t1: float):
        if self.config.wiener_base or self.config.is_ctfp:
            return proc.wiener_marginal_logpdf(o, t1)
        return proc.standard_normal_logpdf(o)

    def conditional_loglik(
        self, params, x_i, x_prev, z_i, z_prev, t_i, t_prev, core_params=None
    ):
        """log p(x_i | x_prev, z_i, z_prev): base transition between the
        flow pre-images minus the forward log-determinant at x_i."""
        inv_i = flows.flow_inverse(
            self.flow_spec, params, x_i, flows.FlowContext(z_i, t_i),
            core_params=core_params,
        )
        inv_prev = flows.flow_inverse(
            self.flow_spec, params, x_prev, flows.FlowContext(z_prev, t_prev),
            core_params=core_params,
        )
        base = self._base_transition(inv_prev.value, inv_i.value, t_i - t_prev)
        return base + inv_i.logdet

    def first_obs_loglik(self, params, x1, z1, t1: float, core_params=None):
        inv = flows.flow_inverse(
            self.flow_spec, params, x1, flows.FlowContext(z1, t1),
            core_params=core_params,
        )
        return self._base_marginal(inv.value, t1) + inv.logdet

    def _gaussian_decoder_loglik(self, params, z_i, t_i: float, x_i):
        d = self.config.data_dim
        out = nn.mlp_apply(
            self.decoder_spec, params, "decoder", self._with_time(z_i, t_i)
        )
        mean = out[..., :d]
        logvar = out[..., d:]
        resid = np.asarray(x_i, dtype=np.float64) - mean
        return ad.sum_(
            -0.5 * (logvar + math.log(2.0 * math.pi))
            - ad.square(resid) * ad.exp(-logvar) / 2.0,
            axis=-1,
        )

    # ------------------------------------------------------------------
    # bounds

    def _joint_terms(self, series, K, rng, params):
        """Per-sample joint log terms; returns (joint (K,), lls, logws, clips)."""
        cfg = self.config
        core = (
            None
            if cfg.independent_decoder
            else flows.prepare_flow(self.flow_spec, params)
        )
        times = series.grid.times
        xs = series.values
        d = cfg.data_dim

        if cfg.is_ctfp:
            o_prev = None
            t_prev = 0.0
            lls = []
            for t_i, x_i in zip(times, xs):
                t_i = float(t_i)
                ctx = flows.FlowContext(np.zeros(0), t_i)
                inv = flows.flow_inverse(
                    self.flow_spec, params, x_i, ctx, core_params=core
                )
                if o_prev is None:
                    base = self._base_marginal(inv.value, t_i)
                else:
                    base = self._base_transition(o_prev, inv.value, t_i - t_prev)
                lls.append(base + inv.logdet)
                o_prev, t_prev = inv.value, t_i
            joint = lls[0]
            for ll in lls[1:]:
                joint = joint + ll
            return joint, lls, [0.0] * len(lls), 0

        phi_global = None
        if cfg.global_posterior:
            phi_global = self._global_context(params, series)

        enc_state = np.zeros((K, cfg.gru_hidden))
        z_prev = ad.broadcast_to(params["z0"], (K, cfg.latent_dim))
        o_prev = None
        t_prev = 0.0
        lls, logws = [], []
        clips = 0
        for i in range(len(series)):
            t_i = float(times[i])
            x_i = xs[i]
            if phi_global is not None:
                phi = ad.broadcast_to(phi_global, (K, cfg.context_dim))
            else:
                enc_state, phi = self.encode_step(
                    params, enc_state, x_i, z_prev, t_i, t_prev
                )
            path = self.solve_posterior_interval(params, phi, z_prev, t_prev, t_i,
                                                 rng)
            clips += path.clip_events
            z_i = path.endpoint
            if cfg.independent_decoder:
                ll = self._gaussian_decoder_loglik(params, z_i, t_i, x_i)
            else:
                xk = np.broadcast_to(np.asarray(x_i, dtype=np.float64), (K, d))
                inv = flows.flow_inverse(
                    self.flow_spec, params, xk, flows.FlowContext(z_i, t_i),
                    core_params=core,
                )
                if o_prev is None:
                    base = self._base_marginal(inv.value, t_i)
                else:
                    base = self._base_transition(o_prev, inv.value, t_i - t_prev)
                ll = base + inv.logdet
                o_prev = inv.value
            lls.append(ll)
            logws.append(path.log_weight)
            z_prev, t_prev = z_i, t_i
        joint = lls[0] + logws[0]
        for ll, lw in zip(lls[1:], logws[1:]):
            joint = joint + ll + lw
        return joint, lls, logws, clips

    @staticmethod
    def _term_matrix(terms, K: int) -> np.ndarray:
        rows = []
        for t in terms:
            tv = np.atleast_1d(value_of(t))
            rows.append(np.broadcast_to(tv, (K,)).copy())
        return np.stack(rows)

    def elbo(self, series, rng, K: int = 1, tape=None, leaves=None):
        """Single- or multi-sample ELBO: the mean of the per-sample joints."""
        params = leaves if leaves is not None else self.store.tensors(tape)
        joint, lls, logws, clips = self._joint_terms(series, K, rng, params)
        total = ad.mean_(joint) if value_of(joint).ndim else joint
        return ElboEstimate(
            total,
            self._term_matrix(lls, K),
            self._term_matrix(logws, K),
            K,
            joint,
            clips,
            "elbo",
        )

    def iwae_bound(self, series, K: int, rng, tape=None, leaves=None):
        """log-mean-exp over K independent full-sequence joint samples."""
        if K < 1:
            raise ValueError("K must be at least 1")
        params = leaves if leaves is not None else self.store.tensors(tape)
        joint, lls, logws, clips = self._joint_terms(series, K, rng, params)
        jv = value_of(joint)
        if jv.ndim == 0:
            total = joint  # exact likelihood (CTFP): identical for every K
        else:
            shift = float(jv.max())  # constant shift; cancels analytically
            total = ad.log(ad.mean_(ad.exp(joint - shift))) + shift
        return ElboEstimate(
            total,
            self._term_matrix(lls, K),
            self._term_matrix(logws, K),
            K,
            joint,
            clips,
            "iwae",
        )

    def loss_and_grads(self, series, K: int, rng):
        """Negative IWAE per observation, with clipped-ready gradients."""
        tape = ad.Tape()
        leaves = self.store.tensors(tape)
        est = self.iwae_bound(series, K, rng, tape=tape, leaves=leaves)
        loss = -est.total / len(series)
        gradmap = ad.backward(tape, loss)
        grads = nn.collect_grads(leaves, gradmap)
        return float(value_of(loss)), grads, est

    # ------------------------------------------------------------------
    # generation

    def decode_path(self, grid: proc.TimeGrid, z_values, o_values) -> np.ndarray:
        """Pointwise decode of realized latent/base values on a grid."""
        params = self.store.tensors(None)
        core = flows.prepare_flow(self.flow_spec, params)
        out = np.empty((len(grid), self.config.data_dim))
        for i, t_i in enumerate(grid.times):
            z_i = np.zeros(0) if self.config.is_ctfp else z_values[i]
            res = flows.flow_forward(
                self.flow_spec, params, o_values[i],
                flows.FlowContext(z_i, float(t_i)), core_params=core,
            )
            out[i] = value_of(res.value)
        return out

    def sample_latent_path(self, grid: proc.TimeGrid, rng) -> np.ndarray:
        """Prior latent states at the grid times (one trajectory)."""
        params = self.store.tensors(None)
        z = params["z0"]
        t_prev = 0.0
        zs = np.empty((len(grid), self.config.latent_dim))
        for i, t_i in enumerate(grid.times):
            path = self.solve_prior_interval(params, z, t_prev, float(t_i), rng)
            z = path.endpoint
            zs[i] = z
            t_prev = float(t_i)
        return zs

    def sample_base_path(self, grid: proc.TimeGrid, rng) -> np.ndarray:
        """Exact base-process draw at the grid times (OU or Wiener)."""
        d = self.config.data_dim
        wiener = self.config.wiener_base or self.config.is_ctfp
        os_ = np.empty((len(grid), d))
        t_prev = 0.0
        o = None
        for i, t_i in enumerate(grid.times):
            t_i = float(t_i)
            dt = t_i - t_prev
            if o is None:
                if wiener:
                    o = math.sqrt(max(t_i, proc.DT_MIN)) * rng.standard_normal(d)
                else:
                    o = rng.standard_normal(d)
            else:
                if wiener:
                    o = o + math.sqrt(dt) * rng.standard_normal(d)
                else:
                    o = proc.ou_sample(o, dt, rng)
            os_[i] = o
            t_prev = t_i
        return os_

    def sample_trajectory(self, grid: proc.TimeGrid, rng) -> proc.TimeSeries:
        """Generate one observable trajectory on an arbitrary grid."""
        cfg = self.config
        if cfg.is_ctfp:
            os_ = self.sample_base_path(grid, rng)
            return proc.TimeSeries(grid, self.decode_path(grid, None, os_))
        zs = self.sample_latent_path(grid, rng)
        if cfg.independent_decoder:
            params = self.store.tensors(None)
            d = cfg.data_dim
            out = np.empty((len(grid), d))
            for i, t_i in enumerate(grid.times):
                dec = value_of(
                    nn.mlp_apply(
                        self.decoder_spec, params, "decoder",
                        self._with_time(zs[i], float(t_i)),
                    )
                )
                out[i] = dec[:d] + np.exp(0.5 * dec[d:]) * rng.standard_normal(d)
            return proc.TimeSeries(grid, out)
        os_ = self.sample_base_path(grid, rng)
        return proc.TimeSeries(grid, self.decode_path(grid, zs, os_))


def make_variant(tag: str, data_dim: int, latent_dim: int, seed: int = 0,
                 **overrides) -> ClpfModel:
    """Construct a model wired as one of the named variants."""
    if tag not in VARIANTS:
        raise ValueError(f"unknown variant {tag!r}; choose from {VARIANTS}")
    cfg = ModelConfig(
        data_dim=data_dim, latent_dim=latent_dim, variant=tag, **overrides
    )
    return ClpfModel(cfg, seed=seed)


def make_exact_ou_model(data_dim: int, latent_dim: int = 2,
                        seed: int = 0, **overrides) -> ClpfModel:
    """Degenerate wiring (identity flow, posterior tied to prior): the bound
    equals the closed-form OU-base log-likelihood with zero variance."""
    cfg = ModelConfig(
        data_dim=data_dim, latent_dim=latent_dim, flow_type="identity",
        tied_posterior=True, **overrides,
    )
    return ClpfModel(cfg, seed=seed)
