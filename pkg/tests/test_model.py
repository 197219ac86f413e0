"""Model-level contracts: encoder, interval solvers, Girsanov weights,
conditional likelihoods, ELBO/IWAE, sampling, and variants."""

import math

import numpy as np
import pytest

from clpf import autodiff as ad
from clpf import flows
from clpf import nn
from clpf import processes as proc
from clpf.autodiff import value_of
from clpf.model import (
    VARIANTS,
    ClpfModel,
    ModelConfig,
    make_exact_ou_model,
    make_variant,
)


def toy_series(n=3, d=1, seed=0, horizon=2.0):
    rng = np.random.default_rng(seed)
    times = np.sort(rng.uniform(0.1, horizon, size=n))
    return proc.TimeSeries(proc.TimeGrid(times, horizon), rng.standard_normal((n, d)))


def analytic_ou_loglik(series, wiener=False):
    x = series.values
    t = series.grid.times
    if wiener:
        ll = float(value_of(proc.wiener_marginal_logpdf(x[0], float(t[0]))))
        trans = proc.wiener_transition_logpdf
    else:
        ll = float(value_of(proc.standard_normal_logpdf(x[0])))
        trans = proc.ou_transition_logpdf
    for i in range(1, len(series)):
        ll += float(value_of(trans(x[i - 1], x[i], float(t[i] - t[i - 1]))))
    return ll


def small_config(**kw):
    base = dict(
        data_dim=1, latent_dim=2, context_dim=4, gru_hidden=4, drift_hidden=(8,),
        flow_type="affine", flow_blocks=1, affine_index_hidden=(8,),
        affine_core_hidden=(8,), em_h=0.05,
    )
    base.update(kw)
    return ModelConfig(**base)


class TestEncoder:
    def test_zero_weights_zero_context(self):
        m = ClpfModel(small_config(), seed=0)
        for name in m.store.names():
            if name.startswith(("encoder.", "context_proj.")):
                m.store[name] = np.zeros_like(m.store[name])
        params = m.store.tensors(None)
        state = np.zeros((1, 4))
        _, phi = m.encode_step(params, state, np.array([1.0]), np.zeros((1, 2)),
                               0.5, 0.0)
        assert np.all(value_of(phi) == 0.0)

    def test_context_depends_on_observation(self):
        m = ClpfModel(small_config(), seed=1)
        params = m.store.tensors(None)
        state = np.zeros((1, 4))
        _, phi_a = m.encode_step(params, state, np.array([1.0]), np.zeros((1, 2)),
                                 0.5, 0.0)
        _, phi_b = m.encode_step(params, state, np.array([-1.0]), np.zeros((1, 2)),
                                 0.5, 0.0)
        assert not np.allclose(value_of(phi_a), value_of(phi_b))

    def test_state_threading(self):
        m = ClpfModel(small_config(), seed=2)
        params = m.store.tensors(None)
        s0 = np.zeros((1, 4))
        s1, _ = m.encode_step(params, s0, np.array([0.3]), np.zeros((1, 2)), 0.2, 0.0)
        s2, phi2 = m.encode_step(params, s1, np.array([0.6]), np.ones((1, 2)),
                                 0.7, 0.2)
        s2b, phi2b = m.encode_step(
            params,
            value_of(m.encode_step(params, s0, np.array([0.3]), np.zeros((1, 2)),
                                   0.2, 0.0)[0]),
            np.array([0.6]), np.ones((1, 2)), 0.7, 0.2,
        )
        assert np.allclose(value_of(s2), value_of(s2b))
        assert np.allclose(value_of(phi2), value_of(phi2b))


class TestIntervalSolvers:
    def test_matched_drifts_zero_weight(self):
        m = ClpfModel(small_config(tied_posterior=True), seed=3)
        params = m.store.tensors(None)
        path = m.solve_posterior_interval(
            params, np.zeros((4, 4)), np.zeros((4, 2)), 0.0, 1.0,
            np.random.default_rng(0),
        )
        assert np.all(value_of(path.log_weight) == 0.0)
        assert path.clip_events == 0

    def test_girsanov_martingale_and_consistency(self):
        # OU prior (mu = -z, sigma ~ 1) vs shifted posterior (mu = -z + 1)
        cfg = small_config(latent_dim=1, drift_hidden=(1,), em_h=0.01)
        m = ClpfModel(cfg, seed=4)
        for name in m.store.names():
            if name.startswith(("prior_drift.", "posterior_drift.", "diffusion.")):
                m.store[name] = np.zeros_like(m.store[name])
        m.store["prior_drift.w0"] = np.array([[-0.6], [0.0]])  # pre-activation
        # tanh hidden distorts a linear drift; use direct biases instead:
        m.store["prior_drift.w0"][:] = 0.0
        m.store["posterior_drift.b1"] = np.array([1.0])  # mu_post = 1, mu_prior = 0
        m.store["diffusion.b1"] = np.array([math.log(math.expm1(1.0 - 1e-3))])
        params = m.store.tensors(None)
        n = 10**4
        rng = np.random.default_rng(5)
        post = m.solve_posterior_interval(
            params, np.zeros((n, cfg.context_dim)), np.zeros((n, 1)), 0.0, 1.0, rng
        )
        w = np.exp(value_of(post.log_weight))
        se = w.std(ddof=1) / math.sqrt(n)
        assert abs(w.mean() - 1.0) <= 3 * se
        prior = m.solve_prior_interval(
            params, np.zeros((n, 1)), 0.0, 1.0, np.random.default_rng(6)
        )
        for f in (lambda z: z, lambda z: z**2):
            a = f(value_of(prior.endpoint)[:, 0])
            b = f(value_of(post.endpoint)[:, 0]) * w
            se_c = math.sqrt(a.var(ddof=1) / n + b.var(ddof=1) / n)
            assert abs(a.mean() - b.mean()) <= 3 * se_c

    def test_piecewise_solving_associative(self):
        m = ClpfModel(small_config(em_h=0.01), seed=7)
        params = m.store.tensors(None)
        phi = np.full((2, 4), 0.3)
        z0 = np.full((2, 2), 0.1)
        whole = m.solve_posterior_interval(params, phi, z0, 0.0, 1.0,
                                           np.random.default_rng(8))
        rng = np.random.default_rng(8)
        first = m.solve_posterior_interval(params, phi, z0, 0.0, 0.5, rng)
        second = m.solve_posterior_interval(params, phi, first.endpoint, 0.5, 1.0,
                                            rng)
        assert np.allclose(value_of(whole.endpoint), value_of(second.endpoint),
                           atol=1e-12)
        split_w = value_of(first.log_weight) + value_of(second.log_weight)
        assert np.allclose(value_of(whole.log_weight), split_w, atol=1e-12)

    def test_prior_determinism_and_near_constant(self):
        m = ClpfModel(small_config(), seed=9)
        params = m.store.tensors(None)
        a = m.solve_prior_interval(params, np.zeros((1, 2)), 0.0, 0.5,
                                   np.random.default_rng(1))
        b = m.solve_prior_interval(params, np.zeros((1, 2)), 0.0, 0.5,
                                   np.random.default_rng(1))
        assert np.array_equal(value_of(a.endpoint), value_of(b.endpoint))
        # zero drift (zero-init final layers) and sigma ~ sigma_min + softplus(0)
        spread = np.abs(value_of(a.endpoint)).max()
        assert spread < 3.0  # sigma ~ 0.69 over half a unit of time

    def test_clip_events_counted(self):
        cfg = small_config(latent_dim=1, u_clip=0.5)
        m = ClpfModel(cfg, seed=10)
        m.store["posterior_drift.b1"] = np.array([5.0])
        params = m.store.tensors(None)
        path = m.solve_posterior_interval(
            params, np.zeros((1, 4)), np.zeros((1, 1)), 0.0, 0.5,
            np.random.default_rng(2),
        )
        assert path.clip_events > 0


class TestLikelihoodTerms:
    def test_identity_flow_is_ou_transition(self):
        m = make_exact_ou_model(data_dim=2)
        params = m.store.tensors(None)
        rng = np.random.default_rng(11)
        x_prev, x_i = rng.standard_normal(2), rng.standard_normal(2)
        ll = m.conditional_loglik(params, x_i, x_prev, np.zeros(2), np.zeros(2),
                                  0.9, 0.4)
        expect = float(value_of(proc.ou_transition_logpdf(x_prev, x_i, 0.5)))
        assert float(value_of(ll)) == pytest.approx(expect, abs=1e-12)

    def test_conditional_density_normalizes(self):
        cfg = small_config(identity_init=False)
        m = ClpfModel(cfg, seed=12)
        params = m.store.tensors(None)
        core = flows.prepare_flow(m.flow_spec, params)
        z = np.full(2, 0.2)
        x_prev = np.array([0.3])
        xs = np.linspace(-10, 10, 2000)
        lls = np.array([
            float(value_of(m.conditional_loglik(
                params, np.array([x]), x_prev, z, z, 1.0, 0.5, core_params=core
            )))
            for x in xs
        ])
        integral = np.trapezoid(np.exp(lls), xs)
        assert abs(integral - 1.0) <= 1e-2

    def test_scaling_flow_halves_density(self):
        # x = 2 o: loglik(x) = OU(x/2) - ln 2
        cfg = small_config(flow_type="affine", flow_blocks=1)
        m = ClpfModel(cfg, seed=13)
        m.store["flow.u0.b1"] = np.array([-math.log(2.0)])
        params = m.store.tensors(None)
        x_prev, x_i = np.array([0.6]), np.array([1.0])
        ll = float(value_of(m.conditional_loglik(
            params, x_i, x_prev, np.zeros(2), np.zeros(2), 1.2, 0.4
        )))
        expect = float(value_of(
            proc.ou_transition_logpdf(x_prev / 2.0, x_i / 2.0, 0.8)
        )) - math.log(2.0)
        assert ll == pytest.approx(expect, abs=1e-9)

    def test_first_obs_identity_flow(self):
        m = make_exact_ou_model(data_dim=1)
        params = m.store.tensors(None)
        ll = float(value_of(m.first_obs_loglik(params, np.zeros(1), np.zeros(2),
                                               0.7)))
        assert ll == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_first_obs_normalizes(self):
        cfg = small_config(identity_init=False)
        m = ClpfModel(cfg, seed=14)
        params = m.store.tensors(None)
        core = flows.prepare_flow(m.flow_spec, params)
        z = np.full(2, -0.4)
        xs = np.linspace(-10, 10, 2000)
        lls = np.array([
            float(value_of(m.first_obs_loglik(params, np.array([x]), z, 0.8,
                                              core_params=core)))
            for x in xs
        ])
        assert abs(np.trapezoid(np.exp(lls), xs) - 1.0) <= 1e-2

    def test_wiener_first_obs_at_t1(self):
        m = make_exact_ou_model(data_dim=1, variant="CLPF-Wiener")
        params = m.store.tensors(None)
        ll = float(value_of(m.first_obs_loglik(params, np.array([0.3]),
                                               np.zeros(2), 1.0)))
        expect = float(value_of(proc.standard_normal_logpdf(np.array([0.3]))))
        assert ll == pytest.approx(expect, abs=1e-12)


class TestBounds:
    def test_exact_model_identity_all_bounds(self):
        series = toy_series(n=4, d=2, seed=15)
        m = make_exact_ou_model(data_dim=2)
        expect = analytic_ou_loglik(series)
        for K in (1, 3, 9):
            est = m.iwae_bound(series, K, np.random.default_rng(K))
            assert abs(est.total_value - expect) <= 1e-10
        est = m.elbo(series, np.random.default_rng(0), K=5)
        assert abs(est.total_value - expect) <= 1e-10
        assert est.per_interval_logweight.shape == (4, 5)
        assert np.all(est.per_interval_logweight == 0.0)

    def test_elbo_decomposition(self):
        cfg = small_config(identity_init=False)
        m = ClpfModel(cfg, seed=16)
        series = toy_series(n=3, seed=17)
        est = m.elbo(series, np.random.default_rng(1), K=2)
        total_from_parts = (
            est.per_interval_loglik + est.per_interval_logweight
        ).sum(axis=0).mean()
        assert est.total_value == pytest.approx(total_from_parts, abs=1e-9)

    def test_elbo_below_iwae_on_average(self):
        cfg = small_config(identity_init=False)
        m = ClpfModel(cfg, seed=18)
        series = toy_series(n=3, seed=19)
        n_rep = 200
        elbos = np.array([
            m.elbo(series, np.random.default_rng(1000 + r)).total_value
            for r in range(n_rep)
        ])
        iwaes = np.array([
            m.iwae_bound(series, 25, np.random.default_rng(5000 + r)).total_value
            for r in range(n_rep)
        ])
        se = math.sqrt(elbos.var(ddof=1) / n_rep + iwaes.var(ddof=1) / n_rep)
        assert elbos.mean() <= iwaes.mean() + 3 * se

    def test_k1_iwae_equals_elbo_sampler(self):
        cfg = small_config(identity_init=False)
        m = ClpfModel(cfg, seed=20)
        series = toy_series(n=3, seed=21)
        a = m.iwae_bound(series, 1, np.random.default_rng(2)).total_value
        b = m.elbo(series, np.random.default_rng(2), K=1).total_value
        assert a == pytest.approx(b, abs=1e-12)

    def test_gradient_check_full_elbo(self):
        cfg = ModelConfig(
            data_dim=1, latent_dim=2, context_dim=3, gru_hidden=3,
            drift_hidden=(4,), flow_type="anode", flow_blocks=1,
            anode_hidden=(4,), anode_rk4_steps=4, em_h=0.05,
            identity_init=False,
        )
        m = ClpfModel(cfg, seed=22)
        prng = np.random.default_rng(23)
        for name in m.store.names():
            if not np.any(m.store[name]):
                m.store[name] = 0.05 * prng.standard_normal(m.store[name].shape)
        series = toy_series(n=3, seed=24, horizon=1.0)

        def elbo_value():
            return m.elbo(series, np.random.default_rng(25), K=2).total_value

        tape = ad.Tape()
        leaves = m.store.tensors(tape)
        est = m.elbo(series, np.random.default_rng(25), K=2, tape=tape,
                     leaves=leaves)
        grads = nn.collect_grads(leaves, ad.backward(tape, est.total))
        h = 1e-5
        for name in m.store.names():
            w = m.store[name]
            for idx in np.ndindex(*w.shape):
                orig = w[idx]
                w[idx] = orig + h
                fp = elbo_value()
                w[idx] = orig - h
                fm = elbo_value()
                w[idx] = orig
                fd = (fp - fm) / (2 * h)
                rel = abs(grads[name][idx] - fd) / max(abs(fd),
                                                       abs(grads[name][idx]), 1e-8)
                assert rel <= 1e-3, (name, idx, grads[name][idx], fd)

    def test_nan_input_raises(self):
        m = ClpfModel(small_config(), seed=26)
        grid = proc.TimeGrid(np.array([0.5]), 1.0)
        with pytest.raises(ValueError):
            proc.TimeSeries(grid, np.array([[np.nan]]))


class TestSampling:
    def test_identity_flow_ou_autocorrelation(self):
        m = make_exact_ou_model(data_dim=1)
        rng = np.random.default_rng(27)
        dt = 0.5
        grid = proc.TimeGrid(np.arange(1, 2001) * dt, 1001.0)
        ts = m.sample_trajectory(grid, rng)
        x = ts.values[:, 0]
        r = np.corrcoef(x[:-1], x[1:])[0, 1]
        assert abs(r - math.exp(-dt)) < 3 / math.sqrt(x.size)

    def test_grid_refinement_consistency(self):
        cfg = small_config(identity_init=False)
        m = ClpfModel(cfg, seed=28)
        coarse = proc.TimeGrid(np.array([0.5, 1.0, 1.5]), 2.0)
        fine = proc.TimeGrid(np.array([0.25, 0.5, 0.75, 1.0, 1.25, 1.5]), 2.0)
        rng = np.random.default_rng(29)
        zs = m.sample_latent_path(fine, rng)
        os_ = m.sample_base_path(fine, rng)
        dec_fine = m.decode_path(fine, zs, os_)
        shared = [1, 3, 5]
        dec_coarse = m.decode_path(coarse, zs[shared], os_[shared])
        assert np.array_equal(dec_fine[shared], dec_coarse)

    def test_sample_respects_grid(self):
        m = ClpfModel(small_config(), seed=30)
        grid = proc.TimeGrid(np.array([0.3, 0.8]), 1.0)
        ts = m.sample_trajectory(grid, np.random.default_rng(31))
        assert ts.values.shape == (2, 1)


class TestVariants:
    def test_all_tags_construct(self):
        for tag in VARIANTS:
            m = make_variant(tag, data_dim=1, latent_dim=2, drift_hidden=(4,),
                             context_dim=4, gru_hidden=4, flow_blocks=1,
                             affine_core_hidden=(4,), affine_index_hidden=(4,))
            series = toy_series(n=3, seed=32)
            est = m.iwae_bound(series, 2, np.random.default_rng(0))
            assert np.isfinite(est.total_value)

    def test_unknown_tag(self):
        with pytest.raises(ValueError):
            make_variant("CLPF-Quantum", 1, 2)

    def test_ctfp_exact_no_sampling(self):
        m = make_variant("CTFP", data_dim=1, latent_dim=0, flow_blocks=1,
                         affine_core_hidden=(4,), affine_index_hidden=(4,))
        series = toy_series(n=3, seed=33)
        a = m.iwae_bound(series, 1, np.random.default_rng(0)).total_value
        b = m.iwae_bound(series, 50, np.random.default_rng(99)).total_value
        assert a == pytest.approx(b, abs=1e-12)  # exact likelihood, K-free

    def test_ctfp_identity_init_is_wiener_loglik(self):
        m = make_variant("CTFP", data_dim=1, latent_dim=0)
        series = toy_series(n=4, seed=34)
        est = m.iwae_bound(series, 1, np.random.default_rng(0))
        assert est.total_value == pytest.approx(
            analytic_ou_loglik(series, wiener=True), abs=1e-12
        )

    def test_global_variant_shares_context(self):
        cfg = small_config(variant="CLPF-Global")
        m = ClpfModel(cfg, seed=35)
        series = toy_series(n=3, seed=36)
        params = m.store.tensors(None)
        phi = m._global_context(params, series)
        assert value_of(phi).shape == (1, cfg.context_dim)

    def test_independent_decoder_gaussian_loglik(self):
        cfg = small_config(variant="CLPF-Independent", tied_posterior=True)
        m = ClpfModel(cfg, seed=37)
        params = m.store.tensors(None)
        z = np.full(2, 0.3)
        x = np.array([0.7])
        ll = float(value_of(m._gaussian_decoder_loglik(params, z, 0.5, x)))
        out = value_of(nn.mlp_apply(m.decoder_spec, params, "decoder",
                                    m._with_time(z, 0.5)))
        mean, logvar = out[0], out[1]
        expect = -0.5 * (math.log(2 * math.pi) + logvar
                         + (x[0] - mean) ** 2 / math.exp(logvar))
        assert ll == pytest.approx(expect, abs=1e-12)

    def test_latent_sde_is_global_plus_independent(self):
        cfg = small_config(variant="LatentSDE")
        assert cfg.global_posterior and cfg.independent_decoder

    def test_wiener_variant_exact_identity(self):
        m = make_exact_ou_model(data_dim=1, variant="CLPF-Wiener")
        series = toy_series(n=3, seed=38)
        est = m.iwae_bound(series, 4, np.random.default_rng(1))
        assert est.total_value == pytest.approx(
            analytic_ou_loglik(series, wiener=True), abs=1e-10
        )

    def test_config_json_round_trip(self):
        cfg = small_config(variant="CLPF-Wiener", em_h=0.25)
        back = ModelConfig.from_json(cfg.to_json())
        assert back == cfg
