"""Training loop, evaluation harness, oracles, prediction, ablation table."""

import math

import numpy as np
import pytest

from clpf import nn
from clpf import processes as proc
from clpf import training
from clpf.model import ClpfModel, ModelConfig, make_exact_ou_model


def small_config(**kw):
    base = dict(
        data_dim=1, latent_dim=2, context_dim=4, gru_hidden=4, drift_hidden=(8,),
        flow_type="affine", flow_blocks=1, affine_index_hidden=(8,),
        affine_core_hidden=(8,), em_h=0.1,
    )
    base.update(kw)
    return ModelConfig(**base)


def ou_dataset(n, seed=0, lam=2.0, horizon=5.0):
    """Unit-OU observations: the exact-model wiring scores these exactly."""
    rng = np.random.default_rng(seed)
    series = []
    for _ in range(n):
        grid = proc.sample_poisson_grid(lam, horizon, rng)
        x = np.empty((len(grid), 1))
        o = rng.standard_normal(1)
        t_prev = 0.0
        for i, t in enumerate(grid.times):
            if i > 0:
                o = proc.ou_sample(o, float(t) - t_prev, rng)
            x[i] = o
            t_prev = float(t)
        series.append(proc.TimeSeries(grid, x))
    return series


class TestTrainConfig:
    def test_parse_file(self, tmp_path):
        p = tmp_path / "cfg.txt"
        p.write_text("epochs = 3  # few\nlr=0.005\nbatch_size = 4\n\n# comment\n")
        cfg = training.parse_train_config(str(p))
        assert cfg.epochs == 3 and cfg.lr == 0.005 and cfg.batch_size == 4
        assert cfg.k_train == 3  # default preserved

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "cfg.txt"
        p.write_text("warp_speed = 9\n")
        with pytest.raises(ValueError):
            training.parse_train_config(str(p))


class TestTrainLoop:
    def test_zero_epochs_keeps_initialization(self):
        m = ClpfModel(small_config(), seed=0)
        before = {n: m.store[n].copy() for n in m.store.names()}
        data = ou_dataset(4, seed=1)
        training.train(m, data, [], training.TrainConfig(epochs=0))
        for name in before:
            assert np.array_equal(m.store[name], before[name])

    def test_loss_decreases_and_best_checkpoint(self, tmp_path):
        m = ClpfModel(small_config(), seed=2)
        data = ou_dataset(8, seed=3)
        ck = str(tmp_path / "best.ck")
        cfg = training.TrainConfig(epochs=3, batch_size=4, lr=0.05, k_train=2,
                                   k_eval=3, seed=0)
        res = training.train(m, data[:6], data[6:], cfg, checkpoint_path=ck)
        assert res.history[-1]["train_nll"] < res.history[0]["train_nll"]
        loaded = nn.load_checkpoint(ck)
        for name in m.store.names():
            assert np.array_equal(loaded[name], m.store[name])

    def test_training_determinism(self):
        def run():
            m = ClpfModel(small_config(), seed=4)
            data = ou_dataset(6, seed=5)
            training.train(m, data, [], training.TrainConfig(
                epochs=2, batch_size=3, lr=0.05, k_train=2))
            return {n: m.store[n].copy() for n in m.store.names()}

        a, b = run(), run()
        for name in a:
            assert np.array_equal(a[name], b[name])

    def test_overfit_single_sequence_to_oracle(self):
        # one short GBM sequence: training drives NLL near the exact value
        ds = proc.generate_dataset("gbm", 1, 2.0, 4.0, seed=11)
        seq = ds.series[0]
        oracle, _ = training.gbm_oracle_nll([seq])
        m = ClpfModel(small_config(em_h=0.25), seed=6)
        cfg = training.TrainConfig(epochs=250, batch_size=1, lr=0.02, k_train=3,
                                   seed=0, max_seconds=240)
        res = training.train(m, [seq], [], cfg)
        nll, _ = training.evaluate_nll(m, [seq], K=25, seed=1)
        assert nll <= oracle + 0.1
        # window-averaged training curve trends down
        curve = np.array([h["train_nll"] for h in res.history])
        k = max(len(curve) // 4, 1)
        assert curve[-k:].mean() < curve[:k].mean()

    def test_nan_abort_diagnostic(self):
        m = ClpfModel(small_config(), seed=7)
        # poison a parameter so the forward pass blows up
        m.store["flow.u0.w0"] = m.store["flow.u0.w0"] + 1e308
        data = ou_dataset(2, seed=8)
        with np.errstate(all="ignore"), pytest.raises(RuntimeError,
                                                      match="sequence"):
            training.train(m, data, [], training.TrainConfig(epochs=1))


class TestEvaluate:
    def test_exact_model_matches_analytic(self):
        m = make_exact_ou_model(data_dim=1)
        data = ou_dataset(5, seed=9)
        nll, se = training.evaluate_nll(m, data, K=7, seed=0)
        expect = []
        for s in data:
            ll = float(proc.standard_normal_logpdf(s.values[0]))
            t_prev = float(s.grid.times[0])
            for i in range(1, len(s)):
                ll += float(proc.ou_transition_logpdf(
                    s.values[i - 1], s.values[i], float(s.grid.times[i]) - t_prev))
                t_prev = float(s.grid.times[i])
            expect.append(-ll / len(s))
        assert nll == pytest.approx(np.mean(expect), abs=1e-12)

    def test_deterministic_under_seed(self):
        m = ClpfModel(small_config(identity_init=False), seed=10)
        data = ou_dataset(3, seed=11)
        a = training.evaluate_nll(m, data, K=5, seed=3)
        b = training.evaluate_nll(m, data, K=5, seed=3)
        assert a == b

    def test_iwae_k_monotonicity_tendency(self):
        m = ClpfModel(small_config(identity_init=False), seed=12)
        data = ou_dataset(10, seed=13)
        n25, se = training.evaluate_nll(m, data, K=25, seed=5)
        n125, _ = training.evaluate_nll(m, data, K=125, seed=6)
        assert n125 <= n25 + 3 * se


class TestGbmOracle:
    def test_lambda_difference_matches_analytic(self):
        # half-log intensity ratio: oracle(lam=2) - oracle(lam=20) ~ 0.5 ln 10
        a = proc.generate_dataset("gbm", 300, 2.0, 30.0, seed=20)
        b = proc.generate_dataset("gbm", 300, 20.0, 30.0, seed=21)
        nll_a, _ = training.gbm_oracle_nll(a.series)
        nll_b, _ = training.gbm_oracle_nll(b.series)
        assert 1.0 <= nll_a - nll_b <= 1.35

    def test_single_observation_at_mode(self):
        t1 = 2.0
        mode = math.exp((0.2 - 0.5 * 0.01) * t1 - 0.01 * t1)  # lognormal mode
        grid = proc.TimeGrid(np.array([t1]), 3.0)
        series = proc.TimeSeries(grid, np.array([[mode]]))
        nll, _ = training.gbm_oracle_nll([series])
        # cross-check by quadrature: the mode's density is the max
        xs = np.linspace(0.5, 3.0, 4001)
        lp = proc.gbm_exact_logpdf(np.ones(xs.size), xs, t1, 0.2, 0.1)
        assert -nll == pytest.approx(lp.max(), abs=1e-4)


class TestSequentialPredict:
    def test_exact_model_matches_ou_conditional_mean(self):
        m = make_exact_ou_model(data_dim=1)
        data = ou_dataset(1, seed=22, lam=2.0, horizon=6.0)[0]
        res = training.sequential_predict(m, data, n_continuations=500, seed=0)
        times = data.grid.times
        x = data.values[:, 0]
        for i in range(1, len(data)):
            expect = x[i - 1] * math.exp(-(times[i] - times[i - 1]))
            # MC error of the mean of 500 OU draws
            var = -math.expm1(-2 * (times[i] - times[i - 1]))
            assert abs(res["predictions"][i - 1, 0] - expect) <= 4 * math.sqrt(
                var / 500
            )

    def test_more_continuations_reduce_error(self):
        m = make_exact_ou_model(data_dim=1)
        data = ou_dataset(6, seed=23, horizon=6.0)
        l2 = {}
        for s_count in (1, 125):
            errs = [
                training.sequential_predict(m, s, s_count, seed=i)["l2_mean"]
                for i, s in enumerate(data)
            ]
            l2[s_count] = np.mean(errs)
        assert l2[125] <= l2[1]

    def test_constant_series_finite(self):
        m = ClpfModel(small_config(identity_init=False), seed=24)
        grid = proc.TimeGrid(np.array([0.5, 1.0, 1.5]), 2.0)
        series = proc.TimeSeries(grid, np.full((3, 1), 0.7))
        res = training.sequential_predict(m, series, 10, seed=0)
        assert np.isfinite(res["l2_mean"])
        assert res["l2_q25"] <= res["l2_q75"]


class TestMetricsTable:
    def test_csv_format(self, tmp_path):
        t = training.MetricsTable()
        t.add(dataset="gbm", variant="CLPF", seed=0, nll=1.25, se=0.01,
              wall_clock_s=12.5, clip_rate=0.0)
        p = str(tmp_path / "m.csv")
        t.to_csv(p)
        lines = open(p).read().splitlines()
        assert lines[0] == "dataset,variant,seed,nll,se,wall_clock_s,clip_rate"
        assert lines[1].startswith("gbm,CLPF,0,1.2500,")

    def test_text_table_aligned(self):
        t = training.MetricsTable()
        t.add(dataset="gbm", variant="CLPF-Independent", seed=0, nll=1.0,
              se=0.1, wall_clock_s=1.0, clip_rate=0.0)
        text = t.format_text()
        rows = text.splitlines()
        assert len(rows) == 2 and len(rows[0]) == len(rows[1])

    def test_missing_field_rejected(self):
        t = training.MetricsTable()
        with pytest.raises(ValueError):
            t.add(dataset="gbm", variant="CLPF", seed=0, nll=1.0)


class TestAblation:
    def test_two_variants_one_seed(self):
        data = ou_dataset(6, seed=25, horizon=3.0)

        def make_model(variant, seed):
            return ClpfModel(small_config(variant=variant, em_h=0.25), seed=seed)

        cfg = training.TrainConfig(epochs=1, batch_size=3, lr=0.02, k_train=2,
                                   k_eval=3)
        table = training.run_ablation(
            make_model, "ou", data[:4], data[4:5], data[5:],
            ["CLPF", "CLPF-Independent"], [0], cfg,
        )
        assert len(table.rows) == 2
        variants = {r["variant"] for r in table.rows}
        assert variants == {"CLPF", "CLPF-Independent"}
        assert all(np.isfinite(r["nll"]) for r in table.rows)
