"""Training harness tests: objectives, Adam semantics, run control,
divergence handling, and small variational fits with analytic optima."""

import numpy as np
import pytest

from tailflow import autodiff as ad
from tailflow import experiments, flows, special, training

LOG_2PI = 1.8378770664093454836


def quad_target(c):
    """log density -c*||x||^2, callable on arrays and tape variables."""

    def tgt(x):
        if isinstance(x, ad.Var):
            return (x * x).rowsum() * (-c)
        return -c * np.sum(np.asarray(x) ** 2, axis=1)

    return tgt


def affine_1d(b3, seed=3):
    """Single-layer affine flow on R; with zero conditioner weights the
    map is exactly x = b3[0] + exp(b3[1]) * z."""
    layer = flows.AffineArLayer(1, "affine")
    params = layer.init_params(special.Rng(seed))
    params["affine.cond.b3"] = np.asarray(b3, dtype=float)
    return flows.FlowModel(
        name="affine1", d=1, base=flows.StdNormalBase(1),
        layers=[layer], params=params, frozen=set(), options={},
    )


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="learning rate"):
            training.TrainConfig(lr=0.0)
        with pytest.raises(ValueError, match="patience"):
            training.TrainConfig(patience=0)
        with pytest.raises(ValueError, match="batch size"):
            training.TrainConfig(batch_size=0)

    def test_full_pass_sentinel_accepted(self):
        cfg = training.TrainConfig(batch_size=training.FULL_PASS)
        assert cfg.batch_size is None


class TestDeLoss:
    def test_identity_flow_at_origin(self):
        model = flows.build_architecture("normal", 3, seed=0)
        loss = training.de_loss(model, np.zeros((1, 3)))
        assert abs(loss - 1.5 * LOG_2PI) < 1e-12

    def test_empty_batch_rejected(self):
        model = flows.build_architecture("normal", 2, seed=0)
        with pytest.raises(ValueError, match="nonempty"):
            training.de_loss(model, np.zeros((0, 2)))

    def test_gradient_matches_finite_differences(self):
        layer = flows.MarginalTtfLayer(1, "tails")
        params = layer.init_params(special.Rng(3))
        model = flows.FlowModel(
            name="tiny", d=1, base=flows.StdNormalBase(1),
            layers=[layer], params=params, frozen=set(), options={},
        )
        batch = np.array([[0.5], [-1.2], [3.0], [0.1]])

        tape = ad.Tape()
        tp = model.tape_params(tape)
        grads = ad.backward(training.de_loss(model, batch, tp))

        for key in params:
            h = 1e-6
            pp = dict(model.params)
            pm = dict(model.params)
            pp[key] = params[key] + h
            pm[key] = params[key] - h
            model.params = pp
            up = training.de_loss(model, batch)
            model.params = pm
            dn = training.de_loss(model, batch)
            model.params = dict(params)
            fd = (up - dn) / (2 * h)
            g = float(grads[key][0])
            assert abs(g - fd) / max(1.0, abs(g)) < 1e-4, key

    def test_loss_decreases_on_gaussian_data(self):
        r = np.random.default_rng(4)
        data = r.normal(size=(300, 2)) @ np.array([[1.0, 0.4], [0.0, 0.8]]) + 1.5
        model = flows.build_architecture("normal", 2, seed=1)
        cfg = training.TrainConfig(lr=5e-3, max_epochs=50, patience=100, seed=0)
        res = training.fit_density(model, data[:200], data[200:], cfg)
        assert res.trace[-1, 0] < res.trace[0, 0]


class TestAdam:
    def test_quadratic_bowl_converges(self):
        a = np.array([1.5, -0.8, 2.0])
        w = np.array([1.0, 4.0, 0.25])
        params = {"x": np.zeros(3)}
        state = training.adam_init(params)
        for _ in range(2000):
            params = training.adam_step(params, {"x": w * (params["x"] - a)}, state, 0.05)
        assert np.max(np.abs(params["x"] - a)) < 1e-6

    def test_zero_gradient_leaves_params_unchanged(self):
        params = {"x": np.array([1.0, -2.0])}
        state = training.adam_init(params)
        out = training.adam_step(params, {"x": np.zeros(2)}, state, 0.1)
        np.testing.assert_array_equal(out["x"], params["x"])

    def test_clip_applied_before_moment_update(self):
        g = np.array([6.0, 8.0])  # norm 10, clipped to norm 5
        params = {"x": np.zeros(2)}
        state = training.adam_init(params)
        training.adam_step(params, {"x": g.copy()}, state, 0.01, clip_norm=5.0)
        np.testing.assert_allclose(state["m"]["x"], 0.1 * (g * 0.5), atol=1e-15)
        np.testing.assert_allclose(state["v"]["x"], 0.001 * (g * 0.5) ** 2, atol=1e-15)

    def test_non_finite_gradient_skips_step(self):
        params = {"x": np.array([1.0]), "y": np.array([2.0])}
        state = training.adam_init(params)
        out = training.adam_step(
            params, {"x": np.array([np.nan]), "y": np.array([0.5])}, state, 0.1
        )
        np.testing.assert_array_equal(out["x"], params["x"])
        np.testing.assert_array_equal(out["y"], params["y"])
        assert state["skipped"] == 1
        assert state["t"] == 0
        np.testing.assert_array_equal(state["m"]["y"], 0.0)

    def test_missing_gradient_passes_parameter_through(self):
        params = {"x": np.array([1.0]), "frozen": np.array([7.0])}
        state = training.adam_init(params)
        out = training.adam_step(params, {"x": np.array([0.3])}, state, 0.1)
        np.testing.assert_array_equal(out["frozen"], params["frozen"])
        assert out["x"][0] != params["x"][0]


class TestElboGradientStep:
    def test_gradient_mean_zero_at_optimum(self):
        # identity-initialised flow equals the N(0,I) target: every
        # parameter's gradient should average to zero across estimates
        model = flows.build_architecture("normal", 2, seed=0)
        rng = special.Rng(5)
        sums, sqs = {}, {}
        reps = 200
        for _ in range(reps):
            st = training.elbo_gradient_step(model, quad_target(0.5), 100, rng)
            for k, g in st.grads.items():
                sums[k] = sums.get(k, 0.0) + g
                sqs[k] = sqs.get(k, 0.0) + g * g
        for k in sums:
            mean = sums[k] / reps
            var = np.maximum(sqs[k] / reps - mean**2, 0.0)
            se = np.sqrt(var / reps)
            assert np.all(np.abs(mean) <= 3 * se + 1e-12), k

    def test_sample_count_validated(self):
        model = flows.build_architecture("normal", 2, seed=0)
        with pytest.raises(ValueError):
            training.elbo_gradient_step(model, quad_target(0.5), 0, special.Rng(0))

    def test_non_finite_target_drops_samples(self):
        model = flows.build_architecture("normal", 2, seed=0)

        def patchy(x):
            vals = quad_target(0.5)(x)
            if isinstance(vals, ad.Var):
                first = np.asarray(x.value)[:, 0]
                return ad.where_mask(first < 0.5, vals, np.nan)
            return np.where(np.asarray(x)[:, 0] < 0.5, vals, np.nan)

        st = training.elbo_gradient_step(model, patchy, 400, special.Rng(7))
        assert st.dropped > 0
        assert st.grads is not None
        assert all(np.all(np.isfinite(g)) for g in st.grads.values())

    def test_all_dropped_signals_divergence(self):
        model = flows.build_architecture("normal", 2, seed=0)

        def hostile(x):
            vals = quad_target(0.5)(x)
            if isinstance(vals, ad.Var):
                n = np.asarray(x.value).shape[0]
                return ad.where_mask(np.zeros(n, dtype=bool), vals, np.nan)
            return np.full(np.asarray(x).shape[0], np.nan)

        st = training.elbo_gradient_step(model, hostile, 50, special.Rng(7))
        assert st.grads is None


class TestFitDensity:
    def test_flat_validation_stops_after_patience(self):
        model = flows.build_architecture("normal", 1, seed=0)
        model.frozen = set(model.params)  # nothing trains: loss exactly flat
        data = np.random.default_rng(0).normal(size=(50, 1))
        cfg = training.TrainConfig(lr=1e-3, max_epochs=10_000, patience=100, seed=0)
        res = training.fit_density(model, data, data, cfg)
        assert res.epochs == 101
        assert not res.diverged

    def test_synthetic_heavy_tail_fit_beats_two_nats(self):
        tr, va, te, _ = experiments.gen_synthetic_de(
            experiments.SyntheticDeSpec(5, 2.0, n=5000, seed=0)
        )
        model = experiments._build_for_synthetic("TTF", 5, 2.0, 0)
        cfg = training.TrainConfig(lr=5e-3, max_epochs=600, patience=100, seed=0)
        res = training.fit_density(model, tr, va, cfg)
        nll_per_dim = float(training.de_loss(model, te)) / te.shape[0] / 5
        assert not res.diverged
        assert nll_per_dim < 2.0

    def test_same_seed_reproduces_trace(self):
        r = np.random.default_rng(1)
        data = r.normal(size=(200, 2))
        cfg = training.TrainConfig(lr=5e-3, max_epochs=20, patience=100, seed=3)
        traces = []
        for _ in range(2):
            model = flows.build_architecture("TTF", 2, seed=4)
            res = training.fit_density(model, data[:150], data[150:], cfg)
            traces.append(res.trace)
        np.testing.assert_array_equal(traces[0], traces[1])

    def test_model_left_at_best_validation_params(self):
        r = np.random.default_rng(2)
        data = r.normal(size=(120, 2)) + 0.7
        model = flows.build_architecture("normal", 2, seed=5)
        cfg = training.TrainConfig(lr=1e-2, max_epochs=40, patience=100, seed=0)
        res = training.fit_density(model, data[:80], data[80:], cfg)
        for k, v in res.best_params.items():
            np.testing.assert_array_equal(model.params[k], v)
        valid_now = float(training.de_loss(model, data[80:])) / 40
        assert abs(valid_now - res.best_valid_loss) < 1e-12

    def test_huge_validation_loss_flags_divergence(self):
        model = flows.build_architecture("normal", 1, seed=0)
        train = np.random.default_rng(0).normal(size=(50, 1))
        valid = np.full((10, 1), 1e6)
        cfg = training.TrainConfig(lr=1e-3, max_epochs=3, patience=100, seed=0)
        res = training.fit_density(model, train, valid, cfg)
        assert res.diverged

    def test_trace_file_schema(self, tmp_path):
        model = flows.build_architecture("normal", 1, seed=0)
        data = np.random.default_rng(0).normal(size=(60, 1))
        path = str(tmp_path / "trace.csv")
        cfg = training.TrainConfig(lr=1e-3, max_epochs=5, patience=100, seed=0)
        res = training.fit_density(model, data[:40], data[40:], cfg, trace_path=path)
        lines = open(path).read().strip().split("\n")
        assert lines[0] == "epoch,train_loss,valid_loss"
        assert len(lines) == res.epochs + 1
        first = lines[1].split(",")
        assert int(first[0]) == 1
        assert float(first[1]) == res.trace[0, 0]  # repr round-trips exactly


class TestFitVi:
    def test_affine_flow_recovers_standard_normal(self):
        model = affine_1d([0.8, 0.4])
        cfg = training.TrainConfig(lr=1e-2, batch_size=100, max_epochs=800,
                                   patience=1, seed=2)
        res = training.fit_vi(model, quad_target(0.5), cfg)
        b3 = model.params["affine.cond.b3"]
        assert not res.diverged
        assert abs(b3[0]) < 0.05
        assert abs(np.exp(b3[1]) - 1.0) < 0.05

    def test_smoothed_elbo_trace_non_decreasing(self):
        model = affine_1d([0.8, 0.4])
        cfg = training.TrainConfig(lr=1e-2, batch_size=100, max_epochs=800,
                                   patience=1, seed=2)
        res = training.fit_vi(model, quad_target(0.5), cfg)
        window_means = (-res.trace[:, 0]).reshape(8, 100).mean(axis=1)
        assert np.all(np.diff(window_means) > -0.01)
        assert window_means[-1] > window_means[0]

    def test_elbo_at_optimum_estimates_log_normalizer(self):
        # target exp(-x^2/8) integrates to 2*sqrt(2*pi)
        model = affine_1d([0.0, 0.0], seed=4)
        cfg = training.TrainConfig(lr=1e-2, batch_size=100, max_epochs=1500,
                                   patience=1, seed=5)
        training.fit_vi(model, quad_target(0.125), cfg)
        step = training.elbo_gradient_step(model, quad_target(0.125), 20_000,
                                           special.Rng(77))
        log_z = np.log(2.0) + 0.5 * np.log(2 * np.pi)
        assert abs(step.elbo - log_z) < 0.02

    def test_near_gaussian_target_reaches_high_ess(self):
        target = lambda x: experiments.vi_target_log_density(x, 5, 30.0)
        model = experiments._build_for_synthetic("TTFfix", 5, 30.0, 0)
        cfg = experiments.vi_train_config(0, 30.0, iterations=2000)
        res = training.fit_vi(model, target, cfg)
        diag = experiments.compute_vi_diagnostics(
            model, target, 10_000, special.Rng(0).child(991)
        )
        assert not res.diverged
        assert diag.ess_e >= 0.7

    def test_frozen_tail_parameters_never_move(self):
        model = experiments._build_for_synthetic("TTFfix", 2, 2.0, 0)
        lp = model.params["tails.lp_raw"].copy()
        ln = model.params["tails.ln_raw"].copy()
        step = training.elbo_gradient_step(model, quad_target(0.5), 50, special.Rng(1))
        assert "tails.lp_raw" not in step.grads
        cfg = training.TrainConfig(lr=1e-2, batch_size=50, max_epochs=100,
                                   patience=1, seed=0)
        training.fit_vi(model, quad_target(0.5), cfg)
        np.testing.assert_array_equal(model.params["tails.lp_raw"], lp)
        np.testing.assert_array_equal(model.params["tails.ln_raw"], ln)

    def test_hostile_target_exhausts_retry_budget(self):
        def hostile(x):
            vals = quad_target(0.5)(x)
            if isinstance(vals, ad.Var):
                n = np.asarray(x.value).shape[0]
                return ad.where_mask(np.zeros(n, dtype=bool), vals, np.nan)
            return np.full(np.asarray(x).shape[0], np.nan)

        model = flows.build_architecture("normal", 2, seed=0)
        before = {k: v.copy() for k, v in model.params.items()}
        cfg = training.TrainConfig(lr=1e-3, batch_size=20, max_epochs=50,
                                   patience=1, seed=0)
        res = training.fit_vi(model, hostile, cfg)
        assert res.diverged
        assert res.epochs == 3  # retry budget 5 -> 2 -> 1 -> 0
        assert np.all(np.isnan(res.trace))
        for k, v in before.items():
            np.testing.assert_array_equal(model.params[k], v)

    def test_same_seed_reproduces_trace(self):
        traces = []
        for _ in range(2):
            model = affine_1d([0.5, 0.1])
            cfg = training.TrainConfig(lr=1e-2, batch_size=50, max_epochs=60,
                                       patience=1, seed=9)
            traces.append(training.fit_vi(model, quad_target(0.5), cfg).trace)
        np.testing.assert_array_equal(traces[0], traces[1])
