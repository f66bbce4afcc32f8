"""Tail-index estimation tests: Hill estimator, double-bootstrap k selection,
profile-likelihood GPD fits, and per-dimension marginal tail estimation."""

import numpy as np
import pytest

from tailflow import experiments, special, tailest


def pareto_sample(seed, n, gamma=0.5):
    """Exact Pareto draws with tail index gamma via the inverse cdf."""
    u = special.Rng(seed).uniform(size=n)
    return (1.0 - u) ** (-gamma)


def gpd_sample(seed, n, shape, scale):
    u = special.Rng(seed).uniform(size=n)
    return scale * ((1.0 - u) ** (-shape) - 1.0) / shape


class TestHillEstimator:
    def test_exact_pareto(self):
        x = pareto_sample(42, 100_000)
        assert abs(tailest.hill_estimator(x, 1000) - 0.5) < 0.05

    def test_hand_computed_value(self):
        # window above the 3rd largest of [1,2,4,8]: mean(log 4, log 8) - log 2
        got = tailest.hill_estimator(np.array([1.0, 2.0, 4.0, 8.0]), 2)
        assert abs(got - 1.5 * np.log(2.0)) < 1e-14

    def test_all_equal_gives_zero(self):
        assert tailest.hill_estimator(np.full(100, 3.7), 10) == 0.0

    def test_student_t_absolute_values(self):
        x = np.abs(special.Rng(7).student_t(1.0, 1_000_000))
        assert abs(tailest.hill_estimator(x, 4000) - 1.0) < 0.1

    def test_unsorted_input_accepted(self):
        x = pareto_sample(1, 5000)
        r = np.random.default_rng(0)
        a = tailest.hill_estimator(x, 200)
        b = tailest.hill_estimator(r.permutation(x), 200)
        assert a == b

    def test_validation(self):
        x = pareto_sample(2, 1000)
        with pytest.raises(ValueError, match="k >= 2"):
            tailest.hill_estimator(x, 1)
        with pytest.raises(ValueError, match="below the sample count"):
            tailest.hill_estimator(x, 1000)
        with pytest.raises(ValueError, match="strictly positive"):
            tailest.hill_estimator(np.array([-1.0, 0.5, 1.0, 2.0]), 3)


class TestHillDoubleBootstrap:
    def test_exact_pareto(self):
        x = pareto_sample(3, 50_000)
        res = tailest.hill_double_bootstrap(x, special.Rng(11))
        assert abs(res.shape - 0.5) < 0.07
        assert not res.light_tailed
        assert not res.fallback
        assert 2 <= res.k < 50_000

    def test_gaussian_flagged_light(self):
        x = np.abs(special.Rng(5).normal(50_000))
        res = tailest.hill_double_bootstrap(x, special.Rng(12))
        assert res.light_tailed

    def test_deterministic_given_seed(self):
        x = pareto_sample(4, 2000)
        a = tailest.hill_double_bootstrap(x, special.Rng(8))
        b = tailest.hill_double_bootstrap(x, special.Rng(8))
        assert a == b

    def test_small_sample_rejected(self):
        with pytest.raises(ValueError, match="n >= 500"):
            tailest.hill_double_bootstrap(pareto_sample(0, 499))


class TestGpdFitMl:
    def test_exact_gpd(self):
        x = gpd_sample(9, 100_000, 0.5, 1.0)
        shape, scale = tailest.gpd_fit_ml(x)
        assert abs(shape - 0.5) < 0.03
        assert abs(scale - 1.0) < 0.03

    def test_exponential_is_shape_zero_limit(self):
        x = -np.log(1.0 - special.Rng(13).uniform(size=100_000))
        shape, scale = tailest.gpd_fit_ml(x)
        assert abs(shape) < 0.03
        assert abs(scale - 1.0) < 0.03

    def test_likelihood_at_fit_beats_truth(self):
        x = gpd_sample(9, 5000, 0.5, 1.0)
        shape, scale = tailest.gpd_fit_ml(x)
        ll_fit = float(np.sum(tailest.gpd_log_density(x, shape, scale)))
        ll_true = float(np.sum(tailest.gpd_log_density(x, 0.5, 1.0)))
        assert ll_fit >= ll_true - 1e-9

    def test_degenerate_sample_rejected(self):
        with pytest.raises(tailest.GpdFitError, match="degenerate"):
            tailest.gpd_fit_ml(np.full(100, 2.0))

    def test_validation(self):
        with pytest.raises(ValueError, match="at least 30"):
            tailest.gpd_fit_ml(np.linspace(0.1, 1.0, 29))
        with pytest.raises(ValueError, match="strictly positive"):
            tailest.gpd_fit_ml(np.linspace(-0.5, 1.0, 50))


class TestGpdLogDensity:
    def test_shape_zero_is_exponential(self):
        x = np.linspace(0.0, 5.0, 11)
        got = tailest.gpd_log_density(x, 0.0, 2.0)
        np.testing.assert_allclose(got, -x / 2.0 - np.log(2.0), atol=1e-15)

    def test_integrates_to_one(self):
        from scipy.integrate import quad

        total, _ = quad(
            lambda t: np.exp(tailest.gpd_log_density(np.array([t]), 0.5, 2.0))[0],
            0.0, np.inf,
        )
        assert abs(total - 1.0) < 1e-8

    def test_negative_shape_support_boundary(self):
        # shape -0.25, scale 1: support is [0, 4)
        out = tailest.gpd_log_density(np.array([3.9, 4.0, 5.0]), -0.25, 1.0)
        assert np.isfinite(out[0])
        assert np.isnan(out[1]) and np.isnan(out[2])

    def test_bad_scale_rejected(self):
        with pytest.raises(ValueError, match="scale"):
            tailest.gpd_log_density(np.array([1.0]), 0.5, 0.0)


class TestEstimateMarginalTails:
    @staticmethod
    def _synthetic(nu, seed):
        tr, va, te, _ = experiments.gen_synthetic_de(
            experiments.SyntheticDeSpec(5, nu, n=5000, seed=seed)
        )
        return np.vstack([tr, va, te])

    def test_heavy_tailed_synthetic_recovered(self):
        est = tailest.estimate_marginal_tails(self._synthetic(1.0, 1), special.Rng(21))
        assert est.dim == 5
        assert not est.light_tailed.any()
        np.testing.assert_allclose(est.shape, 1.0, atol=0.25)

    def test_gaussian_all_light(self):
        data = special.Rng(17).normal((5000, 3))
        est = tailest.estimate_marginal_tails(data, special.Rng(22))
        assert est.light_tailed.all()
        np.testing.assert_array_equal(est.shape, tailest.LIGHT_TAIL_SHAPE)

    def test_near_gaussian_mostly_light(self):
        est = tailest.estimate_marginal_tails(self._synthetic(30.0, 1), special.Rng(23))
        assert int(est.light_tailed.sum()) >= 3

    def test_deterministic(self):
        data = self._synthetic(2.0, 2)
        a = tailest.estimate_marginal_tails(data, special.Rng(5))
        b = tailest.estimate_marginal_tails(data, special.Rng(5))
        np.testing.assert_array_equal(a.shape, b.shape)
        np.testing.assert_array_equal(a.k, b.k)

    def test_validation(self):
        with pytest.raises(ValueError, match="n x d"):
            tailest.estimate_marginal_tails(np.ones(1000))
        with pytest.raises(ValueError, match="n >= 500"):
            tailest.estimate_marginal_tails(np.ones((100, 2)))

    def test_tail_estimate_invariants(self):
        with pytest.raises(ValueError, match="nonnegative"):
            tailest.TailEstimate(
                shape=np.array([-0.1]), k=np.array([5]), light_tailed=np.array([False])
            )


class TestConsistency:
    def test_hill_error_shrinks_with_sample_size(self):
        # sqrt(n) order-statistic schedule, averaged over 20 seeds
        errs_small, errs_big = [], []
        for s in range(20):
            x = pareto_sample(100 + s, 1_000_000)
            errs_big.append(abs(tailest.hill_estimator(x, 1000) - 0.5))
            errs_small.append(abs(tailest.hill_estimator(x[:10_000], 100) - 0.5))
        assert np.mean(errs_big) < np.mean(errs_small)
