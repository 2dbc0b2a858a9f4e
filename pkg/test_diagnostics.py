import math

import numpy as np
import pytest

from models import Dataset
from utils.diagnostics import (
    Curve,
    GridSpec,
    avg_log_likelihood,
    checkpoint_grid,
    count_outcomes,
    estimator_moments,
    estimator_moments_exact,
    estimator_moments_sampled,
    get_test_function,
    grid_bound_constants,
    mc_mse,
    posterior_expectation,
    predictive_mse,
    register_test_function,
    replica_band,
)
from utils.dynamics import RandomStream
from utils.errors import ConfigError, DataError, EnumerationCapExceeded
from utils.estimators import EstimatorKind
from utils.federation import ChainTrace, Shard
from utils.surrogates import GaussianSurrogate, SurrogateSet, analytic_surrogate


def _exact_gradient(model, shards, theta):
    pooled = Dataset.concat([s.data for s in shards])
    return model.grad_log_prior(theta) + model.grad_log_lik(theta, pooled).sum(axis=0)


def _analytic_set(model, shards, scale='total'):
    total = sum(s.size for s in shards)
    return SurrogateSet.from_shards([analytic_surrogate(model, s, total_size=total, precision_scale=scale)
                                     for s in shards])


def _laplace_coin_set(shards):
    qs = []
    for shard in shards:
        p = float(np.clip(shard.data.targets.mean(), 0.05, 0.95))
        qs.append(GaussianSurrogate(np.array([p]), np.array([[shard.size / (p * (1 - p))]])))
    return SurrogateSet.from_shards(qs)


def _constant_trace(theta, n):
    thetas = np.tile(np.asarray(theta, dtype=float), (n, 1))
    ints = np.arange(n, dtype=np.int64)
    return ChainTrace(np.zeros(n, dtype=np.int64), ints, ints, ints + 1, thetas)


class TestCounting:

    def test_count_outcomes(self):
        assert count_outcomes([10, 10, 10], 5) == 3 * math.comb(14, 5)
        assert count_outcomes([34], 5) == 278256

    def test_cap(self, coin_model, coin_shards):
        with pytest.raises(EnumerationCapExceeded) as excinfo:
            estimator_moments_exact(coin_model, coin_shards, [0.5], 5, 'DSGLD', cap=100)
        assert excinfo.value.outcomes == 3 * math.comb(14, 5)

    def test_fallback_to_sampling(self, coin_model, coin_shards):
        moments = estimator_moments(coin_model, coin_shards, [0.5], 5, 'DSGLD', RandomStream(0, 9),
                                    cap=100, n_draws=500)
        assert moments.outcomes == 500
        assert moments.std_errors is not None


class TestUnbiasedness:
    """The exact mean of every estimator equals the full-data gradient."""

    @pytest.mark.parametrize('estimator', ['SGLD', 'DSGLD', 'CGDSGLD'])
    def test_gaussian(self, gaussian_model, gaussian_shards, estimator):
        theta = np.array([0.4, -1.3])
        surrogates = _analytic_set(gaussian_model, gaussian_shards)
        moments = estimator_moments_exact(gaussian_model, gaussian_shards, theta, 2, estimator,
                                          surrogates if estimator == 'CGDSGLD' else None)
        np.testing.assert_allclose(moments.mean, _exact_gradient(gaussian_model, gaussian_shards, theta),
                                   atol=1e-10)

    @pytest.mark.parametrize('estimator', ['SGLD', 'DSGLD', 'CGDSGLD'])
    def test_coins(self, coin_model, coin_shards, estimator):
        theta = np.array([0.3])
        surrogates = _laplace_coin_set(coin_shards) if estimator == 'CGDSGLD' else None
        moments = estimator_moments_exact(coin_model, coin_shards, theta, 3, estimator, surrogates)
        np.testing.assert_allclose(moments.mean, _exact_gradient(coin_model, coin_shards, theta), atol=1e-10)

    @pytest.mark.parametrize('estimator', ['SGLD', 'DSGLD', 'CGDSGLD'])
    def test_linreg_unequal_probabilities(self, linreg_model, linreg_shards, estimator):
        shards = [Shard(0, linreg_shards[0].data, 0.3), Shard(1, linreg_shards[1].data, 0.7)]
        theta = np.array([1.0, 0.5])
        surrogates = _analytic_set(linreg_model, shards) if estimator == 'CGDSGLD' else None
        moments = estimator_moments_exact(linreg_model, shards, theta, 2, estimator, surrogates, alpha=0.7)
        np.testing.assert_allclose(moments.mean, _exact_gradient(linreg_model, shards, theta), atol=1e-10)


class TestVariance:

    def test_exact_matches_sampled(self, gaussian_model, gaussian_shards):
        theta = np.array([0.0, 0.0])
        exact = estimator_moments_exact(gaussian_model, gaussian_shards, theta, 2, 'DSGLD', full_covariance=True)
        sampled = estimator_moments_sampled(gaussian_model, gaussian_shards, theta, 2, 'DSGLD', 40000,
                                            RandomStream(0, 3))
        np.testing.assert_allclose(sampled.mean, exact.mean, atol=5 * sampled.std_errors.max())
        assert sampled.variance == pytest.approx(exact.variance, rel=0.05)
        assert exact.variance == pytest.approx(np.trace(exact.covariance))

    def test_conducive_gradient_removes_shard_variance(self, gaussian_model, gaussian_shards):
        theta = np.array([0.0, 0.0])
        surrogates = _analytic_set(gaussian_model, gaussian_shards, scale='shard')
        dsgld = estimator_moments_exact(gaussian_model, gaussian_shards, theta, 2, 'DSGLD')
        cg = estimator_moments_exact(gaussian_model, gaussian_shards, theta, 2, 'CGDSGLD', surrogates)
        assert cg.variance < 0.5 * dsgld.variance

    def test_coin_ordering(self, coin_model, coin_shards):
        """Heterogeneous coins: scheduling shards adds variance over pooled SGLD."""
        theta = np.array([0.5])
        sgld = estimator_moments_exact(coin_model, coin_shards, theta, 5, 'SGLD')
        dsgld = estimator_moments_exact(coin_model, coin_shards, theta, 5, 'DSGLD')
        assert dsgld.variance > sgld.variance
        # single score is +-2 at 0.5, so pooled SGLD variance is 36 * 5 * 4
        assert sgld.variance == pytest.approx(720.0)

    def test_cgdsgld_needs_surrogates(self, gaussian_model, gaussian_shards):
        with pytest.raises(ConfigError):
            estimator_moments_exact(gaussian_model, gaussian_shards, np.zeros(2), 2, EstimatorKind.CGDSGLD)


class TestMonteCarloMSE:

    def test_decreases_with_samples(self, gaussian_model, gaussian_shards):
        pooled = Dataset.concat([s.data for s in gaussian_shards])
        posterior = gaussian_model.analytic_posterior(pooled)
        truth = posterior_expectation(posterior, 'identity')
        generator = np.random.default_rng(0)
        early, late = [], []
        for _ in range(50):
            draws = generator.multivariate_normal(posterior.mean, posterior.covariance, size=1000)
            curve = mc_mse(draws, 'identity', truth, checkpoints=[10, 1000])
            early.append(curve.values[0])
            late.append(curve.values[1])
        assert np.mean(late) < np.mean(early)

    def test_exact_draws_at_truth(self):
        curve = mc_mse(np.array([[1.0], [3.0]]), 'identity', [2.0])
        np.testing.assert_allclose(curve.values, [1.0, 0.0])
        np.testing.assert_array_equal(curve.n_samples, [1, 2])

    def test_second_moment_truth(self, gaussian_model, gaussian_shards):
        posterior = gaussian_model.analytic_posterior(Dataset.concat([s.data for s in gaussian_shards]))
        expected = np.diag(posterior.covariance) + posterior.mean ** 2
        np.testing.assert_allclose(posterior_expectation(posterior, 'second_moment'), expected)

    def test_requires_truth(self):
        with pytest.raises(ConfigError):
            mc_mse(np.zeros((3, 1)), 'identity', None)
        with pytest.raises(ConfigError):
            mc_mse(np.zeros((3, 2)), 'identity', [0.0])

    def test_empty_trace(self):
        with pytest.raises(DataError):
            mc_mse(np.zeros((0, 2)), 'identity', [0.0, 0.0])

    def test_custom_test_function(self):
        register_test_function('norm_sq', lambda thetas: np.sum(thetas ** 2, axis=1, keepdims=True))
        curve = mc_mse(np.array([[1.0, 1.0], [0.0, 0.0]]), 'norm_sq', [1.0])
        np.testing.assert_allclose(curve.values, [1.0, 0.0])
        with pytest.raises(ConfigError):
            get_test_function('unknown')

    def test_checkpoint_grid(self):
        np.testing.assert_array_equal(checkpoint_grid(5), [1, 2, 3, 4, 5])
        grid = checkpoint_grid(1000, 10)
        assert grid[0] == 1 and grid[-1] == 1000 and len(grid) == 10
        with pytest.raises(ConfigError):
            checkpoint_grid(10, [0, 5])


class TestHeldOut:

    def test_constant_trace_log_likelihood(self, linreg_model, linreg_shards):
        heldout = linreg_shards[1].data
        theta = np.array([0.5, -0.5])
        curve = avg_log_likelihood(_constant_trace(theta, 20), linreg_model, heldout)
        np.testing.assert_allclose(curve.values, np.mean(linreg_model.log_lik(theta, heldout)), rtol=1e-12)

    def test_constant_trace_predictive_mse(self, linreg_model, linreg_shards):
        heldout = linreg_shards[1].data
        theta = np.array([0.5, -0.5])
        curve = predictive_mse(_constant_trace(theta, 4), linreg_model, heldout, checkpoints=[4])
        residual = heldout.targets - heldout.features @ theta
        np.testing.assert_allclose(curve.values, [np.mean(residual ** 2)])

    def test_predictive_mse_is_regression_only(self, gaussian_model, gaussian_shards):
        with pytest.raises(ConfigError):
            predictive_mse(_constant_trace([0.0, 0.0], 3), gaussian_model, gaussian_shards[0].data)

    def test_empty_heldout(self, linreg_model):
        with pytest.raises(DataError):
            avg_log_likelihood(_constant_trace([0.0, 0.0], 3), linreg_model, Dataset(np.zeros((0, 2)), []))

    def test_replica_band(self):
        curves = [Curve(np.array([1, 2]), np.array([1.0, 3.0])), Curve(np.array([1, 2]), np.array([3.0, 5.0]))]
        band = replica_band(curves)
        np.testing.assert_allclose(band['value_mean'], [2.0, 4.0])
        np.testing.assert_allclose(band['value_std'], [np.sqrt(2.0), np.sqrt(2.0)])


class TestGridConstants:

    def test_points(self):
        assert GridSpec(-1.0, 1.0, 5).points(2).shape == (25, 2)
        with pytest.raises(ConfigError):
            GridSpec().points(4)
        with pytest.raises(ConfigError):
            GridSpec(1.0, -1.0, 5).points(1)

    def test_gaussian_closed_forms(self, gaussian_model, gaussian_shards):
        surrogates = _analytic_set(gaussian_model, gaussian_shards, scale='shard')
        grid = GridSpec(-2.0, 2.0, 5)
        constants = grid_bound_constants(gaussian_model, gaussian_shards, surrogates, grid)
        corners = np.array([[-2.0, -2.0], [-2.0, 2.0], [2.0, -2.0], [2.0, 2.0]])
        for s, shard in enumerate(gaussian_shards):
            x = shard.data.features
            # shard-scale surrogates make the residual independent of theta
            scatter = np.mean(np.sum((x - x.mean(axis=0)) ** 2, axis=1))
            assert constants.epsilon_sq[s] == pytest.approx(scatter, rel=1e-10)
            gamma = max(np.max(np.sum((x - c) ** 2, axis=1)) for c in corners)
            assert constants.gamma_sq[s] == pytest.approx(gamma, rel=1e-12)

    def test_refinement_never_decreases(self, gaussian_model, gaussian_shards):
        surrogates = _analytic_set(gaussian_model, gaussian_shards)
        coarse = grid_bound_constants(gaussian_model, gaussian_shards, surrogates, GridSpec(-3.0, 3.0, 4))
        fine = grid_bound_constants(gaussian_model, gaussian_shards, surrogates, GridSpec(-3.0, 3.0, 7))
        assert np.all(fine.gamma_sq >= coarse.gamma_sq)
        assert np.all(fine.epsilon_sq >= coarse.epsilon_sq)

    def test_chunking_does_not_change_result(self, gaussian_model, gaussian_shards):
        surrogates = _analytic_set(gaussian_model, gaussian_shards)
        grid = GridSpec(-3.0, 3.0, 11)
        whole = grid_bound_constants(gaussian_model, gaussian_shards, surrogates, grid)
        chunked = grid_bound_constants(gaussian_model, gaussian_shards, surrogates, grid, chunk_elements=13)
        np.testing.assert_allclose(whole.gamma_sq, chunked.gamma_sq, rtol=1e-13)
        np.testing.assert_allclose(whole.epsilon_sq, chunked.epsilon_sq, rtol=1e-13)

    def test_coin_grid_inside_domain(self, coin_model, coin_shards):
        constants = grid_bound_constants(coin_model, coin_shards, _laplace_coin_set(coin_shards),
                                         GridSpec(0.05, 0.95, 19))
        frame = constants.to_frame()
        assert list(frame.columns) == ['shard', 'gamma_sq', 'epsilon_sq', 'ratio']
        assert np.all(np.isfinite(frame[['gamma_sq', 'epsilon_sq']].to_numpy()))

    def test_surrogate_count_mismatch(self, gaussian_model, gaussian_shards):
        surrogates = _analytic_set(gaussian_model, gaussian_shards[:2])
        with pytest.raises(ConfigError):
            grid_bound_constants(gaussian_model, gaussian_shards, surrogates, GridSpec(-1.0, 1.0, 3))
