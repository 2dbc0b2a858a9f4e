"""End-to-end behaviour on the reference setups.

The blobs, exactness and regression checks run long chains and are marked slow;
deselect them with `pytest -m "not slow"`.
"""
import numpy as np
import pytest

from models import Dataset, ModelKind, ModelSpec, build_model
from tasks import fit_surrogates, run_replicas
from utils.diagnostics import (
    GridSpec,
    avg_log_likelihood,
    estimator_moments_exact,
    grid_bound_constants,
    mc_mse,
    per_chain,
)
from utils.dynamics import ChainState, RandomStream, StepSchedule, step
from utils.estimators import EstimatorKind
from utils.experiment import SurrogateSource, synthesize
from utils.federation import FederationConfig, run_simulation
from utils.storage import save_trace


def batch_means_se(draws, n_batches=50):
    """Standard error of the mean of an autocorrelated series, per column."""
    usable = draws.shape[0] - draws.shape[0] % n_batches
    means = draws[:usable].reshape(n_batches, -1, draws.shape[1]).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


@pytest.fixture(scope='module')
def blobs():
    spec, shards, _, _ = synthesize('Blobs2D', {'n_shards': 10, 'shard_size': 200}, seed=0)
    model = build_model(spec)
    surrogates, _ = fit_surrogates(model, shards, SurrogateSource(precision_scale='shard'))
    truth = model.analytic_posterior(Dataset.concat([s.data for s in shards])).mean
    return model, shards, surrogates, truth


def _blobs_config(estimator, local_updates, chains=48):
    total = 22000
    return FederationConfig(estimator=estimator, schedule=StepSchedule.constant(1e-4), batch_size=10,
                            local_updates=local_updates, rounds=total // local_updates, burn_in=2000,
                            thinning=100, seed=0, chains=chains)


def _final_mse(trace, truth):
    return np.mean([curve.values[-1] for curve in per_chain(trace, mc_mse, 'identity', truth)])


def test_coin_variance_ordering(coin_model, coin_shards):
    """Three coins at theta=0.5 with batches of five: exact variances and their ratio."""
    theta = np.array([0.5])
    sgld = estimator_moments_exact(coin_model, coin_shards, theta, 5, EstimatorKind.SGLD)
    dsgld = estimator_moments_exact(coin_model, coin_shards, theta, 5, EstimatorKind.DSGLD)
    assert sgld.variance == pytest.approx(720.0)
    # within-shard 180 * mean(4 - mu_s^2) plus between-shard 900 * var(mu_s), mu_s in {-1.6, 0, 1.6}
    assert dsgld.variance == pytest.approx(412.8 + 1536.0)
    assert dsgld.variance / sgld.variance == pytest.approx(2.7067, rel=1e-4)
    np.testing.assert_allclose(dsgld.mean, sgld.mean, atol=1e-10)


def test_zero_alpha_traces_are_identical(tmp_path, gaussian_model, gaussian_shards):
    cfg = FederationConfig(estimator='DSGLD', schedule=StepSchedule.constant(1e-3), batch_size=3,
                           local_updates=10, rounds=1000, seed=21)
    surrogates, _ = fit_surrogates(gaussian_model, gaussian_shards, SurrogateSource())
    dsgld = run_simulation(gaussian_model, gaussian_shards, cfg)
    cg = run_simulation(gaussian_model, gaussian_shards,
                        FederationConfig.from_dict(dict(cfg.to_dict(), estimator='CGDSGLD', alpha=0.0)), surrogates)
    save_trace(tmp_path / 'dsgld.csv', dsgld)
    save_trace(tmp_path / 'cg.csv', cg)
    assert len(dsgld) == 10000
    assert (tmp_path / 'dsgld.csv').read_bytes() == (tmp_path / 'cg.csv').read_bytes()


def test_blobs_grid_constants(blobs):
    model, shards, surrogates, _ = blobs
    constants = grid_bound_constants(model, shards, surrogates, GridSpec(-8.0, 8.0, 161))
    assert np.all(constants.epsilon_sq < constants.gamma_sq)
    assert np.max(constants.epsilon_sq / constants.gamma_sq) < 0.5


@pytest.mark.slow
def test_blobs_mse(blobs):
    model, shards, surrogates, truth = blobs
    cg = {L: _final_mse(run_replicas(model, shards, _blobs_config('CGDSGLD', L), surrogates), truth)
          for L in (10, 100, 1000)}
    assert max(cg.values()) < 2.0 * min(cg.values())
    dsgld = _final_mse(run_replicas(model, shards, _blobs_config('DSGLD', 1000, chains=8)), truth)
    assert dsgld > 5.0 * cg[1000]


@pytest.mark.slow
def test_sgld_with_exact_gradients_matches_posterior():
    model = build_model(ModelSpec(ModelKind.GAUSSIAN_MEAN, 2))
    data = Dataset(np.random.default_rng(0).standard_normal((200, 2)) + [1.0, -2.0])
    posterior = model.analytic_posterior(data)
    schedule = StepSchedule.constant(1e-4)

    state = ChainState.start(model.initial_theta(), RandomStream(0, 0))
    draws = np.empty((200000, 2))
    for i in range(draws.shape[0]):
        gradient = model.grad_log_prior(state.theta) + model.grad_log_lik(state.theta, data).sum(axis=0)
        state = step(state, gradient, schedule, model)
        draws[i] = state.theta
    kept = draws[20000:]

    se = batch_means_se(kept)
    assert np.all(np.abs(kept.mean(axis=0) - posterior.mean) < 3 * se)
    assert np.trace(np.cov(kept, rowvar=False)) == pytest.approx(np.trace(posterior.covariance), rel=0.2)


@pytest.mark.slow
def test_linreg_heldout_loglik():
    spec, shards, heldout, _ = synthesize('LinRegSynthetic', {'n_shards': 10}, seed=0)
    model = build_model(spec)
    surrogates, _ = fit_surrogates(model, shards, SurrogateSource())

    def final_loglik(estimator, seed):
        cfg = FederationConfig(estimator=estimator, schedule=StepSchedule.constant(1e-4), batch_size=10,
                               local_updates=500, rounds=40, burn_in=2000, thinning=10, seed=seed)
        trace = run_replicas(model, shards, cfg, surrogates if estimator == 'CGDSGLD' else None)
        return avg_log_likelihood(trace, model, heldout).values[-1]

    cg = np.array([final_loglik('CGDSGLD', seed) for seed in range(10)])
    dsgld = np.array([final_loglik('DSGLD', seed) for seed in range(10)])
    assert cg.mean() >= dsgld.mean()
    assert cg.std(ddof=1) <= dsgld.std(ddof=1)
