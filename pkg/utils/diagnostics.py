"""Quantitative evaluation of chains and estimators.

- Monte Carlo MSE of running test-function averages against analytic truth.
- Exact estimator mean/variance by enumerating every (shard, mini-batch)
  outcome, with a sampled fallback for large shards.
- Grid approximations of the per-shard constants gamma_s^2 and epsilon_s^2.
- Running held-out average log-likelihood and predictive MSE.
"""
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, List, Optional

import numpy as np
import pandas as pd
from scipy.special import gammaln

from models import Dataset, ModelKind, build_model
from utils.errors import ConfigError, DataError, EnumerationCapExceeded
from utils.estimators import (
    EstimatorKind,
    cgdsgld_estimate,
    conducive_gradient,
    dsgld_estimate,
    sample_minibatch,
    sgld_estimate,
)
from utils.federation import Shard, select_client
from utils.surrogates import grad_log_surrogate

logger = logging.getLogger(__name__)

DEFAULT_ENUMERATION_CAP = 1_000_000
MAX_GRID_DIMENSION = 3


# -----------------------------------------------------------------------
# Test functions
# -----------------------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    name: str
    fn: Callable

    __test__ = False

    def __call__(self, thetas):
        return np.atleast_2d(self.fn(np.atleast_2d(thetas)))


TEST_FUNCTIONS = {
    'identity': TestFunction('identity', lambda thetas: thetas),
    'second_moment': TestFunction('second_moment', lambda thetas: thetas ** 2),
}


def register_test_function(name, fn):
    """Register a custom test function mapping (n, d) states to (n, k) values."""
    TEST_FUNCTIONS[name] = TestFunction(name, fn)
    return TEST_FUNCTIONS[name]


def get_test_function(phi):
    if isinstance(phi, TestFunction):
        return phi
    try:
        return TEST_FUNCTIONS[phi]
    except KeyError:
        raise ConfigError(f"unknown test function '{phi}'") from None


def posterior_expectation(posterior, phi):
    """phi_bar under a Gaussian posterior, for the built-in test functions."""
    phi = get_test_function(phi)
    if phi.name == 'identity':
        return posterior.mean.copy()
    if phi.name == 'second_moment':
        return np.diag(posterior.covariance) + posterior.mean ** 2
    raise ConfigError(f"no closed-form expectation for test function '{phi.name}'; pass it explicitly")


# -----------------------------------------------------------------------
# Curves
# -----------------------------------------------------------------------

@dataclass
class Curve:
    n_samples: np.ndarray
    values: np.ndarray
    name: str = 'value'

    def __len__(self):
        return self.n_samples.shape[0]

    def to_frame(self):
        return pd.DataFrame({'n_samples': self.n_samples, self.name: self.values})


def _states(trace):
    thetas = getattr(trace, 'thetas', trace)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[0] == 0 or thetas.size == 0:
        raise DataError("trace is empty")
    return thetas


def checkpoint_grid(n_total, checkpoints=None):
    """Sample counts at which curves are evaluated (1-based, increasing)."""
    if checkpoints is None:
        return np.arange(1, n_total + 1)
    if np.isscalar(checkpoints):
        count = max(1, min(int(checkpoints), n_total))
        return np.unique(np.linspace(1, n_total, count).round().astype(int))
    points = np.unique(np.asarray(checkpoints, dtype=int))
    if points.size == 0 or points[0] < 1 or points[-1] > n_total:
        raise ConfigError(f"checkpoints must lie in [1, {n_total}]")
    return points


def mc_mse(trace, phi, truth, checkpoints=None) -> Curve:
    """Squared error of the running average of phi against its posterior expectation."""
    if truth is None:
        raise ConfigError("mc_mse needs the analytic expectation of phi")
    values = get_test_function(phi)(_states(trace))
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if truth.shape[0] != values.shape[1]:
        raise ConfigError(f"truth has length {truth.shape[0]}, phi returns {values.shape[1]} values")
    n = checkpoint_grid(values.shape[0], checkpoints)
    running = np.cumsum(values, axis=0)[n - 1] / n[:, None]
    return Curve(n, np.sum((running - truth) ** 2, axis=1), 'mse')


def avg_log_likelihood(trace, model, heldout: Dataset, checkpoints=None) -> Curve:
    """Held-out log of the posterior-averaged likelihood, per datum, as samples accumulate."""
    model = build_model(model)
    if heldout is None or len(heldout) == 0:
        raise DataError("held-out set is empty")
    thetas = _states(trace)
    loglik = model.log_lik_many(thetas, heldout)
    running = np.logaddexp.accumulate(loglik, axis=0)
    n = checkpoint_grid(thetas.shape[0], checkpoints)
    return Curve(n, np.mean(running[n - 1] - np.log(n)[:, None], axis=1), 'avg_loglik')


def predictive_mse(trace, model, heldout: Dataset, checkpoints=None) -> Curve:
    """Held-out MSE of the posterior-averaged regression prediction."""
    model = build_model(model)
    if model.kind is not ModelKind.BAYES_LIN_REG:
        raise ConfigError("predictive MSE is defined for BayesLinReg only")
    if heldout is None or len(heldout) == 0:
        raise DataError("held-out set is empty")
    thetas = _states(trace)
    predictions = thetas @ heldout.features.T
    n = checkpoint_grid(thetas.shape[0], checkpoints)
    running = np.cumsum(predictions, axis=0)[n - 1] / n[:, None]
    return Curve(n, np.mean((running - heldout.targets) ** 2, axis=1), 'test_mse')


def per_chain(trace, metric, *args, **kwargs) -> List[Curve]:
    """Apply a curve metric to every chain of a merged trace separately."""
    return [metric(trace.for_chain(c), *args, **kwargs) for c in trace.chain_ids]


def replica_band(curves: List[Curve]) -> pd.DataFrame:
    """Mean and standard deviation across replica curves sharing checkpoints."""
    length = min(len(c) for c in curves)
    stacked = np.vstack([c.values[:length] for c in curves])
    name = curves[0].name
    return pd.DataFrame({
        'n_samples': curves[0].n_samples[:length],
        f'{name}_mean': stacked.mean(axis=0),
        f'{name}_std': stacked.std(axis=0, ddof=1) if len(curves) > 1 else np.zeros(length),
    })


# -----------------------------------------------------------------------
# Estimator moments
# -----------------------------------------------------------------------

@dataclass
class Moments:
    mean: np.ndarray
    variance: float
    covariance: Optional[np.ndarray] = None
    std_errors: Optional[np.ndarray] = None
    outcomes: int = 0

    def to_dict(self):
        payload = {
            'mean': self.mean.tolist(),
            'variance': float(self.variance),
            'outcomes': int(self.outcomes),
        }
        if self.covariance is not None:
            payload['covariance'] = self.covariance.tolist()
        if self.std_errors is not None:
            payload['std_errors'] = self.std_errors.tolist()
        return payload


def count_outcomes(shard_sizes, m):
    """Number of distinct with-replacement mini-batches (multisets) over all shards."""
    return sum(math.comb(n + m - 1, m) for n in shard_sizes)


def _multiset_batches(n, m):
    """Count matrix and probability of every size-m multiset drawn uniformly with replacement."""
    combos = np.array(list(combinations_with_replacement(range(n), m)), dtype=int).reshape(-1, m)
    counts = np.zeros((combos.shape[0], n))
    np.add.at(counts, (np.repeat(np.arange(combos.shape[0]), m), combos.ravel()), 1.0)
    log_weights = gammaln(m + 1) - gammaln(counts + 1).sum(axis=1) - m * np.log(n)
    return counts, np.exp(log_weights)


def _check_estimator(estimator, surrogates, n_shards):
    estimator = EstimatorKind(estimator)
    if estimator is EstimatorKind.CGDSGLD:
        if surrogates is None:
            raise ConfigError("CGDSGLD moments need surrogates")
        if len(surrogates.per_shard) != n_shards:
            raise ConfigError(f"{len(surrogates.per_shard)} surrogates for {n_shards} shards")
    return estimator


def estimator_moments_exact(model, shards, theta, m, estimator, surrogates=None, alpha=1.0,
                            cap=DEFAULT_ENUMERATION_CAP, full_covariance=False) -> Moments:
    """Exact mean and covariance trace of an estimator over every (shard, batch) outcome."""
    model = build_model(model)
    theta = model.check_theta(theta)
    estimator = _check_estimator(estimator, surrogates, len(shards))
    prior = model.grad_log_prior(theta)

    if estimator is EstimatorKind.SGLD:
        pooled = Dataset.concat([s.data for s in shards])
        groups = [(pooled, 1.0, len(pooled) / m, np.zeros_like(prior))]
    else:
        groups = []
        for shard in shards:
            if not 0 < shard.prob <= 1:
                raise ConfigError(f"shard {shard.id} probability {shard.prob} outside (0, 1]")
            offset = np.zeros_like(prior)
            if estimator is EstimatorKind.CGDSGLD and alpha != 0:
                offset = alpha * conducive_gradient(surrogates, shard.id, shard.prob, theta)
            groups.append((shard.data, shard.prob, len(shard.data) / (shard.prob * m), offset))

    outcomes = count_outcomes([len(data) for data, *_ in groups], m)
    if outcomes > cap:
        raise EnumerationCapExceeded(outcomes, cap)

    estimates, weights = [], []
    for data, prob, scale, offset in groups:
        if len(data) == 0:
            raise DataError("cannot enumerate batches of an empty shard")
        counts, batch_weights = _multiset_batches(len(data), m)
        scores = model.grad_log_lik(theta, data)
        estimates.append(prior + scale * (counts @ scores) + offset)
        weights.append(prob * batch_weights)
    estimates = np.vstack(estimates)
    weights = np.concatenate(weights)

    mean = weights @ estimates
    centred = estimates - mean
    covariance = (centred * weights[:, None]).T @ centred
    return Moments(mean, float(np.trace(covariance)),
                   covariance if full_covariance else None, outcomes=outcomes)


def estimator_moments_sampled(model, shards, theta, m, estimator, n_draws, rng, surrogates=None,
                              alpha=1.0, full_covariance=False) -> Moments:
    """Monte Carlo mean, covariance trace and standard errors of an estimator."""
    if n_draws < 2:
        raise ConfigError(f"need at least 2 draws, got {n_draws}")
    model = build_model(model)
    theta = model.check_theta(theta)
    estimator = _check_estimator(estimator, surrogates, len(shards))

    draws = np.empty((n_draws, model.dimension))
    if estimator is EstimatorKind.SGLD:
        pooled = Shard(0, Dataset.concat([s.data for s in shards]), 1.0)
        for i in range(n_draws):
            batch = sample_minibatch(pooled, m, rng)
            draws[i] = sgld_estimate(model, theta, pooled.data, batch, pooled.size).vector
    else:
        probs = [s.prob for s in shards]
        for i in range(n_draws):
            shard = shards[select_client(probs, rng)]
            batch = sample_minibatch(shard, m, rng)
            if estimator is EstimatorKind.CGDSGLD:
                draws[i] = cgdsgld_estimate(model, theta, shard, batch, shard.prob, surrogates, alpha).vector
            else:
                draws[i] = dsgld_estimate(model, theta, shard, batch, shard.prob).vector

    covariance = np.atleast_2d(np.cov(draws, rowvar=False, ddof=1))
    return Moments(draws.mean(axis=0), float(np.trace(covariance)),
                   covariance if full_covariance else None,
                   std_errors=np.sqrt(np.diag(covariance) / n_draws), outcomes=n_draws)


def estimator_moments(model, shards, theta, m, estimator, rng, surrogates=None, alpha=1.0,
                      cap=DEFAULT_ENUMERATION_CAP, n_draws=10_000) -> Moments:
    """Exact moments when enumeration fits under the cap, sampled otherwise."""
    try:
        return estimator_moments_exact(model, shards, theta, m, estimator, surrogates, alpha, cap)
    except EnumerationCapExceeded as exc:
        logger.warning(f"{exc}; falling back to {n_draws} sampled draws")
        return estimator_moments_sampled(model, shards, theta, m, estimator, n_draws, rng, surrogates, alpha)


# -----------------------------------------------------------------------
# Grid constants
# -----------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    lower: object = -8.0
    upper: object = 8.0
    resolution: int = 161

    def points(self, dimension):
        if dimension > MAX_GRID_DIMENSION:
            raise ConfigError(f"grid constants support dimension <= {MAX_GRID_DIMENSION}, got {dimension}")
        if self.resolution < 1:
            raise ConfigError("grid is empty")
        lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (dimension,))
        upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (dimension,))
        if np.any(upper < lower):
            raise ConfigError("grid upper bound below lower bound")
        axes = [np.linspace(lo, hi, self.resolution) for lo, hi in zip(lower, upper)]
        mesh = np.meshgrid(*axes, indexing='ij')
        return np.stack([axis.ravel() for axis in mesh], axis=1)

    def to_dict(self):
        return {
            'lower': np.asarray(self.lower, dtype=float).tolist(),
            'upper': np.asarray(self.upper, dtype=float).tolist(),
            'resolution': self.resolution,
        }


@dataclass
class BoundConstants:
    gamma_sq: np.ndarray
    epsilon_sq: np.ndarray
    grid: GridSpec = field(default_factory=GridSpec)

    def to_frame(self):
        return pd.DataFrame({
            'shard': np.arange(self.gamma_sq.shape[0]),
            'gamma_sq': self.gamma_sq,
            'epsilon_sq': self.epsilon_sq,
            'ratio': self.epsilon_sq / self.gamma_sq,
        })

    def to_dict(self):
        return {
            'gamma_sq': self.gamma_sq.tolist(),
            'epsilon_sq': self.epsilon_sq.tolist(),
            'grid': self.grid.to_dict(),
        }


def grid_bound_constants(model, shards, surrogates, grid: GridSpec = GridSpec(), chunk_elements=2_000_000) -> BoundConstants:
    """Grid maxima of the per-datum score bound and the surrogate residual bound, per shard."""
    model = build_model(model)
    points = grid.points(model.dimension)
    if points.shape[0] == 0:
        raise ConfigError("grid is empty")
    if len(surrogates.per_shard) != len(shards):
        raise ConfigError(f"{len(surrogates.per_shard)} surrogates for {len(shards)} shards")

    gamma_sq = np.zeros(len(shards))
    epsilon_sq = np.zeros(len(shards))
    for s, shard in enumerate(shards):
        n_s = len(shard.data)
        chunk = max(1, chunk_elements // max(1, n_s * model.dimension))
        for start in range(0, points.shape[0], chunk):
            thetas = points[start:start + chunk]
            scores = model.per_datum_grads(thetas, shard.data)
            gamma_sq[s] = max(gamma_sq[s], float(np.max(np.sum(scores ** 2, axis=-1))))
            scaled = grad_log_surrogate(surrogates.per_shard[s], thetas) / n_s
            residual = np.sum((scores - scaled[:, None, :]) ** 2, axis=-1).mean(axis=1)
            epsilon_sq[s] = max(epsilon_sq[s], float(np.max(residual)))
        logger.debug(f"shard {s}: gamma^2={gamma_sq[s]:.4g}, epsilon^2={epsilon_sq[s]:.4g}")
    return BoundConstants(gamma_sq, epsilon_sq, grid)
