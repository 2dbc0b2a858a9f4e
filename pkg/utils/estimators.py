"""Stochastic gradient estimators of the log-posterior score.

  SGLD      prior + (N / m) * sum of mini-batch scores over the pooled data
  DSGLD     prior + (N_s / (f_s m)) * sum of mini-batch scores within shard s
  CG-DSGLD  DSGLD + alpha * g_s, with the conducive gradient
            g_s = grad log q - f_s^-1 grad log q_s

Mini-batches are drawn uniformly with replacement.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from utils.errors import ConfigError, DataError
from utils.surrogates import grad_log_surrogate

logger = logging.getLogger(__name__)


class EstimatorKind(str, Enum):
    SGLD = "SGLD"
    DSGLD = "DSGLD"
    CGDSGLD = "CGDSGLD"


@dataclass(frozen=True)
class MiniBatch:
    shard_id: int
    indices: np.ndarray

    @property
    def size(self):
        return self.indices.shape[0]


@dataclass(frozen=True)
class GradientEstimate:
    vector: np.ndarray
    prior: Optional[np.ndarray] = None
    likelihood: Optional[np.ndarray] = None
    conducive: Optional[np.ndarray] = None

    @property
    def components(self):
        parts = {'prior': self.prior, 'likelihood': self.likelihood, 'conducive': self.conducive}
        return {name: value for name, value in parts.items() if value is not None}


def sample_minibatch(shard, m, rng) -> MiniBatch:
    """Draw m indices uniformly with replacement from the shard."""
    size = len(shard.data)
    if size == 0:
        raise DataError(f"cannot sample a mini-batch from empty shard {shard.id}")
    if m < 1:
        raise ConfigError(f"mini-batch size must be positive, got {m}")
    return MiniBatch(shard.id, np.asarray(rng.integers(size, size=m), dtype=int))


def _batch_score(model, theta, data, indices):
    return model.grad_log_lik(theta, data.take(indices)).sum(axis=0)


def _scaled_estimate(model, theta, data, batch, scale):
    theta = model.check_theta(theta)
    prior = model.grad_log_prior(theta)
    likelihood = scale * _batch_score(model, theta, data, batch.indices)
    return GradientEstimate(prior + likelihood, prior=prior, likelihood=likelihood)


def sgld_estimate(model, theta, full_data, batch: MiniBatch, n_total) -> GradientEstimate:
    """Mini-batch estimate over the pooled dataset of size n_total."""
    return _scaled_estimate(model, theta, full_data, batch, n_total / batch.size)


def dsgld_estimate(model, theta, shard, batch: MiniBatch, f_s) -> GradientEstimate:
    """Shard-scheduled estimate: scale N_s / (f_s m)."""
    if not 0 < f_s <= 1:
        raise ConfigError(f"shard probability must lie in (0, 1], got {f_s}")
    return _scaled_estimate(model, theta, shard.data, batch, len(shard.data) / (f_s * batch.size))


def local_likelihood_estimate(model, theta, data, batch: MiniBatch) -> GradientEstimate:
    """Likelihood-only estimate (N_s / m) * sum of scores, for shard-local surrogate fitting."""
    theta = model.check_theta(theta)
    likelihood = (len(data) / batch.size) * _batch_score(model, theta, data, batch.indices)
    return GradientEstimate(likelihood, likelihood=likelihood)


def conducive_gradient(surrogates, s, f_s, theta):
    """g_s(theta) = grad log q(theta) - f_s^-1 grad log q_s(theta)."""
    if not 0 <= s < len(surrogates.per_shard):
        raise ConfigError(f"shard index {s} out of range for {len(surrogates.per_shard)} surrogates")
    if not f_s > 0:
        raise ConfigError(f"shard probability must be > 0, got {f_s}")
    return (grad_log_surrogate(surrogates.product, theta)
            - grad_log_surrogate(surrogates.per_shard[s], theta) / f_s)


def cgdsgld_estimate(model, theta, shard, batch: MiniBatch, f_s, surrogates, alpha=1.0) -> GradientEstimate:
    """DSGLD estimate plus alpha times the conducive gradient."""
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    base = dsgld_estimate(model, theta, shard, batch, f_s)
    conducive = alpha * conducive_gradient(surrogates, shard.id, f_s, model.check_theta(theta))
    vector = base.vector if alpha == 0 else base.vector + conducive
    return GradientEstimate(vector, prior=base.prior, likelihood=base.likelihood, conducive=conducive)
