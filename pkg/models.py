import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from utils.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
BERNOULLI_CLAMP = 1e-6


class ModelKind(str, Enum):
    BERNOULLI_COIN = "BernoulliCoin"
    GAUSSIAN_MEAN = "GaussianMean"
    BAYES_LIN_REG = "BayesLinReg"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    dimension: int
    prior_precision: float = 1.0  # lambda, BayesLinReg only
    noise_scale: float = 1.0  # sigma_e, BayesLinReg only

    def __post_init__(self):
        object.__setattr__(self, 'kind', ModelKind(self.kind))
        if self.dimension < 1:
            raise ConfigError(f"model dimension must be positive, got {self.dimension}")
        if self.kind is ModelKind.BERNOULLI_COIN and self.dimension != 1:
            raise ConfigError("BernoulliCoin has dimension 1")
        if self.prior_precision <= 0:
            raise ConfigError(f"prior precision must be > 0, got {self.prior_precision}")
        if self.noise_scale <= 0:
            raise ConfigError(f"noise scale must be > 0, got {self.noise_scale}")

    def to_dict(self):
        return {
            'kind': self.kind.value,
            'dimension': self.dimension,
            'prior_precision': self.prior_precision,
            'noise_scale': self.noise_scale,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            kind=data['kind'],
            dimension=int(data['dimension']),
            prior_precision=float(data.get('prior_precision', 1.0)),
            noise_scale=float(data.get('noise_scale', 1.0)),
        )


@dataclass(frozen=True)
class DataPoint:
    features: np.ndarray
    target: Optional[float] = None


@dataclass(frozen=True)
class Dataset:
    """Immutable batch of data points stored column-wise."""
    features: np.ndarray
    targets: Optional[np.ndarray] = None

    def __post_init__(self):
        features = np.array(self.features, dtype=float)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        if features.ndim != 2:
            raise DataError(f"features must be a matrix, got shape {features.shape}")
        features.setflags(write=False)
        object.__setattr__(self, 'features', features)
        if self.targets is not None:
            targets = np.array(self.targets, dtype=float).reshape(-1)
            if targets.shape[0] != features.shape[0]:
                raise DataError(f"{features.shape[0]} feature rows but {targets.shape[0]} targets")
            targets.setflags(write=False)
            object.__setattr__(self, 'targets', targets)

    @classmethod
    def from_points(cls, points):
        points = list(points)
        if not points:
            return cls(np.zeros((0, 0)))
        features = np.vstack([np.atleast_1d(np.asarray(p.features, dtype=float)) for p in points])
        if points[0].target is None:
            return cls(features)
        return cls(features, np.array([p.target for p in points], dtype=float))

    @classmethod
    def from_targets(cls, targets):
        """Dataset with targets only (Bernoulli observations)."""
        targets = np.asarray(targets, dtype=float).reshape(-1)
        return cls(np.zeros((targets.shape[0], 0)), targets)

    @classmethod
    def concat(cls, datasets):
        datasets = list(datasets)
        features = np.vstack([d.features for d in datasets])
        if datasets[0].targets is None:
            return cls(features)
        return cls(features, np.concatenate([d.targets for d in datasets]))

    def __len__(self):
        return self.features.shape[0]

    def __getitem__(self, index):
        target = None if self.targets is None else float(self.targets[index])
        return DataPoint(self.features[index], target)

    @property
    def n_features(self):
        return self.features.shape[1]

    def take(self, indices):
        indices = np.asarray(indices, dtype=int)
        targets = None if self.targets is None else self.targets[indices]
        return Dataset(self.features[indices], targets)


@dataclass(frozen=True)
class AnalyticPosterior:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if not np.allclose(covariance, covariance.T):
            raise ConfigError("posterior covariance is not symmetric")
        try:
            np.linalg.cholesky(covariance)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("posterior covariance is not positive definite") from exc
        object.__setattr__(self, 'mean', np.asarray(self.mean, dtype=float).reshape(-1))
        object.__setattr__(self, 'covariance', covariance)


class Model:
    """Base class; subclasses fill in densities and per-datum scores."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec

    @property
    def dimension(self):
        return self.spec.dimension

    @property
    def kind(self):
        return self.spec.kind

    def check_theta(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.dimension:
            raise ConfigError(f"theta has length {theta.shape[0]}, model dimension is {self.dimension}")
        return theta

    def check_thetas(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if thetas.shape[1] != self.dimension:
            raise ConfigError(f"theta has length {thetas.shape[1]}, model dimension is {self.dimension}")
        return thetas

    def validate_data(self, data: Dataset):
        pass

    def initial_theta(self):
        return np.zeros(self.dimension)

    def clamp(self, theta):
        return theta

    def log_prior(self, theta):
        raise NotImplementedError

    def grad_log_prior(self, theta):
        raise NotImplementedError

    def log_lik(self, theta, data: Dataset):
        """Per-datum log-likelihoods, shape (N,)."""
        return self.log_lik_many(self.check_theta(theta)[None, :], data)[0]

    def log_lik_many(self, thetas, data: Dataset):
        """Per-datum log-likelihoods for many parameter values, shape (G, N)."""
        raise NotImplementedError

    def per_datum_grads(self, thetas, data: Dataset):
        """Per-datum scores for many parameter values, shape (G, N, d)."""
        raise NotImplementedError

    def grad_log_lik(self, theta, data: Dataset):
        """Per-datum scores at one parameter value, shape (N, d)."""
        return self.per_datum_grads(self.check_theta(theta)[None, :], data)[0]

    def analytic_posterior(self, data: Dataset) -> AnalyticPosterior:
        raise ConfigError(f"{self.kind.value} has no analytic posterior")


class BernoulliCoin(Model):
    """Coin bias theta in (0, 1) with a uniform prior."""

    def check_thetas(self, thetas):
        thetas = super().check_thetas(thetas)
        if np.any(thetas <= 0.0) or np.any(thetas >= 1.0):
            raise ConfigError("BernoulliCoin requires 0 < theta < 1")
        return thetas

    def check_theta(self, theta):
        return self.check_thetas(super().check_theta(theta)[None, :])[0]

    def validate_data(self, data):
        if data.targets is None or not np.all(np.isin(data.targets, (0.0, 1.0))):
            raise DataError("BernoulliCoin targets must be 0 or 1")

    def initial_theta(self):
        return np.full(1, 0.5)

    def clamp(self, theta):
        return np.clip(theta, BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP)

    def log_prior(self, theta):
        self.check_theta(theta)
        return 0.0

    def grad_log_prior(self, theta):
        return np.zeros_like(self.check_theta(theta))

    def log_lik_many(self, thetas, data):
        p = self.check_thetas(thetas)[:, :1]
        y = data.targets[None, :]
        return y * np.log(p) + (1.0 - y) * np.log1p(-p)

    def per_datum_grads(self, thetas, data):
        p = self.check_thetas(thetas)[:, :1]
        y = data.targets[None, :]
        return (y / p - (1.0 - y) / (1.0 - p))[:, :, None]


class GaussianMean(Model):
    """Unknown mean of N(theta, I) observations under a N(0, I) prior."""

    def validate_data(self, data):
        if data.n_features != self.dimension:
            raise DataError(f"GaussianMean expects {self.dimension} features, got {data.n_features}")

    def log_prior(self, theta):
        theta = self.check_theta(theta)
        return -0.5 * theta @ theta - 0.5 * self.dimension * LOG_2PI

    def grad_log_prior(self, theta):
        return -self.check_theta(theta)

    def log_lik_many(self, thetas, data):
        diff = data.features[None, :, :] - self.check_thetas(thetas)[:, None, :]
        return -0.5 * np.sum(diff ** 2, axis=-1) - 0.5 * self.dimension * LOG_2PI

    def per_datum_grads(self, thetas, data):
        return data.features[None, :, :] - self.check_thetas(thetas)[:, None, :]

    def analytic_posterior(self, data):
        n = len(data)
        mean = data.features.sum(axis=0) / (n + 1) if n else np.zeros(self.dimension)
        return AnalyticPosterior(mean, np.eye(self.dimension) / (n + 1))


class BayesLinReg(Model):
    """y ~ N(beta^T x, sigma_e^2) with prior beta ~ N(0, lambda^-1 I)."""

    @property
    def noise_variance(self):
        return self.spec.noise_scale ** 2

    def validate_data(self, data):
        if data.targets is None:
            raise DataError("BayesLinReg needs a target column")
        if data.n_features != self.dimension:
            raise DataError(f"BayesLinReg expects {self.dimension} features, got {data.n_features}")

    def log_prior(self, theta):
        theta = self.check_theta(theta)
        lam = self.spec.prior_precision
        return -0.5 * lam * theta @ theta + 0.5 * self.dimension * (np.log(lam) - LOG_2PI)

    def grad_log_prior(self, theta):
        return -self.spec.prior_precision * self.check_theta(theta)

    def log_lik_many(self, thetas, data):
        resid = data.targets[None, :] - self.check_thetas(thetas) @ data.features.T
        return -0.5 * resid ** 2 / self.noise_variance - 0.5 * (LOG_2PI + np.log(self.noise_variance))

    def per_datum_grads(self, thetas, data):
        resid = data.targets[None, :] - self.check_thetas(thetas) @ data.features.T
        return resid[:, :, None] * data.features[None, :, :] / self.noise_variance

    def analytic_posterior(self, data):
        X, y = data.features, data.targets
        precision = self.spec.prior_precision * np.eye(self.dimension) + X.T @ X / self.noise_variance
        factor = cho_factor(precision)
        mean = cho_solve(factor, X.T @ y / self.noise_variance)
        covariance = cho_solve(factor, np.eye(self.dimension))
        return AnalyticPosterior(mean, 0.5 * (covariance + covariance.T))


MODEL_CLASSES = {
    ModelKind.BERNOULLI_COIN: BernoulliCoin,
    ModelKind.GAUSSIAN_MEAN: GaussianMean,
    ModelKind.BAYES_LIN_REG: BayesLinReg,
}


def build_model(spec) -> Model:
    if isinstance(spec, Model):
        return spec
    if isinstance(spec, dict):
        spec = ModelSpec.from_dict(spec)
    return MODEL_CLASSES[spec.kind](spec)


def grad_log_prior(model, theta):
    """Gradient of the log-prior at theta."""
    return build_model(model).grad_log_prior(theta)


def grad_log_lik_datum(model, theta, x: DataPoint):
    """Gradient of log p(x | theta) for a single datum."""
    model = build_model(model)
    data = Dataset(np.atleast_1d(np.asarray(x.features, dtype=float)).reshape(1, -1),
                   None if x.target is None else [x.target])
    model.validate_data(data)
    return model.grad_log_lik(theta, data)[0]


def analytic_posterior(model, data: Dataset) -> AnalyticPosterior:
    return build_model(model).analytic_posterior(data)


def log_lik_datum(model, theta, x: DataPoint):
    """log p(x | theta) for a single datum."""
    model = build_model(model)
    data = Dataset(np.atleast_1d(np.asarray(x.features, dtype=float)).reshape(1, -1),
                   None if x.target is None else [x.target])
    model.validate_data(data)
    return float(model.log_lik(theta, data)[0])
