"""Gaussian surrogates of shard likelihoods, kept in precision form."""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from models import ModelKind, build_model
from utils.errors import ConfigError, DataError, SurrogateFitError

logger = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-6


def _cholesky_or_none(matrix):
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        return None


@dataclass(frozen=True)
class GaussianSurrogate:
    mean: np.ndarray
    precision: np.ndarray
    diagonal_only: bool = False

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        precision = np.atleast_2d(np.asarray(self.precision, dtype=float))
        if precision.shape != (mean.shape[0], mean.shape[0]):
            raise ConfigError(f"precision shape {precision.shape} does not match mean length {mean.shape[0]}")
        if not np.allclose(precision, precision.T, rtol=1e-12, atol=1e-12):
            raise ConfigError("surrogate precision is not symmetric")
        if self.diagonal_only and np.any(precision[~np.eye(mean.shape[0], dtype=bool)] != 0):
            raise ConfigError("diagonal surrogate has non-zero off-diagonal precision")
        if _cholesky_or_none(precision) is None:
            raise ConfigError("surrogate precision is not positive definite")
        mean.setflags(write=False)
        precision.setflags(write=False)
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'precision', precision)

    @property
    def dimension(self):
        return self.mean.shape[0]

    @property
    def covariance(self):
        return np.linalg.inv(self.precision)

    def log_density(self, theta):
        diff = np.asarray(theta, dtype=float) - self.mean
        _, logdet = np.linalg.slogdet(self.precision)
        return 0.5 * (logdet - self.dimension * np.log(2 * np.pi) - diff @ self.precision @ diff)

    def to_dict(self):
        return {
            'dim': self.dimension,
            'mean': self.mean.tolist(),
            'precision': self.precision.reshape(-1).tolist(),
            'diagonal_only': self.diagonal_only,
        }

    @classmethod
    def from_dict(cls, data):
        dim = int(data['dim'])
        return cls(
            mean=np.asarray(data['mean'], dtype=float),
            precision=np.asarray(data['precision'], dtype=float).reshape(dim, dim),
            diagonal_only=bool(data.get('diagonal_only', False)),
        )


def grad_log_surrogate(q: GaussianSurrogate, theta):
    """Score of q at theta: -P (theta - mu)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != q.dimension:
        raise ConfigError(f"theta has length {theta.shape[-1]}, surrogate dimension is {q.dimension}")
    return -(theta - q.mean) @ q.precision.T


def product_of_surrogates(qs) -> GaussianSurrogate:
    """Product of Gaussian factors, renormalised."""
    qs = list(qs)
    if not qs:
        raise ConfigError("product of an empty surrogate list")
    dims = {q.dimension for q in qs}
    if len(dims) != 1:
        raise ConfigError(f"surrogates have mismatched dimensions {sorted(dims)}")

    precision = np.sum([q.precision for q in qs], axis=0)
    shift = np.sum([q.precision @ q.mean for q in qs], axis=0)
    try:
        factor = cho_factor(precision)
    except np.linalg.LinAlgError as exc:
        raise AssertionError("product precision is not positive definite") from exc
    mean = cho_solve(factor, shift)
    return GaussianSurrogate(mean, 0.5 * (precision + precision.T),
                             diagonal_only=all(q.diagonal_only for q in qs))


@dataclass(frozen=True)
class SurrogateSet:
    per_shard: tuple
    product: GaussianSurrogate

    @classmethod
    def from_shards(cls, qs):
        qs = tuple(qs)
        return cls(qs, product_of_surrogates(qs))

    def __len__(self):
        return len(self.per_shard)

    def __getitem__(self, index):
        return self.per_shard[index]

    def validate(self, tol=1e-10):
        precision = np.sum([q.precision for q in self.per_shard], axis=0)
        shift = np.sum([q.precision @ q.mean for q in self.per_shard], axis=0)
        if not np.allclose(self.product.precision, precision, atol=tol, rtol=0):
            raise ConfigError("cached product precision differs from the sum of shard precisions")
        if not np.allclose(self.product.precision @ self.product.mean, shift, atol=tol * max(1.0, np.abs(shift).max()), rtol=0):
            raise ConfigError("cached product mean is not the precision-weighted shard mean")
        return True

    def to_dict(self):
        return {
            'per_shard': [q.to_dict() for q in self.per_shard],
            'product': self.product.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        per_shard = tuple(GaussianSurrogate.from_dict(q) for q in data['per_shard'])
        if 'product' not in data:
            return cls.from_shards(per_shard)
        surrogate_set = cls(per_shard, GaussianSurrogate.from_dict(data['product']))
        surrogate_set.validate()
        return surrogate_set


def fit_from_samples(samples, diagonal_only=False, jitter=DEFAULT_JITTER) -> GaussianSurrogate:
    """Moment-match a Gaussian to posterior samples (unbiased covariance)."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples.reshape(-1, 1)
    n, d = samples.shape
    minimum = 2 if diagonal_only else d + 1
    if n < minimum:
        raise SurrogateFitError(f"need at least {minimum} samples to fit a {d}-dimensional surrogate, got {n}")

    mean = samples.mean(axis=0)
    covariance = np.atleast_2d(np.cov(samples, rowvar=False, ddof=1))
    if diagonal_only:
        covariance = np.diag(np.diag(covariance))
    covariance = covariance + jitter * np.eye(d)

    cholesky = _cholesky_or_none(covariance)
    if cholesky is None or np.any(np.diag(cholesky) <= 0):
        raise SurrogateFitError("sample covariance is singular; add jitter")
    precision = cho_solve((cholesky, True), np.eye(d))
    precision = 0.5 * (precision + precision.T)
    if diagonal_only:
        precision = np.diag(np.diag(precision))
    return GaussianSurrogate(mean, precision, diagonal_only=diagonal_only)


def analytic_surrogate(model, shard, total_size=None, precision_scale="total",
                       jitter=DEFAULT_JITTER) -> GaussianSurrogate:
    """Closed-form surrogate for the conjugate models.

    GaussianMean: N(x_bar_s, n^-1 I) with n the total data size ("total") or
    the shard size ("shard"). BayesLinReg: precision X_s^T X_s / sigma_e^2 and
    the least-squares mean.
    """
    model = build_model(model)
    data = getattr(shard, 'data', shard)
    n_shard = len(data)
    if n_shard == 0:
        raise DataError("cannot build a surrogate for an empty shard")

    if model.kind is ModelKind.GAUSSIAN_MEAN:
        if precision_scale == "total":
            scale = total_size if total_size is not None else n_shard
        elif precision_scale == "shard":
            scale = n_shard
        else:
            raise ConfigError(f"unknown precision scale '{precision_scale}'")
        return GaussianSurrogate(data.features.mean(axis=0), float(scale) * np.eye(model.dimension))

    if model.kind is ModelKind.BAYES_LIN_REG:
        X, y = data.features, data.targets
        gram = X.T @ X
        if _cholesky_or_none(gram) is None or np.linalg.matrix_rank(gram) < model.dimension:
            logger.warning(f"shard {getattr(shard, 'id', '?')} design is rank deficient, adding jitter {jitter}")
            gram = gram + jitter * np.eye(model.dimension)
            if _cholesky_or_none(gram) is None:
                raise SurrogateFitError("shard design matrix is rank deficient even after jitter")
        # (X^T X)^-1 X^T y, read as the least-squares solution
        mean = cho_solve(cho_factor(gram), X.T @ y)
        return GaussianSurrogate(mean, gram / model.noise_variance)

    raise ConfigError(f"no analytic surrogate for {model.kind.value}")


def local_sgld_fit(model, shard, sgld_config, n_samples, diagonal_only=False,
                   jitter=DEFAULT_JITTER) -> GaussianSurrogate:
    """Fit q_s from an SGLD run targeting the shard likelihood p(x_s | theta)."""
    from utils.federation import run_local_chain

    model = build_model(model)
    data = getattr(shard, 'data', shard)
    if len(data) == 0:
        raise DataError("cannot fit a surrogate for an empty shard")
    d = model.dimension
    minimum = 2 if diagonal_only else d + 1
    if n_samples < minimum:
        raise SurrogateFitError(f"need at least {minimum} samples, requested {n_samples}")

    samples = run_local_chain(model, data, sgld_config, n_samples, stream_id=getattr(shard, 'id', 0))
    logger.info(f"Fitted shard {getattr(shard, 'id', '?')} surrogate from {samples.shape[0]} local SGLD samples")
    return fit_from_samples(samples, diagonal_only=diagonal_only, jitter=jitter)
