"""Experiment configuration, dataset synthesis and CSV ingestion."""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from config import get_config
from models import Dataset, ModelKind, ModelSpec
from utils.diagnostics import GridSpec
from utils.dynamics import RandomStream
from utils.errors import ConfigError, DataError, SimulationError
from utils.estimators import EstimatorKind
from utils.federation import (
    FederationConfig,
    LocalSGLDConfig,
    Shard,
    ShardStrategy,
    ShardStrategyKind,
    make_shards,
    shard_probabilities,
)
from utils.storage import read_csv_dataset, read_json

logger = logging.getLogger(__name__)

# Streams used outside of chains; chain streams are 2c and 2c+1
SYNTH_STREAM = 1_000_001
INGEST_STREAM = 1_000_002
MOMENTS_STREAM = 1_000_003


class SurrogateSourceKind(str, Enum):
    ANALYTIC = "Analytic"
    LOCAL_SGLD = "LocalSGLD"
    FROM_FILE = "FromFile"


@dataclass(frozen=True)
class SurrogateSource:
    kind: SurrogateSourceKind = SurrogateSourceKind.ANALYTIC
    path: Optional[str] = None
    precision_scale: str = "total"
    jitter: float = 1e-6
    n_samples: int = 3000
    diagonal_only: bool = False
    local: LocalSGLDConfig = field(default_factory=LocalSGLDConfig)

    def __post_init__(self):
        object.__setattr__(self, 'kind', SurrogateSourceKind(self.kind))
        if self.kind is SurrogateSourceKind.FROM_FILE and not self.path:
            raise ConfigError("FromFile surrogate source needs a path")
        if self.precision_scale not in ('total', 'shard'):
            raise ConfigError(f"precision_scale must be 'total' or 'shard', got {self.precision_scale}")

    @classmethod
    def from_dict(cls, data):
        return cls(
            kind=data.get('source', data.get('kind', 'Analytic')),
            path=data.get('path'),
            precision_scale=data.get('precision_scale', 'total'),
            jitter=float(data.get('jitter', 1e-6)),
            n_samples=int(data.get('n_samples', 3000)),
            diagonal_only=bool(data.get('diagonal_only', False)),
            local=LocalSGLDConfig.from_dict(data.get('local_sgld', {})),
        )

    def to_dict(self):
        return {
            'source': self.kind.value,
            'path': self.path,
            'precision_scale': self.precision_scale,
            'jitter': self.jitter,
            'n_samples': self.n_samples,
            'diagonal_only': self.diagonal_only,
            'local_sgld': self.local.to_dict(),
        }


@dataclass(frozen=True)
class DiagnosticsConfig:
    mse: bool = True
    test_function: str = 'identity'
    checkpoints: int = 50
    moments_theta: Optional[tuple] = None
    moments_batch_size: int = 5
    moments_draws: int = 10_000
    grid: Optional[GridSpec] = None
    heldout: bool = False

    @classmethod
    def from_dict(cls, data):
        grid = data.get('grid')
        moments = data.get('moments', {})
        return cls(
            mse=bool(data.get('mse', True)),
            test_function=data.get('test_function', 'identity'),
            checkpoints=int(data.get('checkpoints', 50)),
            moments_theta=tuple(moments['theta']) if moments.get('theta') is not None else None,
            moments_batch_size=int(moments.get('batch_size', 5)),
            moments_draws=int(moments.get('n_draws', 10_000)),
            grid=GridSpec(grid.get('lower', -8.0), grid.get('upper', 8.0), int(grid.get('resolution', 161)))
            if grid else None,
            heldout=bool(data.get('heldout', False)),
        )

    def to_dict(self):
        payload = {
            'mse': self.mse,
            'test_function': self.test_function,
            'checkpoints': self.checkpoints,
            'heldout': self.heldout,
        }
        if self.moments_theta is not None:
            payload['moments'] = {'theta': list(self.moments_theta), 'batch_size': self.moments_batch_size,
                                  'n_draws': self.moments_draws}
        if self.grid is not None:
            payload['grid'] = self.grid.to_dict()
        return payload


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    federation: FederationConfig
    synth: dict = field(default_factory=dict)
    shards: dict = field(default_factory=dict)
    surrogates: Optional[SurrogateSource] = None
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    output_dir: str = 'results'
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        kind = self.model.kind
        if self.federation.estimator is EstimatorKind.CGDSGLD and self.surrogates is None:
            raise ConfigError("CGDSGLD requires a surrogate source")
        analytic_models = (ModelKind.GAUSSIAN_MEAN, ModelKind.BAYES_LIN_REG)
        if self.surrogates is not None and self.surrogates.kind is SurrogateSourceKind.ANALYTIC \
                and kind not in analytic_models:
            raise ConfigError(f"analytic surrogates are not available for {kind.value}")
        if self.diagnostics.mse and kind not in analytic_models:
            raise ConfigError(f"MSE diagnostics need an analytic posterior, {kind.value} has none")
        if self.diagnostics.moments_theta is not None and len(self.diagnostics.moments_theta) != self.model.dimension:
            raise ConfigError("moments theta does not match the model dimension")

    @property
    def data_dir(self):
        return Path(self.output_dir) / 'data'

    @property
    def surrogate_dir(self):
        return Path(self.output_dir) / 'surrogates'

    @property
    def trace_dir(self):
        return Path(self.output_dir) / 'traces'

    @property
    def report_dir(self):
        return Path(self.output_dir) / 'reports'

    def to_dict(self):
        return {
            'model': self.model.to_dict(),
            'federation': self.federation.to_dict(),
            'synth': self.synth,
            'shards': self.shards,
            'surrogates': None if self.surrogates is None else self.surrogates.to_dict(),
            'diagnostics': self.diagnostics.to_dict(),
            'output_dir': str(self.output_dir),
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data, seed=None, output_dir=None):
        data = dict(data)
        try:
            seed = int(seed if seed is not None else data.get('seed', 0))
            federation = dict(data.get('federation', {}))
            federation['seed'] = seed
            surrogates = data.get('surrogates')
            return cls(
                model=ModelSpec.from_dict(data['model']),
                federation=FederationConfig.from_dict(federation),
                synth=dict(data.get('synth', {})),
                shards=dict(data.get('shards', {})),
                surrogates=SurrogateSource.from_dict(surrogates) if surrogates else None,
                diagnostics=DiagnosticsConfig.from_dict(data.get('diagnostics', {})),
                output_dir=str(output_dir or data.get('output_dir', 'results')),
                seed=seed,
            )
        except KeyError as exc:
            raise ConfigError(f"experiment config is missing {exc}") from exc
        except SimulationError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc


def resolve_output_dir(cli_value=None, file_value=None, env_value=None):
    """--out beats CGDSGLD_OUTPUT_DIR beats the config file."""
    env_value = get_config().OUTPUT_DIR if env_value is None else env_value
    return cli_value or env_value or file_value or 'results'


def load_experiment(path, seed=None, output_dir=None):
    data = read_json(path) if not isinstance(path, dict) else path
    if not isinstance(data, dict):
        raise ConfigError("experiment config must be a JSON object")
    out = resolve_output_dir(output_dir, data.get('output_dir'))
    return ExperimentConfig.from_dict(data, seed=seed, output_dir=out)


def experiment_hash(manifest):
    """Identity of the model and dataset a run belongs to."""
    payload = {key: manifest.get(key) for key in ('model', 'sizes', 'probs', 'seed', 'preset')}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


# -----------------------------------------------------------------------
# Synthesis
# -----------------------------------------------------------------------

class SynthPreset(str, Enum):
    BLOBS_2D = "Blobs2D"
    BERNOULLI_COINS = "BernoulliCoins"
    LINREG_SYNTHETIC = "LinRegSynthetic"


def synth_blobs(rng, n_shards=10, shard_size=200, box=6.0, dimension=2, probs=None):
    """Shards drawn from N(mu_s, I) with mu_s uniform on the [-box, box] square."""
    means = rng.uniform(-box, box, size=(n_shards, dimension))
    shards = make_shards(None, ShardStrategy.by_means(means, shard_size), n_shards, rng, probs=probs)
    spec = ModelSpec(ModelKind.GAUSSIAN_MEAN, dimension)
    return spec, shards, None, {'shard_means': means.tolist()}


def synth_coins(rng, means=(0.1, 0.5, 0.9), shard_size=10, probs=None):
    """Bernoulli shards realising the given means as exact counts of ones."""
    parts = []
    for mean in means:
        ones = int(round(mean * shard_size))
        parts.append(Dataset.from_targets([1.0] * ones + [0.0] * (shard_size - ones)))
    shard_probs = shard_probabilities([len(p) for p in parts], probs)
    shards = [Shard(s, part, shard_probs[s]) for s, part in enumerate(parts)]
    return ModelSpec(ModelKind.BERNOULLI_COIN, 1), shards, None, {'shard_means': list(means)}


def synth_linreg(rng, n_shards=10, n_train=1000, n_heldout=200, dimension=3, noise_scale=1.0,
                 prior_precision=1.0, a=0.5, b=0.5, separation=1.5, spread=0.5, probs=None):
    """Linear regression data from a two-component feature mixture, sharded by component."""
    beta = rng.normal(dimension)
    centre = np.zeros(dimension)
    centre[:min(2, dimension)] = separation

    def draw(n):
        component = (rng.uniform(size=n) < 0.5).astype(int)
        features = np.where(component[:, None] == 1, centre, -centre) + spread * rng.normal((n, dimension))
        targets = features @ beta + noise_scale * rng.normal(n)
        return Dataset(features, targets), component

    pooled, component = draw(n_train)
    heldout, _ = draw(n_heldout)
    shards = make_shards(pooled, ShardStrategy.label_beta(a, b), n_shards, rng, labels=component, probs=probs)
    spec = ModelSpec(ModelKind.BAYES_LIN_REG, dimension, prior_precision=prior_precision, noise_scale=noise_scale)
    return spec, shards, heldout, {'beta': beta.tolist()}


SYNTHESIZERS = {
    SynthPreset.BLOBS_2D: synth_blobs,
    SynthPreset.BERNOULLI_COINS: synth_coins,
    SynthPreset.LINREG_SYNTHETIC: synth_linreg,
}


def synthesize(preset, params=None, seed=0):
    """Generate (model spec, shards, held-out set, extra manifest fields) for a preset."""
    preset = SynthPreset(preset)
    params = dict(params or {})
    if 'n_shards' in params and preset is SynthPreset.BERNOULLI_COINS:
        n_shards = int(params.pop('n_shards'))
        means = params.get('means', (0.1, 0.5, 0.9))
        if n_shards != len(means):
            if n_shards != 1:
                raise ConfigError("BernoulliCoins takes one mean per shard")
            # single shard holding all coins
            shard_size = int(params.get('shard_size', 10))
            ones = sum(int(round(m * shard_size)) for m in means)
            total = shard_size * len(means)
            params = {'means': (ones / total,), 'shard_size': total}
    rng = RandomStream(seed, SYNTH_STREAM)
    try:
        spec, shards, heldout, extra = SYNTHESIZERS[preset](rng, **params)
    except TypeError as exc:
        raise ConfigError(f"invalid parameters for {preset.value}: {exc}") from exc
    extra = {'preset': preset.value, 'params': params, **extra}
    logger.info(f"Synthesised {preset.value}: {len(shards)} shards, sizes {[s.size for s in shards]}")
    return spec, shards, heldout, extra


def ingest_csv(path, n_shards, strategy='EqualSplit', a=0.5, b=0.5, seed=0, heldout_fraction=0.2,
               prior_precision=1.0, noise_scale=1.0, probs=None):
    """Standardise a regression CSV, split train/held-out and shard the training part."""
    data = read_csv_dataset(path, has_target=True)
    if len(data) < 2:
        raise DataError(f"{path} has too few rows to split")
    features = data.features
    scale = features.std(axis=0)
    scale[scale == 0] = 1.0
    features = (features - features.mean(axis=0)) / scale
    target_scale = data.targets.std() or 1.0
    targets = (data.targets - data.targets.mean()) / target_scale

    rng = RandomStream(seed, INGEST_STREAM)
    order = rng.permutation(len(data))
    n_heldout = max(1, int(round(heldout_fraction * len(data))))
    heldout = Dataset(features[order[:n_heldout]], targets[order[:n_heldout]])
    train = Dataset(features[order[n_heldout:]], targets[order[n_heldout:]])

    kind = ShardStrategyKind(strategy)
    shard_strategy = ShardStrategy.label_beta(a, b) if kind is ShardStrategyKind.LABEL_BETA else ShardStrategy.equal_split()
    shards = make_shards(train, shard_strategy, n_shards, rng, probs=probs)
    spec = ModelSpec(ModelKind.BAYES_LIN_REG, features.shape[1], prior_precision=prior_precision,
                     noise_scale=noise_scale)
    extra = {'source': str(path), 'strategy': kind.value, 'heldout_fraction': heldout_fraction}
    return spec, shards, heldout, extra
