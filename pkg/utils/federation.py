"""Single-process simulation of the client/server sampling protocol.

The server holds the chain, picks a client c ~ Categorical(f), and hands the
chain over; the client runs ``local_updates`` Langevin steps on its own shard
and sends the chain back. Communication is a counted event, not I/O.

Stream layout per chain id c: stream ``2c`` drives mini-batches and injected
noise, stream ``2c + 1`` drives the server's client selection. A federation
with a single shard and f = (1) therefore reproduces serial SGLD bit for bit.
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from models import Dataset, build_model
from utils.dynamics import ChainState, RandomStream, StepSchedule, step
from utils.errors import ConfigError, DataError
from utils.estimators import (
    EstimatorKind,
    cgdsgld_estimate,
    dsgld_estimate,
    local_likelihood_estimate,
    sample_minibatch,
    sgld_estimate,
)
from utils.workflow import CommunicationLedger

logger = logging.getLogger(__name__)

PROB_TOLERANCE = 1e-12


@dataclass(frozen=True)
class Shard:
    id: int
    data: Dataset
    prob: float

    @property
    def size(self):
        return len(self.data)


def validate_shards(shards: Sequence[Shard]):
    if not shards:
        raise DataError("no shards given")
    probs = np.array([s.prob for s in shards], dtype=float)
    if np.any(probs <= 0):
        raise ConfigError(f"every shard probability must be > 0, got {probs.tolist()}")
    if abs(probs.sum() - 1.0) > PROB_TOLERANCE:
        raise ConfigError(f"shard probabilities sum to {probs.sum()!r}, not 1")
    if [s.id for s in shards] != list(range(len(shards))):
        raise ConfigError("shard ids must be 0..S-1 in order")
    for shard in shards:
        if shard.size == 0:
            raise DataError(f"shard {shard.id} is empty")


def shard_probabilities(sizes, probs=None):
    """Uniform by default, 'proportional' to shard size, or an explicit list."""
    sizes = np.asarray(sizes, dtype=float)
    if probs is None or probs == 'uniform':
        return [1.0 / len(sizes)] * len(sizes)
    if probs == 'proportional':
        return (sizes / sizes.sum()).tolist()
    probs = [float(p) for p in probs]
    if len(probs) != len(sizes):
        raise ConfigError(f"{len(probs)} shard probabilities for {len(sizes)} shards")
    return probs


@dataclass(frozen=True)
class FederationConfig:
    estimator: EstimatorKind = EstimatorKind.DSGLD
    schedule: StepSchedule = field(default_factory=lambda: StepSchedule.constant(1e-4))
    batch_size: int = 10
    local_updates: int = 1
    rounds: int = 1
    burn_in: int = 0
    thinning: int = 1
    seed: int = 0
    alpha: float = 1.0
    chains: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'estimator', EstimatorKind(self.estimator))
        if self.local_updates < 1:
            raise ConfigError(f"local_updates must be >= 1, got {self.local_updates}")
        if self.thinning < 1:
            raise ConfigError(f"thinning must be >= 1, got {self.thinning}")
        if self.burn_in < 0 or self.rounds < 0:
            raise ConfigError("burn_in and rounds must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.chains < 1:
            raise ConfigError(f"chains must be >= 1, got {self.chains}")

    @property
    def total_steps(self):
        return self.rounds * self.local_updates

    @property
    def n_kept(self):
        remaining = self.total_steps - self.burn_in
        return 0 if remaining <= 0 else -(-remaining // self.thinning)

    def to_dict(self):
        return {
            'estimator': self.estimator.value,
            'schedule': self.schedule.to_dict(),
            'batch_size': self.batch_size,
            'local_updates': self.local_updates,
            'rounds': self.rounds,
            'burn_in': self.burn_in,
            'thinning': self.thinning,
            'seed': self.seed,
            'alpha': self.alpha,
            'chains': self.chains,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        local_updates = int(data.get('local_updates', 1))
        rounds = data.get('rounds')
        if rounds is None:
            if 'total_steps' not in data:
                raise ConfigError("federation config needs 'rounds' or 'total_steps'")
            rounds = int(data['total_steps']) // local_updates
        return cls(
            estimator=data.get('estimator', 'DSGLD'),
            schedule=StepSchedule.from_dict(data.get('schedule', {'kind': 'Constant', 'h': 1e-4})),
            batch_size=int(data.get('batch_size', 10)),
            local_updates=local_updates,
            rounds=int(rounds),
            burn_in=int(data.get('burn_in', 0)),
            thinning=int(data.get('thinning', 1)),
            seed=int(data.get('seed', 0)),
            alpha=float(data.get('alpha', 1.0)),
            chains=int(data.get('chains', 1)),
        )

    def config_hash(self):
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True)
class LocalSGLDConfig:
    """Settings for the shard-local SGLD run behind a fitted surrogate."""
    schedule: StepSchedule = field(default_factory=lambda: StepSchedule.constant(1e-4))
    batch_size: int = 10
    burn_in: int = 1000
    thinning: int = 10
    seed: int = 0

    def to_dict(self):
        return {
            'schedule': self.schedule.to_dict(),
            'batch_size': self.batch_size,
            'burn_in': self.burn_in,
            'thinning': self.thinning,
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            schedule=StepSchedule.from_dict(data.get('schedule', {'kind': 'Constant', 'h': 1e-4})),
            batch_size=int(data.get('batch_size', 10)),
            burn_in=int(data.get('burn_in', 1000)),
            thinning=int(data.get('thinning', 10)),
            seed=int(data.get('seed', 0)),
        )


TRACE_COLUMNS = ['chain', 'round', 'shard', 't']


@dataclass
class ChainTrace:
    chain: np.ndarray
    round: np.ndarray
    shard: np.ndarray
    t: np.ndarray
    thetas: np.ndarray
    metadata: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, dimension, metadata=None):
        ints = np.zeros(0, dtype=np.int64)
        return cls(ints, ints.copy(), ints.copy(), ints.copy(), np.zeros((0, dimension)), dict(metadata or {}))

    def __len__(self):
        return self.thetas.shape[0]

    @property
    def dimension(self):
        return self.thetas.shape[1]

    @property
    def chain_ids(self):
        return sorted(set(self.chain.tolist()))

    def for_chain(self, chain_id):
        mask = self.chain == chain_id
        return ChainTrace(self.chain[mask], self.round[mask], self.shard[mask], self.t[mask],
                          self.thetas[mask], dict(self.metadata))

    @classmethod
    def merge(cls, traces):
        """Concatenate per-chain traces ordered by chain id."""
        traces = sorted(traces, key=lambda tr: tr.metadata.get('chain', 0))
        if not traces:
            raise DataError("nothing to merge")
        metadata = dict(traces[0].metadata)
        metadata.pop('chain', None)
        metadata['chains'] = [tr.metadata.get('chain', i) for i, tr in enumerate(traces)]
        if any('ledger' in tr.metadata for tr in traces):
            metadata['ledger'] = [tr.metadata.get('ledger') for tr in traces]
        return cls(
            np.concatenate([tr.chain for tr in traces]),
            np.concatenate([tr.round for tr in traces]),
            np.concatenate([tr.shard for tr in traces]),
            np.concatenate([tr.t for tr in traces]),
            np.vstack([tr.thetas for tr in traces]),
            metadata,
        )

    def to_frame(self):
        frame = pd.DataFrame({
            'chain': self.chain.astype(np.int64),
            'round': self.round.astype(np.int64),
            'shard': self.shard.astype(np.int64),
            't': self.t.astype(np.int64),
        })
        for j in range(self.dimension):
            frame[f'theta_{j}'] = self.thetas[:, j]
        return frame

    def save_npz(self, path):
        np.savez_compressed(path, chain=self.chain, round=self.round, shard=self.shard,
                            t=self.t, thetas=self.thetas)
        return path

    @classmethod
    def load_npz(cls, path, metadata=None):
        with np.load(path) as arrays:
            return cls(arrays['chain'], arrays['round'], arrays['shard'], arrays['t'],
                       arrays['thetas'], dict(metadata or {}))

    @classmethod
    def from_frame(cls, frame, metadata=None):
        theta_columns = sorted((c for c in frame.columns if c.startswith('theta_')),
                               key=lambda c: int(c.split('_')[1]))
        if not theta_columns:
            raise DataError("trace has no theta columns")
        return cls(
            frame['chain'].to_numpy(dtype=np.int64),
            frame['round'].to_numpy(dtype=np.int64),
            frame['shard'].to_numpy(dtype=np.int64),
            frame['t'].to_numpy(dtype=np.int64),
            frame[theta_columns].to_numpy(dtype=float),
            dict(metadata or {}),
        )


def burn_in_and_thin(n_states, burn_in, thinning):
    """Indices of the kept states among n_states, applied over the whole chain."""
    return np.arange(burn_in, n_states, thinning, dtype=np.int64)


def select_client(f, rng) -> int:
    """Server-side draw c ~ Categorical(f)."""
    f = np.asarray(f, dtype=float)
    if f.ndim != 1 or f.size == 0 or np.any(f <= 0) or abs(f.sum() - 1.0) > PROB_TOLERANCE:
        raise ConfigError(f"invalid client probabilities {f.tolist()}")
    if f.size == 1:
        return 0
    return rng.categorical(f / f.sum())


def _check_surrogates(cfg, surrogates, n_shards):
    if cfg.estimator is EstimatorKind.CGDSGLD:
        if surrogates is None:
            raise ConfigError("CGDSGLD needs surrogates")
        if len(surrogates.per_shard) != n_shards:
            raise ConfigError(f"{len(surrogates.per_shard)} surrogates for {n_shards} shards")
    elif surrogates is not None:
        raise ConfigError(f"{cfg.estimator.value} does not take surrogates")


def client_update(model, state: ChainState, shard: Shard, cfg: FederationConfig, surrogates=None):
    """Run cfg.local_updates Langevin steps on one client's shard.

    Returns the final state and the (T, d) array of visited states.
    """
    model = build_model(model)
    if cfg.estimator is EstimatorKind.SGLD:
        raise ConfigError("SGLD runs on pooled data; use run_sgld")
    if cfg.estimator is EstimatorKind.CGDSGLD and surrogates is None:
        raise ConfigError("CGDSGLD needs surrogates")
    if cfg.estimator is EstimatorKind.DSGLD and surrogates is not None:
        raise ConfigError("DSGLD does not take surrogates")

    thetas = np.empty((cfg.local_updates, model.dimension))
    for i in range(cfg.local_updates):
        batch = sample_minibatch(shard, cfg.batch_size, state.stream)
        if cfg.estimator is EstimatorKind.CGDSGLD:
            estimate = cgdsgld_estimate(model, state.theta, shard, batch, shard.prob, surrogates, cfg.alpha)
        else:
            estimate = dsgld_estimate(model, state.theta, shard, batch, shard.prob)
        state = step(state, estimate, cfg.schedule, model)
        thetas[i] = state.theta
    return state, thetas


def _trace_metadata(model, cfg, chain, **extra):
    metadata = {
        'config_hash': cfg.config_hash(),
        'seed': cfg.seed,
        'chain': chain,
        'estimator': cfg.estimator.value,
        'model': model.spec.to_dict(),
        'federation': cfg.to_dict(),
    }
    metadata.update(extra)
    return metadata


def _finalize(cfg, chain, rounds, shards_visited, ts, thetas, metadata):
    keep = burn_in_and_thin(thetas.shape[0], cfg.burn_in, cfg.thinning)
    return ChainTrace(
        np.full(keep.shape[0], chain, dtype=np.int64),
        rounds[keep], shards_visited[keep], ts[keep], thetas[keep], metadata,
    )


def run_sgld(model, data: Dataset, cfg: FederationConfig, chain=0) -> ChainTrace:
    """Serial SGLD over pooled data, laid out in rounds of cfg.local_updates steps."""
    model = build_model(model)
    model.validate_data(data)
    if len(data) == 0:
        raise DataError("cannot run SGLD on an empty dataset")
    pooled = Shard(0, data, 1.0)
    state = ChainState.start(model.initial_theta(), RandomStream(cfg.seed, 2 * chain))

    total = cfg.total_steps
    thetas = np.empty((total, model.dimension))
    rounds = np.repeat(np.arange(cfg.rounds, dtype=np.int64), cfg.local_updates)
    for i in range(total):
        batch = sample_minibatch(pooled, cfg.batch_size, state.stream)
        estimate = sgld_estimate(model, state.theta, data, batch, len(data))
        state = step(state, estimate, cfg.schedule, model)
        thetas[i] = state.theta

    metadata = _trace_metadata(model, cfg, chain)
    shards_visited = np.full(total, -1, dtype=np.int64)
    return _finalize(cfg, chain, rounds, shards_visited, np.arange(1, total + 1, dtype=np.int64),
                     thetas, metadata)


def run_simulation(model, shards: Sequence[Shard], cfg: FederationConfig, surrogates=None, chain=0) -> ChainTrace:
    """Run one chain of the federated protocol and return its burnt-in, thinned trace."""
    model = build_model(model)
    validate_shards(shards)
    for shard in shards:
        model.validate_data(shard.data)
    _check_surrogates(cfg, surrogates, len(shards))

    if cfg.estimator is EstimatorKind.SGLD:
        return run_sgld(model, Dataset.concat([s.data for s in shards]), cfg, chain)

    ledger = CommunicationLedger()
    if surrogates is not None:
        ledger.record_surrogate_exchange(len(shards))

    probs = [s.prob for s in shards]
    server_stream = RandomStream(cfg.seed, 2 * chain + 1)
    state = ChainState.start(model.initial_theta(), RandomStream(cfg.seed, 2 * chain))

    logger.info(f"Starting {cfg.estimator.value} chain {chain}: {cfg.rounds} rounds x "
                f"{cfg.local_updates} local updates over {len(shards)} shards")
    total = cfg.total_steps
    thetas = np.empty((total, model.dimension))
    rounds = np.empty(total, dtype=np.int64)
    shards_visited = np.empty(total, dtype=np.int64)
    for r in range(cfg.rounds):
        c = select_client(probs, server_stream)
        ledger.record_selection(c)
        state, visited = client_update(model, state, shards[c], cfg, surrogates)
        block = slice(r * cfg.local_updates, (r + 1) * cfg.local_updates)
        thetas[block] = visited
        rounds[block] = r
        shards_visited[block] = c
        logger.debug(f"chain {chain} round {r}: client {c}, theta={state.theta}")
    ledger.complete()

    metadata = _trace_metadata(model, cfg, chain, ledger=ledger.save_state())
    trace = _finalize(cfg, chain, rounds, shards_visited, np.arange(1, total + 1, dtype=np.int64),
                      thetas, metadata)
    logger.info(f"Finished chain {chain}: kept {len(trace)} of {total} states")
    return trace


def run_local_chain(model, data: Dataset, local_cfg: LocalSGLDConfig, n_samples, stream_id=0):
    """SGLD samples from p_s proportional to p(x_s | theta) (no prior)."""
    model = build_model(model)
    model.validate_data(data)
    shard = Shard(0, data, 1.0)
    state = ChainState.start(model.initial_theta(), RandomStream(local_cfg.seed, stream_id))
    total = local_cfg.burn_in + n_samples * local_cfg.thinning
    samples = np.empty((n_samples, model.dimension))
    kept = 0
    for i in range(total):
        batch = sample_minibatch(shard, local_cfg.batch_size, state.stream)
        estimate = local_likelihood_estimate(model, state.theta, data, batch)
        state = step(state, estimate, local_cfg.schedule, model)
        if i >= local_cfg.burn_in and (i - local_cfg.burn_in) % local_cfg.thinning == 0:
            samples[kept] = state.theta
            kept += 1
    return samples


class ShardStrategyKind(str, Enum):
    EQUAL_SPLIT = "EqualSplit"
    LABEL_BETA = "LabelBeta"
    BY_MEANS = "ByMeans"


@dataclass(frozen=True)
class ShardStrategy:
    kind: ShardStrategyKind = ShardStrategyKind.EQUAL_SPLIT
    a: float = 1.0
    b: float = 1.0
    means: Optional[tuple] = None
    shard_size: int = 200

    def __post_init__(self):
        object.__setattr__(self, 'kind', ShardStrategyKind(self.kind))
        if self.kind is ShardStrategyKind.LABEL_BETA and not (self.a > 0 and self.b > 0):
            raise ConfigError(f"LabelBeta needs a, b > 0, got a={self.a}, b={self.b}")
        if self.kind is ShardStrategyKind.BY_MEANS and not self.means:
            raise ConfigError("ByMeans needs a list of shard means")

    @classmethod
    def equal_split(cls):
        return cls(ShardStrategyKind.EQUAL_SPLIT)

    @classmethod
    def label_beta(cls, a, b):
        return cls(ShardStrategyKind.LABEL_BETA, a=a, b=b)

    @classmethod
    def by_means(cls, means, shard_size=200):
        return cls(ShardStrategyKind.BY_MEANS, means=tuple(tuple(float(v) for v in m) for m in means),
                   shard_size=shard_size)


def _largest_remainder(total, weights):
    """Split an integer total proportionally to weights."""
    weights = np.asarray(weights, dtype=float)
    raw = total * weights / weights.sum()
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind='stable')
    counts[order[:total - counts.sum()]] += 1
    return counts


def binary_labels(data: Dataset):
    """Labels LabelBeta shards on: binary targets as-is, otherwise target above its median."""
    if data.targets is None:
        raise DataError("LabelBeta sharding needs targets or explicit labels")
    if np.all(np.isin(data.targets, (0.0, 1.0))):
        return data.targets.astype(int)
    return (data.targets > np.median(data.targets)).astype(int)


def _sizes_for_proportions(total, positives, proportions, minimum=2.0):
    """Shard sizes closest to equal with sum(sizes) == total and sum(proportions * sizes) == positives.

    Shards that would fall below `minimum` are pinned there and the rest re-solved.
    Returns None when no such sizes exist.
    """
    sizes = np.full(proportions.shape[0], minimum)
    free = np.ones(proportions.shape[0], dtype=bool)
    while free.any():
        n_free = total - minimum * (~free).sum()
        p_free = positives - minimum * proportions[~free].sum()
        pi = proportions[free]
        centred = pi - pi.mean()
        spread = np.sum(centred ** 2)
        gap = p_free - pi.mean() * n_free
        if spread <= 0.0:
            if abs(gap) > 1e-9 * total:
                return None
            slope = 0.0
        else:
            slope = gap / spread
        candidate = n_free / free.sum() + slope * centred
        if np.all(candidate >= minimum):
            sizes[free] = candidate
            return sizes
        pinned = np.flatnonzero(free)[candidate < minimum]
        free[pinned] = False
    return None


@dataclass(frozen=True)
class LabelBetaPlan:
    proportions: np.ndarray
    sizes: np.ndarray
    positives: np.ndarray


def plan_label_beta(labels, a, b, n_shards, rng, max_draws=100) -> LabelBetaPlan:
    """Draw per-shard positive proportions from Beta(a, b) and the shard sizes and positive counts realising them.

    Every point is used, so the pooled positive share has to lie among the drawn
    proportions; draws that cannot host it are redrawn up to `max_draws` times.
    """
    labels = np.asarray(labels, dtype=int)
    total = labels.size
    n_pos = int(labels.sum())
    for draw in range(max_draws):
        proportions = rng.beta(a, b, size=n_shards)
        real_sizes = _sizes_for_proportions(total, n_pos, proportions, minimum=max(2.0, 0.25 * total / n_shards))
        if real_sizes is None:
            continue
        sizes = _largest_remainder(total, real_sizes)
        counts = np.minimum(_largest_remainder(n_pos, proportions * sizes), sizes)
        spare = n_pos - counts.sum()
        for s in np.argsort(-proportions, kind='stable'):
            if spare == 0:
                break
            extra = min(spare, sizes[s] - counts[s])
            counts[s] += extra
            spare -= extra
        if draw:
            logger.info(f"LabelBeta accepted proportions after {draw} redraws")
        return LabelBetaPlan(proportions, sizes, counts)

    needed = int(round(proportions.mean() * total))
    label = 'negative' if n_pos > needed else 'positive'
    raise DataError(f"LabelBeta({a}, {b}) proportions call for about {needed} positive and {total - needed} "
                    f"negative labels; the pool has {n_pos} and {total - n_pos} "
                    f"(deficit of {abs(n_pos - needed)} {label} labels after {max_draws} draws)")


def make_shards(pooled: Optional[Dataset], strategy: ShardStrategy, n_shards, rng,
                labels=None, probs=None) -> List[Shard]:
    """Partition pooled data (or synthesise data, for ByMeans) into shards."""
    if n_shards < 1:
        raise ConfigError(f"need at least one shard, got {n_shards}")

    if strategy.kind is ShardStrategyKind.BY_MEANS:
        means = np.asarray(strategy.means, dtype=float)
        if means.shape[0] != n_shards:
            raise ConfigError(f"{means.shape[0]} shard means for {n_shards} shards")
        parts = [Dataset(mean + rng.normal((strategy.shard_size, means.shape[1]))) for mean in means]
    else:
        if pooled is None or len(pooled) == 0:
            raise DataError("cannot shard an empty dataset")
        n = len(pooled)
        if n < n_shards:
            raise DataError(f"{n} data points cannot fill {n_shards} shards (deficit {n_shards - n})")

        if n_shards == 1:
            index_sets = [np.arange(n)]
        elif strategy.kind is ShardStrategyKind.EQUAL_SPLIT:
            index_sets = np.array_split(rng.permutation(n), n_shards)
        else:
            labels = binary_labels(pooled) if labels is None else np.asarray(labels, dtype=int)
            positives = np.flatnonzero(labels == 1)
            negatives = np.flatnonzero(labels == 0)
            if positives.size == 0 or negatives.size == 0:
                raise DataError(f"LabelBeta needs both labels: pool has {positives.size} positive and "
                                f"{negatives.size} negative points")
            plan = plan_label_beta(labels, strategy.a, strategy.b, n_shards, rng)
            positives = positives[rng.permutation(positives.size)]
            negatives = negatives[rng.permutation(negatives.size)]
            pos_splits = np.split(positives, np.cumsum(plan.positives)[:-1])
            neg_splits = np.split(negatives, np.cumsum(plan.sizes - plan.positives)[:-1])
            index_sets = [np.concatenate([p, q]) for p, q in zip(pos_splits, neg_splits)]
            logger.info(f"LabelBeta shard positive proportions: {np.round(plan.proportions, 3).tolist()}, "
                        f"sizes {plan.sizes.tolist()}")
        parts = [pooled.take(np.sort(idx)) for idx in index_sets]

    shard_probs = shard_probabilities([len(p) for p in parts], probs)
    return [Shard(s, part, shard_probs[s]) for s, part in enumerate(parts)]
