import logging
import traceback

import numpy as np

from celery_config import celery
from config import get_config
from models import Dataset, ModelSpec, build_model
from utils.errors import ConfigError, SimulationError
from utils.estimators import EstimatorKind
from utils.experiment import SurrogateSourceKind
from utils.federation import (
    ChainTrace,
    FederationConfig,
    LocalSGLDConfig,
    Shard,
    run_simulation,
)
from utils.storage import load_surrogates
from utils.surrogates import GaussianSurrogate, SurrogateSet, analytic_surrogate, local_sgld_fit

logger = logging.getLogger(__name__)


# Payloads are plain lists and dicts; float repr round-trips through JSON
def shard_to_payload(shard: Shard):
    return {
        'id': shard.id,
        'prob': shard.prob,
        'features': shard.data.features.tolist(),
        'targets': None if shard.data.targets is None else shard.data.targets.tolist(),
    }


def shard_from_payload(payload):
    return Shard(int(payload['id']), Dataset(payload['features'], payload['targets']), float(payload['prob']))


def trace_to_payload(trace: ChainTrace):
    return {
        'chain': trace.chain.tolist(),
        'round': trace.round.tolist(),
        'shard': trace.shard.tolist(),
        't': trace.t.tolist(),
        'thetas': trace.thetas.tolist(),
        'dimension': trace.dimension,
        'metadata': trace.metadata,
    }


def trace_from_payload(payload):
    thetas = np.asarray(payload['thetas'], dtype=float).reshape(-1, int(payload['dimension']))
    return ChainTrace(
        np.asarray(payload['chain'], dtype=np.int64),
        np.asarray(payload['round'], dtype=np.int64),
        np.asarray(payload['shard'], dtype=np.int64),
        np.asarray(payload['t'], dtype=np.int64),
        thetas,
        payload['metadata'],
    )


@celery.task(bind=True)
def run_chain_task(self, model_spec, shard_payloads, federation, surrogates, chain):
    """Run one replica chain of the federated simulation."""
    logger.info(f"Starting run_chain_task for chain {chain}")
    try:
        shards = [shard_from_payload(p) for p in shard_payloads]
        cfg = FederationConfig.from_dict(federation)
        surrogate_set = SurrogateSet.from_dict(surrogates) if surrogates else None
        trace = run_simulation(ModelSpec.from_dict(model_spec), shards, cfg, surrogate_set, chain=chain)
        return trace_to_payload(trace)
    except SimulationError:
        raise
    except Exception as e:
        logger.error(f"Error in run_chain_task for chain {chain}: {str(e)}")
        logger.error(traceback.format_exc())
        raise


@celery.task(bind=True)
def fit_local_surrogate_task(self, model_spec, shard_payload, local_sgld, n_samples, diagonal_only, jitter):
    """Fit one shard's surrogate from a shard-local SGLD run."""
    shard = shard_from_payload(shard_payload)
    logger.info(f"Starting fit_local_surrogate_task for shard {shard.id}")
    q = local_sgld_fit(ModelSpec.from_dict(model_spec), shard, LocalSGLDConfig.from_dict(local_sgld),
                       int(n_samples), diagonal_only=diagonal_only, jitter=jitter)
    return q.to_dict()


def _collect(results):
    timeout = get_config().TASK_TIMEOUT
    return [result.get(timeout=timeout) for result in results]


def run_replicas(model, shards, cfg: FederationConfig, surrogates=None) -> ChainTrace:
    """Run cfg.chains independent chains and merge them by chain id."""
    model = build_model(model)
    if cfg.estimator is EstimatorKind.CGDSGLD and surrogates is None:
        raise ConfigError("CGDSGLD needs surrogates")
    model_spec = model.spec.to_dict()
    shard_payloads = [shard_to_payload(s) for s in shards]
    surrogate_payload = None if surrogates is None else surrogates.to_dict()

    logger.info(f"Dispatching {cfg.chains} {cfg.estimator.value} chain(s)")
    results = [
        run_chain_task.delay(model_spec, shard_payloads, cfg.to_dict(), surrogate_payload, chain)
        for chain in range(cfg.chains)
    ]
    traces = [trace_from_payload(payload) for payload in _collect(results)]
    return traces[0] if len(traces) == 1 else ChainTrace.merge(traces)


def fit_surrogates(model, shards, source, jitter=None):
    """Build the surrogate set for a source; returns (SurrogateSet, provenance)."""
    model = build_model(model)
    jitter = source.jitter if jitter is None else jitter

    if source.kind is SurrogateSourceKind.FROM_FILE:
        surrogates = load_surrogates(source.path)
        if len(surrogates) != len(shards):
            raise ConfigError(f"{len(surrogates)} surrogates in {source.path} for {len(shards)} shards")
        return surrogates, {'source': source.kind.value, 'path': str(source.path)}

    if source.kind is SurrogateSourceKind.ANALYTIC:
        total = sum(s.size for s in shards)
        qs = [analytic_surrogate(model, shard, total_size=total, precision_scale=source.precision_scale,
                                 jitter=jitter) for shard in shards]
        provenance = {'source': source.kind.value, 'precision_scale': source.precision_scale, 'jitter': jitter}
    else:
        results = [
            fit_local_surrogate_task.delay(model.spec.to_dict(), shard_to_payload(shard), source.local.to_dict(),
                                           source.n_samples, source.diagonal_only, jitter)
            for shard in shards
        ]
        qs = [GaussianSurrogate.from_dict(payload) for payload in _collect(results)]
        provenance = {'source': source.kind.value, 'n_samples': source.n_samples,
                      'local_sgld': source.local.to_dict(), 'diagonal_only': source.diagonal_only,
                      'jitter': jitter}

    for shard, q in zip(shards, qs):
        logger.info(f"Surrogate for shard {shard.id}: mean {np.round(q.mean, 4).tolist()}")
    return SurrogateSet.from_shards(qs), provenance
