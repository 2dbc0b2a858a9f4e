"""File formats.

Dataset directory:  shard_00.csv ... shard_{S-1}.csv, optional heldout.csv, manifest.json
Surrogates:         surrogate_00.json ..., product.json, fit_manifest.json
Trace:              <name>.csv (chain, round, shard, t, theta_0..), <name>.json metadata sidecar,
                    optionally <name>.npz

CSV floats are written with 17 significant digits so files round-trip exactly
and identical runs produce identical bytes.
"""
import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from models import Dataset, ModelSpec
from utils.errors import DataError
from utils.federation import ChainTrace, Shard
from utils.surrogates import GaussianSurrogate, SurrogateSet

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'
MANIFEST = 'manifest.json'
HELDOUT = 'heldout.csv'
FIT_MANIFEST = 'fit_manifest.json'
PRODUCT = 'product.json'


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc


def write_frame(path, frame: pd.DataFrame):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def dataset_frame(data: Dataset):
    frame = pd.DataFrame({f'x{j}': data.features[:, j] for j in range(data.n_features)})
    if data.targets is not None:
        frame['y'] = data.targets
    return frame


def read_csv_dataset(path, has_target=True) -> Dataset:
    """Header row, one datum per row, features then an optional target column."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing data file {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    values = frame.to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path} contains missing or non-numeric values")
    if has_target:
        if values.shape[1] < 1:
            raise DataError(f"{path} has no target column")
        return Dataset(values[:, :-1], values[:, -1])
    return Dataset(values)


def write_dataset(out_dir, shards, model_spec: ModelSpec, seed, heldout=None, extra=None):
    """Write shard CSVs plus the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for shard in shards:
        write_frame(out_dir / f'shard_{shard.id:02d}.csv', dataset_frame(shard.data))
    manifest = {
        'n_shards': len(shards),
        'sizes': [shard.size for shard in shards],
        'probs': [shard.prob for shard in shards],
        'model': model_spec.to_dict(),
        'seed': seed,
    }
    if heldout is not None:
        write_frame(out_dir / HELDOUT, dataset_frame(heldout))
        manifest['heldout'] = HELDOUT
    manifest.update(extra or {})
    write_json(out_dir / MANIFEST, manifest)
    logger.info(f"Wrote {len(shards)} shards to {out_dir}")
    return manifest


def read_dataset(data_dir):
    """Load (manifest, shards, heldout) from a dataset directory."""
    data_dir = Path(data_dir)
    manifest = read_json(data_dir / MANIFEST)
    has_target = manifest['model']['kind'] != 'GaussianMean'
    shards = []
    for s in range(int(manifest['n_shards'])):
        data = read_csv_dataset(data_dir / f'shard_{s:02d}.csv', has_target)
        if len(data) != manifest['sizes'][s]:
            raise DataError(f"shard {s} has {len(data)} rows, manifest says {manifest['sizes'][s]}")
        shards.append(Shard(s, data, float(manifest['probs'][s])))
    heldout = None
    if manifest.get('heldout'):
        heldout = read_csv_dataset(data_dir / manifest['heldout'], has_target)
    return manifest, shards, heldout


def save_surrogates(out_dir, surrogates: SurrogateSet, provenance=None):
    out_dir = Path(out_dir)
    for s, q in enumerate(surrogates.per_shard):
        write_json(out_dir / f'surrogate_{s:02d}.json', q.to_dict())
    write_json(out_dir / PRODUCT, surrogates.product.to_dict())
    write_json(out_dir / FIT_MANIFEST, {'n_shards': len(surrogates), **(provenance or {})})
    logger.info(f"Wrote {len(surrogates)} surrogates and their product to {out_dir}")


def load_surrogates(path) -> SurrogateSet:
    """Load from a surrogate directory or from a single JSON holding the whole set."""
    path = Path(path)
    if path.is_file():
        return SurrogateSet.from_dict(read_json(path))
    fit_manifest = read_json(path / FIT_MANIFEST)
    per_shard = [GaussianSurrogate.from_dict(read_json(path / f'surrogate_{s:02d}.json'))
                 for s in range(int(fit_manifest['n_shards']))]
    product = GaussianSurrogate.from_dict(read_json(path / PRODUCT))
    surrogates = SurrogateSet(tuple(per_shard), product)
    surrogates.validate()
    return surrogates


def save_trace(path, trace: ChainTrace, binary=False):
    """Write the trace CSV and its JSON metadata sidecar (and .npz when asked)."""
    path = Path(path)
    write_frame(path, trace.to_frame())
    write_json(path.with_suffix('.json'), trace.metadata)
    if binary:
        save_trace_npz(path.with_suffix('.npz'), trace)
    logger.info(f"Wrote trace with {len(trace)} samples to {path}")
    return path


def save_trace_npz(path, trace: ChainTrace):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return trace.save_npz(path)


def load_trace(path) -> ChainTrace:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing trace {path}")
    sidecar = path.with_suffix('.json')
    metadata = read_json(sidecar) if sidecar.exists() else {}
    if path.suffix == '.npz':
        return ChainTrace.load_npz(path, metadata)
    return ChainTrace.from_frame(pd.read_csv(path), metadata)
