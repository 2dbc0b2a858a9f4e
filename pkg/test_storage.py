import json

import numpy as np
import pytest

from models import Dataset, ModelKind, ModelSpec
from utils.errors import DataError
from utils.federation import ChainTrace, FederationConfig, run_simulation
from utils.storage import (
    load_surrogates,
    load_trace,
    read_csv_dataset,
    read_dataset,
    read_json,
    save_surrogates,
    save_trace,
    write_dataset,
)
from utils.surrogates import SurrogateSet, analytic_surrogate


@pytest.fixture
def trace(gaussian_model, gaussian_shards):
    cfg = FederationConfig.from_dict({'estimator': 'DSGLD', 'local_updates': 2, 'rounds': 15,
                                      'batch_size': 3, 'schedule': {'kind': 'Constant', 'h': 1e-3}})
    return run_simulation(gaussian_model, gaussian_shards, cfg)


class TestDatasetFiles:

    def test_round_trip_without_targets(self, tmp_path, gaussian_shards):
        spec = ModelSpec(ModelKind.GAUSSIAN_MEAN, 2)
        manifest = write_dataset(tmp_path, gaussian_shards, spec, seed=3, extra={'preset': 'Blobs2D'})
        assert manifest['sizes'] == [6, 6, 6]
        loaded, shards, heldout = read_dataset(tmp_path)
        assert loaded == json.loads((tmp_path / 'manifest.json').read_text())
        assert heldout is None
        for original, restored in zip(gaussian_shards, shards):
            np.testing.assert_array_equal(original.data.features, restored.data.features)
            assert restored.prob == original.prob

    def test_round_trip_with_heldout(self, tmp_path, linreg_shards):
        spec = ModelSpec(ModelKind.BAYES_LIN_REG, 2)
        heldout = Dataset(np.array([[0.1, 0.2]]), [0.3])
        write_dataset(tmp_path, linreg_shards, spec, seed=0, heldout=heldout)
        _, shards, loaded_heldout = read_dataset(tmp_path)
        np.testing.assert_array_equal(shards[1].data.targets, linreg_shards[1].data.targets)
        np.testing.assert_array_equal(loaded_heldout.features, heldout.features)

    def test_size_mismatch(self, tmp_path, coin_shards):
        write_dataset(tmp_path, coin_shards, ModelSpec(ModelKind.BERNOULLI_COIN, 1), seed=0)
        manifest = read_json(tmp_path / 'manifest.json')
        manifest['sizes'][0] = 11
        (tmp_path / 'manifest.json').write_text(json.dumps(manifest))
        with pytest.raises(DataError):
            read_dataset(tmp_path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError):
            read_dataset(tmp_path / 'nowhere')

    def test_non_numeric_csv(self, tmp_path):
        path = tmp_path / 'bad.csv'
        path.write_text("x0,y\n1.0,2.0\nabc,3.0\n")
        with pytest.raises(DataError):
            read_csv_dataset(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / 'broken.json'
        path.write_text("{not json")
        with pytest.raises(DataError):
            read_json(path)


class TestSurrogateFiles:

    def test_save_load_and_stable_bytes(self, tmp_path, gaussian_model, gaussian_shards):
        surrogates = SurrogateSet.from_shards([analytic_surrogate(gaussian_model, s, total_size=18)
                                               for s in gaussian_shards])
        save_surrogates(tmp_path / 'a', surrogates, {'source': 'Analytic'})
        save_surrogates(tmp_path / 'b', surrogates, {'source': 'Analytic'})
        for name in ('surrogate_00.json', 'product.json', 'fit_manifest.json'):
            assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()
        restored = load_surrogates(tmp_path / 'a')
        np.testing.assert_array_equal(restored.product.precision, surrogates.product.precision)
        assert len(restored) == 3

    def test_single_file_set(self, tmp_path, gaussian_model, gaussian_shards):
        surrogates = SurrogateSet.from_shards([analytic_surrogate(gaussian_model, s) for s in gaussian_shards])
        path = tmp_path / 'set.json'
        path.write_text(json.dumps(surrogates.to_dict()))
        np.testing.assert_allclose(load_surrogates(path).product.mean, surrogates.product.mean)

    def test_missing_surrogate(self, tmp_path):
        with pytest.raises(DataError):
            load_surrogates(tmp_path)


class TestTraceFiles:

    def test_csv_round_trip_is_exact(self, tmp_path, trace):
        path = save_trace(tmp_path / 'run.csv', trace)
        restored = load_trace(path)
        np.testing.assert_array_equal(restored.thetas, trace.thetas)
        np.testing.assert_array_equal(restored.t, trace.t)
        assert restored.metadata['estimator'] == trace.metadata['estimator']

    def test_identical_traces_give_identical_bytes(self, tmp_path, trace):
        save_trace(tmp_path / 'a.csv', trace)
        save_trace(tmp_path / 'b.csv', trace)
        assert (tmp_path / 'a.csv').read_bytes() == (tmp_path / 'b.csv').read_bytes()

    def test_npz(self, tmp_path, trace):
        save_trace(tmp_path / 'run.csv', trace, binary=True)
        restored = load_trace(tmp_path / 'run.npz')
        np.testing.assert_array_equal(restored.thetas, trace.thetas)
        np.testing.assert_array_equal(restored.shard, trace.shard)

    def test_header(self, tmp_path, trace):
        save_trace(tmp_path / 'run.csv', trace)
        header = (tmp_path / 'run.csv').read_text().splitlines()[0]
        assert header == 'chain,round,shard,t,theta_0,theta_1'

    def test_empty_trace(self, tmp_path):
        path = save_trace(tmp_path / 'empty.csv', ChainTrace.empty(2))
        assert len(load_trace(path)) == 0

    def test_missing_trace(self, tmp_path):
        with pytest.raises(DataError):
            load_trace(tmp_path / 'missing.csv')
