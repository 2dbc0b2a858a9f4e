"""Complete experiment configs; `synth --preset` writes one out as experiment.json."""
import copy

from utils.errors import ConfigError

# Gaussian blobs: 10 shards of 200 points around means drawn on the [-6, 6] square
BLOBS_PRESET = {
    "model": {"kind": "GaussianMean", "dimension": 2},
    "synth": {"preset": "Blobs2D", "params": {"n_shards": 10, "shard_size": 200, "box": 6.0}},
    "federation": {
        "estimator": "CGDSGLD",
        "schedule": {"kind": "Constant", "h": 1e-4},
        "batch_size": 10,
        "local_updates": 1,
        "total_steps": 220000,
        "burn_in": 20000,
        "thinning": 100,
        "alpha": 1.0,
        "chains": 1,
    },
    "surrogates": {"source": "Analytic", "precision_scale": "shard"},
    "diagnostics": {
        "mse": True,
        "test_function": "identity",
        "checkpoints": 50,
        "grid": {"lower": -8.0, "upper": 8.0, "resolution": 161},
    },
    "seed": 0,
}

# Three coins with means 0.1, 0.5, 0.9 realised as 1, 5 and 9 ones out of ten
COINS_PRESET = {
    "model": {"kind": "BernoulliCoin", "dimension": 1},
    "synth": {"preset": "BernoulliCoins", "params": {"means": [0.1, 0.5, 0.9], "shard_size": 10}},
    "federation": {
        "estimator": "CGDSGLD",
        "schedule": {"kind": "Constant", "h": 1e-4},
        "batch_size": 5,
        "local_updates": 1,
        "total_steps": 20000,
        "burn_in": 2000,
        "thinning": 10,
    },
    "surrogates": {
        "source": "LocalSGLD",
        "n_samples": 3000,
        "local_sgld": {
            "schedule": {"kind": "Constant", "h": 1e-3},
            "batch_size": 5,
            "burn_in": 1000,
            "thinning": 10,
        },
    },
    "diagnostics": {
        "mse": False,
        "moments": {"theta": [0.5], "batch_size": 5, "n_draws": 10000},
        "grid": {"lower": 0.01, "upper": 0.99, "resolution": 99},
    },
    "seed": 0,
}

# Linear regression, features from a two-component mixture, shards skewed by component
LINREG_PRESET = {
    "model": {"kind": "BayesLinReg", "dimension": 3, "prior_precision": 1.0, "noise_scale": 1.0},
    "synth": {
        "preset": "LinRegSynthetic",
        "params": {"n_shards": 10, "n_train": 1000, "n_heldout": 200, "dimension": 3,
                   "noise_scale": 1.0, "prior_precision": 1.0, "a": 0.5, "b": 0.5},
    },
    "federation": {
        "estimator": "CGDSGLD",
        "schedule": {"kind": "Constant", "h": 1e-4},
        "batch_size": 10,
        "local_updates": 500,
        "total_steps": 20000,
        "burn_in": 2000,
        "thinning": 10,
    },
    "surrogates": {"source": "Analytic", "precision_scale": "total"},
    "diagnostics": {"mse": True, "test_function": "identity", "checkpoints": 50, "heldout": True},
    "seed": 0,
}

PRESETS = {
    "blobs": BLOBS_PRESET,
    "coins": COINS_PRESET,
    "linreg": LINREG_PRESET,
}

# Dataset preset names accepted as aliases
SYNTH_ALIASES = {
    "Blobs2D": "blobs",
    "BernoulliCoins": "coins",
    "LinRegSynthetic": "linreg",
}


def get_preset(name):
    """Deep copy of a preset config, by short name or dataset preset name."""
    key = SYNTH_ALIASES.get(name, name)
    if key not in PRESETS:
        raise ConfigError(f"unknown preset '{name}', choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[key])
