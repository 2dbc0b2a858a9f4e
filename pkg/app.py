"""Command-line front end.

    python app.py synth --preset blobs --out results/blobs
    python app.py fit-surrogates --config results/blobs/experiment.json
    python app.py run --config results/blobs/experiment.json --estimator DSGLD --local-updates 10 100
    python app.py diagnose results/blobs/traces/*.csv --config results/blobs/experiment.json

Exit codes: 0 ok, 2 configuration or usage, 3 data, 4 numeric divergence.
"""
import functools
import logging
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from config import get_config
from models import Dataset, ModelKind, build_model
from presets import PRESETS, SYNTH_ALIASES, get_preset
from tasks import fit_surrogates, run_replicas
from utils.diagnostics import (
    avg_log_likelihood,
    estimator_moments,
    get_test_function,
    grid_bound_constants,
    mc_mse,
    per_chain,
    posterior_expectation,
    predictive_mse,
    replica_band,
)
from utils.dynamics import RandomStream
from utils.errors import ConfigError, DataError, SimulationError
from utils.estimators import EstimatorKind
from utils.experiment import (
    MOMENTS_STREAM,
    ExperimentConfig,
    experiment_hash,
    ingest_csv,
    load_experiment,
    resolve_output_dir,
    synthesize,
)
from utils.storage import (
    load_surrogates,
    load_trace,
    read_dataset,
    save_surrogates,
    save_trace,
    write_dataset,
    write_frame,
    write_json,
)

logger = logging.getLogger(__name__)

EXPERIMENT_FILE = 'experiment.json'


def handle_errors(command):
    """Turn library exceptions into log lines and exit codes."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except SimulationError as e:
            logger.error(f"{command.__name__} failed: {str(e)}", exc_info=logger.isEnabledFor(logging.DEBUG))
            click.echo(f"error: {e}", err=True)
            click.get_current_context().exit(e.exit_code)
    return wrapper


@click.group()
def cli():
    """Federated SGLD simulation harness."""
    get_config().init_app()


def _write_experiment(out_dir, experiment: ExperimentConfig):
    return write_json(Path(out_dir) / EXPERIMENT_FILE, experiment.to_dict())


@cli.command()
@click.option('--preset', 'preset_name', required=True,
              type=click.Choice(sorted(PRESETS) + sorted(SYNTH_ALIASES)), help='Dataset preset.')
@click.option('--shards', type=int, default=None, help='Number of shards S.')
@click.option('--seed', type=int, default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@handle_errors
def synth(preset_name, shards, seed, out):
    """Generate a synthetic dataset and its experiment config."""
    preset = get_preset(preset_name)
    params = dict(preset['synth'].get('params', {}))
    if shards is not None:
        params['n_shards'] = shards
    probs = preset.get('shards', {}).get('probs')
    if probs is not None:
        params['probs'] = probs
    preset['synth']['params'] = params
    seed = preset.get('seed', 0) if seed is None else seed
    out = resolve_output_dir(out, preset.get('output_dir'))

    spec, shard_list, heldout, extra = synthesize(preset['synth']['preset'], params, seed)
    preset['model'] = spec.to_dict()
    experiment = ExperimentConfig.from_dict(preset, seed=seed, output_dir=out)
    write_dataset(experiment.data_dir, shard_list, spec, seed, heldout, extra)
    path = _write_experiment(out, experiment)
    click.echo(f"wrote {len(shard_list)} shards to {experiment.data_dir} and {path}")


@cli.command()
@click.argument('csv_path', type=click.Path(dir_okay=False))
@click.option('--model', 'model_kind', type=click.Choice([ModelKind.BAYES_LIN_REG.value]),
              default=ModelKind.BAYES_LIN_REG.value)
@click.option('--shards', type=int, default=10)
@click.option('--strategy', type=click.Choice(['EqualSplit', 'LabelBeta']), default='EqualSplit')
@click.option('--a', type=float, default=0.5)
@click.option('--b', type=float, default=0.5)
@click.option('--heldout-fraction', type=float, default=0.2)
@click.option('--seed', type=int, default=0)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@handle_errors
def ingest(csv_path, model_kind, shards, strategy, a, b, heldout_fraction, seed, out):
    """Standardise, split and shard a regression CSV (features then target)."""
    if not 0 < heldout_fraction < 1:
        raise ConfigError(f"held-out fraction must lie in (0, 1), got {heldout_fraction}")
    spec, shard_list, heldout, extra = ingest_csv(csv_path, shards, strategy, a, b, seed, heldout_fraction)
    preset = get_preset('linreg')
    preset['model'] = spec.to_dict()
    preset['synth'] = {}
    out = resolve_output_dir(out, None)
    experiment = ExperimentConfig.from_dict(preset, seed=seed, output_dir=out)
    write_dataset(experiment.data_dir, shard_list, spec, seed, heldout, extra)
    path = _write_experiment(out, experiment)
    click.echo(f"wrote {len(shard_list)} shards to {experiment.data_dir} and {path}")


def _load(config_path, seed, out):
    experiment = load_experiment(config_path, seed=seed, output_dir=out)
    manifest, shards, heldout = read_dataset(experiment.data_dir)
    model = build_model(experiment.model)
    if manifest['model'] != experiment.model.to_dict():
        raise ConfigError(f"dataset in {experiment.data_dir} was written for model {manifest['model']}")
    return experiment, manifest, shards, heldout, model


@cli.command('fit-surrogates')
@click.option('--config', 'config_path', required=True, type=click.Path(dir_okay=False))
@click.option('--seed', type=int, default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@handle_errors
def fit_surrogates_command(config_path, seed, out):
    """Fit one surrogate per shard and their product."""
    experiment, manifest, shards, _, model = _load(config_path, seed, out)
    if experiment.surrogates is None:
        raise ConfigError("experiment config has no surrogate source")
    surrogates, provenance = fit_surrogates(model, shards, experiment.surrogates,
                                            jitter=get_config().SURROGATE_JITTER)
    provenance['experiment_hash'] = experiment_hash(manifest)
    save_surrogates(experiment.surrogate_dir, surrogates, provenance)
    click.echo(f"wrote {len(surrogates)} surrogates to {experiment.surrogate_dir}")


@cli.command()
@click.option('--config', 'config_path', required=True, type=click.Path(dir_okay=False))
@click.option('--local-updates', type=int, multiple=True,
              help='Local updates per round; repeat for one trace per value.')
@click.option('--estimator', type=click.Choice([e.value for e in EstimatorKind]), default=None)
@click.option('--chains', type=int, default=None)
@click.option('--binary', is_flag=True, help='Also write the trace as .npz.')
@click.option('--seed', type=int, default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@handle_errors
def run(config_path, local_updates, estimator, chains, binary, seed, out):
    """Run the federated simulation and write one trace per local-update setting."""
    experiment, manifest, shards, _, model = _load(config_path, seed, out)
    base = experiment.federation
    if estimator is not None:
        base = replace(base, estimator=EstimatorKind(estimator))
    if chains is not None:
        base = replace(base, chains=chains)
    # re-validate the estimator/surrogate pairing
    experiment = replace(experiment, federation=base)

    surrogates = None
    if base.estimator is EstimatorKind.CGDSGLD:
        surrogates = load_surrogates(experiment.surrogate_dir)

    total = base.total_steps
    written = []
    for updates in local_updates or (base.local_updates,):
        if updates < 1 or total % updates:
            raise ConfigError(f"local updates {updates} must divide the {total} total steps")
        cfg = replace(base, local_updates=updates, rounds=total // updates)
        trace = run_replicas(model, shards, cfg, surrogates)
        trace.metadata.update({
            'experiment_hash': experiment_hash(manifest),
            'local_updates': updates,
        })
        path = experiment.trace_dir / f"{cfg.estimator.value}_L{updates}.csv"
        save_trace(path, trace, binary=binary)
        written.append(str(path))
    for path in written:
        click.echo(f"wrote {path}")


def _curves(trace, metric, *args, **kwargs):
    curves = per_chain(trace, metric, *args, **kwargs)
    return curves[0].to_frame() if len(curves) == 1 else replica_band(curves)


def _check_compatible(traces, expected_hash, force):
    models = {str(trace.metadata.get('model')) for _, trace in traces}
    hashes = {trace.metadata.get('experiment_hash') for _, trace in traces}
    if len(models) > 1:
        raise ConfigError("traces were produced by different models")
    if hashes != {expected_hash}:
        message = f"trace experiment hashes {sorted(map(str, hashes))} do not match the config's {expected_hash}"
        if not force:
            raise ConfigError(message + "; use --force to diagnose anyway")
        logger.warning(message)


@cli.command()
@click.argument('trace_paths', nargs=-1, type=click.Path(dir_okay=False))
@click.option('--config', 'config_path', required=True, type=click.Path(dir_okay=False))
@click.option('--force', is_flag=True, help='Diagnose traces from a different dataset or model.')
@click.option('--out', type=click.Path(file_okay=False), default=None)
@handle_errors
def diagnose(trace_paths, config_path, force, out):
    """Write MSE curves, estimator moments, grid constants and held-out curves."""
    if not trace_paths:
        raise click.UsageError("no traces given")
    experiment, manifest, shards, heldout, model = _load(config_path, None, out)
    settings = get_config()
    diagnostics = experiment.diagnostics
    report_dir = experiment.report_dir

    traces = [(Path(p), load_trace(p)) for p in trace_paths]
    _check_compatible(traces, experiment_hash(manifest), force)

    surrogates = None
    if (experiment.surrogate_dir / 'fit_manifest.json').exists():
        surrogates = load_surrogates(experiment.surrogate_dir)

    summary = {'experiment_hash': experiment_hash(manifest), 'traces': {}, 'reports': []}
    pooled = Dataset.concat([s.data for s in shards])

    truth = None
    if diagnostics.mse:
        phi = get_test_function(diagnostics.test_function)
        truth = posterior_expectation(model.analytic_posterior(pooled), phi)
        summary['truth'] = truth.tolist()

    for path, trace in traces:
        stem = path.stem
        summary['traces'][stem] = {'config_hash': trace.metadata.get('config_hash'), 'samples': len(trace)}
        if len(trace) == 0:
            raise DataError(f"trace {path} holds no samples after burn-in")
        if truth is not None:
            frame = _curves(trace, mc_mse, diagnostics.test_function, truth, diagnostics.checkpoints)
            summary['reports'].append(str(write_frame(report_dir / f"{stem}_mse.csv", frame)))
        if diagnostics.heldout:
            if heldout is None:
                raise DataError("held-out diagnostics requested but the dataset has no held-out set")
            frame = _curves(trace, avg_log_likelihood, model, heldout, diagnostics.checkpoints)
            summary['reports'].append(str(write_frame(report_dir / f"{stem}_loglik.csv", frame)))
            if model.kind is ModelKind.BAYES_LIN_REG:
                frame = _curves(trace, predictive_mse, model, heldout, diagnostics.checkpoints)
                summary['reports'].append(str(write_frame(report_dir / f"{stem}_pred_mse.csv", frame)))

    if diagnostics.moments_theta is not None:
        theta = np.asarray(diagnostics.moments_theta, dtype=float)
        gradient = model.grad_log_prior(theta) + model.grad_log_lik(theta, pooled).sum(axis=0)
        moments = {'theta': theta.tolist(), 'gradient': gradient.tolist()}
        estimators = [EstimatorKind.SGLD, EstimatorKind.DSGLD]
        if surrogates is not None:
            estimators.append(EstimatorKind.CGDSGLD)
        for kind in estimators:
            rng = RandomStream(experiment.seed, MOMENTS_STREAM)
            result = estimator_moments(model, shards, theta, diagnostics.moments_batch_size, kind, rng,
                                       surrogates if kind is EstimatorKind.CGDSGLD else None,
                                       alpha=experiment.federation.alpha, cap=settings.ENUMERATION_CAP,
                                       n_draws=diagnostics.moments_draws)
            moments[kind.value] = result.to_dict()
        summary['reports'].append(str(write_json(report_dir / 'moments.json', moments)))

    if diagnostics.grid is not None:
        if surrogates is None:
            logger.warning("no fitted surrogates; skipping grid constants")
        else:
            constants = grid_bound_constants(model, shards, surrogates, diagnostics.grid)
            summary['reports'].append(str(write_frame(report_dir / 'bound_constants.csv', constants.to_frame())))
            summary['reports'].append(str(write_json(report_dir / 'bound_constants.json', constants.to_dict())))

    write_json(report_dir / 'summary.json', summary)
    for report in summary['reports']:
        click.echo(f"wrote {report}")


if __name__ == '__main__':
    cli()
