"""
Command-line entry point: gen-data, train, eval, heatmap and ablate.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
import json
import logging
import sys
from dataclasses import asdict
from typing import Optional, Sequence

import click

from autodiff.tensor import ShapeError, TapeError
from checkpoint import CheckpointError, save_checkpoint
from cohort.storage import DatasetError, load_dataset, save_dataset
from cohort.synth import GeneratorSpec, generate, split_cases
from metrics import MetricError
from settings import configure_logging, default_data_dir, load_train_config
from training.heatmap import export_heatmap
from training.trainer import ABLATION_VARIANTS, TrainingError, evaluate, load_model, run_ablation, train

logger = logging.getLogger(__name__)

RUNTIME_ERRORS = (CheckpointError, DatasetError, TrainingError, MetricError, ShapeError, TapeError, OSError,
                  ValueError)


def _data_option(func):
    return click.option('--data', 'data_dir', default=default_data_dir, required=True,
                        type=click.Path(file_okay=False), help='Dataset directory')(func)


@click.group()
def main():
    """WeGA weakly-supervised lymph-node metastasis pipeline."""


@main.command('gen-data')
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False), help='Output directory')
@click.option('--patients', default=580, show_default=True, type=click.IntRange(min=1))
@click.option('--seed', default=0, show_default=True, type=int)
@click.option('--metastasis-rate', default=0.5, show_default=True, type=click.FloatRange(0.0, 1.0))
@click.option('--signal', default=2.0, show_default=True, type=click.FloatRange(min=0.0))
@click.option('--min-nodes', default=2, show_default=True, type=click.IntRange(1, 16))
@click.option('--max-nodes', default=12, show_default=True, type=click.IntRange(1, 16))
def gen_data(out_dir, patients, seed, metastasis_rate, signal, min_nodes, max_nodes):
    """Generate a synthetic cohort."""
    if min_nodes > max_nodes:
        raise click.BadParameter(f"--min-nodes {min_nodes} exceeds --max-nodes {max_nodes}")
    spec = GeneratorSpec(n_patients=patients, metastasis_rate=metastasis_rate,
                         nodes_per_patient=(min_nodes, max_nodes), signal_strength=signal, seed=seed)
    cases = generate(spec)
    save_dataset(cases, out_dir)
    click.echo(f"✅ Wrote {len(cases)} patients to {out_dir}")


@main.command('train')
@_data_option
@click.option('--config', 'config_path', default=None, type=click.Path(dir_okay=False), help='TrainConfig JSON')
@click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False), help='Checkpoint path')
@click.option('--history', 'history_path', default=None, type=click.Path(dir_okay=False),
              help='Write per-epoch loss history JSON here')
def train_command(data_dir, config_path, out_path, history_path):
    """Train on a dataset directory and write a checkpoint."""
    config = _load_config(config_path)
    result = train(config, load_dataset(data_dir))
    save_checkpoint(result.checkpoint, out_path)
    if history_path:
        with open(history_path, 'w', encoding='utf-8') as f:
            json.dump([asdict(record) for record in result.history], f, indent=2)
    click.echo(f"✅ Saved checkpoint to {out_path} (best epoch {result.best_epoch})")


@main.command('eval')
@_data_option
@click.option('--model', 'model_path', required=True, type=click.Path(dir_okay=False))
@click.option('--report', 'report_path', required=True, type=click.Path(dir_okay=False))
@click.option('--node-level', is_flag=True, help='Score nodes against planted truth labels')
@click.option('--split', 'split_name', default='test', show_default=True,
              type=click.Choice(['train', 'val', 'test', 'all']))
@click.option('--threshold', default=None, type=click.FloatRange(0.0, 1.0), help='ACC/F1 threshold')
@click.option('--resamples', default=None, type=click.IntRange(min=100), help='Bootstrap resamples')
def eval_command(data_dir, model_path, report_path, node_level, split_name, threshold, resamples):
    """Evaluate a checkpoint and write a JSON report."""
    model, config = load_model(model_path)
    cases = load_dataset(data_dir)
    if split_name != 'all':
        train_cases, val_cases, test_cases = split_cases(cases, config.split, config.seed)
        cases = {'train': train_cases, 'val': val_cases, 'test': test_cases}[split_name]
    if not cases:
        raise MetricError(f"{split_name} split is empty")
    report = evaluate(model, cases, node_level=node_level,
                      threshold=config.threshold if threshold is None else threshold,
                      n_resamples=config.bootstrap_resamples if resamples is None else resamples,
                      seed=config.seed, batch_size=config.batch_size)
    report.save(report_path)
    auc = 'n/a' if report.auc is None else f"{report.auc.point:.4f}"
    click.echo(f"✅ {report.level}-level AUC {auc} on {report.n_samples} samples; report at {report_path}")


@main.command('heatmap')
@_data_option
@click.option('--model', 'model_path', required=True, type=click.Path(dir_okay=False))
@click.option('--patient', 'patient_id', required=True)
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
def heatmap_command(data_dir, model_path, patient_id, out_dir):
    """Export per-node metastasis heatmaps for one patient."""
    model, _ = load_model(model_path)
    matches = [case for case in load_dataset(data_dir) if case.id == patient_id]
    if not matches:
        raise DatasetError(f"patient {patient_id} not found in {data_dir}")
    paths = export_heatmap(model, matches[0], out_dir)
    click.echo(f"✅ Wrote {len(paths)} heatmaps to {out_dir}")


@main.command('ablate')
@_data_option
@click.option('--config', 'config_path', default=None, type=click.Path(dir_okay=False))
@click.option('--seeds', default='0,1,2', show_default=True, help='Comma-separated seeds')
@click.option('--variants', default='no_ral', show_default=True,
              help=f"Comma-separated ablation rows compared against full: {', '.join(sorted(ABLATION_VARIANTS))}")
@click.option('--report', 'report_path', required=True, type=click.Path(dir_okay=False))
def ablate_command(data_dir, config_path, seeds, variants, report_path):
    """Compare the full configuration with ablated variants over several seeds."""
    try:
        seed_list = [int(s) for s in seeds.split(',') if s.strip()]
    except ValueError:
        raise click.BadParameter(f"--seeds must be comma-separated integers, got {seeds!r}")
    if not seed_list:
        raise click.BadParameter("--seeds is empty")
    variant_list = [v.strip() for v in variants.split(',') if v.strip()]
    unknown = [v for v in variant_list if v not in ABLATION_VARIANTS]
    if unknown or not variant_list:
        raise click.BadParameter(f"choose from {sorted(ABLATION_VARIANTS)}, got {variants!r}",
                                 param_hint='--variants')
    summary = run_ablation(_load_config(config_path), load_dataset(data_dir), seed_list, variant_list)
    with open(report_path, 'w', encoding='utf-8') as f:
        json.dump(summary, f, indent=2)
    for name, comparison in summary['comparisons'].items():
        flag = ' (tie)' if comparison['tie'] else ''
        click.echo(f"✅ Full {summary['mean_full_auc']:.4f} vs {name} {summary[f'mean_{name}_auc']:.4f}{flag}")


def _load_config(path: Optional[str]):
    try:
        return load_train_config(path)
    except (TypeError, ValueError) as e:
        raise click.BadParameter(str(e), param_hint='--config')


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line and map outcomes to exit codes"""
    configure_logging()
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        result = main.main(args=args, prog_name='wega', standalone_mode=False)
    except click.UsageError as e:
        if e.ctx is not None:
            click.echo(e.ctx.get_usage(), err=True)
        click.echo(f"Error: {e.format_message()}", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except RUNTIME_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        click.echo(f"❌ {e}", err=True)
        return 2
    return result if isinstance(result, int) else 0


if __name__ == '__main__':
    sys.exit(cli())
