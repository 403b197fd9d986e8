"""Console script for Panotool."""
import os, sys, functools
from typing import List, Optional
import click
from click.core import ParameterSource
import numpy as np
from loguru import logger
import panotool
from .errors import ConfigError, FormatError, EvaluationError, TrainingError
from .windowing import WindowConfig, parse_window_token
from .encoder import EncoderSpec
from .dataset import (Dataset, SynthParams, synth_dataset, write_synth,
                      load_groundtruth, database_hash)
from .index import (RESIZE, build_index, build_index_from_embeddings, encode_queries,
                    query_embeddings, external_fingerprint, save_index, load_index, check_compatible)
from .retrieval import rank_all, top_n as take_top
from .evaluation import DEFAULT_N, ablation_sweep, recall_at_n, SweepRow, SweepTable
from .mining import MiningConfig, LossConfig, gradient_check
from .training import TrainConfig, train
from .checkpoint import save_checkpoint, load_checkpoint
from .visualize import save_matches

EXIT_DATA, EXIT_CONFIG = 3, 4

def handle_errors(func):
    """Map the error taxonomy onto exit codes: 3 data/format, 4 configuration"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ConfigError as e:
            code, error = EXIT_CONFIG, e
        except (FormatError, EvaluationError, TrainingError, OSError, ValueError) as e:
            code, error = EXIT_DATA, e
        logger.error(f"{type(error).__name__}: {error}")
        click.echo(f"error: {error}", err=True)
        sys.exit(code)
    return wrapper

def window_options(func):
    func = click.option('--cyclic/--no-cyclic', default=lambda: panotool.cyclic,
                        help="Wrap windows around the panorama seam")(func)
    func = click.option('--span-div', type=int, default=lambda: panotool.span_div,
                        help="Span divisor S, window length = width / S")(func)
    func = click.option('--stride-div', type=int, default=lambda: panotool.stride_div,
                        help="Stride divisor N, stride = width / N")(func)
    return func

def encoder_options(func):
    func = click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), default=None,
                        help="Projection head checkpoint")(func)
    func = click.option('--gem-p', type=float, default=lambda: panotool.gem_p, help="GeM power")(func)
    return func

def _encoder(gem_p:float, checkpoint:Optional[str]) -> EncoderSpec:
    head = load_checkpoint(checkpoint) if checkpoint else None
    return EncoderSpec(gem_p=gem_p, projection=head)

def _write(text:str, output:Optional[str]):
    if output is None:
        click.echo(text, nl=False)
        return
    pathname = os.path.dirname(output).strip()
    if pathname != '':
        os.makedirs(pathname, exist_ok=True)
    with open(output, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)

def _select(dataset:Dataset, query_ids:List[str]) -> Dataset:
    if not query_ids:
        return dataset
    known = {rec.id for rec in dataset.queries}
    missing = [qid for qid in query_ids if qid not in known]
    if missing:
        raise FormatError(f"unknown query ids: {', '.join(missing)}")
    return dataset.subset(query_ids)

@click.group()
@click.option('--log-level', default='WARNING', show_default=True,
              type=click.Choice(['TRACE', 'DEBUG', 'INFO', 'SUCCESS', 'WARNING', 'ERROR'],
                                case_sensitive=False))
@click.option('--env', 'env_file', type=click.Path(dir_okay=False), default=None,
              help="Load settings from an env file")
def main(log_level, env_file):
    """Perspective-to-panorama place recognition with sliding windows."""
    logger.remove()
    logger.add(sys.stderr, level=log_level.upper())
    if env_file is not None:
        panotool.load_envs(env_file)

@main.command()
@click.option('--out', required=True, type=click.Path(file_okay=False), help="Output directory")
@click.option('--seed', default=0, show_default=True)
@click.option('--places', default=50, show_default=True)
@click.option('--width', default=1024, show_default=True)
@click.option('--height', default=128, show_default=True)
@click.option('--queries-per-place', default=4, show_default=True)
@click.option('--jitter', default=0, show_default=True, help="Crop jitter in pixels")
@click.option('--noise', default=0.0, show_default=True, help="Noise std in 8-bit units")
@click.option('--brightness', default=0.0, show_default=True, type=click.FloatRange(0, 1, max_open=True))
@click.option('--seam-fraction', default=0.0, show_default=True, type=click.FloatRange(0, 1))
@click.option('--spacing', default=50.0, show_default=True, help="Distance between places in meters")
@click.option('--offset-step', default=1, show_default=True, help="Crop offsets are multiples of this")
@click.option('--span-div', type=int, default=lambda: panotool.span_div)
@handle_errors
def synth(out, seed, places, width, height, queries_per_place, jitter, noise, brightness,
          seam_fraction, spacing, offset_step, span_div):
    """Generate a synthetic dataset."""
    params = SynthParams(seed, places, width, height, queries_per_place, jitter, noise, brightness,
                         seam_fraction, spacing, offset_step, span_div)
    manifest = write_synth(out, synth_dataset(params))
    logger.info(f"wrote {manifest}")
    click.echo(manifest)

@main.command()
@click.option('--manifest', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--index', 'index_dir', required=True, type=click.Path(file_okay=False))
@window_options
@encoder_options
@click.option('--embeddings', type=click.Path(exists=True, dir_okay=False), default=None,
              help="External window descriptors `<db_id>#<k>` instead of the built-in encoder")
@click.option('--nproc', type=int, default=lambda: panotool.nproc)
@handle_errors
def index(manifest, index_dir, stride_div, span_div, cyclic, gem_p, checkpoint, embeddings, nproc):
    """Encode the database panoramas of a manifest into an index."""
    dataset = Dataset.from_manifest(manifest)
    config = WindowConfig(stride_div, span_div, cyclic)
    if embeddings:
        if not dataset.database:
            raise FormatError("the dataset has no database panoramas")
        height, width = dataset.database[0].load().shape[:2]
        artifact = build_index_from_embeddings(embeddings, dataset.database, config, width, height)
    else:
        artifact = build_index(dataset.database, _encoder(gem_p, checkpoint), config, nproc)
    save_index(artifact, index_dir)
    logger.info(f"indexed {len(artifact.database)} panoramas x {len(artifact.layout)} windows "
                f"({artifact.label}) into {index_dir}")
    click.echo(f"{len(artifact.database)} panoramas, {len(artifact.layout)} windows each")

@main.command()
@click.option('--manifest', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--index', 'index_dir', required=True, type=click.Path(exists=True, file_okay=False))
@window_options
@encoder_options
@click.option('--embeddings', type=click.Path(exists=True, dir_okay=False), default=None,
              help="External query descriptors instead of the built-in encoder")
@click.option('--norm-p', type=float, default=lambda: panotool.norm_p)
@click.option('--top-n', 'top', type=click.IntRange(min=1), default=5, show_default=True)
@click.option('--query-id', 'query_ids', multiple=True, help="Only these queries")
@click.option('--output', type=click.Path(dir_okay=False), default=None)
@click.option('--nproc', type=int, default=lambda: panotool.nproc)
@handle_errors
def query(manifest, index_dir, stride_div, span_div, cyclic, gem_p, checkpoint, embeddings,
          norm_p, top, query_ids, output, nproc):
    """Rank the database panoramas of an index for every query.

    Prints `query_id rank db_id window_index distance` lines. Window flags
    given on the command line must match the index.
    """
    dataset = _select(Dataset.from_manifest(manifest), list(query_ids))
    artifact = load_index(index_dir)
    config = _requested_config(stride_div, span_div, cyclic)
    db_hash = database_hash(dataset.database)
    if embeddings:
        descs = query_embeddings(embeddings, [rec.id for rec in dataset.queries])
        fingerprint = external_fingerprint(len(descs[0])) if descs else artifact.fingerprint
        check_compatible(artifact, fingerprint, config, db_hash)
    else:
        spec = _encoder(gem_p, checkpoint)
        check_compatible(artifact, spec.fingerprint(), config, db_hash)
        descs = encode_queries(dataset.queries, spec, artifact, nproc)
    results = rank_all(descs, artifact.database, norm_p, nproc)
    lines = []
    for rec, result in zip(dataset.queries, results):
        for r, (db_id, match) in enumerate(take_top(result, top), start=1):
            lines.append(f"{rec.id} {r} {db_id} {match.window_index} {match.distance:.6f}\n")
    _write(''.join(lines), output)

def _given(*names:str) -> List[str]:
    """Options among `names` that were set on the command line"""
    ctx = click.get_current_context()
    return [name for name in names if ctx.get_parameter_source(name) == ParameterSource.COMMANDLINE]

def _requested_config(stride_div:int, span_div:int, cyclic:bool) -> Optional[WindowConfig]:
    """Window configuration the user asked for explicitly, None when no window flag was given"""
    given = _given('stride_div', 'span_div', 'cyclic')
    return WindowConfig(stride_div, span_div, cyclic) if given else None

def _sweep_configs(sweep:str, cyclic:bool, span_div:int) -> list:
    """Sweep tokens as configurations, the resize baseline first, then by stride divisor"""
    configs = []
    for token in sweep.split(','):
        if not token.strip():
            continue
        if token.strip().lower() == RESIZE:
            configs.append(RESIZE)
        else:
            configs.append(parse_window_token(token, cyclic, span_div))
    if not configs:
        raise ConfigError(f"empty sweep: {sweep!r}")
    return sorted(configs, key=lambda c: (0, 0, False) if c == RESIZE else (1, c.stride_divisor, c.cyclic))

def _evaluate_embeddings( dataset:Dataset
                       , path:str
                       , config:WindowConfig
                       , norm_p:float
                       , threshold_m:float
                       , nproc:int) -> SweepTable:
    """One-row table from precomputed window and query descriptors"""
    if not dataset.database:
        raise FormatError("the dataset has no database panoramas")
    height, width = dataset.database[0].load().shape[:2]
    artifact = build_index_from_embeddings(path, dataset.database, config, width, height)
    descs = query_embeddings(path, [rec.id for rec in dataset.queries])
    results = rank_all(descs, artifact.database, norm_p, nproc)
    report = recall_at_n(results, [rec.geo for rec in dataset.queries], dataset.db_geos,
                         DEFAULT_N, threshold_m)
    return SweepTable([SweepRow(config.label, config, report, query_shape=artifact.query_shape)])

@main.command()
@click.option('--manifest', required=True, type=click.Path(exists=True, dir_okay=False))
@window_options
@encoder_options
@click.option('--sweep', default=None, help="Comma-separated configurations, e.g. resize,x8,x16,x24,x32")
@click.option('--embeddings', type=click.Path(exists=True, dir_okay=False), default=None,
              help="External descriptors: `<db_id>#<k>` windows and query ids, one configuration only")
@click.option('--norm-p', type=float, default=lambda: panotool.norm_p)
@click.option('--threshold-m', type=float, default=lambda: panotool.threshold_m)
@click.option('--straddling-only', is_flag=True,
              help="Only the queries marked as straddling the seam in groundtruth.tsv")
@click.option('--output', type=click.Path(dir_okay=False), default=None,
              help="Write `config, N, recall` lines to this file")
@click.option('--nproc', type=int, default=lambda: panotool.nproc)
@handle_errors
def evaluate(manifest, stride_div, span_div, cyclic, gem_p, checkpoint, sweep, embeddings, norm_p, threshold_m,
             straddling_only, output, nproc):
    """Recall@1/5/10/20 for one configuration or a sweep."""
    dataset = Dataset.from_manifest(manifest)
    if straddling_only:
        truth = load_groundtruth(os.path.join(os.path.dirname(os.path.abspath(manifest)), 'groundtruth.tsv'))
        dataset = dataset.subset([qid for qid, (_, _, straddles) in truth.items() if straddles])
    if embeddings:
        if sweep:
            raise ConfigError("--embeddings scores a single configuration, drop --sweep")
        table = _evaluate_embeddings(dataset, embeddings, WindowConfig(stride_div, span_div, cyclic),
                                     norm_p, threshold_m, nproc)
    elif sweep:
        # tokens without the `c` suffix are non-cyclic unless --cyclic is given
        configs = _sweep_configs(sweep, cyclic and bool(_given('cyclic')), span_div)
        table = ablation_sweep(dataset, _encoder(gem_p, checkpoint), configs, norm_p,
                               DEFAULT_N, threshold_m, nproc, span_div)
    else:
        table = ablation_sweep(dataset, _encoder(gem_p, checkpoint), [WindowConfig(stride_div, span_div, cyclic)],
                               norm_p, DEFAULT_N, threshold_m, nproc, span_div)
    click.echo(table.format_text(), nl=False)
    if output is not None:
        _write(table.format_lines(), output)
    if not any(row.report is not None for row in table.rows):
        raise ConfigError("every configuration failed: " + "; ".join(row.error for row in table.rows))

@main.command(name='train')
@click.option('--manifest', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--val-manifest', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--val-fraction', default=0.25, show_default=True,
              help="Share of places held out for validation when no --val-manifest is given")
@click.option('--checkpoint', 'out', required=True, type=click.Path(dir_okay=False),
              help="Where to write the trained head")
@click.option('--epochs', default=5, show_default=True)
@click.option('--batch-size', default=2, show_default=True)
@click.option('--lr', default=0.01, show_default=True, type=float)
@click.option('--seed', default=0, show_default=True)
@click.option('--margin', default=0.1, show_default=True)
@click.option('--proj-dim', default=32, show_default=True)
@click.option('--positive-radius', default=10.0, show_default=True)
@click.option('--negative-radius', default=25.0, show_default=True)
@click.option('--negatives', default=10, show_default=True)
@click.option('--pool', default=200, show_default=True, help="Partial mining pool size")
@click.option('--refresh-every', default=1, show_default=True)
@window_options
@click.option('--gem-p', type=float, default=lambda: panotool.gem_p)
@click.option('--norm-p', type=float, default=lambda: panotool.norm_p)
@click.option('--threshold-m', type=float, default=lambda: panotool.threshold_m)
@click.option('--nproc', type=int, default=lambda: panotool.nproc)
@handle_errors
def train_cmd(manifest, val_manifest, val_fraction, out, epochs, batch_size, lr, seed, margin, proj_dim,
              positive_radius, negative_radius, negatives, pool, refresh_every, stride_div, span_div,
              cyclic, gem_p, norm_p, threshold_m, nproc):
    """Train the projection head with the window-based triplet loss."""
    cfg = TrainConfig(epochs, batch_size, lr, seed,
                      MiningConfig(positive_radius, negative_radius, negatives, pool),
                      LossConfig(margin, norm_p), WindowConfig(stride_div, span_div, cyclic),
                      proj_dim, refresh_every, threshold_m, nproc, val_fraction)
    val_set = Dataset.from_manifest(val_manifest) if val_manifest else None
    report = train(Dataset.from_manifest(manifest), EncoderSpec(gem_p=gem_p), cfg, val_set)
    save_checkpoint(out, report.head, report, cfg)
    recall_columns = lambda r: '\t'.join(f"{r[n]:.2f}" for n in DEFAULT_N)
    lines = ["epoch\tloss\t" + '\t'.join(f"R@{n}" for n in DEFAULT_N)]
    lines.append(f"0\t-\t{recall_columns(report.initial_recall)}")
    for epoch, (loss, recall) in enumerate(zip(report.losses, report.recalls), start=1):
        lines.append(f"{epoch}\t{loss:.6f}\t{recall_columns(recall)}")
    click.echo('\n'.join(lines))

@main.command()
@click.option('--manifest', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--index', 'index_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--out', required=True, type=click.Path(file_okay=False))
@encoder_options
@click.option('--query-id', 'query_ids', multiple=True, help="Only these queries")
@click.option('--norm-p', type=float, default=lambda: panotool.norm_p)
@click.option('--top', type=click.IntRange(min=1), default=3, show_default=True)
@click.option('--nproc', type=int, default=lambda: panotool.nproc)
@handle_errors
def visualize(manifest, index_dir, out, gem_p, checkpoint, query_ids, norm_p, top, nproc):
    """Write one PNG per query with its top panoramas and matched windows."""
    dataset = _select(Dataset.from_manifest(manifest), list(query_ids))
    artifact = load_index(index_dir)
    spec = _encoder(gem_p, checkpoint)
    check_compatible(artifact, spec.fingerprint(), None, database_hash(dataset.database))
    results = rank_all(encode_queries(dataset.queries, spec, artifact, nproc),
                       artifact.database, norm_p, nproc)
    records = {rec.id: rec for rec in dataset.database}
    panos = {}
    for rec, result in zip(dataset.queries, results):
        matches = take_top(result, top)
        for db_id, _ in matches:
            if db_id not in panos:
                panos[db_id] = records[db_id].load()
        path = os.path.join(out, f"{rec.id}.png")
        save_matches(path, rec.load(), matches, panos, artifact.layout, title=rec.id, top=top)
        click.echo(path)

@main.command()
@click.option('--seed', default=0, show_default=True)
@click.option('--trials', type=click.IntRange(min=1), default=25, show_default=True)
@click.option('--margin', default=2.0, show_default=True)
@click.option('--norm-p', default=2.0, show_default=True)
@click.option('--tolerance', default=1e-4, show_default=True)
@handle_errors
def gradcheck(seed, trials, margin, norm_p, tolerance):
    """Compare the analytic loss gradient with central differences."""
    errors = gradient_check(seed, trials, LossConfig(margin, norm_p))
    worst = float(np.max(errors))
    click.echo(f"trials {trials} worst relative error {worst:.3e}")
    if worst >= tolerance:
        click.echo(f"error: relative error above {tolerance:g}", err=True)
        sys.exit(EXIT_DATA)

@main.command()
@click.option('--save', 'env_file', type=click.Path(dir_okay=False), default=None,
              help="Write the settings to this env file")
def env(env_file):
    """Show the current settings."""
    settings = [('PANOTOOL_STRIDE_DIV', panotool.stride_div), ('PANOTOOL_SPAN_DIV', panotool.span_div),
                ('PANOTOOL_CYCLIC', str(panotool.cyclic).lower()), ('PANOTOOL_NORM_P', panotool.norm_p),
                ('PANOTOOL_GEM_P', panotool.gem_p), ('PANOTOOL_THRESHOLD_M', panotool.threshold_m),
                ('PANOTOOL_NPROC', panotool.nproc)]
    for key, value in settings:
        click.echo(f"{key}={value}")
    if env_file is not None:
        panotool.save_envs(env_file)

if __name__ == "__main__":
    sys.exit(main())  # pragma: no cover
