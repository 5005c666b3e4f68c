import argparse
import logging
from pathlib import Path

import filelock

from . import evaluation
from .config import build_sweep_spec, build_train_config, load_config_file, write_resolved_config
from .errors import ContractError, GraphAbstainError, ParameterError
from .graph import (
    GRAPH_FILE,
    MANIFEST_FILE,
    build_knn_graph,
    load_citation_dataset,
    load_tabular_csv,
    make_split,
    resolve_dataset,
    save_graph,
    write_dataset_manifest
)
from .logging_ import setup_logging, setup_run_logging
from .model import Variant
from .sweep import SWEEP_CONFORMAL, SWEEP_SR, SWEEP_VARIANTS, run_sweep
from .training import RUN_MANIFEST_FILE, load_run, train
from .utils import (
    ensure_dir,
    get_datasets_dir,
    get_logs_dir,
    get_output_lock,
    get_runs_dir,
    log_resource_usage,
    make_run_dir
)
from .version import __version__


log = logging.getLogger('cli')

TRAIN_VARIANTS = tuple(variant.value for variant in Variant)


def _dataset_reference(dataset):
    path = Path(dataset)
    if path.exists():
        return str(path.resolve())
    return str(dataset)


class _OutputDir:

    def __init__(self, path):
        self.path = ensure_dir(path)
        self._lock = get_output_lock(self.path)
        self._stop_logging = None

    def __enter__(self):
        try:
            self._lock.acquire()
        except filelock.Timeout:
            raise ContractError(f"Output directory '{self.path}' is in use by another process") from None
        start, stop = setup_run_logging(self.path)
        start()
        self._stop_logging = stop
        return self.path

    def __exit__(self, exc_type, exc_value, traceback):
        self._stop_logging()
        self._lock.release()


def cmd_ingest(args):
    if args.dir:
        directory = Path(args.dir)
        contents = sorted(directory.glob('*.content'))
        cites = sorted(directory.glob('*.cites'))
        if len(contents) != 1 or len(cites) != 1:
            raise ParameterError(f"'{directory}' must hold exactly one .content and one .cites file")
        content_path, cites_path = contents[0], cites[0]
    elif args.content and args.cites:
        content_path, cites_path = Path(args.content), Path(args.cites)
    else:
        raise ParameterError('ingest needs --dir or both --content and --cites')

    name = args.name or content_path.stem
    g = load_citation_dataset(content_path, cites_path, row_normalize=not args.no_normalize, name=name)
    _save_dataset(g, args.out or get_datasets_dir() / name)
    return 0


def cmd_knn_graph(args):
    table, labels, label_names = load_tabular_csv(args.csv)
    name = args.name or Path(args.csv).stem
    g = build_knn_graph(table, labels, args.k, name=name, label_names=label_names)
    _save_dataset(g, args.out or get_datasets_dir() / name)
    return 0


def _save_dataset(g, out_dir):
    out_dir = ensure_dir(out_dir, 'dataset directory')
    try:
        save_graph(g, out_dir / GRAPH_FILE)
        write_dataset_manifest(g, out_dir / MANIFEST_FILE)
    except OSError as e:
        raise OSError(e.errno, 'Failed to write dataset', str(out_dir)) from e
    log.info(f"Saved {g} to '{out_dir}'")
    print(out_dir)


def _train_overrides(args):
    return {
        'train': {
            'variant': getattr(args, 'variant', None),
            'seed': args.seed,
            'max_epochs': args.max_epochs,
            'patience': args.patience,
            'learning_rate': args.lr,
            'weight_decay': args.weight_decay
        },
        'encoder': {'layer_kind': args.layer_kind}
    }


def cmd_train(args):
    config = load_config_file(args.config)
    overrides = _train_overrides(args)
    overrides['cost'] = {'d': args.d}
    overrides['coverage'] = {'target_coverage': args.coverage}
    cfg = build_train_config(config, overrides)

    g = resolve_dataset(args.dataset)
    split = make_split(g, args.split_seed or 0)
    out_dir = args.out or make_run_dir(get_runs_dir(), prefix=cfg.variant)

    with _OutputDir(out_dir) as run_dir:
        write_resolved_config(run_dir, cfg.to_dict())
        log_resource_usage(log, 'Training start')
        model, manifest = train(g, split, cfg, out_dir=run_dir, dataset=_dataset_reference(args.dataset))

        result = evaluation.evaluate(model, g, split, tau=manifest.tau, d=args.risk_d)
        evaluation.write_metrics(run_dir / evaluation.METRICS_FILE, result, {'split': 'test'})
        log.info(f'Test metrics:\n{result.metrics}')
        log_resource_usage(log, 'Training end')
    print(run_dir)
    return 0


def _load(run):
    run_dir = evaluation.run_dir_of(run)
    model, manifest, split, g = load_run(run_dir)
    return run_dir, model, manifest, split, g


def cmd_eval(args):
    run_dir, model, manifest, split, g = _load(args.run)

    method = evaluation.METHOD_MODEL
    if args.variant in (SWEEP_SR, SWEEP_CONFORMAL):
        method = args.variant
    elif args.variant is not None and args.variant != model.variant:
        raise ParameterError(f"Run was trained as '{model.variant}', not '{args.variant}'")

    tau = manifest.tau if args.tau is None else args.tau
    result = evaluation.evaluate(
        model,
        g,
        split,
        method=method,
        tau=tau,
        threshold=args.threshold,
        alpha=args.alpha,
        score_kind=args.score,
        d=args.d
    )

    with _OutputDir(args.out or run_dir) as out_dir:
        write_resolved_config(out_dir, manifest.config)
        evaluation.write_predictions(out_dir / evaluation.PREDICTIONS_FILE, result)
        evaluation.write_metrics(out_dir / evaluation.METRICS_FILE, result, {'run': str(run_dir)})
        log.info(f'Test metrics ({method}):\n{result.metrics}')
    print(result.metrics)
    return 0


def cmd_calibrate(args):
    run_dir, model, manifest, split, g = _load(args.run)
    tau = evaluation.recalibrate(model, g, split, args.coverage)
    log.info(f'Threshold for coverage {args.coverage}: {manifest.tau} -> {tau:.6f}')
    manifest.tau = tau
    manifest.calibrated_coverage = args.coverage

    result = evaluation.evaluate(model, g, split, tau=tau, d=args.d)
    with _OutputDir(run_dir):
        manifest.save(run_dir / RUN_MANIFEST_FILE)
        write_resolved_config(run_dir, manifest.config)
        evaluation.write_metrics(
            run_dir / evaluation.METRICS_FILE,
            result,
            {'split': 'test', 'calibrated_coverage': args.coverage}
        )
        log.info(f'Test metrics after recalibration:\n{result.metrics}')
    print(f'{tau:.6f}')
    return 0


def cmd_sweep(args):
    config = load_config_file(args.config)

    variant = args.variant or config.get('sweep', {}).get('variant')
    grid = None
    rejection_cost = None
    if variant == Variant.COST.value:
        grid = args.d
    else:
        grid = {Variant.COV.value: args.coverage, SWEEP_SR: args.threshold, SWEEP_CONFORMAL: args.alpha}.get(variant)
        if args.d:
            if len(args.d) != 1:
                raise ParameterError(f'--d takes a single rejection cost for {variant} sweeps')
            rejection_cost = args.d[0]

    dataset = args.dataset or config.get('sweep', {}).get('dataset')
    if dataset is None:
        raise ParameterError('sweep needs --dataset')

    spec = build_sweep_spec(config, {'sweep': {
        'dataset': _dataset_reference(dataset),
        'variant': variant,
        'grid': grid,
        'num_seeds': args.seeds,
        'jobs': args.jobs,
        'out_dir': str(args.out or make_run_dir(get_runs_dir(), prefix=f'sweep-{variant}')),
        'split_seed': args.split_seed,
        'rejection_cost': rejection_cost,
        'score_kind': args.score,
        'save_runs': args.save_runs or None
    }})

    base_variant = Variant.COV.value if spec.variant == Variant.COV.value else Variant.VANILLA.value
    overrides = _train_overrides(args)
    overrides['train']['variant'] = base_variant
    base_cfg = build_train_config(config, overrides)

    _, summaries = run_sweep(spec, base_cfg)
    for summary in summaries:
        print(summary)
    print(spec.out_dir)
    return 0


def cmd_export_embeddings(args):
    run_dir, model, manifest, split, g = _load(args.run)
    path = Path(args.out) if args.out else run_dir / evaluation.EMBEDDINGS_FILE
    evaluation.export_embeddings(model, g, split, path, tau=manifest.tau)
    print(path)
    return 0


def _add_training_options(parser):
    parser.add_argument('--seed', type=int, help='initialization and dropout seed')
    parser.add_argument('--split-seed', type=int, help='seed of the train/val/test split (default 0)')
    parser.add_argument('--max-epochs', type=int)
    parser.add_argument('--patience', type=int)
    parser.add_argument('--lr', type=float, help='learning rate')
    parser.add_argument('--weight-decay', type=float)
    parser.add_argument('--layer-kind', choices=('gat', 'gcn'))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON or TOML config file')
    common.add_argument('--verbose', '-v', action='store_true', help='log debug messages to the console')

    parser = argparse.ArgumentParser(
        prog='graph-abstain',
        description='Node classification with a reject option on graphs'
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='command', required=True)

    p = subparsers.add_parser('ingest', parents=[common], help='parse a citation dataset')
    p.add_argument('--dir', help='directory holding one .content and one .cites file')
    p.add_argument('--content')
    p.add_argument('--cites')
    p.add_argument('--name')
    p.add_argument('--no-normalize', action='store_true', help='keep raw feature rows')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_ingest)

    p = subparsers.add_parser('knn-graph', parents=[common], help='build a k-NN graph from a CSV table')
    p.add_argument('--csv', required=True)
    p.add_argument('--k', type=int, default=5)
    p.add_argument('--name')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_knn_graph)

    p = subparsers.add_parser('train', parents=[common], help='train one model')
    p.add_argument('--dataset', required=True)
    p.add_argument('--variant', choices=TRAIN_VARIANTS)
    p.add_argument('--d', type=float, help='rejection cost of the cost variant')
    p.add_argument('--coverage', type=float, help='target coverage of the coverage variant')
    p.add_argument('--risk-d', type=float, help='rejection cost used by the 0-d-1 risk of other variants')
    p.add_argument('--out')
    _add_training_options(p)
    p.set_defaults(handler=cmd_train)

    p = subparsers.add_parser('eval', parents=[common], help='evaluate a trained run on its test split')
    p.add_argument('run')
    p.add_argument('--variant', choices=TRAIN_VARIANTS + (SWEEP_SR, SWEEP_CONFORMAL))
    p.add_argument('--tau', type=float, help='override the calibrated selection threshold')
    p.add_argument('--threshold', type=float, help='softmax-response threshold')
    p.add_argument('--alpha', type=float, help='conformal miscoverage level')
    p.add_argument('--score', choices=('tps', 'aps'), default='tps')
    p.add_argument('--d', type=float, help='rejection cost of the 0-d-1 risk')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_eval)

    p = subparsers.add_parser('calibrate', parents=[common], help='recalibrate the threshold of a coverage run')
    p.add_argument('run')
    p.add_argument('--coverage', type=float, required=True)
    p.add_argument('--d', type=float, help='rejection cost of the 0-d-1 risk')
    p.set_defaults(handler=cmd_calibrate)

    p = subparsers.add_parser('sweep', parents=[common], help='run a parameter grid over several seeds')
    p.add_argument('--dataset')
    p.add_argument('--variant', choices=SWEEP_VARIANTS)
    p.add_argument('--d', type=float, nargs='+',
                   help='cost grid of the cost variant, or the 0-d-1 rejection cost of other variants')
    p.add_argument('--coverage', type=float, nargs='+', help='target coverage grid')
    p.add_argument('--threshold', type=float, nargs='+', help='softmax-response threshold grid')
    p.add_argument('--alpha', type=float, nargs='+', help='conformal alpha grid')
    p.add_argument('--score', choices=('tps', 'aps'))
    p.add_argument('--seeds', type=int, help='number of seeds per grid point')
    p.add_argument('--jobs', type=int, help='concurrent training runs')
    p.add_argument('--save-runs', action='store_true', help='keep checkpoints of every run')
    p.add_argument('--out')
    _add_training_options(p)
    p.set_defaults(handler=cmd_sweep)

    p = subparsers.add_parser('export-embeddings', parents=[common], help='write test-node embeddings')
    p.add_argument('run')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_export_embeddings)

    return parser


def main(argv=None, setup_logs=True):
    parser = build_parser()
    args = parser.parse_args(argv)

    if setup_logs:
        setup_logging(get_logs_dir(), verbose=args.verbose)

    try:
        return args.handler(args)
    except GraphAbstainError as e:
        log.debug(f'{args.command} failed', exc_info=True)
        log.error(str(e))
        return 2
    except OSError as e:
        log.debug(f'{args.command} failed', exc_info=True)
        log.error(f'{e.strerror or e}: {e.filename}' if e.filename else str(e))
        return 1
