import dataclasses
import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import filelock
import pandas as pd

from .baselines import CONFORMAL_ALPHAS, SCORE_KINDS, SCORE_TPS, SR_THRESHOLDS
from .cost import RejectionCost
from .coverage import CoverageObjectiveConfig
from .errors import ContractError, ParameterError
from .evaluation import METHOD_CONFORMAL, METHOD_MODEL, METHOD_SR, evaluate
from .graph import make_split, resolve_dataset
from .logging_ import setup_run_logging
from .metrics import RESULT_COLUMNS, RESULTS_SCHEMA_VERSION, summarize_rows
from .model import Variant
from .plotting import plot_coverage_accuracy
from .training import ASSUMPTIONS, CONFIG_FILE, SPLIT_FILE, Trainer, TrainConfig, save_run
from .utils import default_jobs, ensure_dir, get_output_lock, log_resource_usage
from .version import __version__


log = logging.getLogger('sweep')

SWEEP_SR = 'sr'
SWEEP_CONFORMAL = 'conformal'
SWEEP_VARIANTS = (Variant.VANILLA.value, Variant.COST.value, Variant.COV.value, SWEEP_SR, SWEEP_CONFORMAL)

DEFAULT_GRIDS = {
    Variant.VANILLA.value: (1.0,),
    Variant.COST.value: (0.5, 0.6, 0.7, 0.8, 0.85),
    Variant.COV.value: (0.5, 0.6, 0.7, 0.8, 0.9),
    SWEEP_SR: SR_THRESHOLDS,
    SWEEP_CONFORMAL: CONFORMAL_ALPHAS
}

RESULTS_FILE = 'results.csv'
SUMMARY_FILE = 'summary.csv'
CURVE_FILE = 'curve.svg'
SWEEP_MANIFEST_FILE = 'manifest.json'


@dataclass(frozen=True)
class SweepSpec:
    dataset: str
    variant: str
    grid: tuple = ()
    num_seeds: int = 10
    out_dir: str | None = None
    jobs: int | None = None
    split_seed: int = 0
    rejection_cost: float = 0.5
    score_kind: str = SCORE_TPS
    save_runs: bool = False

    @property
    def resolved_grid(self):
        grid = tuple(float(value) for value in self.grid) if self.grid else DEFAULT_GRIDS.get(self.variant, ())
        if self.variant == Variant.VANILLA.value:
            return (1.0,)
        return tuple(sorted(set(grid)))

    @property
    def resolved_jobs(self):
        return self.jobs or default_jobs()

    def validate(self):
        if self.variant not in SWEEP_VARIANTS:
            raise ParameterError(f"Sweep variant must be one of {SWEEP_VARIANTS}, got '{self.variant}'")
        if self.num_seeds < 1:
            raise ParameterError(f'num_seeds must be >= 1, got {self.num_seeds}')
        if self.jobs is not None and self.jobs < 1:
            raise ParameterError(f'jobs must be >= 1, got {self.jobs}')
        if not 0.0 <= self.rejection_cost <= 1.0:
            raise ParameterError(f'rejection_cost must be in [0, 1], got {self.rejection_cost}')
        if self.score_kind not in SCORE_KINDS:
            raise ParameterError(f"score_kind must be one of {SCORE_KINDS}, got '{self.score_kind}'")

        grid = self.resolved_grid
        if not grid:
            raise ParameterError('Sweep grid is empty')
        for value in grid:
            if self.variant in (Variant.COST.value, Variant.COV.value) and not 0.0 < value <= 1.0:
                raise ParameterError(f'{self.variant} grid values must be in (0, 1], got {value}')
            if self.variant in (SWEEP_SR, SWEEP_CONFORMAL) and not 0.0 < value < 1.0:
                raise ParameterError(f'{self.variant} grid values must be in (0, 1), got {value}')

    def to_dict(self):
        data = dataclasses.asdict(self)
        data['grid'] = list(self.resolved_grid)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if 'grid' in data:
            data['grid'] = tuple(data['grid'])
        return cls(**data)


class SweepJob:

    def __init__(self, index, seed, params):
        self.index = index
        self.seed = seed
        self.params = tuple(params)

    def __repr__(self):
        params = ', '.join(f'{param:g}' for param in self.params)
        return f'SweepJob(seed={self.seed}, params=[{params}])'


def job_train_config(base_cfg, variant, seed, param):
    if variant == Variant.COST.value:
        return dataclasses.replace(
            base_cfg, variant=Variant.COST.value, seed=seed, cost=RejectionCost(param), coverage=None
        )
    if variant == Variant.COV.value:
        coverage = base_cfg.coverage or CoverageObjectiveConfig()
        return dataclasses.replace(
            base_cfg,
            variant=Variant.COV.value,
            seed=seed,
            cost=None,
            coverage=dataclasses.replace(coverage, target_coverage=param)
        )
    return dataclasses.replace(base_cfg, variant=Variant.VANILLA.value, seed=seed, cost=None, coverage=None)


def build_jobs(spec, base_seed=0):
    grid = spec.resolved_grid
    seeds = [base_seed + i for i in range(spec.num_seeds)]
    jobs = []
    if spec.variant in (Variant.COST.value, Variant.COV.value):
        for param in grid:
            for seed in seeds:
                jobs.append(SweepJob(len(jobs), seed, (param,)))
    else:
        # One vanilla model per seed serves every grid point
        for seed in seeds:
            jobs.append(SweepJob(len(jobs), seed, grid))
    return jobs


def _failed_row(dataset, variant, param, seed, error):
    row = {column: math.nan for column in RESULT_COLUMNS}
    row.update({'dataset': dataset, 'variant': variant, 'param': param, 'seed': seed, 'error': error})
    return row


class Sweep:

    def __init__(
            self,
            spec,
            g,
            split,
            base_cfg=None,
            run_root=None,
            cb_on_run_start=None,
            cb_on_run_finish=None,
            cb_on_run_error=None,
            cb_on_stop=None
        ):
        spec.validate()
        self._spec = spec
        self._g = g
        self._split = split
        self._base_cfg = base_cfg or TrainConfig()
        self._run_root = run_root

        self._cb_on_run_start = cb_on_run_start
        self._cb_on_run_finish = cb_on_run_finish
        self._cb_on_run_error = cb_on_run_error
        self._cb_on_stop = cb_on_stop

        self._dataset_name = g.name or str(spec.dataset)
        self._jobs = build_jobs(spec, self._base_cfg.seed)
        self._queue = None
        self._threads = []
        self._rows = []
        self._rows_lock = threading.Lock()
        self._trainers = set()
        self._trainers_lock = threading.Lock()
        self._running = False

    @property
    def running(self):
        return any(thread.is_alive() for thread in self._threads)

    @property
    def jobs(self):
        return list(self._jobs)

    @property
    def rows(self):
        with self._rows_lock:
            return sorted(self._rows, key=lambda row: (row['param'], row['seed']))

    def run(self):
        log.debug('Sweep start')
        if self.running:
            raise ContractError('Sweep is already running')

        self._running = True
        self._rows = []
        self._queue = queue.Queue()
        for job in self._jobs:
            self._queue.put(job)

        num_workers = min(self._spec.resolved_jobs, len(self._jobs))
        log.info(
            f'Sweep {self._spec.variant} on {self._dataset_name}: grid {list(self._spec.resolved_grid)}, '
            f'{self._spec.num_seeds} seeds, {len(self._jobs)} jobs on {num_workers} workers'
        )

        self._threads = [
            threading.Thread(target=self._worker_run, name=f'sweep-worker-{i}', daemon=True)
            for i in range(num_workers)
        ]
        for thread in self._threads:
            thread.start()
        for thread in self._threads:
            thread.join()

        self._running = False
        log.info('Sweep finished')
        if self._cb_on_stop is not None:
            self._cb_on_stop()
        return self.rows

    def stop(self):
        log.debug('Sweep stop requested')
        self._running = False
        with self._trainers_lock:
            for trainer in self._trainers:
                trainer.stop()

    def _worker_run(self):
        log.debug('Worker start')
        while self._running:
            try:
                job = self._queue.get_nowait()
            except queue.Empty:
                break
            self._run_job(job)
        log.debug('Worker stop')

    def _run_job(self, job):
        spec = self._spec
        if self._cb_on_run_start is not None:
            self._cb_on_run_start(job)

        try:
            rows = self._train_and_evaluate(job)
        except Exception as e:
            log.debug(f'Run {job} failed', exc_info=True)
            log.error(f'Run {job} failed: {e}')
            rows = [_failed_row(self._dataset_name, spec.variant, param, job.seed, str(e)) for param in job.params]
            if self._cb_on_run_error is not None:
                self._cb_on_run_error(job, e)
        else:
            if self._cb_on_run_finish is not None:
                self._cb_on_run_finish(job, rows)

        with self._rows_lock:
            self._rows.extend(rows)

    def _train_and_evaluate(self, job):
        spec = self._spec
        train_variant = spec.variant if spec.variant in (Variant.COST.value, Variant.COV.value) else Variant.VANILLA.value
        cfg = job_train_config(self._base_cfg, train_variant, job.seed, job.params[0])

        trainer = Trainer(self._g, self._split, cfg)
        with self._trainers_lock:
            self._trainers.add(trainer)
        try:
            manifest = trainer.run()
        finally:
            with self._trainers_lock:
                self._trainers.discard(trainer)
        if not self._running:
            raise ContractError('Sweep stopped before the run finished')

        model = trainer.model
        if spec.save_runs and self._run_root is not None:
            params = '-'.join(f'{param:g}' for param in job.params) if len(job.params) == 1 else 'all'
            run_dir = ensure_dir(Path(self._run_root) / f'{spec.variant}-{params}-seed{job.seed}', 'run directory')
            save_run(run_dir, model, manifest, self._split, spec.dataset)

        output = model.forward(self._g, False)
        rows = []
        for param in job.params:
            if spec.variant == SWEEP_SR:
                evaluation = evaluate(model, self._g, self._split, output, METHOD_SR, threshold=param,
                                      d=spec.rejection_cost)
            elif spec.variant == SWEEP_CONFORMAL:
                evaluation = evaluate(model, self._g, self._split, output, METHOD_CONFORMAL, alpha=param,
                                      score_kind=spec.score_kind, d=spec.rejection_cost)
                log.info(f'Seed {job.seed}, alpha {param:g}: {evaluation.empty_sets} empty prediction sets')
            else:
                evaluation = evaluate(model, self._g, self._split, output, METHOD_MODEL, tau=manifest.tau,
                                      d=spec.rejection_cost)

            metrics = evaluation.metrics
            accuracy = metrics.selective_accuracy
            rows.append({
                'dataset': self._dataset_name,
                'variant': spec.variant,
                'param': param,
                'seed': job.seed,
                'coverage': metrics.coverage,
                'selective_accuracy': math.nan if accuracy is None else accuracy,
                'zero_d_one_risk': metrics.zero_d_one_risk,
                'epochs': manifest.epochs_run,
                'wallclock_s': manifest.wallclock_s,
                'empty_sets': evaluation.empty_sets,
                'error': ''
            })
            log.info(
                f'{spec.variant} param={param:g} seed={job.seed}: coverage {metrics.coverage:.4f}, '
                f'selective accuracy {"-" if accuracy is None else f"{accuracy:.4f}"}, '
                f'0-d-1 {metrics.zero_d_one_risk:.4f}, {manifest.epochs_run} epochs'
            )
        return rows


def results_frame(rows):
    return pd.DataFrame(rows, columns=list(RESULT_COLUMNS))


def empty_set_totals(rows):
    totals = {}
    for row in rows:
        count = row.get('empty_sets')
        if row.get('error') or count is None or (isinstance(count, float) and math.isnan(count)):
            continue
        key = f'{row["param"]:g}'
        totals[key] = totals.get(key, 0) + int(count)
    return totals


def summary_frame(summaries):
    return pd.DataFrame([summary.to_dict() for summary in summaries])


def write_sweep_outputs(out_dir, spec, rows, extra_manifest=None):
    out_dir = Path(out_dir)
    summaries = summarize_rows(rows)
    try:
        results_frame(rows).to_csv(out_dir / RESULTS_FILE, index=False)
        summary_frame(summaries).to_csv(out_dir / SUMMARY_FILE, index=False)
    except OSError as e:
        raise OSError(e.errno, 'Failed to write sweep results', str(out_dir)) from e

    plot_coverage_accuracy(summaries, out_dir / CURVE_FILE, title=f'{spec.variant} on {spec.dataset}')

    manifest = {
        'version': __version__,
        'results_schema_version': RESULTS_SCHEMA_VERSION,
        'results_columns': list(RESULT_COLUMNS),
        'spec': spec.to_dict(),
        'n_rows': len(rows),
        'n_failed': sum(1 for row in rows if row.get('error')),
        'empty_sets': empty_set_totals(rows),
        'summary': [summary.to_dict() for summary in summaries],
        'assumptions': dict(ASSUMPTIONS)
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    try:
        (out_dir / SWEEP_MANIFEST_FILE).write_text(json.dumps(manifest, indent=2), encoding='utf-8')
    except OSError as e:
        raise OSError(e.errno, 'Failed to write sweep manifest', str(out_dir)) from e
    return summaries


def run_sweep(spec, base_cfg=None, g=None, **callbacks):
    spec.validate()
    base_cfg = base_cfg or TrainConfig()
    if spec.out_dir is None:
        raise ParameterError('Sweep needs an output directory')
    out_dir = ensure_dir(spec.out_dir)

    lock = get_output_lock(out_dir)
    try:
        lock.acquire()
    except filelock.Timeout:
        raise ContractError(f"Output directory '{out_dir}' is in use by another process") from None

    start_logging, stop_logging = setup_run_logging(out_dir)
    start_logging()
    try:
        log_resource_usage(log, 'Sweep start')
        start_time = time.perf_counter()

        if g is None:
            g = resolve_dataset(spec.dataset)
        split = make_split(g, spec.split_seed)
        split.check(g)
        split.save(out_dir / SPLIT_FILE)

        config = {'sweep': spec.to_dict(), 'train': base_cfg.to_dict()}
        try:
            (out_dir / CONFIG_FILE).write_text(json.dumps(config, indent=2), encoding='utf-8')
        except OSError as e:
            raise OSError(e.errno, 'Failed to write resolved config', str(out_dir)) from e

        sweep = Sweep(spec, g, split, base_cfg, run_root=out_dir / 'runs', **callbacks)
        rows = sweep.run()

        wallclock = time.perf_counter() - start_time
        summaries = write_sweep_outputs(
            out_dir,
            spec,
            rows,
            {'split_sizes': list(split.sizes), 'wallclock_s': wallclock}
        )
        for summary in summaries:
            log.info(f'\n{summary}')
        log_resource_usage(log, 'Sweep end')
        return rows, summaries
    finally:
        stop_logging()
        lock.release()
