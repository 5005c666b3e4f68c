import datetime
import os
from pathlib import Path

import filelock
import platformdirs
import psutil


def _default_data_path():
    override = os.environ.get('GRAPH_ABSTAIN_HOME')
    if override:
        return Path(override)
    return platformdirs.user_data_path('graph-abstain', False)


_data_path = _default_data_path()
_logs_path = _data_path / 'logs'
_datasets_path = _data_path / 'datasets'
_runs_path = _data_path / 'runs'


def create_app_dirs():
    try:
        _data_path.mkdir(parents=True, exist_ok=True)
        _logs_path.mkdir(parents=True, exist_ok=True)
        _datasets_path.mkdir(parents=True, exist_ok=True)
        _runs_path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(e.errno, 'Failed to create application directory', str(_data_path)) from e


def get_logs_dir():
    return _logs_path


def get_datasets_dir():
    return _datasets_path


def get_runs_dir():
    return _runs_path


def ensure_dir(path, description='output directory'):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(e.errno, f'Failed to create {description}', str(path)) from e
    return path


def make_run_dir(root, prefix=None):
    root = Path(root)
    timestamp = datetime.datetime.now().astimezone().strftime('%Y-%m-%dT%H-%M-%S%z')
    name = f'{prefix}-{timestamp}' if prefix else timestamp
    run_dir = root / name
    i = 2
    while run_dir.exists():
        run_dir = root / f'{name}.{i}'
        i += 1
    return ensure_dir(run_dir, 'run directory')


def get_output_lock(out_dir):
    lock_file = Path(out_dir) / '.lock'
    lock = filelock.FileLock(lock_file, blocking=False)
    return lock


def default_jobs():
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


def log_resource_usage(logger, label):
    try:
        process = psutil.Process()
        rss = process.memory_info().rss
        cpu = process.cpu_times()
    except psutil.Error as e:
        logger.debug('Error reading process resource usage', exc_info=True)
        logger.warning(f'Could not read process resource usage: {e}')
        return
    logger.info(f'{label}: rss {rss / 2 ** 20:.1f} MiB, cpu user {cpu.user:.1f}s, system {cpu.system:.1f}s')
