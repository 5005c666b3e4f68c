import copy
import dataclasses
import json
import logging
import tomllib
from pathlib import Path

from .cost import RejectionCost
from .coverage import CoverageObjectiveConfig
from .errors import ParameterError, ParseError
from .layers import EncoderConfig
from .model import Variant
from .sweep import SweepSpec
from .training import CONFIG_FILE, TrainConfig


log = logging.getLogger('config')

SECTIONS = ('train', 'encoder', 'cost', 'coverage', 'sweep')


def load_config_file(path):
    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise OSError(e.errno, 'Failed to read config file', str(path)) from e

    if path.suffix == '.toml':
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ParseError(str(e), path=path) from e
    elif path.suffix == '.json':
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, path=path, line_number=e.lineno) from e
    else:
        raise ParameterError(f"Config file must be .json or .toml, got '{path.name}'")

    if not isinstance(data, dict):
        raise ParseError('Config root must be a table', path=path)
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ParameterError(f'Unknown config sections: {", ".join(sorted(unknown))}')
    return data


def deep_merge(base, overrides):
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            current = merged.get(key)
            merged[key] = deep_merge(current if isinstance(current, dict) else {}, value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _build(cls, section, data):
    names = {field.name for field in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ParameterError(f'Unknown keys in [{section}]: {", ".join(sorted(unknown))}')
    try:
        return cls(**data)
    except TypeError as e:
        raise ParameterError(f'Invalid [{section}] section: {e}') from e


def build_train_config(config, overrides=None):
    config = deep_merge(config, overrides or {})
    train = dict(config.get('train', {}))
    variant = train.get('variant', Variant.VANILLA.value)
    for nested in ('cost', 'coverage', 'encoder'):
        if nested in train:
            raise ParameterError(f"Put '{nested}' settings in their own [{nested}] section")

    encoder = _build(EncoderConfig, 'encoder', config.get('encoder', {}))
    cost = None
    coverage = None
    if variant == Variant.COST.value:
        if 'd' not in config.get('cost', {}):
            raise ParameterError('The cost variant needs a rejection cost d')
        cost = _build(RejectionCost, 'cost', config['cost'])
    elif variant == Variant.COV.value:
        coverage = _build(CoverageObjectiveConfig, 'coverage', config.get('coverage', {}))

    cfg = _build(TrainConfig, 'train', {**train, 'cost': cost, 'coverage': coverage, 'encoder': encoder})
    cfg.validate()
    return cfg


def build_sweep_spec(config, overrides=None):
    config = deep_merge(config, overrides or {})
    sweep = dict(config.get('sweep', {}))
    if 'grid' in sweep:
        sweep['grid'] = tuple(sweep['grid'])
    spec = _build(SweepSpec, 'sweep', sweep)
    spec.validate()
    return spec


def write_resolved_config(out_dir, data):
    path = Path(out_dir) / CONFIG_FILE
    try:
        path.write_text(json.dumps(data, indent=2), encoding='utf-8')
    except OSError as e:
        raise OSError(e.errno, 'Failed to write resolved config', str(path)) from e
    log.debug(f"Resolved config written to '{path}'")
    return path
