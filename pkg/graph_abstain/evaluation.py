import json
import logging
from pathlib import Path

import pandas as pd

from .baselines import SCORE_TPS, conformal_calibrate, conformal_reject, softmax_response_reject
from .coverage import calibrate_threshold
from .errors import ContractError, ParameterError
from .metrics import compute_metrics, format_decision
from .model import Variant
from .training import RUN_MANIFEST_FILE


log = logging.getLogger('evaluation')

METHOD_MODEL = 'model'
METHOD_SR = 'sr'
METHOD_CONFORMAL = 'conformal'
METHODS = (METHOD_MODEL, METHOD_SR, METHOD_CONFORMAL)

DEFAULT_REJECTION_COST = 0.5

PREDICTIONS_FILE = 'predictions.csv'
METRICS_FILE = 'metrics.json'
EMBEDDINGS_FILE = 'embeddings.csv'


class Evaluation:

    def __init__(self, method, param, nodes, decisions, labels, metrics, empty_sets=None, calibration=None):
        self.method = method
        self.param = param
        self.nodes = nodes
        self.decisions = decisions
        self.labels = labels
        self.metrics = metrics
        self.empty_sets = empty_sets
        self.calibration = calibration

    def __repr__(self):
        return f'Evaluation(method={self.method}, param={self.param}, coverage={self.metrics.coverage:.4f})'

    def to_dict(self):
        data = {'method': self.method, 'param': self.param, **self.metrics.to_dict()}
        if self.empty_sets is not None:
            data['empty_sets'] = self.empty_sets
        if self.calibration is not None:
            data['calibration'] = self.calibration.to_dict()
        return data


def metric_cost(model, d=None):
    if model.variant == Variant.COST:
        return model.rejection_cost.d
    return DEFAULT_REJECTION_COST if d is None else d


def predict(model, g):
    return model.forward(g, False)


def evaluate(
        model,
        g,
        split,
        output=None,
        method=METHOD_MODEL,
        tau=None,
        threshold=None,
        alpha=None,
        score_kind=SCORE_TPS,
        d=None
    ):
    if method not in METHODS:
        raise ParameterError(f"method must be one of {METHODS}, got '{method}'")
    if output is None:
        output = predict(model, g)

    nodes = split.test_idx
    labels = g.labels[nodes]
    empty_sets = None
    cal = None

    if method == METHOD_MODEL:
        decisions = model.decide(output, nodes, tau)
        param = tau
    else:
        if model.variant != Variant.VANILLA:
            raise ContractError(f'The {method} baseline runs on a vanilla model, got {model.variant}')
        probs = output.probs.values
        if method == METHOD_SR:
            if threshold is None:
                raise ParameterError('Softmax-response evaluation needs a threshold')
            decisions = softmax_response_reject(probs[nodes], threshold)
            param = threshold
        else:
            if alpha is None:
                raise ParameterError('Conformal evaluation needs alpha')
            cal_idx = split.val_idx
            cal = conformal_calibrate(probs[cal_idx], g.labels[cal_idx], alpha, score_kind)
            decisions, empty_sets = conformal_reject(probs[nodes], cal, return_empty=True)
            param = alpha

    metrics = compute_metrics(decisions, labels, metric_cost(model, d))
    log.debug(f'Evaluation {method} param={param}: {metrics.to_dict()}')
    return Evaluation(method, param, nodes, decisions, labels, metrics, empty_sets, cal)


def recalibrate(model, g, split, target_coverage):
    if model.variant != Variant.COV:
        raise ContractError(f'Only coverage models carry a threshold, got {model.variant}')
    output = predict(model, g)
    scores = output.selection.values[split.val_idx, 0]
    return calibrate_threshold(scores, target_coverage)


def write_predictions(path, evaluation):
    path = Path(path)
    table = pd.DataFrame({
        'node': evaluation.nodes,
        'prediction': [format_decision(decision) for decision in evaluation.decisions],
        'label': evaluation.labels
    })
    try:
        table.to_csv(path, index=False)
    except OSError as e:
        raise OSError(e.errno, 'Failed to write predictions', str(path)) from e


def write_metrics(path, evaluation, extra=None):
    path = Path(path)
    data = evaluation.to_dict()
    if extra:
        data.update(extra)
    try:
        path.write_text(json.dumps(data, indent=2), encoding='utf-8')
    except OSError as e:
        raise OSError(e.errno, 'Failed to write metrics', str(path)) from e


def embeddings_table(model, g, split, tau=None):
    output = predict(model, g)
    nodes = split.test_idx
    embeddings = output.embeddings.values[nodes]
    decisions = model.decide(output, nodes, tau)

    columns = {f'emb_{i}': embeddings[:, i] for i in range(embeddings.shape[1])}
    table = pd.DataFrame(columns)
    table['prediction'] = [format_decision(decision) for decision in decisions]
    table['label'] = g.labels[nodes]
    return table


def export_embeddings(model, g, split, path, tau=None):
    path = Path(path)
    table = embeddings_table(model, g, split, tau)
    try:
        table.to_csv(path, index=False)
    except OSError as e:
        raise OSError(e.errno, 'Failed to write embeddings', str(path)) from e
    log.info(f"Wrote {len(table)} embeddings to '{path}'")
    return table


def run_dir_of(path):
    path = Path(path)
    if path.is_file() and path.name == RUN_MANIFEST_FILE:
        return path.parent
    if not (path / RUN_MANIFEST_FILE).is_file():
        raise ContractError(f"'{path}' is not a run directory (no {RUN_MANIFEST_FILE})")
    return path

