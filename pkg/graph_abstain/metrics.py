import math

import numpy as np

from .errors import ContractError, ParameterError


REJECT = -1
REJECT_LABEL = 'REJECT'

RESULTS_SCHEMA_VERSION = 2
RESULT_COLUMNS = (
    'dataset',
    'variant',
    'param',
    'seed',
    'coverage',
    'selective_accuracy',
    'zero_d_one_risk',
    'epochs',
    'wallclock_s',
    'empty_sets',
    'error'
)
METRIC_COLUMNS = ('coverage', 'selective_accuracy', 'zero_d_one_risk')


def format_decision(decision):
    decision = int(decision)
    return REJECT_LABEL if decision == REJECT else str(decision)


class RejectMetrics:

    def __init__(self, accepted, rejected, correct, d):
        self._accepted = int(accepted)
        self._rejected = int(rejected)
        self._correct = int(correct)
        self._d = float(d)

    def __str__(self):
        accuracy = '-' if self.selective_accuracy is None else f'{self.selective_accuracy:.4f}'
        return (
            'Coverage Accuracy 0-d-1  Accepted Rejected Correct\n'
            f'{self.coverage:<8.4f} {accuracy:<8} {self.zero_d_one_risk:<6.4f} '
            f'{self._accepted:<8} {self._rejected:<8} {self._correct:<7}'
        )

    @property
    def accepted(self):
        return self._accepted

    @property
    def rejected(self):
        return self._rejected

    @property
    def correct(self):
        return self._correct

    @property
    def counts(self):
        return self._accepted, self._rejected, self._correct

    @property
    def total(self):
        return self._accepted + self._rejected

    @property
    def d(self):
        return self._d

    @property
    def coverage(self):
        return self._accepted / self.total

    @property
    def selective_accuracy(self):
        if self._accepted == 0:
            return None
        return self._correct / self._accepted

    @property
    def zero_d_one_risk(self):
        wrong = self._accepted - self._correct
        return (self._rejected * self._d + wrong) / self.total

    def to_dict(self):
        return {
            'coverage': self.coverage,
            'selective_accuracy': self.selective_accuracy,
            'zero_d_one_risk': self.zero_d_one_risk,
            'accepted': self._accepted,
            'rejected': self._rejected,
            'correct': self._correct,
            'd': self._d
        }


def compute_metrics(decisions, labels, d):
    decisions = np.asarray(decisions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if decisions.shape != labels.shape:
        raise ContractError(f'{len(decisions)} decisions for {len(labels)} labels')
    if len(decisions) == 0:
        raise ContractError('No decisions to evaluate')
    if not 0.0 <= d <= 1.0:
        raise ParameterError(f'Rejection cost d must be in [0, 1], got {d}')

    rejected = decisions == REJECT
    accepted = ~rejected
    correct = np.count_nonzero(accepted & (decisions == labels))
    return RejectMetrics(np.count_nonzero(accepted), np.count_nonzero(rejected), correct, d)


def mean_std(values):
    values = [value for value in values if value is not None and not math.isnan(value)]
    if not values:
        return None, None
    mean = float(np.mean(values))
    if len(values) < 2:
        return mean, None
    return mean, float(np.std(values, ddof=1))


class MetricSummary:

    def __init__(self, param):
        self._param = param
        self._values = {name: [] for name in METRIC_COLUMNS}
        self._failed = 0

    def __str__(self):
        lines = [f'Param: {self._param}', 'Metric              Mean     Std      Runs']
        for name in METRIC_COLUMNS:
            mean, std = mean_std(self._values[name])
            mean_str = '-' if mean is None else f'{mean:.4f}'
            std_str = '-' if std is None else f'{std:.4f}'
            lines.append(f'{name:<19} {mean_str:<8} {std_str:<8} {len(self._values[name])}')
        lines.append(f'Failed runs: {self._failed}')
        return '\n'.join(lines)

    @property
    def param(self):
        return self._param

    @property
    def runs(self):
        return len(self._values['coverage'])

    @property
    def failed(self):
        return self._failed

    def values(self, name):
        return list(self._values[name])

    def update(self, row):
        if row.get('error'):
            self._failed += 1
            return
        for name in METRIC_COLUMNS:
            value = row.get(name)
            if value is not None and not (isinstance(value, float) and math.isnan(value)):
                self._values[name].append(float(value))

    def to_dict(self):
        summary = {'param': self._param, 'n_ok': self.runs, 'n_failed': self._failed}
        for name in METRIC_COLUMNS:
            mean, std = mean_std(self._values[name])
            summary[f'{name}_mean'] = mean
            summary[f'{name}_std'] = std
        return summary


def summarize_rows(rows):
    summaries = {}
    for row in rows:
        param = row['param']
        if param not in summaries:
            summaries[param] = MetricSummary(param)
        summaries[param].update(row)
    return [summaries[param] for param in sorted(summaries)]
