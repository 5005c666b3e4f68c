import logging
import math

import numpy as np

from . import autodiff as ad
from .errors import CalibrationError, ContractError, DimensionError, ParameterError
from .metrics import REJECT


log = logging.getLogger('baselines')

SCORE_TPS = 'tps'
SCORE_APS = 'aps'
SCORE_KINDS = (SCORE_TPS, SCORE_APS)

SR_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
CONFORMAL_ALPHAS = (0.1, 0.125, 0.15, 0.175, 0.2)


class ConformalCalibration:

    def __init__(self, alpha, qhat, score_kind, size):
        if not math.isfinite(qhat):
            raise CalibrationError(f'Calibrated quantile is not finite: {qhat}')
        self._alpha = float(alpha)
        self._qhat = float(qhat)
        self._score_kind = score_kind
        self._size = int(size)

    def __repr__(self):
        return (
            f'ConformalCalibration(alpha={self._alpha}, qhat={self._qhat:.6f}, '
            f'score_kind={self._score_kind!r}, size={self._size})'
        )

    @property
    def alpha(self):
        return self._alpha

    @property
    def qhat(self):
        return self._qhat

    @property
    def score_kind(self):
        return self._score_kind

    @property
    def size(self):
        return self._size

    def to_dict(self):
        return {'alpha': self._alpha, 'qhat': self._qhat, 'score_kind': self._score_kind, 'size': self._size}


def _as_probs(probs):
    probs = probs.values if isinstance(probs, ad.Tensor) else np.asarray(probs, dtype=np.float64)
    single = probs.ndim == 1
    return np.atleast_2d(probs), single


def softmax_response_reject(probs, t):
    if not 0.0 < t < 1.0:
        raise ParameterError(f'Softmax-response threshold must be in (0, 1), got {t}')
    probs, single = _as_probs(probs)

    decisions = np.argmax(probs, axis=1)
    decisions[probs.max(axis=1) <= t] = REJECT
    return int(decisions[0]) if single else decisions


def softmax_response_at_coverage(probs, coverage):
    # Accepts the round(coverage * n) most confident rows, ties by row order
    if not 0.0 <= coverage <= 1.0:
        raise ParameterError(f'Coverage must be in [0, 1], got {coverage}')
    probs, _ = _as_probs(probs)

    num_accepted = int(np.floor(coverage * len(probs) + 0.5))
    order = np.argsort(-probs.max(axis=1), kind='stable')
    decisions = np.full(len(probs), REJECT, dtype=np.int64)
    accepted = order[:num_accepted]
    decisions[accepted] = np.argmax(probs[accepted], axis=1)
    return decisions


def _check_score_kind(score_kind):
    if score_kind not in SCORE_KINDS:
        raise ParameterError(f"score_kind must be one of {SCORE_KINDS}, got '{score_kind}'")


def _aps_all_labels(probs):
    # Cumulative mass of every label taken in descending probability order, ties by index
    order = np.argsort(-probs, axis=1, kind='stable')
    sorted_probs = np.take_along_axis(probs, order, axis=1)
    cumulative = np.cumsum(sorted_probs, axis=1)
    scores = np.empty_like(probs)
    np.put_along_axis(scores, order, cumulative, axis=1)
    return scores


def label_scores(probs, score_kind):
    _check_score_kind(score_kind)
    probs, _ = _as_probs(probs)
    if score_kind == SCORE_TPS:
        return 1.0 - probs
    return _aps_all_labels(probs)


def nonconformity_scores(probs, labels, score_kind):
    probs, _ = _as_probs(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (probs.shape[0],):
        raise DimensionError(f'{probs.shape[0]} probability rows for {len(labels)} labels')
    if len(labels) and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ContractError(f'Labels must be in [0, {probs.shape[1]})')
    scores = label_scores(probs, score_kind)
    return scores[np.arange(len(labels)), labels]


def conformal_quantile_rank(m, alpha):
    # The tolerance keeps products like 4 * 0.75 from rounding up past an exact integer
    return math.ceil((m + 1) * (1.0 - alpha) - 1e-9)


def conformal_calibrate(cal_probs, cal_labels, alpha, score_kind=SCORE_TPS):
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f'alpha must be in (0, 1), got {alpha}')
    scores = nonconformity_scores(cal_probs, cal_labels, score_kind)
    m = len(scores)
    if m == 0:
        raise CalibrationError('Conformal calibration set is empty')

    k = conformal_quantile_rank(m, alpha)
    if k > m:
        raise CalibrationError(
            f'Calibration set of {m} nodes is too small for alpha={alpha} (needs rank {k})'
        )
    qhat = float(np.sort(scores)[max(k, 1) - 1])
    log.debug(f'Conformal calibration: m={m} alpha={alpha} rank={k} qhat={qhat:.6f} ({score_kind})')
    return ConformalCalibration(alpha, qhat, score_kind, m)


def conformal_prediction_sets(probs, cal):
    return label_scores(probs, cal.score_kind) <= cal.qhat


def conformal_set_sizes(probs, cal):
    return conformal_prediction_sets(probs, cal).sum(axis=1)


def conformal_reject(probs, cal, return_empty=False):
    probs, single = _as_probs(probs)
    sets = conformal_prediction_sets(probs, cal)
    sizes = sets.sum(axis=1)

    decisions = np.full(len(sizes), REJECT, dtype=np.int64)
    singleton = sizes == 1
    decisions[singleton] = np.argmax(sets[singleton], axis=1)
    empty = int(np.count_nonzero(sizes == 0))
    if empty:
        log.debug(f'{empty} empty conformal prediction sets rejected')

    result = int(decisions[0]) if single else decisions
    if return_empty:
        return result, empty
    return result
