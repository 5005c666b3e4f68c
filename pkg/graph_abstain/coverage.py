import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, ParameterError
from .layers import glorot_uniform, init_linear, linear_forward
from .metrics import REJECT


log = logging.getLogger('coverage')

COVERAGE_FLOOR = 1e-8
RISK_CAP = 1e6

WIRING_SEPARATE = 'separate'
WIRING_SHARED = 'shared'
WIRINGS = (WIRING_SEPARATE, WIRING_SHARED)


@dataclass(frozen=True)
class CoverageObjectiveConfig:
    target_coverage: float = 0.7
    penalty_weight: float = 32.0
    mix: float = 0.5
    threshold: float = 0.5
    hidden_features: int = 512
    bn_momentum: float = 0.9
    head_wiring: str = WIRING_SEPARATE

    def validate(self):
        if not 0.0 < self.target_coverage <= 1.0:
            raise ParameterError(f'target_coverage must be in (0, 1], got {self.target_coverage}')
        if self.penalty_weight < 0.0:
            raise ParameterError(f'penalty_weight must be >= 0, got {self.penalty_weight}')
        if not 0.0 < self.mix < 1.0:
            raise ParameterError(f'mix must be in (0, 1), got {self.mix}')
        if not 0.0 <= self.threshold <= 1.0:
            raise ParameterError(f'threshold must be in [0, 1], got {self.threshold}')
        if self.hidden_features < 1:
            raise ParameterError(f'hidden_features must be >= 1, got {self.hidden_features}')
        if self.head_wiring not in WIRINGS:
            raise ParameterError(f"head_wiring must be one of {WIRINGS}, got '{self.head_wiring}'")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


# FC -> batch norm -> ReLU -> FC -> sigmoid, one score in [0, 1] per node
class SelectionHead:

    def __init__(self, in_features, rng, hidden_features=512, momentum=0.9):
        self._params = {
            'W1': ad.parameter(glorot_uniform(rng, in_features, hidden_features)),
            'b1': ad.parameter(np.zeros((1, hidden_features))),
            'gamma': ad.parameter(np.ones((1, hidden_features))),
            'beta': ad.parameter(np.zeros((1, hidden_features))),
            'W2': ad.parameter(glorot_uniform(rng, hidden_features, 1)),
            'b2': ad.parameter(np.zeros((1, 1)))
        }
        self._bn_state = ad.BatchNormState(hidden_features, momentum=momentum)

    @property
    def params(self):
        return self._params

    @property
    def bn_state(self):
        return self._bn_state

    def forward(self, h, train_flag):
        p = self._params
        x = ad.add_bias(ad.matmul(h, p['W1']), p['b1'])
        x = ad.batch_norm_1d(x, p['gamma'], p['beta'], self._bn_state, train_flag)
        x = ad.relu(x)
        x = ad.add_bias(ad.matmul(x, p['W2']), p['b2'])
        return ad.sigmoid(x)


class AuxiliaryHead:

    def __init__(self, in_features, num_classes, rng):
        self._params = init_linear(rng, in_features, num_classes)

    @property
    def params(self):
        return self._params

    def forward(self, h):
        return ad.row_softmax(linear_forward(h, self._params))


def _as_tensor(value):
    return value if isinstance(value, ad.Tensor) else ad.constant(value)


def empirical_coverage(sel):
    sel = _as_tensor(sel)
    if sel.shape[0] == 0:
        raise ContractError('Empirical coverage of an empty split')
    return ad.mean_all(sel)


def selective_risk(losses, sel, phi=None):
    losses = _as_tensor(losses)
    sel = _as_tensor(sel)
    if losses.shape != sel.shape:
        raise DimensionError(f'Loss shape {losses.shape} does not match selection shape {sel.shape}')
    if phi is None:
        phi = empirical_coverage(sel)

    weighted = ad.mul(losses, sel)
    if phi.item() < COVERAGE_FLOOR:
        surrogate = ad.scale(ad.sum_all(weighted), 1.0 / COVERAGE_FLOOR)
        if surrogate.item() > RISK_CAP:
            log.debug(f'Selective risk surrogate clamped at {RISK_CAP}')
            return ad.constant(np.array([[RISK_CAP]]))
        return surrogate
    return ad.div_scalar(ad.mean_all(weighted), phi)


def coverage_penalty(c, phi, lam):
    phi = _as_tensor(phi)
    shortfall = ad.relu(ad.add_scalar(ad.neg(phi), c))
    return ad.scale(ad.square(shortfall), lam)


def objective_terms(f, g, a, y, cfg):
    y = np.asarray(y, dtype=np.int64)
    prediction_losses = ad.negative_log_likelihood(f, y)
    phi = empirical_coverage(g)
    risk = selective_risk(prediction_losses, g, phi)
    penalty = coverage_penalty(cfg.target_coverage, phi, cfg.penalty_weight)
    auxiliary = ad.mean_all(ad.negative_log_likelihood(a, y))
    return {
        'coverage': phi,
        'selective_risk': risk,
        'coverage_penalty': penalty,
        'auxiliary': auxiliary
    }


def combine_terms(terms, cfg):
    selective = ad.add(terms['selective_risk'], terms['coverage_penalty'])
    return ad.add(ad.scale(selective, cfg.mix), ad.scale(terms['auxiliary'], 1.0 - cfg.mix))


def combined_objective(f, g, a, y, cfg):
    return combine_terms(objective_terms(f, g, a, y, cfg), cfg)


def calibrate_threshold(val_scores, c):
    scores = np.asarray(val_scores.values if isinstance(val_scores, ad.Tensor) else val_scores, dtype=np.float64)
    scores = scores.ravel()
    if not 0.0 < c <= 1.0:
        raise ParameterError(f'Target coverage must be in (0, 1], got {c}')
    if len(scores) == 0:
        raise ContractError('Threshold calibration needs at least one validation score')

    ordered = np.sort(scores)[::-1]
    # Round half up, keeping at least one accepted node
    m = int(np.floor(c * len(ordered) + 0.5))
    m = min(max(m, 1), len(ordered))
    return float(ordered[m - 1])


def cov_predict(f_probs, g_scores, tau):
    probs = f_probs.values if isinstance(f_probs, ad.Tensor) else np.asarray(f_probs, dtype=np.float64)
    scores = g_scores.values if isinstance(g_scores, ad.Tensor) else np.asarray(g_scores, dtype=np.float64)
    single = probs.ndim == 1
    probs = np.atleast_2d(probs)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)

    decisions = np.argmax(probs, axis=1)
    decisions[scores < tau] = REJECT
    return int(decisions[0]) if single else decisions
