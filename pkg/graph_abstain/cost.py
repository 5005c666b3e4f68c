import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, ParameterError
from .metrics import REJECT


log = logging.getLogger('cost')


@dataclass(frozen=True)
class RejectionCost:
    d: float

    def validate(self):
        if not 0.0 < self.d <= 1.0:
            raise ParameterError(f'Rejection cost d must be in (0, 1], got {self.d}')

    def never_rejects(self, num_classes):
        return self.d >= (num_classes - 1) / num_classes

    def check(self, num_classes):
        self.validate()
        if self.never_rejects(num_classes):
            log.warning(
                f'Rejection cost d={self.d} is >= (K-1)/K={(num_classes - 1) / num_classes:.4f} '
                f'for K={num_classes}; rejection is never preferred'
            )

    def to_dict(self):
        return {'d': self.d}

    @classmethod
    def from_dict(cls, data):
        return cls(float(data['d']))


def _as_cost(d):
    cost = d if isinstance(d, RejectionCost) else RejectionCost(float(d))
    cost.validate()
    return cost


def cost_loss(probs, y, d):
    cost = _as_cost(d)
    y = np.asarray(y, dtype=np.int64)
    num_classes = probs.shape[1] - 1
    if y.shape != (probs.shape[0],):
        raise DimensionError(f'{probs.shape[0]} probability rows for {len(y)} labels')
    if np.any(y == num_classes):
        raise ContractError('Training labels contain the rejection class')
    if np.any(y < 0) or np.any(y > num_classes):
        raise ContractError(f'Training labels must be in [0, {num_classes})')

    class_term = ad.negative_log_likelihood(probs, y)
    reject_term = ad.neg(ad.log(ad.column(probs, num_classes)))
    return ad.mean_all(ad.add(class_term, ad.scale(reject_term, 1.0 - cost.d)))


def cost_predict(probs):
    probs = probs.values if isinstance(probs, ad.Tensor) else np.asarray(probs, dtype=np.float64)
    single = probs.ndim == 1
    probs = np.atleast_2d(probs)
    num_classes = probs.shape[1] - 1

    # argmax returns the lowest index among ties
    decisions = np.argmax(probs, axis=1)
    decisions[decisions == num_classes] = REJECT
    return int(decisions[0]) if single else decisions
