import enum
import logging

import numpy as np

from . import autodiff as ad
from .cost import cost_loss, cost_predict
from .coverage import (
    WIRING_SHARED,
    AuxiliaryHead,
    SelectionHead,
    combine_terms,
    cov_predict,
    objective_terms
)
from .errors import ContractError, DimensionError, ParameterError
from .layers import Encoder


log = logging.getLogger('model')


class Variant(enum.StrEnum):
    VANILLA = 'vanilla'
    COST = 'cost'
    COV = 'cov'


class ModelOutput:

    def __init__(self, probs, embeddings, selection=None, auxiliary=None):
        # K columns, or K + 1 for the cost variant with the rejection class last
        self.probs = probs
        self.embeddings = embeddings
        self.selection = selection
        self.auxiliary = auxiliary


class RejectModel:

    def __init__(
            self,
            variant,
            encoder_cfg,
            num_features,
            num_classes,
            rng,
            rejection_cost=None,
            coverage_config=None
        ):
        self._variant = Variant(variant)
        self._num_classes = int(num_classes)
        self._rejection_cost = rejection_cost
        self._coverage_config = coverage_config
        if num_classes < 2:
            raise ParameterError(f'At least two classes are needed, got {num_classes}')

        self._selection_head = None
        self._auxiliary_head = None

        if self._variant == Variant.COST:
            if rejection_cost is None:
                raise ParameterError('The cost variant needs a rejection cost')
            rejection_cost.check(num_classes)
            num_outputs = num_classes + 1
        else:
            num_outputs = num_classes

        self._encoder = Encoder(encoder_cfg, num_features, num_outputs, rng)

        if self._variant == Variant.COV:
            if coverage_config is None:
                raise ParameterError('The coverage variant needs a coverage objective config')
            coverage_config.validate()
            width = self._encoder.penultimate_width
            self._selection_head = SelectionHead(
                width,
                rng,
                hidden_features=coverage_config.hidden_features,
                momentum=coverage_config.bn_momentum
            )
            if coverage_config.head_wiring != WIRING_SHARED:
                self._auxiliary_head = AuxiliaryHead(width, num_classes, rng)

    def __repr__(self):
        return f'RejectModel(variant={self._variant.value}, num_classes={self._num_classes})'

    @property
    def variant(self):
        return self._variant

    @property
    def num_classes(self):
        return self._num_classes

    @property
    def encoder(self):
        return self._encoder

    @property
    def rejection_cost(self):
        return self._rejection_cost

    @property
    def coverage_config(self):
        return self._coverage_config

    def named_parameters(self):
        named = self._encoder.named_parameters('encoder')
        if self._selection_head is not None:
            for name, tensor in self._selection_head.params.items():
                named[f'selection.{name}'] = tensor
        if self._auxiliary_head is not None:
            for name, tensor in self._auxiliary_head.params.items():
                named[f'auxiliary.{name}'] = tensor
        return named

    def forward(self, g, train_flag, rng=None):
        pre_logits, embeddings = self._encoder.forward(g, train_flag, rng)
        probs = ad.row_softmax(pre_logits)
        if self._variant != Variant.COV:
            return ModelOutput(probs, embeddings)

        selection = self._selection_head.forward(embeddings, train_flag)
        if self._auxiliary_head is None:
            auxiliary = probs
        else:
            auxiliary = self._auxiliary_head.forward(embeddings)
        return ModelOutput(probs, embeddings, selection, auxiliary)

    def loss(self, output, idx, labels):
        idx = np.asarray(idx, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != idx.shape:
            raise DimensionError(f'{len(idx)} node indices for {len(labels)} labels')
        if len(idx) == 0:
            raise ContractError('Loss over an empty node set')

        probs = ad.gather_rows(output.probs, idx)
        if self._variant == Variant.VANILLA:
            loss = ad.mean_all(ad.negative_log_likelihood(probs, labels))
            return loss, {'cross_entropy': loss.item()}

        if self._variant == Variant.COST:
            loss = cost_loss(probs, labels, self._rejection_cost)
            return loss, {'cost_loss': loss.item()}

        selection = ad.gather_rows(output.selection, idx)
        auxiliary = ad.gather_rows(output.auxiliary, idx)
        terms = objective_terms(probs, selection, auxiliary, labels, self._coverage_config)
        loss = combine_terms(terms, self._coverage_config)
        summary = {name: value.item() for name, value in terms.items()}
        summary['objective'] = loss.item()
        return loss, summary

    def decide(self, output, idx=None, tau=None):
        probs = output.probs.values
        if idx is not None:
            probs = probs[np.asarray(idx, dtype=np.int64)]

        if self._variant == Variant.VANILLA:
            return np.argmax(probs, axis=1)
        if self._variant == Variant.COST:
            return cost_predict(probs)

        scores = output.selection.values[:, 0]
        if idx is not None:
            scores = scores[np.asarray(idx, dtype=np.int64)]
        if tau is None:
            tau = self._coverage_config.threshold
        return cov_predict(probs, scores, tau)

    def state_arrays(self):
        arrays = {name: tensor.values.copy() for name, tensor in self.named_parameters().items()}
        if self._selection_head is not None:
            state = self._selection_head.bn_state
            arrays['selection.bn.running_mean'] = state.running_mean.copy()
            arrays['selection.bn.running_var'] = state.running_var.copy()
        return arrays

    def load_state_arrays(self, arrays):
        named = self.named_parameters()
        expected = set(named)
        if self._selection_head is not None:
            expected |= {'selection.bn.running_mean', 'selection.bn.running_var'}
        missing = expected - set(arrays)
        if missing:
            raise ContractError(f'Checkpoint is missing arrays: {", ".join(sorted(missing))}')
        unexpected = set(arrays) - expected
        if unexpected:
            raise ContractError(f'Checkpoint has unexpected arrays: {", ".join(sorted(unexpected))}')

        for name, tensor in named.items():
            tensor.assign(arrays[name])
        if self._selection_head is not None:
            state = self._selection_head.bn_state
            state.running_mean = np.array(arrays['selection.bn.running_mean'], dtype=np.float64)
            state.running_var = np.array(arrays['selection.bn.running_var'], dtype=np.float64)

    def save(self, path):
        ad.save_parameters(path, self.state_arrays())

    def load(self, path):
        self.load_state_arrays(ad.load_parameters(path))


def build_model(cfg, num_features, num_classes, rng):
    return RejectModel(
        cfg.variant,
        cfg.encoder,
        num_features,
        num_classes,
        rng,
        rejection_cost=cfg.cost,
        coverage_config=cfg.coverage
    )
