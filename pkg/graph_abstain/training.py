import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cost import RejectionCost
from .coverage import CoverageObjectiveConfig, calibrate_threshold
from .errors import ContractError, NumericFaultError, ParameterError
from .graph import SplitSpec, resolve_dataset
from .layers import EncoderConfig
from .model import Variant, build_model
from .version import __version__


log = logging.getLogger('training')

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_FILE = 'checkpoint.npz'
SPLIT_FILE = 'split.npz'
RUN_MANIFEST_FILE = 'manifest.json'
CONFIG_FILE = 'config.json'

ASSUMPTIONS = {
    'optimizer': 'adam (beta1=0.9, beta2=0.999, eps=1e-8), weight decay added to the gradient',
    'learning_rate': 'default 0.005, not stated for the reject-option models',
    'weight_decay': 'default 5e-4, not stated for the reject-option models',
    'max_epochs': 'default 3000 with early stopping on the validation value of the training loss',
    'split': 'one fixed split per sweep; seeds vary initialization and dropout'
}


@dataclass(frozen=True)
class TrainConfig:
    variant: str = Variant.VANILLA.value
    learning_rate: float = 0.005
    weight_decay: float = 5e-4
    max_epochs: int = 3000
    patience: int = 100
    seed: int = 0
    cost: RejectionCost | None = None
    coverage: CoverageObjectiveConfig | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self):
        try:
            variant = Variant(self.variant)
        except ValueError:
            raise ParameterError(f"Unknown variant '{self.variant}'") from None
        if self.learning_rate <= 0.0:
            raise ParameterError(f'learning_rate must be > 0, got {self.learning_rate}')
        if self.weight_decay < 0.0:
            raise ParameterError(f'weight_decay must be >= 0, got {self.weight_decay}')
        if self.max_epochs < 1:
            raise ParameterError(f'max_epochs must be >= 1, got {self.max_epochs}')
        if self.patience < 1:
            raise ParameterError(f'patience must be >= 1, got {self.patience}')

        blocks = [name for name, block in (('cost', self.cost), ('coverage', self.coverage)) if block is not None]
        expected = {Variant.VANILLA: [], Variant.COST: ['cost'], Variant.COV: ['coverage']}[variant]
        if blocks != expected:
            raise ParameterError(
                f"Variant '{variant}' takes {expected or 'no variant block'}, got {blocks or 'none'}"
            )

        if self.cost is not None:
            self.cost.validate()
        if self.coverage is not None:
            self.coverage.validate()
        self.encoder.validate()

    def to_dict(self):
        return {
            'variant': str(self.variant),
            'learning_rate': self.learning_rate,
            'weight_decay': self.weight_decay,
            'max_epochs': self.max_epochs,
            'patience': self.patience,
            'seed': self.seed,
            'cost': None if self.cost is None else self.cost.to_dict(),
            'coverage': None if self.coverage is None else self.coverage.to_dict(),
            'encoder': self.encoder.to_dict()
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        cost = data.pop('cost', None)
        coverage = data.pop('coverage', None)
        encoder = data.pop('encoder', None)
        return cls(
            cost=None if cost is None else RejectionCost.from_dict(cost),
            coverage=None if coverage is None else CoverageObjectiveConfig.from_dict(coverage),
            encoder=EncoderConfig() if encoder is None else EncoderConfig.from_dict(encoder),
            **data
        )


class AdamState:

    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}


def adam_step(params, grads, state, lr, weight_decay):
    state.step += 1
    t = state.step
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        grad = grad + weight_decay * tensor.values

        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(grad)
            v = np.zeros_like(grad)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
        state.m[name] = m
        state.v[name] = v

        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        tensor.assign(tensor.values - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))


class RunManifest:

    def __init__(
            self,
            config,
            seed,
            epochs_run,
            best_epoch,
            best_val_loss,
            tau=None,
            calibrated_coverage=None,
            checkpoint=None,
            split=None,
            dataset=None,
            num_features=None,
            num_classes=None,
            wallclock_s=None,
            assumptions=None,
            version=__version__
        ):
        self.config = config
        self.seed = seed
        self.epochs_run = epochs_run
        self.best_epoch = best_epoch
        self.best_val_loss = best_val_loss
        self.tau = tau
        self.calibrated_coverage = calibrated_coverage
        self.checkpoint = checkpoint
        self.split = split
        self.dataset = dataset
        self.num_features = num_features
        self.num_classes = num_classes
        self.wallclock_s = wallclock_s
        self.assumptions = dict(ASSUMPTIONS) if assumptions is None else assumptions
        self.version = version

    def __repr__(self):
        return (
            f'RunManifest(variant={self.config["variant"]}, seed={self.seed}, epochs_run={self.epochs_run}, '
            f'best_epoch={self.best_epoch}, best_val_loss={self.best_val_loss:.6f}, tau={self.tau})'
        )

    @property
    def train_config(self):
        return TrainConfig.from_dict(self.config)

    def to_dict(self):
        return {
            'version': self.version,
            'config': self.config,
            'seed': self.seed,
            'epochs_run': self.epochs_run,
            'best_epoch': self.best_epoch,
            'best_val_loss': self.best_val_loss,
            'tau': self.tau,
            'calibrated_coverage': self.calibrated_coverage,
            'checkpoint': self.checkpoint,
            'split': self.split,
            'dataset': self.dataset,
            'num_features': self.num_features,
            'num_classes': self.num_classes,
            'wallclock_s': self.wallclock_s,
            'assumptions': self.assumptions
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def save(self, path):
        path = Path(path)
        try:
            path.write_text(json.dumps(self.to_dict(), indent=2), encoding='utf-8')
        except OSError as e:
            raise OSError(e.errno, 'Failed to write run manifest', str(path)) from e

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except OSError as e:
            raise OSError(e.errno, 'Failed to read run manifest', str(path)) from e
        return cls.from_dict(data)


class Trainer:

    def __init__(
            self,
            g,
            split,
            cfg,
            cb_on_epoch_end=None,
            cb_on_stop=None
        ):
        cfg.validate()
        split.check(g)
        if len(split.train_idx) == 0 or len(split.val_idx) == 0:
            raise ContractError('Training needs non-empty train and validation splits')

        self._cb_on_epoch_end = cb_on_epoch_end
        self._cb_on_stop = cb_on_stop

        self._g = g
        self._split = split
        self._cfg = cfg
        self._rng = np.random.default_rng(cfg.seed)
        self._model = build_model(cfg, g.num_features, g.num_classes, self._rng)
        self._adam = AdamState()

        self._running = False
        self._stop_requested = False

        self._epochs_run = 0
        self._best_epoch = 0
        self._best_val_loss = math.inf
        self._best_state = None
        self._tau = None

    @property
    def model(self):
        return self._model

    @property
    def running(self):
        return self._running

    @property
    def epochs_run(self):
        return self._epochs_run

    @property
    def best_epoch(self):
        return self._best_epoch

    @property
    def best_val_loss(self):
        return self._best_val_loss

    @property
    def tau(self):
        return self._tau

    def stop(self):
        log.debug('Training stop requested')
        self._stop_requested = True

    def _train_epoch(self, epoch):
        g = self._g
        train_idx = self._split.train_idx
        params = self._model.named_parameters()

        try:
            with ad.Tape() as tape:
                output = self._model.forward(g, True, self._rng)
                loss, terms = self._model.loss(output, train_idx, g.labels[train_idx])
            tape.backward(loss)
        except NumericFaultError as e:
            raise NumericFaultError(f'Epoch {epoch}: {e}', term=e.term, epoch=epoch) from e

        grads = {name: tensor.grad for name, tensor in params.items()}
        adam_step(params, grads, self._adam, self._cfg.learning_rate, self._cfg.weight_decay)
        for tensor in params.values():
            tensor.zero_grad()
        return loss.item(), terms

    def _validation_loss(self, epoch):
        g = self._g
        val_idx = self._split.val_idx
        try:
            output = self._model.forward(g, False)
            loss, _ = self._model.loss(output, val_idx, g.labels[val_idx])
        except NumericFaultError as e:
            raise NumericFaultError(f'Epoch {epoch} (validation): {e}', term=e.term, epoch=epoch) from e
        return loss.item()

    def run(self):
        cfg = self._cfg
        log.info(
            f'Training {cfg.variant} model, seed {cfg.seed}, {self._g.num_nodes} nodes, '
            f'split {self._split.sizes}'
        )
        self._running = True
        start_time = time.perf_counter()

        try:
            for epoch in range(1, cfg.max_epochs + 1):
                if self._stop_requested:
                    log.info(f'Training stopped at epoch {epoch - 1}')
                    break

                train_loss, terms = self._train_epoch(epoch)
                val_loss = self._validation_loss(epoch)
                self._epochs_run = epoch

                if val_loss < self._best_val_loss:
                    self._best_val_loss = val_loss
                    self._best_epoch = epoch
                    self._best_state = self._model.state_arrays()

                if epoch % 100 == 0 or epoch == 1:
                    log.debug(f'Epoch {epoch}: train {train_loss:.6f}, val {val_loss:.6f}, terms {terms}')

                if self._cb_on_epoch_end is not None:
                    self._cb_on_epoch_end(epoch, train_loss, val_loss)

                if epoch - self._best_epoch >= cfg.patience:
                    log.info(f'Early stopping at epoch {epoch}, best epoch {self._best_epoch}')
                    break
        except NumericFaultError as e:
            log.debug('Numeric fault during training', exc_info=True)
            log.error(f'Numeric fault at epoch {e.epoch} in {e.term}: {e}')
            raise
        finally:
            self._running = False

        if self._best_state is not None:
            self._model.load_state_arrays(self._best_state)

        if self._model.variant == Variant.COV:
            output = self._model.forward(self._g, False)
            scores = output.selection.values[self._split.val_idx, 0]
            self._tau = calibrate_threshold(scores, cfg.coverage.target_coverage)
            log.info(f'Calibrated threshold {self._tau:.6f} for target coverage {cfg.coverage.target_coverage}')

        wallclock = time.perf_counter() - start_time
        log.info(
            f'Training finished after {self._epochs_run} epochs in {wallclock:.1f}s, '
            f'best validation loss {self._best_val_loss:.6f} at epoch {self._best_epoch}'
        )

        if self._cb_on_stop is not None:
            self._cb_on_stop()

        return RunManifest(
            config=cfg.to_dict(),
            seed=cfg.seed,
            epochs_run=self._epochs_run,
            best_epoch=self._best_epoch,
            best_val_loss=self._best_val_loss,
            tau=self._tau,
            calibrated_coverage=None if cfg.coverage is None else cfg.coverage.target_coverage,
            num_features=self._g.num_features,
            num_classes=self._g.num_classes,
            wallclock_s=wallclock
        )


def save_run(run_dir, model, manifest, split, dataset=None):
    run_dir = Path(run_dir)
    manifest.checkpoint = CHECKPOINT_FILE
    manifest.split = SPLIT_FILE
    if dataset is not None:
        manifest.dataset = str(dataset)

    try:
        model.save(run_dir / CHECKPOINT_FILE)
        split.save(run_dir / SPLIT_FILE)
        (run_dir / CONFIG_FILE).write_text(json.dumps(manifest.config, indent=2), encoding='utf-8')
    except OSError as e:
        raise OSError(e.errno, 'Failed to write run outputs', str(run_dir)) from e
    manifest.save(run_dir / RUN_MANIFEST_FILE)
    log.info(f"Run saved to '{run_dir}'")


def train(g, split, cfg, out_dir=None, dataset=None, cb_on_epoch_end=None):
    trainer = Trainer(g, split, cfg, cb_on_epoch_end=cb_on_epoch_end)
    manifest = trainer.run()
    if out_dir is not None:
        save_run(out_dir, trainer.model, manifest, split, dataset)
    return trainer.model, manifest


def load_run(run_dir, g=None):
    run_dir = Path(run_dir)
    manifest = RunManifest.load(run_dir / RUN_MANIFEST_FILE)
    cfg = manifest.train_config
    cfg.validate()

    if g is None:
        if manifest.dataset is None:
            raise ContractError(f"Run '{run_dir}' does not record its dataset")
        g = resolve_dataset(manifest.dataset)
    if manifest.num_features is not None and g.num_features != manifest.num_features:
        raise ContractError(f'Graph has {g.num_features} features, run was trained on {manifest.num_features}')
    if manifest.num_classes is not None and g.num_classes != manifest.num_classes:
        raise ContractError(f'Graph has {g.num_classes} classes, run was trained on {manifest.num_classes}')

    model = build_model(cfg, g.num_features, g.num_classes, np.random.default_rng(cfg.seed))
    model.load(run_dir / (manifest.checkpoint or CHECKPOINT_FILE))
    split = SplitSpec.load(run_dir / (manifest.split or SPLIT_FILE))
    return model, manifest, split, g
