import json

import numpy as np
import pytest

from graph_abstain import autodiff as ad
from graph_abstain.cost import RejectionCost
from graph_abstain.coverage import CoverageObjectiveConfig
from graph_abstain.errors import ContractError, NumericFaultError, ParameterError
from graph_abstain.graph import make_split, save_graph
from graph_abstain.model import RejectModel, Variant
from graph_abstain.training import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    CHECKPOINT_FILE,
    CONFIG_FILE,
    RUN_MANIFEST_FILE,
    AdamState,
    RunManifest,
    TrainConfig,
    Trainer,
    adam_step,
    load_run,
    train
)


def quick_config(encoder, **kwargs):
    kwargs.setdefault('max_epochs', 8)
    kwargs.setdefault('patience', 20)
    return TrainConfig(encoder=encoder, **kwargs)


def test_adam_zero_gradient_is_a_no_op():
    w = ad.parameter([[1.0, -2.0]])
    adam_step({'w': w}, {'w': np.zeros((1, 2))}, AdamState(), 0.01, 0.0)
    assert np.array_equal(w.values, [[1.0, -2.0]])


def test_adam_zero_learning_rate_is_a_no_op():
    w = ad.parameter([[1.0, -2.0]])
    adam_step({'w': w}, {'w': np.ones((1, 2))}, AdamState(), 0.0, 5e-4)
    assert np.array_equal(w.values, [[1.0, -2.0]])


def test_adam_two_steps_match_recursion():
    w = ad.parameter([[1.0]])
    state = AdamState()
    lr, grad = 0.1, 0.5

    expected = 1.0
    m = v = 0.0
    for t in (1, 2):
        adam_step({'w': w}, {'w': np.array([[grad]])}, state, lr, 0.0)
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * grad * grad
        expected -= lr * (m / (1 - ADAM_BETA1 ** t)) / (np.sqrt(v / (1 - ADAM_BETA2 ** t)) + ADAM_EPS)

    assert state.step == 2
    assert w.values[0, 0] == pytest.approx(expected, abs=1e-15)


def test_adam_weight_decay_joins_the_gradient():
    w = ad.parameter([[2.0]])
    adam_step({'w': w}, {'w': np.zeros((1, 1))}, AdamState(), 0.1, 0.5)
    # Bias-corrected first step moves by lr * sign(grad)
    assert w.values[0, 0] == pytest.approx(1.9, abs=1e-6)


def test_train_config_validation(tiny_encoder):
    with pytest.raises(ParameterError):
        TrainConfig(variant='mixture').validate()
    with pytest.raises(ParameterError):
        TrainConfig(variant='cost').validate()
    with pytest.raises(ParameterError):
        TrainConfig(variant='vanilla', coverage=CoverageObjectiveConfig()).validate()
    with pytest.raises(ParameterError):
        TrainConfig(patience=0).validate()

    cfg = TrainConfig(variant='cost', cost=RejectionCost(0.6), encoder=tiny_encoder, seed=4)
    cfg.validate()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_training_is_deterministic(tabular_graph, fast_encoder):
    split = make_split(tabular_graph, seed=0)
    cfg = quick_config(fast_encoder, seed=3)

    first = Trainer(tabular_graph, split, cfg)
    first_manifest = first.run()
    second = Trainer(tabular_graph, split, cfg)
    second_manifest = second.run()

    assert first_manifest.best_val_loss == second_manifest.best_val_loss
    first_state = first.model.state_arrays()
    second_state = second.model.state_arrays()
    assert all(np.array_equal(first_state[name], second_state[name]) for name in first_state)


def test_best_checkpoint_is_restored(tabular_graph, fast_encoder):
    split = make_split(tabular_graph, seed=0)
    val_losses = []
    trainer = Trainer(
        tabular_graph, split, quick_config(fast_encoder, max_epochs=15),
        cb_on_epoch_end=lambda epoch, train_loss, val_loss: val_losses.append(val_loss)
    )
    manifest = trainer.run()

    assert len(val_losses) == manifest.epochs_run
    assert manifest.best_val_loss == min(val_losses)
    assert manifest.best_epoch == int(np.argmin(val_losses)) + 1

    output = trainer.model.forward(tabular_graph, False)
    loss, _ = trainer.model.loss(output, split.val_idx, tabular_graph.labels[split.val_idx])
    assert loss.item() == pytest.approx(manifest.best_val_loss, abs=1e-12)


def test_improving_loss_runs_to_max_epochs(monkeypatch, tabular_graph, fast_encoder):
    monkeypatch.setattr(Trainer, '_validation_loss', lambda self, epoch: 1.0 / epoch)
    manifest = Trainer(tabular_graph, make_split(tabular_graph, 0), quick_config(fast_encoder, patience=1)).run()
    assert manifest.epochs_run == 8
    assert manifest.best_epoch == 8


def test_flat_loss_stops_after_patience(monkeypatch, tabular_graph, fast_encoder):
    monkeypatch.setattr(Trainer, '_validation_loss', lambda self, epoch: 1.0)
    cfg = quick_config(fast_encoder, max_epochs=50, patience=3)
    manifest = Trainer(tabular_graph, make_split(tabular_graph, 0), cfg).run()

    assert manifest.best_epoch == 1
    assert manifest.epochs_run == 4
    assert manifest.epochs_run <= manifest.best_epoch + cfg.patience


def test_numeric_fault_reports_epoch(monkeypatch, tabular_graph, fast_encoder):
    def faulty_forward(self, g, train_flag, rng=None):
        return ad.add_scalar(ad.constant([[np.inf]]), 1.0)

    monkeypatch.setattr(RejectModel, 'forward', faulty_forward)
    with pytest.raises(NumericFaultError) as exc_info:
        Trainer(tabular_graph, make_split(tabular_graph, 0), quick_config(fast_encoder)).run()
    assert exc_info.value.epoch == 1
    assert exc_info.value.term == 'add_scalar'


def test_stop_request_ends_training(tabular_graph, fast_encoder):
    trainer = Trainer(tabular_graph, make_split(tabular_graph, 0), quick_config(fast_encoder))
    trainer.stop()
    manifest = trainer.run()
    assert manifest.epochs_run == 0
    assert not trainer.running


def test_cov_run_calibrates_threshold(tabular_graph, fast_encoder):
    split = make_split(tabular_graph, seed=0)
    cfg = quick_config(
        fast_encoder,
        variant=Variant.COV.value,
        coverage=CoverageObjectiveConfig(target_coverage=0.6, hidden_features=16)
    )
    model, manifest = train(tabular_graph, split, cfg)

    assert manifest.tau is not None
    assert manifest.calibrated_coverage == 0.6
    scores = model.forward(tabular_graph, False).selection.values[split.val_idx, 0]
    m = int(np.floor(0.6 * len(split.val_idx) + 0.5))
    assert np.count_nonzero(scores >= manifest.tau) >= m


def test_run_round_trip(tmp_path, tabular_graph, fast_encoder):
    save_graph(tabular_graph, tmp_path / 'graph.npz')
    run_dir = tmp_path / 'run'
    run_dir.mkdir()
    split = make_split(tabular_graph, seed=0)
    cfg = quick_config(fast_encoder, variant='cost', cost=RejectionCost(0.5))

    model, manifest = train(tabular_graph, split, cfg, out_dir=run_dir, dataset=tmp_path)
    assert (run_dir / CHECKPOINT_FILE).exists()
    assert RunManifest.load(run_dir / RUN_MANIFEST_FILE).best_epoch == manifest.best_epoch
    assert TrainConfig.from_dict(json.loads((run_dir / CONFIG_FILE).read_text(encoding='utf-8'))) == cfg

    loaded, loaded_manifest, loaded_split, g = load_run(run_dir)
    assert loaded_split == split
    assert loaded_manifest.train_config == cfg
    assert np.array_equal(
        loaded.forward(g, False).probs.values,
        model.forward(tabular_graph, False).probs.values
    )


def test_load_run_needs_a_dataset(tmp_path, tabular_graph, fast_encoder):
    split = make_split(tabular_graph, seed=0)
    train(tabular_graph, split, quick_config(fast_encoder, max_epochs=2), out_dir=tmp_path)
    with pytest.raises(ContractError):
        load_run(tmp_path)
