import json

import numpy as np
import pandas as pd
import pytest

from graph_abstain.cost import RejectionCost
from graph_abstain.coverage import CoverageObjectiveConfig
from graph_abstain.errors import ContractError, ParameterError
from graph_abstain.evaluation import (
    METHOD_CONFORMAL,
    METHOD_SR,
    evaluate,
    export_embeddings,
    recalibrate,
    run_dir_of,
    write_metrics,
    write_predictions
)
from graph_abstain.graph import make_split
from graph_abstain.metrics import REJECT
from graph_abstain.model import RejectModel, Variant


@pytest.fixture
def split(tabular_graph):
    return make_split(tabular_graph, seed=0)


def make_model(g, encoder, variant=Variant.VANILLA, **kwargs):
    return RejectModel(variant, encoder, g.num_features, g.num_classes, np.random.default_rng(0), **kwargs)


def test_model_evaluation_covers_the_test_split(tabular_graph, split, fast_encoder):
    model = make_model(tabular_graph, fast_encoder)
    result = evaluate(model, tabular_graph, split)

    assert np.array_equal(result.nodes, split.test_idx)
    assert result.metrics.coverage == 1.0
    assert result.metrics.d == 0.5


def test_cost_model_uses_its_own_cost(tabular_graph, split, fast_encoder):
    model = make_model(tabular_graph, fast_encoder, Variant.COST, rejection_cost=RejectionCost(0.6))
    assert evaluate(model, tabular_graph, split, d=0.2).metrics.d == 0.6


def test_cov_threshold_controls_rejection(tabular_graph, split, fast_encoder):
    model = make_model(tabular_graph, fast_encoder, Variant.COV,
                       coverage_config=CoverageObjectiveConfig(hidden_features=8))
    assert evaluate(model, tabular_graph, split, tau=0.0).metrics.coverage == 1.0
    assert evaluate(model, tabular_graph, split, tau=1.01).metrics.coverage == 0.0

    tau = recalibrate(model, tabular_graph, split, 0.5)
    scores = model.forward(tabular_graph, False).selection.values[split.val_idx, 0]
    assert np.count_nonzero(scores >= tau) >= 5


def test_baselines(tabular_graph, split, fast_encoder):
    model = make_model(tabular_graph, fast_encoder)
    sr = evaluate(model, tabular_graph, split, method=METHOD_SR, threshold=0.99)
    assert sr.param == 0.99

    conformal = evaluate(model, tabular_graph, split, method=METHOD_CONFORMAL, alpha=0.2)
    assert conformal.empty_sets is not None
    data = conformal.to_dict()
    assert 'empty_sets' in data
    assert data['calibration']['alpha'] == 0.2
    assert data['calibration']['size'] == len(split.val_idx)
    assert 'calibration' not in sr.to_dict()


def test_evaluation_argument_checks(tabular_graph, split, fast_encoder):
    vanilla = make_model(tabular_graph, fast_encoder)
    with pytest.raises(ParameterError):
        evaluate(vanilla, tabular_graph, split, method='oracle')
    with pytest.raises(ParameterError):
        evaluate(vanilla, tabular_graph, split, method=METHOD_SR)
    with pytest.raises(ParameterError):
        evaluate(vanilla, tabular_graph, split, method=METHOD_CONFORMAL)
    with pytest.raises(ContractError):
        recalibrate(vanilla, tabular_graph, split, 0.5)

    cost = make_model(tabular_graph, fast_encoder, Variant.COST, rejection_cost=RejectionCost(0.5))
    with pytest.raises(ContractError):
        evaluate(cost, tabular_graph, split, method=METHOD_SR, threshold=0.5)


def test_written_outputs(tmp_path, tabular_graph, split, fast_encoder):
    model = make_model(tabular_graph, fast_encoder)
    result = evaluate(model, tabular_graph, split, method=METHOD_SR, threshold=0.5)
    write_predictions(tmp_path / 'predictions.csv', result)
    write_metrics(tmp_path / 'metrics.json', result, {'split': 'test'})

    table = pd.read_csv(tmp_path / 'predictions.csv', dtype={'prediction': str})
    rejected = result.decisions == REJECT
    assert list(table['prediction'][rejected]) == ['REJECT'] * int(rejected.sum())
    metrics = json.loads((tmp_path / 'metrics.json').read_text(encoding='utf-8'))
    assert metrics['split'] == 'test'
    assert metrics['method'] == 'sr'


def test_embeddings_export(tmp_path, tabular_graph, split, fast_encoder):
    model = make_model(tabular_graph, fast_encoder)
    table = export_embeddings(model, tabular_graph, split, tmp_path / 'embeddings.csv')

    assert len(table) == len(split.test_idx)
    assert list(table.columns)[-2:] == ['prediction', 'label']
    assert table.shape[1] == fast_encoder.hidden_width + 2


def test_run_dir_of(tmp_path):
    with pytest.raises(ContractError):
        run_dir_of(tmp_path)
    (tmp_path / 'manifest.json').write_text('{}', encoding='utf-8')
    assert run_dir_of(tmp_path) == tmp_path
    assert run_dir_of(tmp_path / 'manifest.json') == tmp_path
