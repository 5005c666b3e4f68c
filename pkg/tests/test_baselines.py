import numpy as np
import pytest
import scipy.special

from graph_abstain.baselines import (
    CONFORMAL_ALPHAS,
    SCORE_APS,
    SCORE_TPS,
    SR_THRESHOLDS,
    ConformalCalibration,
    conformal_calibrate,
    conformal_prediction_sets,
    conformal_quantile_rank,
    conformal_reject,
    conformal_set_sizes,
    label_scores,
    nonconformity_scores,
    softmax_response_at_coverage,
    softmax_response_reject
)
from graph_abstain.errors import CalibrationError, ParameterError
from graph_abstain.metrics import REJECT


def synthetic_probs(rng, n, num_classes=4, temperature=1.5):
    # Labels are drawn from the probabilities themselves
    probs = scipy.special.softmax(temperature * rng.normal(size=(n, num_classes)), axis=1)
    draws = rng.random((n, 1))
    labels = np.minimum((draws > probs.cumsum(axis=1)).sum(axis=1), num_classes - 1)
    return probs, labels


def test_softmax_response_examples():
    assert softmax_response_reject([0.9, 0.1], 0.5) == 0
    assert softmax_response_reject([0.34, 0.33, 0.33], 0.5) == REJECT
    # Strict acceptance at the threshold itself
    assert softmax_response_reject([0.5, 0.5], 0.5) == REJECT


def test_softmax_response_rejection_grows_with_threshold(rng):
    probs = rng.dirichlet(np.ones(5), size=200)
    rates = [np.mean(softmax_response_reject(probs, t) == REJECT) for t in SR_THRESHOLDS]
    assert rates == sorted(rates)


def test_softmax_response_at_coverage_keeps_most_confident():
    probs = np.array([[0.6, 0.4], [0.1, 0.9], [0.55, 0.45], [0.3, 0.7]])
    assert list(softmax_response_at_coverage(probs, 0.5)) == [REJECT, 1, REJECT, 1]
    assert list(softmax_response_at_coverage(probs, 1.0)) == [0, 1, 0, 1]
    assert list(softmax_response_at_coverage(probs, 0.0)) == [REJECT] * 4
    # Equal confidence goes to the earlier row
    assert list(softmax_response_at_coverage([[0.8, 0.2], [0.2, 0.8]], 0.5)) == [0, REJECT]


def test_softmax_response_at_coverage_matches_threshold_rule(rng):
    probs = rng.dirichlet(np.ones(4), size=50)
    by_threshold = softmax_response_reject(probs, 0.5)
    coverage = np.mean(by_threshold != REJECT)
    assert np.array_equal(softmax_response_at_coverage(probs, coverage), by_threshold)


def test_confident_selection_raises_accuracy(rng):
    probs, labels = synthetic_probs(rng, 4000)
    accuracies = []
    for coverage in (0.3, 0.6, 1.0):
        decisions = softmax_response_at_coverage(probs, coverage)
        accepted = decisions != REJECT
        accuracies.append(np.mean(decisions[accepted] == labels[accepted]))
    assert accuracies[0] > accuracies[1] > accuracies[2]


def test_softmax_response_at_coverage_range():
    with pytest.raises(ParameterError):
        softmax_response_at_coverage([[0.5, 0.5]], 1.5)


@pytest.mark.parametrize('t', [0.0, 1.0])
def test_softmax_response_threshold_range(t):
    with pytest.raises(ParameterError):
        softmax_response_reject([[0.9, 0.1]], t)


def test_tps_scores():
    probs = np.array([[0.7, 0.2, 0.1]])
    assert np.allclose(label_scores(probs, SCORE_TPS), [[0.3, 0.8, 0.9]])
    assert nonconformity_scores(probs, [1], SCORE_TPS)[0] == pytest.approx(0.8)


def test_aps_scores():
    probs = np.array([[0.2, 0.5, 0.3]])
    assert np.allclose(label_scores(probs, SCORE_APS), [[1.0, 0.5, 0.8]])
    assert nonconformity_scores(probs, [2], SCORE_APS)[0] == pytest.approx(0.8)


def test_unknown_score_kind():
    with pytest.raises(ParameterError):
        label_scores([[0.5, 0.5]], 'raps')


def test_quantile_rank_example():
    assert conformal_quantile_rank(3, 0.25) == 3
    assert conformal_quantile_rank(100, 0.1) == 91


def test_calibrate_example():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.3]])
    cal = conformal_calibrate(probs, [0, 1, 0], 0.25)

    assert cal.qhat == pytest.approx(0.3)
    assert cal.size == 3
    assert cal.to_dict()['score_kind'] == SCORE_TPS


def test_calibration_set_too_small():
    probs = np.array([[0.9, 0.1], [0.2, 0.8]])
    with pytest.raises(CalibrationError):
        conformal_calibrate(probs, [0, 1], 0.1)


def test_calibrate_errors():
    with pytest.raises(CalibrationError):
        conformal_calibrate(np.empty((0, 2)), [], 0.1)
    with pytest.raises(ParameterError):
        conformal_calibrate([[0.9, 0.1]], [0], 1.0)
    with pytest.raises(CalibrationError):
        ConformalCalibration(0.1, float('inf'), SCORE_TPS, 10)


def test_perfect_classifier_gives_singletons():
    labels = np.arange(30) % 3
    probs = np.eye(3)[labels]
    cal = conformal_calibrate(probs, labels, 0.1)

    assert cal.qhat == 0.0
    assert np.all(conformal_set_sizes(probs, cal) == 1)
    assert np.array_equal(conformal_reject(probs, cal), labels)


def test_reject_semantics():
    cal = ConformalCalibration(0.1, 0.5, SCORE_TPS, 100)
    # Sets: {2}, {0, 1}, {}
    probs = np.array([[0.2, 0.1, 0.7], [0.5, 0.5, 0.0], [0.4, 0.3, 0.3]])
    decisions, empty = conformal_reject(probs, cal, return_empty=True)

    assert list(decisions) == [2, REJECT, REJECT]
    assert empty == 1
    assert conformal_reject(probs[0], cal) == 2


@pytest.mark.parametrize('score_kind', [SCORE_TPS, SCORE_APS])
@pytest.mark.parametrize('alpha', [0.1, 0.2])
def test_marginal_coverage_guarantee(score_kind, alpha):
    rng = np.random.default_rng(99)
    m = 300
    for _ in range(20):
        cal_probs, cal_labels = synthetic_probs(rng, m)
        test_probs, test_labels = synthetic_probs(rng, 500)
        cal = conformal_calibrate(cal_probs, cal_labels, alpha, score_kind)

        sets = conformal_prediction_sets(test_probs, cal)
        covered = np.mean(sets[np.arange(len(test_labels)), test_labels])
        assert covered >= 1 - alpha - 2 / np.sqrt(m)


def test_set_size_shrinks_with_alpha(rng):
    cal_probs, cal_labels = synthetic_probs(rng, 400)
    test_probs, _ = synthetic_probs(rng, 100)

    sizes = [
        conformal_set_sizes(test_probs, conformal_calibrate(cal_probs, cal_labels, alpha))
        for alpha in CONFORMAL_ALPHAS
    ]
    for larger, smaller in zip(sizes, sizes[1:]):
        assert np.all(smaller <= larger)
