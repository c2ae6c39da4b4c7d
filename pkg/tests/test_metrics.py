import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from groundloop.dataset import Region, Scene
from groundloop.feedback import (
    CORRECT,
    INCORRECT,
    FeedbackSignal,
    Prediction,
    confusion,
    f1_from_counts,
    feedback_f1,
)
from groundloop.metrics import (
    UndefinedMetricError,
    average_ranks,
    grounding_accuracy,
    mean_summary,
    spearman_rho,
)


def _scene(gt, sid="s"):
    n = len(gt)
    regions = []
    for i, g in enumerate(gt):
        m = np.zeros((1, n), bool)
        m[0, i] = True
        regions.append(Region.from_mask(i + 1, m, g))
    return Scene(np.zeros((1, n, 3), np.uint8), tuple(regions), sid)


def test_f1_exact():
    assert f1_from_counts(3, 1, 1) == 0.75
    assert f1_from_counts(0, 0, 0) == 1.0
    assert f1_from_counts(0, 2, 0) == 0.0


def test_spearman_exact():
    assert abs(spearman_rho([1, 2, 3, 4, 5], [1, 3, 2, 5, 4]) - 0.8) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=3, max_size=25))
def test_spearman_matches_scipy(pairs):
    xs, ys = zip(*pairs)
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        with pytest.raises(UndefinedMetricError):
            spearman_rho(xs, ys)
        return
    assert math.isclose(spearman_rho(xs, ys), scipy.stats.spearmanr(xs, ys).statistic, abs_tol=1e-12)


def test_average_ranks_ties():
    assert average_ranks([10, 20, 10, 30]).tolist() == [1.5, 3.0, 1.5, 4.0]


def test_accuracy_hand_count():
    # 10 regions over two scenes; correct ones marked below
    s1 = _scene([0, 1, 2, 3, 4, 5])
    s2 = _scene([1, 1, 1, 1], "t")
    preds = [[0, 1, 9, 3, 0, 5],  # 4 correct
             [1, 0, 1, 9]]  # 2 correct
    assert grounding_accuracy(preds, [s1, s2]) == 6 / 10
    with pytest.raises(ValueError):
        grounding_accuracy([[0]], [s1])


def test_feedback_f1_positive_class():
    scene = _scene([0, 0, 0, 0, 0, 0])
    preds = [Prediction(i + 1, "x", lbl) for i, lbl in enumerate([1, 1, 1, 1, 0, 0])]
    # flags: TP on 1,2,3; FN on 4; FP on 5; TN on 6
    verdicts = [INCORRECT, INCORRECT, INCORRECT, CORRECT, INCORRECT, CORRECT]
    sigs = [FeedbackSignal(i + 1, v, "vlm_verify") for i, v in enumerate(verdicts)]
    assert confusion(sigs, preds, scene) == (3, 1, 1, 1)
    assert feedback_f1(sigs, scene, preds) == 0.75
    # "correct" as the positive class: TP on 6, FP on 4, FN on 5
    assert feedback_f1(sigs, scene, preds, positive=CORRECT) == 0.5


def test_mean_summary_pooled_vs_mean():
    from groundloop.metrics import RunSummary

    a = RunSummary([0.5, 1.0], [0, 1], [None, None], 2)
    b = RunSummary([0.0, 0.5], [0, 1], [None, None], 6)
    agg = mean_summary([a, b])
    assert agg["mean_accuracy"] == [0.25, 0.75]
    assert agg["pooled_accuracy"] == [0.125, 0.625]
    with pytest.raises(UndefinedMetricError):
        mean_summary([])
