import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xdom import metrics
from xdom.errors import InputError

from oracles import aupr_sweep, auroc_pairs, fpr_sweep

scores = st.lists(st.integers(-6, 6).map(lambda v: v / 2), min_size=1, max_size=25)


def test_auroc_examples():
    assert metrics.auroc([0.9, 0.8], [0.7, 0.85]) == pytest.approx(0.75)
    assert metrics.auroc([2, 3], [0, 1]) == 1.0
    assert metrics.auroc([1, 1, 1], [1, 1]) == 0.5


def test_aupr_examples():
    assert metrics.aupr([2, 3], [0, 1]) == 1.0
    assert metrics.aupr([1.0], [0.0]) == 1.0
    ida, oodb = [0.9, 0.4], [0.6, 0.1]
    assert metrics.aupr(ida, oodb) == pytest.approx(aupr_sweep(ida, oodb), abs=1e-12)
    # hand count: t=.9 -> P 1, R .5; t=.6 -> nothing new; t=.4 -> P 2/3, R 1
    assert metrics.aupr(ida, oodb) == pytest.approx(0.5 + 0.5 * 2 / 3)


def test_fpr_examples():
    ida, oodb = [0.5, 0.6, 0.7, 0.8], [0.4, 0.55]
    t = metrics.tpr_threshold(ida, 0.95)
    assert t <= 0.5
    assert metrics.fpr_at_tpr(ida, oodb, 0.95) == 0.5
    assert metrics.fpr_at_tpr([2, 3, 4], [0, 1], 0.95) == 0.0
    x = [0.1, 0.5, 0.9]
    assert metrics.fpr_at_tpr(x, list(x), 1.0) == 1.0


@settings(max_examples=200, deadline=None)
@given(a=scores, b=scores, level=st.sampled_from([0.5, 0.8, 0.95, 1.0]))
def test_metrics_match_brute_force(a, b, level):
    assert metrics.auroc(a, b) == pytest.approx(auroc_pairs(a, b), abs=1e-9)
    assert metrics.aupr(a, b) == pytest.approx(aupr_sweep(a, b), abs=1e-9)
    assert metrics.fpr_at_tpr(a, b, level) == pytest.approx(fpr_sweep(a, b, level), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(a=scores, b=scores)
def test_auroc_symmetry_and_monotone_invariance(a, b):
    assert metrics.auroc(a, b) + metrics.auroc(b, a) == pytest.approx(1.0, abs=1e-12)
    f = lambda v: np.exp(np.asarray(v)) * 3 + 1
    assert metrics.auroc(f(a), f(b)) == pytest.approx(metrics.auroc(a, b), abs=1e-12)
    assert metrics.fpr_at_tpr(f(a), f(b)) == metrics.fpr_at_tpr(a, b)


@settings(max_examples=100, deadline=None)
@given(a=scores, b=scores, level=st.sampled_from([0.5, 0.9, 0.95]))
def test_detect_replays_fpr(a, b, level):
    t = metrics.tpr_threshold(a, level)
    flagged = metrics.detect(b, t)
    assert 1 - flagged.mean() == pytest.approx(metrics.fpr_at_tpr(a, b, level))
    assert 1 - metrics.detect(a, t).mean() >= level


def test_detect_boundary():
    assert metrics.detect(0.3, 0.3) == 0
    assert metrics.detect(-math.inf, 0.0) == 1


def test_empty_inputs_rejected():
    with pytest.raises(InputError):
        metrics.auroc([], [1.0])
    with pytest.raises(InputError):
        metrics.fpr_at_tpr([1.0], [])
    with pytest.raises(InputError):
        metrics.histogram([])


def test_histogram():
    edges, counts = metrics.histogram([0, 1, 2, 3], bins=2)
    assert counts.tolist() == [2, 2]
    np.testing.assert_allclose(edges, [0, 1.5, 3])
    rng = np.random.default_rng(0)
    x = rng.normal(size=100)
    edges, counts = metrics.histogram(x, bins=7)
    assert counts.sum() == 100
    np.testing.assert_allclose(np.diff(edges), np.diff(edges)[0])


def test_top1_accuracy_uses_first_k_logits():
    labels = np.arange(8) % 4
    const = np.zeros((8, 4))
    const[:, 0] = 1.0
    assert metrics.top1_accuracy(const, labels, 4) == 0.25
    right = np.eye(4)[labels]
    with_bg = np.concatenate([right, np.full((8, 1), 100.0)], axis=1)
    assert metrics.top1_accuracy(with_bg, labels, 4) == 1.0
