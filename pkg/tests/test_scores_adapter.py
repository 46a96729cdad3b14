import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from prelu_extract.network import fuse_outputs, random_network
from prelu_extract.oracle import Oracle
from prelu_extract.scores_adapter import (LabelUnavailable, ScalarView, adapted_oracle, difference_rows, log_ratio,
                                          sigmoid_to_raw)


def test_sigmoid_to_raw_values():
    assert sigmoid_to_raw(0.5) == 0.0
    assert abs(sigmoid_to_raw(0.7310585786300049) - 1.0) <= 1e-12
    for q in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            sigmoid_to_raw(q)


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=1e-6, max_value=1 - 1e-6))
def test_sigmoid_round_trip(q):
    assert abs(expit(sigmoid_to_raw(q)) - q) <= 1e-12


def test_log_ratio_values():
    assert log_ratio(np.array([0.5, 0.5]), 0, 1) == 0.0
    e = np.e
    assert abs(log_ratio(np.array([e / (1 + e), 1 / (1 + e)]), 0, 1) - 1.0) <= 1e-12
    q = np.array([0.1, 0.6, 0.3])
    assert log_ratio(q, 0, 2) == -log_ratio(q, 2, 0)


def test_log_ratio_topm_missing_label():
    fb = (np.array([2, 0]), np.array([0.6, 0.3]))
    assert abs(log_ratio(fb, 0, 2) - np.log(0.5)) <= 1e-15
    with pytest.raises(LabelUnavailable):
        log_ratio(fb, 1, 2)
    with pytest.raises(LabelUnavailable):
        log_ratio(np.array([0.0, 1.0]), 0, 1)


def test_adapted_sigmoid(tiny_net):
    view = adapted_oracle(Oracle(tiny_net, "sigmoid"))
    assert abs(view(np.array([[1.0]]))[0] - 7.0) <= 1e-12


def test_adapted_softmax_equals_fused_coordinate():
    net = random_network([4, 5, 3], seed=3)
    X = np.random.default_rng(0).normal(size=(100, 4))
    for pivot in (0, 2):
        fused = fuse_outputs(net, pivot).predict(X)
        for j in range(3):
            view = adapted_oracle(Oracle(net, "softmax"), pivot=pivot, label=j)
            assert np.max(np.abs(view(X) - fused[:, j])) <= 1e-12


def test_topm_full_matches_softmax_exactly():
    net = random_network([4, 5, 3], seed=3)
    X = np.random.default_rng(0).normal(size=(50, 4))
    a = ScalarView(Oracle(net, "softmax"), (2, 0))(X)
    b = ScalarView(Oracle(net, "topm", m=3), (2, 0))(X)
    assert np.array_equal(a, b)


def test_topm_partial_marks_unavailable():
    net = random_network([4, 5, 6], seed=1)
    X = np.random.default_rng(0).normal(size=(200, 4))
    labels, _ = Oracle(net, "topm", m=2).query(X[0])
    i1, i2 = int(labels[0]), int(labels[1])
    view = ScalarView(Oracle(net, "topm", m=2), (i1, i2))
    vals = view.partial(X)
    assert np.any(np.isnan(vals)) and not np.isnan(vals[0])
    fused = fuse_outputs(net, i2).predict(X)[:, i1]
    ok = ~np.isnan(vals)
    assert np.max(np.abs(vals[ok] - fused[ok])) <= 1e-12
    with pytest.raises(LabelUnavailable):
        view(X)


def test_difference_rows_consistency():
    net = random_network([4, 5, 6], seed=1)
    X = np.random.default_rng(0).normal(size=(30, 4))
    y = net.predict(X)
    for mode, m in (("softmax", None), ("topm", 3), ("raw", None)):
        rows, a, b, v = difference_rows(Oracle(net, mode, m=m), X)
        ref = y[rows, a] - np.where(b >= 0, y[rows, np.maximum(b, 0)], 0.0)
        assert np.max(np.abs(ref - v)) <= 1e-12
