import numpy as np
import pytest

from prelu_extract.critical_search import CriticalWitness, find_critical_on_segment
from prelu_extract.network import random_network
from prelu_extract.oracle import Oracle
from prelu_extract.prefix import PrefixModel
from prelu_extract.scores_adapter import ScalarView
from prelu_extract.sign_slope import (AdjacentAffinePair, IndeterminateSlope, decide_sign_slope_independent,
                                      decide_sign_slope_joint, fill_by_ratio, partial_extended,
                                      recover_adjacent_affines, recover_extended_vectors, slope_ratios)
from prelu_extract.weight_recovery import recover_last_layer
from prelu_extract.wiggle_baseline import TruePrefixContext


def _pending_true(net, layer, flips=None):
    """Exact layers before ``layer``, and ``layer`` itself pending as unit rows times ``flips``."""
    ctx = TruePrefixContext(net, layer, np.ones(net.dims[layer], dtype=np.int64) if flips is None else flips)
    rows = ctx.rows()
    return ctx, ctx.prefix.with_pending(rows[:, :-1], rows[:, -1])


def test_adjacent_affines_tiny(tiny_net):
    prefix = PrefixModel(1, pending=(np.array([[2.0]]), np.array([0.0])))
    pair = recover_adjacent_affines(ScalarView(Oracle(tiny_net)), prefix, np.array([0.0]), 0,
                                    np.random.default_rng(0))
    # the radius floor is 1e-6 at y = 0, so differences carry ~1e-10 relative rounding
    assert abs(pair.w_plus[0] - 3.0) <= 1e-8
    assert abs(pair.w_minus[0] - 1.5) <= 1e-8
    assert decide_sign_slope_independent(pair) == (1, pytest.approx(0.5, abs=1e-8))


def test_adjacent_affines_query_count():
    net = random_network([20, 16, 1], seed=3)
    o = Oracle(net)
    f = ScalarView(o)
    rng = np.random.default_rng(2)
    _, prefix = _pending_true(net, 1)
    ws = []
    while not ws:
        ws = find_critical_on_segment(f, rng.standard_normal(20), rng.standard_normal(20))
    j = int(np.argmin(np.abs(prefix.hidden(ws[0].x)[0])))
    before = o.query_count
    pair = recover_adjacent_affines(f, prefix, ws[0].x, j, rng)
    assert pair.queries == 34 == o.query_count - before


def test_other_coordinates_agree_across_sides():
    net = random_network([8, 6, 6, 1], seed=5)
    f = ScalarView(Oracle(net))
    rng = np.random.default_rng(0)
    ctx, prefix = _pending_true(net, 2)
    for x in ctx.witnesses(3, 3, rng):
        pair = recover_adjacent_affines(f, prefix, x, 3, rng)
        keep = np.arange(6) != 3
        assert np.max(np.abs(pair.w_plus[keep] - pair.w_minus[keep])) <= 1e-8
        sign, slope = decide_sign_slope_independent(pair)
        assert sign == 1 and abs(slope - net.slopes[1][3]) <= 1e-6


def test_independent_rule_examples():
    assert decide_sign_slope_independent(AdjacentAffinePair(np.array([4.0]), np.array([2.0]), 0)) == (1, 0.5)
    assert decide_sign_slope_independent(AdjacentAffinePair(np.array([2.0]), np.array([4.0]), 0)) == (-1, 0.5)
    with pytest.raises(IndeterminateSlope):
        decide_sign_slope_independent(AdjacentAffinePair(np.array([2.0]), np.array([2.0]), 0))


def test_joint_rule_examples():
    assert decide_sign_slope_joint(np.array([3.0, 1.5]), 0) == (1, 0.5, 3.0)
    assert decide_sign_slope_joint(np.array([1.5, 3.0]), 0) == (-1, 0.5, 3.0)
    with pytest.raises(IndeterminateSlope):
        decide_sign_slope_joint(np.array([np.nan, 3.0]), 0)


def test_split_tiny_net_regression(tiny_net):
    prefix = PrefixModel(1, pending=(np.array([[1.0]]), np.array([0.0])))
    fit = recover_last_layer(Oracle(tiny_net), prefix, np.random.default_rng(0))
    assert np.allclose(fit.weights[0], [6.0, 3.0], atol=1e-10)
    sign, slope, w = decide_sign_slope_joint(fit.weights[0], 0)
    assert (sign, w) == (1, pytest.approx(6.0)) and abs(slope - 0.5) <= 1e-12
    flipped = PrefixModel(1, pending=(np.array([[-1.0]]), np.array([0.0])))
    fit = recover_last_layer(Oracle(tiny_net), flipped, np.random.default_rng(0))
    assert decide_sign_slope_joint(fit.weights[0], 0)[0] == -1


def test_partial_slot_placement(tiny_net):
    prefix = PrefixModel(1, pending=(np.array([[1.0]]), np.array([0.0])))
    assert np.array_equal(np.isnan(partial_extended(prefix, np.array([1.0]), np.array([3.0]), 0.0)),
                          [False, True, False])
    assert np.array_equal(np.isnan(partial_extended(prefix, np.array([-1.0]), np.array([1.5]), 0.0)),
                          [True, False, False])


def test_fill_by_ratio():
    v1 = np.array([2.0, 1.0, 1.0, 0.5, 0.1])  # both twins seen
    v2 = np.array([4.0, np.nan, np.nan, 1.5, 0.2])
    V, mask = fill_by_ratio([v1, v2])
    assert np.allclose(slope_ratios([v1, v2]), [0.5, 0.5])
    assert np.allclose(V[1], [4.0, 3.0, 2.0, 1.5, 0.2])
    assert mask[1].tolist() == [False, True, True, False, False]


def _true_extended(net, layer, flips):
    """Next-layer rows over split coordinates of unit rows with signs ``flips``."""
    A = net.weights[layer - 1]
    nrm = np.linalg.norm(A, axis=1)
    W = net.weights[layer]
    s = net.slopes[layer - 1]
    pos = np.where(flips > 0, W * nrm, -W * nrm * s)
    neg = np.where(flips > 0, W * nrm * s, -W * nrm)
    return np.hstack([pos, neg, net.biases[layer][:, None]])


def test_extended_vectors_random_net():
    net = random_network([10, 8, 8, 1], seed=4)
    rng = np.random.default_rng(6)
    flips = rng.choice([-1, 1], size=8)
    ctx, prefix = _pending_true(net, 1, flips)
    after = TruePrefixContext(net, 2, np.ones(8, dtype=np.int64))
    wits = [CriticalWitness(x=x, t=np.nan, endpoints=(x, x)) for k in range(8) for x in after.witnesses(k, 8, rng)]
    vecs, n = recover_extended_vectors(ScalarView(Oracle(net)), prefix, wits, 8, rng=rng)
    assert len(vecs) == 8 and n >= 16
    truth = _true_extended(net, 1, flips)
    tn = truth / np.linalg.norm(truth, axis=1, keepdims=True)
    for v in vecs:
        assert v.complete
        a = v.augmented / np.linalg.norm(v.augmented)
        assert np.max(np.abs(tn @ a)) >= 1 - 1e-7
    V = np.array([v.values for v in vecs])
    for j in range(8):
        k = int(np.argmax(np.minimum(np.abs(V[:, j]), np.abs(V[:, j + 8]))))
        sign, slope, _ = decide_sign_slope_joint(V[k], j)
        assert sign == flips[j]
        assert abs(slope - net.slopes[0][j]) <= 1e-7


@pytest.mark.parametrize("scale", [1e-3, 2.0, 7e4])
def test_rules_scale_invariant(scale):
    rng = np.random.default_rng(9)
    v = rng.standard_normal(6)
    for j in range(3):
        s1 = decide_sign_slope_joint(v, j)
        s2 = decide_sign_slope_joint(scale * v, j)
        s3 = decide_sign_slope_joint(-scale * v, j)
        assert s1[0] == s2[0] == s3[0]
        assert s1[1] == pytest.approx(s2[1], rel=1e-14) == pytest.approx(s3[1], rel=1e-14)
    p = AdjacentAffinePair(rng.standard_normal(4), rng.standard_normal(4), 2)
    q = AdjacentAffinePair(scale * p.w_plus, scale * p.w_minus, 2)
    assert decide_sign_slope_independent(p)[0] == decide_sign_slope_independent(q)[0]
