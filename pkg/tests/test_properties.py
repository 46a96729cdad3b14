import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prelu_extract.critical_search import ExpansivenessError, ProbeConfig
from prelu_extract.network import PReluNetwork, fuse_outputs, permute_layer, random_network, scale_neuron, split_layer
from prelu_extract.oracle import Oracle
from prelu_extract.orchestrator import AttackConfig, extract
from prelu_extract.prefix import PrefixModel
from prelu_extract.scores_adapter import ScalarView
from prelu_extract.sign_slope import (AdjacentAffinePair, IndeterminateSlope, decide_sign_slope_independent,
                                      decide_sign_slope_joint)
from prelu_extract.weight_recovery import (ProbeRejected, expansiveness_guard, probe_directions,
                                           resolve_projection_signs)

seeds = st.integers(0, 2**31 - 1)
widths = st.integers(1, 32)


@st.composite
def architectures(draw):
    n_in = draw(st.integers(1, 64))
    hidden = draw(st.lists(widths, min_size=1, max_size=2))
    return [n_in] + hidden + [draw(st.integers(1, 3))]


@settings(max_examples=25, deadline=None)
@given(architectures(), seeds, st.data())
def test_isomorphism_invariance(dims, seed, data):
    net = random_network(dims, seed=seed)
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (1000, dims[0]))
    y = net.predict(X)
    other = net
    for _ in range(data.draw(st.integers(1, 6))):
        k = data.draw(st.integers(1, len(dims) - 2))
        if data.draw(st.booleans()):
            other = permute_layer(other, k, rng.permutation(dims[k]))
        else:
            c = data.draw(st.floats(0.1, 10.0))
            other = scale_neuron(other, k, data.draw(st.integers(0, dims[k] - 1)), c)
    assert np.max(np.abs(other.predict(X) - y)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(architectures(), seeds, st.data())
def test_split_preserves_function(dims, seed, data):
    net = random_network(dims, seed=seed)
    X = np.random.default_rng(seed).uniform(-1, 1, (1000, dims[0]))
    k = data.draw(st.integers(1, len(dims) - 2))
    assert np.max(np.abs(split_layer(net, k).predict(X) - net.predict(X))) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(1, 12), st.integers(2, 10), seeds, st.data())
def test_fusion_identity(n_in, width, n_out, seed, data):
    net = random_network([n_in, width, n_out], seed=seed)
    p = data.draw(st.integers(0, n_out - 1))
    X = np.random.default_rng(seed).uniform(-1, 1, (1000, n_in))
    y = net.predict(X)
    f = fuse_outputs(net, p).predict(X)
    assert np.max(np.abs(f - (y - y[:, [p]]))) <= 1e-15


# (A, b, slope, output weight) with axis-aligned probe directions: delta_j = g (1 - s) |A_j|
HAND_BUILT = [
    ([1.0, 0.0], 0.0, 0.5, 1.0), ([1.0, 2.0], 0.5, 0.5, 1.0), ([3.0, -1.0], -1.0, 0.25, 2.0),
    ([0.5, 0.5], 0.2, 0.1, -1.0), ([-2.0, 1.0], 0.0, 0.9, 0.5), ([1.0, 1.0, 1.0], 1.0, 0.5, 1.0),
    ([0.1, -0.2, 0.3], 0.05, 0.3, 4.0), ([2.0, 0.0, -2.0], -0.5, 0.75, -3.0), ([1.0], 0.3, 0.2, 1.0),
    ([-1.0], 0.0, 0.01, 1.0), ([4.0], -2.0, 0.99, 1.0), ([1.0, -1.0, 2.0, -2.0], 0.0, 0.5, 0.25),
    ([0.7, 0.1, 0.1, 0.1], 0.4, 0.6, -0.7), ([5.0, 1.0], 1.0, 0.05, 0.2), ([1e-1, 1.0], 0.0, 0.5, 1.0),
    ([1.0, 1e-1], 0.0, 0.5, 10.0), ([2.5, -0.5, 1.5], 0.9, 0.45, 1.5), ([1.0, 2.0, 3.0, 4.0, 5.0], 1.0, 0.5, 1.0),
    ([-3.0, -3.0], 3.0, 0.33, -0.1), ([0.25, 0.75], -0.25, 0.8, 2.0), ([1.0, 0.5, 0.25], 0.125, 0.125, 8.0),
    ([6.0, -6.0], 0.0, 0.5, 1.0 / 6.0), ([0.3, 0.4], 0.5, 0.7, -2.5), ([1.0, -1.0], 0.0, 0.999, 100.0),
]


@pytest.mark.parametrize("A,b,s,g", HAND_BUILT)
def test_second_difference_hand_built(A, b, s, g):
    a = np.array(A)
    d = a.size
    net = PReluNetwork([a[None, :], np.array([[g]])], [np.array([b]), np.array([0.3])], [np.array([s])])
    x = -b * a / (a @ a)
    probes = probe_directions(ScalarView(Oracle(net)), PrefixModel(d), x, directions=np.eye(d))
    expect = g * (1 - s) * np.abs(probes.directions @ a)
    nz = expect != 0
    assert np.sum(nz) >= 1
    assert np.all(np.abs(probes.deltas[nz] - expect[nz]) <= 1e-6 * np.abs(expect[nz]))
    assert np.all(np.abs(probes.deltas[~nz]) <= 1e-6 * np.max(np.abs(expect)))


def _single_neuron(draw):
    d = draw(st.integers(1, 6))
    a = np.array(draw(st.lists(st.floats(-3, 3), min_size=d, max_size=d)))
    st_ok = np.linalg.norm(a) >= 0.1
    g = draw(st.floats(0.1, 5.0)) * draw(st.sampled_from([-1.0, 1.0]))
    s = draw(st.floats(0.01, 0.99))
    b = draw(st.floats(-1, 1))
    c = draw(st.floats(-1, 1))
    return d, a, b, s, g, c, st_ok


@settings(max_examples=40, deadline=None)
@given(st.data(), seeds)
def test_second_difference_formula(data, seed):
    d, a, b, s, g, c, ok = _single_neuron(data.draw)
    if not ok:
        return
    net = PReluNetwork([a[None, :], np.array([[g]])], [np.array([b]), np.array([c])], [np.array([s])])
    x = -b * a / (a @ a)  # on the kink
    probes = probe_directions(ScalarView(Oracle(net)), PrefixModel(d), x, ProbeConfig(),
                              np.random.default_rng(seed))
    expect = g * (1 - s) * np.abs(probes.directions @ a)
    big = np.abs(expect) >= 1e-3 * np.max(np.abs(expect))  # near-orthogonal directions only carry rounding
    assert np.all(np.abs(probes.deltas[big] - expect[big]) <= 1e-6 * np.abs(expect[big]))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 24), seeds)
def test_probe_spends_4d_minus_1(d, seed):
    net = random_network([d, 3, 1], seed=seed)
    o = Oracle(net)
    x = np.random.default_rng(seed).standard_normal(d)
    probes = probe_directions(ScalarView(o), PrefixModel(d), x, rng=np.random.default_rng(seed))
    assert o.query_count == probes.queries == 4 * d - 1


@settings(max_examples=50, deadline=None)
@given(seeds, st.floats(1e-6, 1e6), st.integers(2, 12))
def test_sign_rules_scale_invariant(seed, c, d):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(2 * d + 1)
    j = int(rng.integers(d))
    s1 = decide_sign_slope_joint(v, j)
    s2 = decide_sign_slope_joint(c * v, j)
    assert s1[0] == s2[0] and abs(s1[1] - s2[1]) <= 1e-12 * max(1.0, abs(s1[1]))
    p = AdjacentAffinePair(rng.standard_normal(d), rng.standard_normal(d), j)
    q = AdjacentAffinePair(c * p.w_plus, c * p.w_minus, j)
    try:
        r1 = decide_sign_slope_independent(p)
    except IndeterminateSlope:
        return
    r2 = decide_sign_slope_independent(q)
    assert r1[0] == r2[0] and abs(r1[1] - r2[1]) <= 1e-12 * max(1.0, abs(r1[1]))


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(1e-3, 1e3))
def test_projection_signs_scale_invariant(seed, c):
    net = random_network([6, 4, 1], seed=seed % 1000)
    rng = np.random.default_rng(seed)
    a, b = net.weights[0][0], net.biases[0][0]
    x = -b * a / (a @ a)
    probes = probe_directions(ScalarView(Oracle(net)), PrefixModel(6), x, rng=rng)
    try:
        signs = resolve_projection_signs(probes)
    except ProbeRejected:
        return
    scaled = dataclasses.replace(probes, deltas=c * probes.deltas, pair_deltas=c * probes.pair_deltas,
                                 floor=c * probes.floor, noise=c * probes.noise, f0=c * probes.f0)
    assert np.array_equal(resolve_projection_signs(scaled), signs)


def test_expansive_refused_with_zero_queries():
    net = random_network([10, 30, 30, 1], seed=0)
    o = Oracle(net)
    for wf in (1, 2):
        with pytest.raises(ExpansivenessError):
            expansiveness_guard(net.dims, wf)
        with pytest.raises(ExpansivenessError):
            extract(o, net.dims, AttackConfig(workflow=wf))
    assert o.query_count == 0
