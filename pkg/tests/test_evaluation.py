import numpy as np
import pytest

from prelu_extract.evaluation import (align, empirical_equivalence, evaluate, max_parameter_error,
                                      propagate_bounds, sample_domain)
from prelu_extract.network import PReluNetwork, permute_layer, random_network, scale_neuron
from prelu_extract.oracle import Oracle


@pytest.fixture(scope="module")
def net():
    return random_network([6, 5, 4, 2], seed=3)


def test_self_alignment(net):
    al = align(net, net)
    assert all(np.array_equal(p, np.arange(len(p))) for p in al.permutations)
    assert max_parameter_error(net, al.network) == 0.0
    assert empirical_equivalence(net, net) == 0.0
    assert propagate_bounds(net, net) == 0.0


def test_recovers_scale(net):
    al = align(net, scale_neuron(net, 1, 2, 2.0))
    assert al.scales[0][2] == pytest.approx(0.5, rel=1e-14)
    assert max_parameter_error(net, al.network) <= 1e-12


def test_recovers_permutation(net):
    perm = np.array([3, 0, 4, 1, 2])
    al = align(net, permute_layer(net, 1, perm))
    assert np.array_equal(perm[al.permutations[0]], np.arange(5))
    assert max_parameter_error(net, al.network) <= 1e-15


def test_negative_factor_flagged(net):
    ws = [w.copy() for w in net.weights]
    bs = [b.copy() for b in net.biases]
    ws[0][1] *= -1
    bs[0][1] *= -1
    al = align(net, PReluNetwork(ws, bs, net.slopes))
    assert (1, 1) in al.negative


def test_single_layer_bound_closed_form():
    # output error on the box is |dW| . 1 + |db| for an affine map
    A = np.array([[0.5, -1.0]])
    net = PReluNetwork([np.eye(2), A], [np.zeros(2), np.array([0.1])], [np.full(2, 0.5)])
    d = np.array([[1e-3, -2e-3]])
    other = PReluNetwork([np.eye(2), A + d], [np.zeros(2), np.array([0.1 + 5e-4])], [np.full(2, 0.5)])
    assert propagate_bounds(net, other) == pytest.approx(3e-3 + 5e-4, rel=1e-12)
    assert empirical_equivalence(net, other) <= propagate_bounds(net, other)


def test_bound_is_sound_under_perturbation(net):
    rng = np.random.default_rng(0)
    ws = [w + 1e-6 * rng.standard_normal(w.shape) for w in net.weights]
    bs = [b + 1e-6 * rng.standard_normal(b.shape) for b in net.biases]
    ss = [np.clip(s + 1e-6 * rng.standard_normal(s.shape), 1e-3, 0.999) for s in net.slopes]
    other = PReluNetwork(ws, bs, ss)
    assert empirical_equivalence(net, other, n=20_000) <= propagate_bounds(net, other)


def test_epsilon_monotone_in_samples(net):
    other = scale_neuron(net, 1, 0, 1.0 + 1e-9)
    X100 = sample_domain(6, 100, seed=5)
    assert np.array_equal(X100, sample_domain(6, 1000, seed=5)[:100])
    e = [empirical_equivalence(net, PReluNetwork(other.weights, [b + 1e-9 for b in other.biases], other.slopes),
                               n=n, seed=5) for n in (10, 100, 1000)]
    assert e[0] <= e[1] <= e[2]


def test_oracle_reference_and_report(net):
    o = Oracle(net)
    assert empirical_equivalence(o, net, n=50) == 0.0
    with pytest.raises(ValueError):
        empirical_equivalence(Oracle(net, "softmax"), net, n=5)
    rep = evaluate(net, scale_neuron(net, 2, 1, 3.0), n=100)
    d = rep.to_dict()
    assert d["epsilon"] == rep.r_max <= 1e-12
    assert rep.max_param_error <= 1e-12
    with pytest.raises(ValueError):
        align(net, random_network([6, 5, 1], seed=0))
