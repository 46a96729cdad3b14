import numpy as np
import pytest

from prelu_extract.network import (NetworkShapeError, PReluNetwork, dumps, forward, fuse_outputs, load, loads,
                                   local_affine_view, parameter_count, permute_layer, prelu, random_network,
                                   save, scale_neuron, split_layer)


def test_forward_hand_values(tiny_net):
    assert forward(tiny_net, np.array([1.0]))[0][0] == 7.0
    assert forward(tiny_net, np.array([0.0]))[0][0] == 1.0
    assert forward(tiny_net, np.array([-1.0]))[0][0] == -2.0


def test_forward_records_state(tiny_net):
    _, st = forward(tiny_net, np.array([-1.0]))
    assert st.signs[0].tolist() == [-1]
    _, st = forward(tiny_net, np.array([0.0]))
    assert st.signs[0].tolist() == [0]
    assert st.multipliers(tiny_net)[0].tolist() == [1.0]


def test_forward_shape_error_names_layer(tiny_net):
    with pytest.raises(NetworkShapeError):
        forward(tiny_net, np.array([1.0, 2.0]))
    with pytest.raises(NetworkShapeError) as err:
        PReluNetwork([np.ones((2, 3)), np.ones((1, 3))], [np.ones(2), np.ones(1)], [np.ones(2)])
    assert err.value.layer == 2


def test_prelu_values():
    assert prelu(2, 0.5) == 2
    assert prelu(-2, 0.5) == -1
    assert prelu(0, 0.3) == 0


def test_scale_neuron_hand_example(tiny_net):
    s = scale_neuron(tiny_net, 1, 0, 2.0)
    assert s.weights[0][0, 0] == 4.0 and s.biases[0][0] == 0.0
    assert s.weights[1][0, 0] == 1.5 and s.biases[1][0] == 1.0
    assert forward(s, np.array([1.0]))[0][0] == 7.0
    assert scale_neuron(tiny_net, 1, 0, 1.0).equals(tiny_net)
    with pytest.raises(ValueError):
        scale_neuron(tiny_net, 1, 0, 0.0)
    with pytest.raises(ValueError):
        scale_neuron(tiny_net, 1, 0, -1.0)


def test_scale_neuron_sampling():
    net = random_network([6, 5, 4, 1], seed=3)
    s = scale_neuron(scale_neuron(net, 1, 2, 3.7), 2, 1, 0.21)
    X = np.random.default_rng(0).normal(size=(1000, 6))
    assert np.max(np.abs(net.predict(X) - s.predict(X))) <= 1e-12


def test_permute_layer():
    net = random_network([2, 2, 1], seed=1)
    assert permute_layer(net, 1, [0, 1]).equals(net)
    sw = permute_layer(net, 1, [1, 0])
    X = np.random.default_rng(1).normal(size=(100, 2))
    assert np.max(np.abs(net.predict(X) - sw.predict(X))) <= 1e-15
    assert permute_layer(sw, 1, [1, 0]).equals(net)
    with pytest.raises(ValueError):
        permute_layer(net, 1, [0, 0])


def test_split_layer_hand_example(tiny_net):
    sp = split_layer(tiny_net, 1)
    assert sp.dims == (1, 2, 1)
    assert sp.weights[1].tolist() == [[3.0, 1.5]]
    assert sp.weights[0].tolist() == [[2.0], [2.0]]
    assert forward(sp, np.array([1.0]))[0][0] == 7.0
    assert forward(sp, np.array([-1.0]))[0][0] == -2.0
    assert tiny_net.branches is None
    with pytest.raises(ValueError):
        split_layer(tiny_net, 2)


def test_split_layer_random():
    net = random_network([10, 8, 8, 1], seed=5)
    X = np.random.default_rng(2).normal(size=(1000, 10))
    for i in (1, 2):
        sp = split_layer(net, i)
        assert np.max(np.abs(net.predict(X) - sp.predict(X))) <= 1e-12
    both = split_layer(split_layer(net, 1), 2)
    assert np.max(np.abs(net.predict(X) - both.predict(X))) <= 1e-12


def test_fuse_outputs():
    net = random_network([4, 5, 3], seed=9)
    X = np.random.default_rng(3).normal(size=(100, 4))
    y = net.predict(X)
    for p in range(3):
        f = fuse_outputs(net, p).predict(X)
        assert np.all(f[:, p] == 0.0)
        assert np.max(np.abs(f - (y - y[:, [p]]))) <= 1e-15
    twice = fuse_outputs(fuse_outputs(net, 1), 1)
    assert np.max(np.abs(twice.predict(X) - fuse_outputs(net, 1).predict(X))) <= 1e-15
    with pytest.raises(ValueError):
        fuse_outputs(random_network([3, 2, 1], seed=0), 0)


def test_random_network_determinism_and_ranges():
    a = random_network([32, 16, 1], seed=7)
    b = random_network([32, 16, 1], seed=7)
    assert a.equals(b)
    assert a.parameter_count() == 561
    star = random_network([20, 10, 10, 1], slope_range=(0.9, 1.0 - 1e-12), seed=1)
    assert all(np.all((s > 0.9) & (s < 1.0)) for s in star.slopes)
    with pytest.raises(ValueError):
        random_network([3, 0, 1], seed=0)
    with pytest.raises(ValueError):
        random_network([3, 2, 1], slope_range=(0.5, 0.4))


def test_parameter_counts():
    assert parameter_count([32, 16, 1]) == 561
    assert parameter_count([20, 10, 10, 1]) == 351
    assert parameter_count([32, 16, 16, 1]) == 849
    assert parameter_count([64, 32, 1]) == 2145


def test_piecewise_affine_within_region():
    net = random_network([5, 4, 3, 1], seed=11)
    rng = np.random.default_rng(4)
    x1 = rng.normal(size=5)
    x2 = x1 + 1e-7 * rng.normal(size=5)
    assert np.array_equal(forward(net, x1)[1].signs[0], forward(net, x2)[1].signs[0])
    lam = 0.3
    mid = forward(net, lam * x1 + (1 - lam) * x2)[0]
    interp = lam * forward(net, x1)[0] + (1 - lam) * forward(net, x2)[0]
    assert np.allclose(mid, interp, rtol=1e-10, atol=1e-12)


def test_local_affine_view():
    net = random_network([6, 5, 4, 1], seed=2)
    x = np.random.default_rng(5).normal(size=6)
    g, u = local_affine_view(net, x, 2)
    z = net.preactivations(x[None])[1][0]
    z = np.where(z >= 0, z, net.slopes[1] * z)
    assert abs(g @ z + u - net.predict(x[None])[0, 0]) <= 1e-9


def test_model_file_round_trip(tmp_path):
    net = random_network([5, 4, 3, 2], seed=4)
    back = loads(dumps(net))
    assert back.equals(net)
    assert loads(dumps(net, decimal=True)).equals(net)
    p = tmp_path / "m.txt"
    save(net, str(p))
    assert load(str(p)).equals(net)
    assert dumps(net).splitlines()[0] == "prelu-net v1"


def test_model_file_rejects_bad_input():
    with pytest.raises(ValueError):
        loads("not a model\n")
    with pytest.raises(ValueError):
        loads("prelu-net v1\ndims 1 1 1\n1 2 3\n")
    with pytest.raises(ValueError):
        loads("prelu-net v1\ndims 1 1\nnan 0\n")
