import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import generic_network, permuted_state, random_state_graph
from morphgrasp import env
from morphgrasp.errors import (MissingParameterError, MissingPhysicalFeaturesError, ParameterShapeError,
                               SchemaVersionMismatchError, ShapeMismatchError, UnknownParameterError)
from morphgrasp.magcn import (GCN_LAYERS, PARAM_SHAPES, PolicyNetwork, gaussian_log_prob, policy_forward,
                              sample_action)


@pytest.fixture(scope="module")
def net():
    return generic_network(3)


def test_architecture_shapes():
    assert sum(1 for k in PARAM_SHAPES if k.startswith("gcn.") and k.endswith(".w")) == GCN_LAYERS == 10
    assert PARAM_SHAPES["gcn.1.w"] == (23 + 32, 128)
    assert PARAM_SHAPES["gcn.2.w"] == (128 + 32, 256)
    assert all(PARAM_SHAPES[f"gcn.{i}.w"] == (256 + 32, 256) for i in range(3, 11))
    assert PARAM_SHAPES["phi_p.l0.w"] == (27, 32)
    assert PARAM_SHAPES["phi_g.l0.w"] == (15, 256)
    assert PARAM_SHAPES["dec_node.l0.w"] == (259, 128) and PARAM_SHAPES["dec_node.l1.w"] == (128, 3)
    assert PARAM_SHAPES["dec_wrist.l0.w"] == (512, 128) and PARAM_SHAPES["dec_wrist.l1.w"] == (128, 6)
    assert PARAM_SHAPES["critic.l1.w"] == (128, 1)
    assert PARAM_SHAPES["log_std.wrist"] == (1, 6) and PARAM_SHAPES["log_std.node"] == (1, 3)


def test_zero_weights_give_zero_outputs():
    zero = PolicyNetwork.initialize(zero=True)
    out = zero.forward(random_state_graph(6, np.random.default_rng(0)))
    assert np.all(out.node_mean == 0.0) and np.all(out.wrist_mean == 0.0) and np.all(out.value == 0.0)


def test_one_weight_file_drives_every_hand(net, bundles, tmp_path):
    path = tmp_path / "w.json"
    net.save(path)
    loaded = PolicyNetwork.load(path)
    sizes = {}
    for name, b in bundles.items():
        _, obs = env.reset(b, "sphere", seed=0)
        action, log_std, value = policy_forward(loaded, obs)
        assert action.flat().shape == (6 + 3 * b.n_nodes,) == log_std.shape
        assert np.isfinite(value)
        sizes[b.n_nodes] = action.flat().size
    assert {5: 21, 7: 27, 17: 57}.items() <= sizes.items()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_permutation_equivariance(n, seed):
    net = generic_network(seed % 7)
    rng = np.random.default_rng(seed)
    s = random_state_graph(n, rng, wrist=int(rng.integers(n)))
    perm = rng.permutation(n)
    a, b = net.forward(s), net.forward(permuted_state(s, perm))
    assert np.max(np.abs(b.node_mean - a.node_mean[perm])) < 1e-9
    assert np.max(np.abs(b.wrist_mean - a.wrist_mean)) < 1e-9
    assert abs(b.value[0] - a.value[0]) < 1e-9


def test_mask_bit_only_changes_its_node(net):
    rng = np.random.default_rng(5)
    s = random_state_graph(7, rng)
    base = net.forward(s)
    s.mask = s.mask.copy()
    s.mask[3, 1] = 1.0 - s.mask[3, 1]
    flipped = net.forward(s)
    delta = np.abs(flipped.node_mean - base.node_mean)
    assert delta[3].max() > 1e-6
    assert np.all(np.delete(delta, 3, axis=0) == 0.0)
    assert np.array_equal(flipped.wrist_mean, base.wrist_mean)


def test_node_means_bounded(net):
    out = net.forward(random_state_graph(9, np.random.default_rng(1)))
    assert np.all(np.abs(out.node_mean) <= 1.0) and np.all(np.abs(out.wrist_mean) <= 1.0)
    action = net.to_action(np.full(6 + 27, 5.0), 9)
    assert np.allclose(action.nodes, 0.1) and np.allclose(action.flat()[:6], [0.01] * 3 + [0.02] * 3)


def test_batched_equals_individual(net):
    rng = np.random.default_rng(2)
    states = [random_state_graph(n, rng) for n in (3, 8, 5)]
    batched = net.forward(states)
    for k, s in enumerate(states):
        single = net.forward(s)
        np.testing.assert_allclose(batched.mean_flat(k), single.mean_flat(0), atol=1e-12)
        assert abs(batched.value[k] - single.value[0]) < 1e-12


def test_state_graph_validation(net):
    s = random_state_graph(4, np.random.default_rng(0))
    s.physical = None
    with pytest.raises(MissingPhysicalFeaturesError):
        net.forward(s)
    s = random_state_graph(4, np.random.default_rng(0))
    s.x_node = s.x_node[:, :20]
    with pytest.raises(ShapeMismatchError):
        net.forward(s)


def test_sample_action():
    mean, log_std = np.array([0.3, -1.2, 2.0]), np.full(3, -20.0)
    x, _ = sample_action(mean, log_std, np.random.default_rng(0))
    assert np.max(np.abs(x - mean)) < 1e-8
    ls = np.array([-0.5, 0.1, -1.0])
    assert gaussian_log_prob(mean, mean, ls) == pytest.approx(float(np.sum(-ls - 0.5 * np.log(2 * np.pi))))
    a1, l1 = sample_action(mean, ls, np.random.default_rng(42))
    a2, l2 = sample_action(mean, ls, np.random.default_rng(42))
    assert a1.tobytes() == a2.tobytes() and l1 == l2


def test_log_prob_tensor_matches_numpy(net):
    from morphgrasp.magcn import GraphBatch
    rng = np.random.default_rng(8)
    states = [random_state_graph(n, rng) for n in (4, 6)]
    gb = GraphBatch.from_states(states)
    out = net.forward(gb)
    us = [rng.normal(size=6 + 3 * s.n_nodes) for s in states]
    aw = np.array([u[:6] for u in us])
    an = np.vstack([u[6:].reshape(-1, 3) for u in us])
    logp, _, _ = net.log_prob_tensors(gb, aw, an)
    for k, u in enumerate(us):
        assert logp.data[k, 0] == pytest.approx(gaussian_log_prob(u, out.mean_flat(k), out.log_std_flat(k)),
                                                rel=1e-12)


def test_weights_round_trip_byte_identical(net, tmp_path):
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    net.save(p1)
    PolicyNetwork.load(p1).save(p2)
    assert p1.read_bytes() == p2.read_bytes()
    doc = json.loads(p1.read_text())
    assert doc["schema"] == "weights/1"
    loaded = PolicyNetwork.load(p1)
    assert all(np.array_equal(loaded.params[k].data, v.data) for k, v in net.params.items())


def _edited(net, edit):
    doc = json.loads(net.dumps())
    edit(doc)
    return doc


def test_weights_errors(net):
    doc = _edited(net, lambda d: d.update(params=[e for e in d["params"] if not e["name"].startswith("critic")]))
    with pytest.raises(MissingParameterError, match="critic"):
        PolicyNetwork.from_dict(doc)
    doc = _edited(net, lambda d: d["params"][0].update(shape=[1, 1]))
    with pytest.raises(ParameterShapeError, match="phi_p.l0.w"):
        PolicyNetwork.from_dict(doc)
    doc = _edited(net, lambda d: d["params"].append(dict(d["params"][0], name="extra.w")))
    with pytest.raises(UnknownParameterError):
        PolicyNetwork.from_dict(doc)
    doc = _edited(net, lambda d: d.update(schema="weights/0"))
    with pytest.raises(SchemaVersionMismatchError):
        PolicyNetwork.from_dict(doc)


def test_forward_deterministic(net):
    s = random_state_graph(10, np.random.default_rng(4))
    a, b = net.forward(s), net.forward(s)
    assert a.node_mean.tobytes() == b.node_mean.tobytes() and a.value.tobytes() == b.value.tobytes()
