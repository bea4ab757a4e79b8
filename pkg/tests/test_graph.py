import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conftest import FIXTURES, urdf_path
from morphgrasp import errors
from morphgrasp.graph import (build_graph, normalize_adjacency, partition_functional, permute_graph,
                              type_sequence_monotone, HandGraph, SemanticNode, SemanticNodeAssignment)
from morphgrasp.urdf import parse_urdf, resolve_chains


def _layout(graph):
    return [(n.finger, n.type, [graph.tree.joints[j].name for j in n.joints]) for n in graph.nodes]


@pytest.mark.parametrize("name", FIXTURES)
def test_layout_matches_manifest_and_chain_walk(name, bundles, manifest):
    g = bundles[name].graph
    doc = manifest[name]
    assert g.n_nodes == doc["n_nodes"]
    assert _layout(g) == [(n["finger"], n["type"], n["joints"]) for n in doc["nodes"]]
    walk = [(t, j) for finger in oracles.expected_layout(urdf_path(name)) for t, j in finger]
    assert [(t, j) for _, t, j in _layout(g)[1:]] == walk
    assert sorted(map(list, np.argwhere(g.adjacency).tolist())) == sorted(doc["edges"])


def test_toy2finger_counts(bundles):
    g = bundles["toy2finger"].graph
    assert g.n_nodes == 7 and int(g.adjacency.sum()) == 6
    assert [n.type for n in g.nodes] == ["wrist"] + ["proximal", "distal", "fingertip"] * 2


def test_allegro_thumb_root_merge(bundles):
    g = bundles["toy_allegro"].graph
    thumb = next(n for n in g.nodes if n.finger == "thumb" and n.type == "proximal")
    assert [g.tree.joints[j].name for j in thumb.joints] == ["thumb_j0", "thumb_j1"]
    assert thumb.anchor_joint == thumb.joints[0]


@pytest.mark.parametrize("name", FIXTURES)
def test_tree_properties(name, bundles):
    g = bundles[name].graph
    assert int(g.adjacency.sum()) == g.n_nodes - 1
    assert sum(1 for n in g.nodes if n.type == "wrist") == 1
    assert all(p is not None for i, p in enumerate(g.parent) if i != g.wrist)
    assert type_sequence_monotone(g)
    joints = [j for n in g.nodes for j in n.joints]
    assert sorted(joints) == sorted(g.tree.actuated)


def test_deterministic(bundles):
    b = bundles["toy_allegro"]
    a1 = partition_functional(b.tree, b.chains)
    a2 = partition_functional(b.tree, b.chains)
    assert [(n.finger, n.type, n.joints) for n in a1.nodes] == [(n.finger, n.type, n.joints) for n in a2.nodes]


def test_wrist_only_assignment(bundles):
    b = bundles["toy_pincer"]
    from morphgrasp.urdf import FingerChains
    a = partition_functional(b.tree, FingerChains(chains=(), wrist_link=b.chains.wrist_link))
    assert len(a.nodes) == 1 and a.nodes[0].type == "wrist"
    assert build_graph(a).n_nodes == 1


def test_override_conflict(bundles):
    b = bundles["toy2finger"]
    with pytest.raises(errors.OverrideConflictError):
        partition_functional(b.tree, b.chains, overrides=[("thumb_j1", "thumb", "proximal"),
                                                          ("thumb_j1", "thumb", "distal")])


def test_override_merges_group(bundles):
    b = bundles["toy2finger"]
    a = partition_functional(b.tree, b.chains, overrides=[("thumb_j1", "thumb", "proximal"),
                                                         ("thumb_j2", "thumb", "proximal")])
    thumb = [n for n in a.nodes if n.finger == "thumb"]
    assert [(n.type, len(n.joints)) for n in thumb] == [("proximal", 2), ("fingertip", 0)]


def test_too_many_joints(bundles):
    b = bundles["toy_allegro"]
    over = [(f"index_j{k}", "index", "proximal") for k in range(4)]
    with pytest.raises(errors.TooManyJointsInGroupError):
        partition_functional(b.tree, b.chains, overrides=over)


def test_disconnected_node(bundles):
    tree = bundles["toy_pincer"].tree
    nodes = (SemanticNode(0, "wrist", "wrist", (), 0), SemanticNode(1, "thumb", "fingertip", (), 1))
    with pytest.raises(errors.DisconnectedNodeError):
        build_graph(SemanticNodeAssignment(nodes=nodes, parents=(None, None), tree=tree, chains=None))


def test_path_graph_edges():
    tree = parse_urdf(urdf_path("toy_pincer").read_text())
    nodes = (SemanticNode(0, "wrist", "wrist", (), 0),) + tuple(
        SemanticNode(i, "thumb", "fingertip", (), 0) for i in (1, 2))
    g = build_graph(SemanticNodeAssignment(nodes=nodes, parents=(None, 0, 1), tree=tree, chains=None))
    assert int(g.adjacency.sum()) == 2


def test_normalize_examples():
    assert np.array_equal(normalize_adjacency([[0, 1], [1, 0]]), np.full((2, 2), 0.5))
    assert np.array_equal(normalize_adjacency([[0]]), np.ones((1, 1)))
    A = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]])
    H = normalize_adjacency(A)
    # brute force: loop over entries of D^-1/2 (A v A^T + I) D^-1/2
    S = np.array([[1.0 if (i == j or A[i, j] or A[j, i]) else 0.0 for j in range(3)] for i in range(3)])
    d = S.sum(1)
    ref = np.array([[S[i, j] / np.sqrt(d[i] * d[j]) for j in range(3)] for i in range(3)])
    assert np.allclose(H, ref, atol=1e-15)
    assert H[0, 1] == pytest.approx(1 / np.sqrt(6), abs=1e-15) and H[1, 1] == pytest.approx(1 / 3, abs=1e-15)
    assert H[0, 0] == pytest.approx(0.5) and H[2, 2] == pytest.approx(0.5)


def test_directed_variant():
    A = np.array([[0, 1], [0, 0]])
    assert not np.allclose(normalize_adjacency(A, symmetric=False), normalize_adjacency(A))


@pytest.mark.parametrize("name", FIXTURES)
def test_normalized_spectrum(name, bundles):
    A = bundles[name].graph.adjacency
    H = normalize_adjacency(A)
    assert np.max(np.abs(H - H.T)) < 1e-15
    At = np.maximum(A, A.T) + np.eye(len(A))
    v = np.sqrt(At.sum(1))
    assert np.allclose(H @ v, v, atol=1e-12)


def _assert_same(g1, g2):
    assert np.array_equal(g1.adjacency, g2.adjacency)
    assert [(n.id, n.finger, n.type, n.joints, n.anchor_link) for n in g1.nodes] == \
        [(n.id, n.finger, n.type, n.joints, n.anchor_link) for n in g2.nodes]
    assert g1.wrist == g2.wrist


def test_permute_identity(bundles):
    g = bundles["toy3finger"].graph
    _assert_same(permute_graph(g, range(g.n_nodes)), g)


def test_permute_swap_fingertips(bundles):
    g = bundles["toy2finger"].graph
    perm = list(range(7))
    perm[3], perm[6] = 6, 3
    p = permute_graph(g, perm)
    assert np.array_equal(p.adjacency, g.adjacency[np.ix_(perm, perm)])
    assert p.nodes[3].finger == "index" and p.nodes[6].finger == "thumb"


@settings(max_examples=30, deadline=None)
@given(st.randoms(use_true_random=False))
def test_permute_inverse(r):
    from conftest import load_fixture
    g = load_fixture("toy_allegro").graph
    perm = list(range(g.n_nodes))
    r.shuffle(perm)
    inv = list(np.argsort(perm))
    back = permute_graph(permute_graph(g, perm), inv)
    _assert_same(back, g)


def test_invalid_permutation(bundles):
    with pytest.raises(errors.InvalidPermutationError):
        permute_graph(bundles["toy2finger"].graph, [0, 0, 1, 2, 3, 4, 5])


@pytest.mark.parametrize("name", FIXTURES)
def test_graph_round_trip(name, bundles):
    g = bundles[name].graph
    _assert_same(HandGraph.from_dict(g.to_dict(), g.tree), g)
