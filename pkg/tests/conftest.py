import json
import sys
from pathlib import Path

import numpy as np
import pytest

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE))

from morphgrasp.bundle import FIXTURE_DIR, load_fixture  # noqa: E402

FIXTURES = ("toy_pincer", "toy2finger", "toy3finger", "toy_allegro", "toy_mimic")


@pytest.fixture(scope="session")
def manifest():
    return json.loads((FIXTURE_DIR / "manifest.json").read_text())["hands"]


@pytest.fixture(scope="session")
def bundles():
    return {name: load_fixture(name) for name in FIXTURES}


def urdf_path(name):
    return FIXTURE_DIR / f"{name}.urdf"


def random_state_graph(n, rng, wrist=0):
    """Random observation on a random tree with ``n`` nodes (features drawn at unit scale)."""
    import oracles
    from morphgrasp.magcn import StateGraph

    a_hat = oracles.normalized_adjacency(oracles.random_tree(n, rng))
    return StateGraph(rng.normal(size=(n, 23)), rng.normal(size=15), a_hat,
                      rng.integers(0, 2, size=(n, 3)).astype(float), wrist, rng.normal(size=(n, 27)))


def permuted_state(s, perm):
    """Relabel nodes so new node i is old node ``perm[i]``."""
    from morphgrasp.magcn import StateGraph

    perm = np.asarray(perm)
    inv = np.argsort(perm)
    return StateGraph(s.x_node[perm], s.x_global.copy(), s.a_hat[np.ix_(perm, perm)], s.mask[perm],
                      int(inv[s.wrist]), s.physical[perm])


def generic_network(seed=0):
    """Random network with decoder output layers scaled up so outputs are far from zero."""
    from morphgrasp.magcn import PolicyNetwork

    net = PolicyNetwork.initialize(seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name in ("dec_node.l1.w", "dec_wrist.l1.w", "critic.l1.w"):
        net.params[name].data = rng.normal(0.0, 0.3, size=net.params[name].shape)
    return net


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
