"""Finite-difference verification of every differentiable op and of the full PPO loss."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad

TOLERANCE = 1e-5
STEP = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    worst: float
    instances: int

    @property
    def passed(self):
        return self.worst < TOLERANCE


def _away_from_kinks(x, margin=1e-3):
    """Push entries off zero so piecewise-linear ops are smooth within +/- h."""
    return x + np.where(x >= 0.0, margin, -margin)


def _op_cases(rng):
    """(name, builder) where builder(rng) -> (f, x0)."""
    r, c = 4, 5

    def const(shape):
        return ad.Tensor(rng.normal(size=shape))

    def case(name, fn, shape=(r, c), kink=False):
        def build():
            x0 = rng.normal(size=shape)
            if kink:
                x0 = _away_from_kinks(x0)
            w = rng.normal(size=fn(ad.Tensor(x0)).shape)
            return (lambda t: ad.sum_all(ad.mul(fn(t), ad.Tensor(w)))), x0
        return name, build

    W = lambda: const((c, 3))
    yield case("matmul", lambda t, M=W(): ad.matmul(t, M))
    yield case("matmul_right", lambda t, M=const((3, r)): ad.matmul(M, t))
    yield case("add", lambda t, B=const((r, c)): ad.add(t, B))
    yield case("add_row", lambda t, B=const((r, c)): ad.add(B, t), shape=(1, c))
    yield case("sub", lambda t, B=const((r, c)): ad.sub(B, t))
    yield case("mul", lambda t, B=const((r, c)): ad.mul(t, B))
    yield case("mul_row", lambda t, B=const((r, c)): ad.mul(B, t), shape=(1, c))
    yield case("scale", lambda t: ad.scale(t, -1.7))
    yield case("add_scalar", lambda t: ad.add_scalar(ad.square(t), 0.3))
    yield case("concat_cols", lambda t, B=const((r, 2)): ad.concat_cols([B, t, t]))
    yield case("relu", ad.relu, kink=True)
    yield case("leaky_relu", lambda t: ad.leaky_relu(t, 0.01), kink=True)
    yield case("tanh", ad.tanh)
    yield case("exp", lambda t: ad.exp(ad.scale(t, 0.5)))
    yield case("square", ad.square)
    yield case("layernorm", lambda t: ad.layernorm(t))
    yield case("layernorm_affine", lambda t, g=const((1, c)), b=const((1, c)): ad.layernorm(t, g, b))
    yield case("row_select", lambda t: ad.row_select(t, [2, 0, 2, 3]))
    yield case("sum_rows", ad.sum_rows)
    yield case("mean", lambda t: ad.scale(ad.mean(ad.square(t)), 3.0), shape=(r, c))
    A = sp.random(r, r, density=0.6, random_state=int(rng.integers(1 << 30)), format="csr") + sp.eye(r)
    yield case("spmm", lambda t, A=A: ad.spmm(A, t))
    yield case("clip", lambda t: ad.clip(t, -0.75, 0.75), kink=True)
    yield case("minimum", lambda t, B=const((r, c)): ad.minimum(t, B))
    yield case("chain", lambda t, M=const((c, c)): ad.tanh(ad.matmul(ad.tanh(ad.matmul(t, M)), M)))


def check_ops(instances=20, seed=0, h=STEP):
    """Worst relative error per op over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(instances):
        for name, build in _op_cases(rng):
            f, x0 = build()
            err = ad.grad_check(f, x0, h)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(name, w, instances) for name, w in worst.items()]


def policy_loss_check(instances=20, seed=0, coords=1, h=STEP, bundle=None):
    """Grad-check the full PPO loss w.r.t. sampled coordinates of every parameter tensor.

    Each instance draws a fresh network, random observations on a 5-node hand and
    random actions; old log-probabilities are offset so every ratio stays inside the
    clip band, away from its kinks. Coordinates are drawn among those whose
    gradient is resolvable by central differences.
    """
    from .bundle import load_fixture
    from .magcn import GraphBatch, PolicyNetwork, StateGraph
    from .trainer import PpoConfig, ppo_loss

    bundle = bundle or load_fixture("toy_pincer")
    rng = np.random.default_rng(seed)
    cfg = PpoConfig()
    worst = 0.0
    for _ in range(instances):
        net = PolicyNetwork.initialize(seed=int(rng.integers(1 << 30)))
        for name in ("dec_node.l1.w", "dec_wrist.l1.w", "critic.l1.w"):
            net.params[name].data = rng.normal(0.0, 0.3, size=net.params[name].shape)
        n_graphs = 3
        states = [StateGraph(rng.normal(size=(bundle.n_nodes, 23)), rng.normal(size=15), bundle.a_hat,
                             bundle.mask, bundle.graph.wrist, bundle.physical) for _ in range(n_graphs)]
        us = [rng.normal(0.0, 0.5, size=6 + 3 * bundle.n_nodes) for _ in range(n_graphs)]
        adv = rng.normal(size=n_graphs)
        gb = GraphBatch.from_states(states)
        aw = np.array([u[:6] for u in us])
        an = np.vstack([u[6:].reshape(-1, 3) for u in us])
        logp, value, _ = net.log_prob_tensors(gb, aw, an)
        old = logp.data[:, 0] + rng.uniform(-0.05, 0.05, size=n_graphs)
        # targets near the critic keep the loss O(1), so rounding noise stays below the tolerance
        rets = value.data[:, 0] + rng.normal(0.0, 0.3, size=n_graphs)

        def f():
            return ppo_loss(net, states, us, old, adv, rets, cfg, batch=(gb, aw, an))[0]

        err = ad.grad_check_params(f, net.params, h, coords=coords, rng=rng, resolvable_only=True)
        worst = max(worst, err)
    return CheckResult("policy_loss", worst, instances)


def run_suite(instances=20, seed=0):
    return check_ops(instances, seed) + [policy_loss_check(instances, seed)]
