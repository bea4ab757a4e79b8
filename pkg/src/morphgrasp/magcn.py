"""Physical-prior-injected GCN policy with mask-conditioned decoders and a critic head.

The action distribution is a diagonal Gaussian over *normalized* action units in
[-1, 1]; :meth:`PolicyNetwork.to_action` scales (and clips) a normalized vector into
a :class:`~morphgrasp.primitives.PrimitiveAction`.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import serialization
from .errors import (
    MissingParameterError,
    MissingPhysicalFeaturesError,
    ParameterShapeError,
    ShapeMismatchError,
    UnknownParameterError,
)
from .physical import PHYSICAL_DIM
from .primitives import PrimitiveAction

WEIGHTS_SCHEMA = "weights/1"
NODE_DIM = 23
GLOBAL_DIM = 15
PRIOR_DIM = 32
GCN_LAYERS = 10
GCN_WIDTHS = (128,) + (256,) * (GCN_LAYERS - 1)
GLOBAL_WIDTH = 256
DECODER_HIDDEN = 128
LOG_STD_RANGE = (-5.0, 1.0)
# small initial noise: wrist jitter breaks grasps, and joint limits rectify large node noise
# into a closing drift that the mean action never learns
LOG_STD_INIT = {"log_std.wrist": -1.5, "log_std.node": -1.0}
NODE_ACTION_SCALE = 0.1  # rad per step
WRIST_ACTION_SCALE = (0.01, 0.01, 0.01, 0.02, 0.02, 0.02)  # m, m, m, rad, rad, rad per step
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(eq=False)
class StateGraph:
    """One observation: node features, global features and the hand's static context."""

    x_node: np.ndarray  # N x 23
    x_global: np.ndarray  # 15
    a_hat: np.ndarray  # N x N normalized adjacency
    mask: np.ndarray  # N x 3
    wrist: int
    physical: np.ndarray | None = None  # N x 27

    @property
    def n_nodes(self):
        return self.x_node.shape[0]

    @property
    def action_dim(self):
        return 6 + 3 * self.n_nodes


def check_state_graph(s):
    n = s.x_node.shape[0]
    if n < 1:
        raise ShapeMismatchError("state_graph", s.x_node.shape)
    if s.x_node.shape != (n, NODE_DIM):
        raise ShapeMismatchError("x_node", s.x_node.shape, (n, NODE_DIM))
    if np.shape(s.x_global) != (GLOBAL_DIM,):
        raise ShapeMismatchError("x_global", np.shape(s.x_global), (GLOBAL_DIM,))
    if s.a_hat.shape != (n, n):
        raise ShapeMismatchError("a_hat", s.a_hat.shape, (n, n))
    if s.mask.shape != (n, 3):
        raise ShapeMismatchError("mask", s.mask.shape, (n, 3))
    if not 0 <= s.wrist < n:
        raise ShapeMismatchError("wrist", (s.wrist,), (n,))
    if s.physical is None:
        raise MissingPhysicalFeaturesError("state graph carries no physical-prior features")
    if s.physical.shape != (n, PHYSICAL_DIM):
        raise ShapeMismatchError("physical", s.physical.shape, (n, PHYSICAL_DIM))
    return s


@dataclass(eq=False)
class GraphBatch:
    """Several state graphs stacked into one disjoint union."""

    x_node: np.ndarray
    physical: np.ndarray
    mask: np.ndarray
    x_global: np.ndarray
    a_hat: sp.csr_matrix
    wrist_rows: np.ndarray
    segments: sp.csr_matrix  # B x R, 1 where row r belongs to graph b
    offsets: np.ndarray  # B + 1 row offsets

    @property
    def n_graphs(self):
        return len(self.wrist_rows)

    @classmethod
    def from_states(cls, states):
        states = [check_state_graph(s) for s in states]
        sizes = np.array([s.n_nodes for s in states])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        rows = np.repeat(np.arange(len(states)), sizes)
        seg = sp.csr_matrix((np.ones(offsets[-1]), (rows, np.arange(offsets[-1]))),
                            shape=(len(states), offsets[-1]))
        return cls(
            x_node=np.vstack([s.x_node for s in states]),
            physical=np.vstack([s.physical for s in states]),
            mask=np.vstack([s.mask for s in states]),
            x_global=np.vstack([s.x_global for s in states]),
            a_hat=sp.block_diag([s.a_hat for s in states], format="csr"),
            wrist_rows=offsets[:-1] + np.array([s.wrist for s in states]),
            segments=seg,
            offsets=offsets,
        )

    def split_nodes(self, arr):
        return [arr[self.offsets[b]:self.offsets[b + 1]] for b in range(self.n_graphs)]


def _param_shapes():
    shapes = {
        "phi_p.l0.w": (PHYSICAL_DIM, PRIOR_DIM), "phi_p.l0.b": (1, PRIOR_DIM),
        "phi_p.l1.w": (PRIOR_DIM, PRIOR_DIM), "phi_p.l1.b": (1, PRIOR_DIM),
        "phi_g.l0.w": (GLOBAL_DIM, GLOBAL_WIDTH), "phi_g.l0.b": (1, GLOBAL_WIDTH),
    }
    width = NODE_DIM
    for i, out in enumerate(GCN_WIDTHS, start=1):
        shapes[f"gcn.{i}.w"] = (width + PRIOR_DIM, out)
        shapes[f"gcn.{i}.ln.gain"] = (1, out)
        shapes[f"gcn.{i}.ln.bias"] = (1, out)
        width = out
    heads = {"dec_node": (width + 3, 3), "dec_wrist": (width + GLOBAL_WIDTH, 6),
             "critic": (width + GLOBAL_WIDTH, 1)}
    for name, (inp, out) in heads.items():
        shapes[f"{name}.l0.w"] = (inp, DECODER_HIDDEN)
        shapes[f"{name}.l0.b"] = (1, DECODER_HIDDEN)
        shapes[f"{name}.l1.w"] = (DECODER_HIDDEN, out)
        shapes[f"{name}.l1.b"] = (1, out)
    shapes["log_std.wrist"] = (1, 6)
    shapes["log_std.node"] = (1, 3)
    return shapes


PARAM_SHAPES = _param_shapes()


@dataclass(eq=False)
class PolicyOutput:
    node_mean: np.ndarray  # R x 3, normalized units
    wrist_mean: np.ndarray  # B x 6, normalized units
    value: np.ndarray  # B
    log_std_wrist: np.ndarray  # 6
    log_std_node: np.ndarray  # 3
    batch: GraphBatch

    def mean_flat(self, b):
        lo, hi = self.batch.offsets[b], self.batch.offsets[b + 1]
        return np.concatenate([self.wrist_mean[b], self.node_mean[lo:hi].ravel()])

    def log_std_flat(self, b):
        n = self.batch.offsets[b + 1] - self.batch.offsets[b]
        return np.concatenate([self.log_std_wrist, np.tile(self.log_std_node, n)])


class PolicyNetwork:
    """Parameters live in ``self.params`` (name -> Tensor), in canonical order."""

    def __init__(self, params, node_scale=NODE_ACTION_SCALE, wrist_scale=WRIST_ACTION_SCALE):
        self.params = params
        self.node_scale = float(node_scale)
        self.wrist_scale = np.asarray(wrist_scale, dtype=float)

    @classmethod
    def initialize(cls, seed=0, zero=False, **kw):
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in PARAM_SHAPES.items():
            if zero:
                data = np.zeros(shape)
            elif name.startswith("log_std"):
                data = np.full(shape, LOG_STD_INIT[name])
            elif name.endswith("ln.gain"):
                data = np.ones(shape)
            elif name.endswith(".b") or name.endswith("ln.bias"):
                data = np.zeros(shape)
            else:
                std = math.sqrt(2.0 / shape[0])
                if name.startswith(("dec_node.l1", "dec_wrist.l1")):
                    std *= 0.01
                elif name.startswith("critic.l1"):
                    std *= 0.1
                data = rng.normal(0.0, std, size=shape)
            params[name] = ad.Tensor(data, requires_grad=True, name=name)
        return cls(params, **kw)

    def __getitem__(self, name):
        return self.params[name]

    def copy(self):
        return PolicyNetwork({k: ad.Tensor(v.data.copy(), requires_grad=True, name=k)
                              for k, v in self.params.items()},
                             self.node_scale, self.wrist_scale)

    def n_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    # -- forward ------------------------------------------------------------

    def _mlp(self, prefix, x, hidden=ad.leaky_relu):
        p = self.params
        h = hidden(ad.matmul(x, p[prefix + ".l0.w"]) + p[prefix + ".l0.b"])
        return ad.matmul(h, p[prefix + ".l1.w"]) + p[prefix + ".l1.b"]

    def forward_tensors(self, batch):
        """Tensor-level forward: (node_mean, wrist_mean, value, log_std_wrist, log_std_node)."""
        p = self.params
        e_p = self._mlp("phi_p", ad.Tensor(batch.physical))
        e_g = ad.leaky_relu(ad.matmul(ad.Tensor(batch.x_global), p["phi_g.l0.w"]) + p["phi_g.l0.b"])
        h = ad.Tensor(batch.x_node)
        for i in range(1, GCN_LAYERS + 1):
            z = ad.concat_cols([h, e_p])
            msg = ad.spmm(batch.a_hat, ad.matmul(z, p[f"gcn.{i}.w"]))
            h = ad.relu(ad.layernorm(msg, p[f"gcn.{i}.ln.gain"], p[f"gcn.{i}.ln.bias"]))
        node_mean = ad.tanh(self._mlp("dec_node", ad.concat_cols([h, ad.Tensor(batch.mask)])))
        pooled = ad.concat_cols([e_g, ad.row_select(h, batch.wrist_rows)])
        wrist_mean = ad.tanh(self._mlp("dec_wrist", pooled))
        value = self._mlp("critic", pooled, hidden=ad.relu)
        lo, hi = LOG_STD_RANGE
        return (node_mean, wrist_mean, value,
                ad.clip(p["log_std.wrist"], lo, hi), ad.clip(p["log_std.node"], lo, hi))

    def forward(self, states):
        """Evaluate one state graph or a list of them without recording gradients."""
        batch = states if isinstance(states, GraphBatch) else GraphBatch.from_states(
            [states] if isinstance(states, StateGraph) else list(states))
        node, wrist, value, lsw, lsn = self.forward_tensors(batch)
        return PolicyOutput(node.data, wrist.data, value.data[:, 0],
                            lsw.data[0].copy(), lsn.data[0].copy(), batch)

    def log_prob_tensors(self, batch, actions_wrist, actions_node):
        """Per-graph log-density (B x 1) of normalized actions, values (B x 1) and mean entropy."""
        node_mean, wrist_mean, value, lsw, lsn = self.forward_tensors(batch)
        zw = ad.mul(ad.sub(ad.Tensor(actions_wrist), wrist_mean), ad.exp(ad.scale(lsw, -1.0)))
        zn = ad.mul(ad.sub(ad.Tensor(actions_node), node_mean), ad.exp(ad.scale(lsn, -1.0)))
        n_rows = np.diff(batch.offsets).astype(float)[:, None]
        const_w = ad.add_scalar(ad.scale(ad.sum_all(lsw), -1.0), -6 * _HALF_LOG_2PI)
        const_n = ad.add_scalar(ad.scale(ad.sum_all(lsn), -1.0), -3 * _HALF_LOG_2PI)
        quad_w = ad.scale(ad.sum_rows(ad.square(zw)), -0.5)
        quad_n = ad.spmm(batch.segments, ad.scale(ad.sum_rows(ad.square(zn)), -0.5))
        ones = np.ones((batch.n_graphs, 1))
        logp = quad_w + quad_n + ad.matmul(ad.Tensor(ones), ad.reshape_scalar(const_w)) \
            + ad.matmul(ad.Tensor(n_rows), ad.reshape_scalar(const_n))
        mean_rows = float(n_rows.mean())
        entropy = ad.add_scalar(ad.sum_all(lsw) + ad.scale(ad.sum_all(lsn), mean_rows),
                                (6 + 3 * mean_rows) * (_HALF_LOG_2PI + 0.5))
        return logp, value, entropy

    # -- actions ------------------------------------------------------------

    def to_action(self, flat_u, n_nodes):
        """Scale a normalized action vector (clipped to [-1, 1]) into a PrimitiveAction."""
        u = np.clip(np.asarray(flat_u, dtype=float), -1.0, 1.0)
        scales = np.concatenate([self.wrist_scale, np.full(3 * n_nodes, self.node_scale)])
        return PrimitiveAction.from_flat(u * scales, n_nodes)

    # -- persistence --------------------------------------------------------

    def to_dict(self):
        entries = [{"name": name, "shape": list(t.shape), "data": serialization.encode_array(t.data)}
                   for name, t in self.params.items()]
        return {"schema": WEIGHTS_SCHEMA,
                "action_scale": {"node": self.node_scale, "wrist": self.wrist_scale.tolist()},
                "params": entries}

    def dumps(self):
        return serialization.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc):
        serialization.check_schema(doc, WEIGHTS_SCHEMA)
        given = {}
        for e in doc.get("params", []):
            name = e["name"]
            if name not in PARAM_SHAPES:
                raise UnknownParameterError(name)
            shape = tuple(e["shape"])
            if shape != PARAM_SHAPES[name]:
                raise ParameterShapeError(name, PARAM_SHAPES[name], shape)
            given[name] = serialization.decode_array(e["data"], shape)
        params = {}
        for name in PARAM_SHAPES:
            if name not in given:
                raise MissingParameterError(name)
            params[name] = ad.Tensor(given[name], requires_grad=True, name=name)
        scale = doc.get("action_scale", {})
        return cls(params, scale.get("node", NODE_ACTION_SCALE), scale.get("wrist", WRIST_ACTION_SCALE))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path):
        import json

        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def policy_forward(net, state):
    """Mean action (scaled), per-dimension log-std and value for one state graph."""
    out = net.forward(state)
    flat_u = out.mean_flat(0)
    return net.to_action(flat_u, state.n_nodes), out.log_std_flat(0), float(out.value[0])


def gaussian_log_prob(x, mean, log_std):
    z = (np.asarray(x) - mean) * np.exp(-log_std)
    return float(np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI))


def sample_action(mean, log_std, rng):
    """Diagonal Gaussian draw and its joint log-probability."""
    mean = np.asarray(mean, dtype=float)
    log_std = np.asarray(log_std, dtype=float)
    x = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return x, gaussian_log_prob(x, mean, log_std)
