"""Functional partitioning of URDF joints into semantic nodes and the hand graph."""

from dataclasses import dataclass, field, replace

import numpy as np

from . import serialization
from .errors import (
    DisconnectedNodeError,
    InvalidPermutationError,
    OverrideConflictError,
    TooManyJointsInGroupError,
)
from .kinematics import forward_kinematics
from .urdf import FINGERS

HANDGRAPH_SCHEMA = "handgraph/1"
NODE_TYPES = ("fingertip", "distal", "middle", "proximal", "metacarpal", "wrist")
FINGER_CLASSES = FINGERS + ("wrist",)
# proximal-to-distal order used to check monotone typing along a chain
_DEPTH = {"wrist": 0, "metacarpal": 1, "proximal": 2, "middle": 3, "distal": 4, "fingertip": 5}
# joint-bearing node types by number of joint groups in a chain, wrist outward
_LEVELS = {
    1: ("distal",),
    2: ("proximal", "distal"),
    3: ("proximal", "middle", "distal"),
    4: ("metacarpal", "proximal", "middle", "distal"),
}
MERGE_RADIUS = 0.015
MAX_GROUP = 3


@dataclass(frozen=True)
class SemanticNode:
    id: int
    finger: str
    type: str
    joints: tuple
    anchor_link: int
    anchor_joint: int | None = None


@dataclass(frozen=True, eq=False)
class SemanticNodeAssignment:
    nodes: tuple
    parents: tuple  # parent node id per node, None for the wrist
    tree: object
    chains: object

    @property
    def joint_to_node(self):
        return {j: n.id for n in self.nodes for j in n.joints}


def _default_groups(tree, chain, positions, merge_radius):
    groups = []
    for j in chain.joints:
        p = positions[tree.joints[j].child]
        if groups:
            first = groups[-1][0]
            if np.linalg.norm(p - positions[tree.joints[first].child]) <= merge_radius:
                groups[-1].append(j)
                continue
        groups.append([j])
    return groups


def partition_functional(tree, chains, overrides=None, merge_radius=MERGE_RADIUS):
    """Assign every actuated joint to one semantic node.

    Consecutive joints whose zero-pose anchors lie within ``merge_radius`` of the
    group's first joint merge into one node. Joint groups are typed from the distal
    end inward and every finger gets a jointless fingertip node at its tip link.
    ``overrides`` is an iterable of ``(joint_name, finger, type)``; overridden joints
    are grouped by their (finger, type) key instead.
    """
    table = {}
    for name, finger, ntype in overrides or ():
        if name in table:
            raise OverrideConflictError(name)
        if ntype not in NODE_TYPES or finger not in FINGER_CLASSES:
            raise ValueError(f"bad override for {name!r}: ({finger!r}, {ntype!r})")
        table[name] = (finger, ntype)

    positions = np.array([p.translation for p in forward_kinematics(tree, np.zeros(tree.n_dof))])
    nodes = [SemanticNode(id=0, finger="wrist", type="wrist", joints=(), anchor_link=chains.wrist_link)]
    parents = [None]
    for chain in chains.chains:
        default = _default_groups(tree, chain, positions, merge_radius)
        if len(default) > max(_LEVELS) and not table:
            raise TooManyJointsInGroupError(f"{chain.label}:levels", [tree.joints[j].name for j in chain.joints])
        levels = _LEVELS.get(len(default))
        keys = []
        for gi, group in enumerate(default):
            for j in group:
                name = tree.joints[j].name
                if name in table:
                    keys.append((j, table[name]))
                elif levels is None:
                    raise TooManyJointsInGroupError(f"{chain.label}:levels", [name])
                else:
                    keys.append((j, (chain.label, levels[gi])))
        grouped = {}
        for j, key in keys:
            grouped.setdefault(key, []).append(j)
        prev = 0
        for (finger, ntype), joints in grouped.items():
            if len(joints) > MAX_GROUP:
                raise TooManyJointsInGroupError(f"{finger}-{ntype}", [tree.joints[j].name for j in joints])
            nid = len(nodes)
            anchor = joints[0]
            link = chain.tip_link if ntype == "fingertip" else tree.joints[anchor].child
            nodes.append(SemanticNode(id=nid, finger=finger, type=ntype, joints=tuple(joints),
                                      anchor_link=link, anchor_joint=anchor))
            parents.append(prev)
            prev = nid
        if ("fingertip" not in {k[1] for k in grouped}):
            nid = len(nodes)
            nodes.append(SemanticNode(id=nid, finger=chain.label, type="fingertip", joints=(),
                                      anchor_link=chain.tip_link, anchor_joint=None))
            parents.append(prev)
    return SemanticNodeAssignment(nodes=tuple(nodes), parents=tuple(parents), tree=tree, chains=chains)


@dataclass(eq=False)
class HandGraph:
    nodes: tuple
    adjacency: np.ndarray  # A[i, j] = 1 iff node i is the kinematic parent of node j
    tree: object
    wrist: int = 0

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def joint_to_node(self):
        return {j: n.id for n in self.nodes for j in n.joints}

    @property
    def parent(self):
        out = [None] * self.n_nodes
        for i, j in zip(*np.nonzero(self.adjacency)):
            out[int(j)] = int(i)
        return out

    def child_of(self, node):
        kids = np.nonzero(self.adjacency[node])[0]
        if len(kids) == 0:
            raise DisconnectedNodeError(node)
        return int(kids[0])

    @property
    def finger_one_hot(self):
        out = np.zeros((self.n_nodes, len(FINGER_CLASSES)))
        for n in self.nodes:
            out[n.id, FINGER_CLASSES.index(n.finger)] = 1.0
        return out

    @property
    def type_one_hot(self):
        out = np.zeros((self.n_nodes, len(NODE_TYPES)))
        for n in self.nodes:
            out[n.id, NODE_TYPES.index(n.type)] = 1.0
        return out

    @property
    def anchor_links(self):
        return np.array([n.anchor_link for n in self.nodes], dtype=int)

    def edges(self):
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.adjacency))]

    def to_dict(self):
        t = self.tree
        nodes = [{"id": n.id, "finger": n.finger, "type": n.type,
                  "joints": [t.joints[j].name for j in n.joints],
                  "anchor_link": t.links[n.anchor_link].name,
                  "anchor_joint": None if n.anchor_joint is None else t.joints[n.anchor_joint].name}
                 for n in self.nodes]
        return {"schema": HANDGRAPH_SCHEMA, "n_nodes": self.n_nodes, "wrist": self.wrist,
                "nodes": nodes, "edges": [list(e) for e in self.edges()]}

    @classmethod
    def from_dict(cls, doc, tree):
        serialization.check_schema(doc, HANDGRAPH_SCHEMA)
        nodes = tuple(SemanticNode(
            id=int(n["id"]), finger=n["finger"], type=n["type"],
            joints=tuple(tree.joint_index(x) for x in n["joints"]),
            anchor_link=tree.link_index(n["anchor_link"]),
            anchor_joint=None if n["anchor_joint"] is None else tree.joint_index(n["anchor_joint"]))
            for n in doc["nodes"])
        A = np.zeros((len(nodes), len(nodes)), dtype=np.int64)
        for i, j in doc["edges"]:
            A[i, j] = 1
        return cls(nodes=nodes, adjacency=A, tree=tree, wrist=int(doc["wrist"]))


def build_graph(assignment):
    """Instantiate the morphology-aligned graph from a node assignment."""
    n = len(assignment.nodes)
    A = np.zeros((n, n), dtype=np.int64)
    for child, parent in enumerate(assignment.parents):
        if parent is not None:
            A[parent, child] = 1
    if n > 1:
        for i in range(n):
            if not A[i].any() and not A[:, i].any():
                raise DisconnectedNodeError(i)
    # anchors of multi-joint groups sit at the first joint in chain order
    nodes = tuple(node if node.type in ("wrist", "fingertip") or node.anchor_joint == node.joints[0]
                  else replace(node, anchor_joint=node.joints[0])
                  for node in assignment.nodes)
    wrist = next(nd.id for nd in nodes if nd.type == "wrist")
    return HandGraph(nodes=nodes, adjacency=A, tree=assignment.tree, wrist=wrist)


def type_sequence_monotone(graph):
    """True when node types never move back toward the wrist along any root-to-leaf path."""
    parent = graph.parent
    for i, p in enumerate(parent):
        if p is not None and _DEPTH[graph.nodes[p].type] >= _DEPTH[graph.nodes[i].type]:
            return False
    return True


def normalize_adjacency(A, symmetric=True):
    """GCN propagation matrix D^-1/2 (A' + I) D^-1/2.

    ``A'`` is the undirected closure A or A^T unless ``symmetric`` is False, in which
    case the directed parent matrix is used as-is.
    """
    A = np.asarray(A, dtype=float)
    base = np.maximum(A, A.T) if symmetric else A
    At = base + np.eye(A.shape[0])
    d = At.sum(axis=1)
    # one sqrt per entry keeps simple cases exact (1/sqrt(2*2) == 0.5)
    return At / np.sqrt(np.outer(d, d))


def permutation_matrix(perm):
    perm = np.asarray(perm)
    P = np.zeros((len(perm), len(perm)))
    P[np.arange(len(perm)), perm] = 1.0
    return P


def permute_graph(graph, perm):
    """Relabel nodes so new node ``k`` is old node ``perm[k]``; A' = P A P^T."""
    perm = [int(p) for p in perm]
    n = graph.n_nodes
    if sorted(perm) != list(range(n)):
        raise InvalidPermutationError(f"{perm} is not a permutation of {n} nodes")
    inverse = {old: new for new, old in enumerate(perm)}
    nodes = tuple(replace(graph.nodes[old], id=new) for new, old in enumerate(perm))
    A = graph.adjacency[np.ix_(perm, perm)].copy()
    return HandGraph(nodes=nodes, adjacency=A, tree=graph.tree, wrist=inverse[graph.wrist])
