"""Primitive-space to joint-space mapping, activation mask and action containers."""

from dataclasses import dataclass, field

import numpy as np

from . import serialization
from .errors import DimensionMismatchError, PrimitiveCollisionError
from .kinematics import ExcitationResponse, Primitive, classify_primitive, excite_joint, forward_kinematics

PRIMMAP_SCHEMA = "primmap/1"
N_PRIMITIVES = 3


@dataclass(frozen=True)
class MappingEntry:
    joint: int  # index into tree.joints
    node: int
    primitive: Primitive
    sign: int
    convention_sign: bool = False  # ABD sign chosen by convention (middle finger, no reference)


@dataclass(frozen=True, eq=False)
class PrimitiveMapping:
    entries: tuple
    n_nodes: int
    hand_id: str = ""
    responses: tuple = ()

    @property
    def n_dof(self):
        return len(self.entries)

    @property
    def nodes(self):
        return np.array([e.node for e in self.entries], dtype=int)

    @property
    def primitives(self):
        return np.array([int(e.primitive) for e in self.entries], dtype=int)

    @property
    def signs(self):
        return np.array([e.sign for e in self.entries], dtype=float)

    def to_dict(self, tree):
        entries = []
        for k, e in enumerate(self.entries):
            item = {"joint": tree.joints[e.joint].name, "node": e.node,
                    "primitive": e.primitive.name, "sign": e.sign,
                    "convention_sign": e.convention_sign}
            if self.responses:
                item["response"] = self.responses[k].to_dict()
            entries.append(item)
        return {"schema": PRIMMAP_SCHEMA, "hand_id": self.hand_id, "n_nodes": self.n_nodes,
                "n_dof": self.n_dof, "entries": entries}

    @classmethod
    def from_dict(cls, doc, tree):
        serialization.check_schema(doc, PRIMMAP_SCHEMA)
        entries = tuple(MappingEntry(joint=tree.joint_index(e["joint"]), node=int(e["node"]),
                                     primitive=Primitive[e["primitive"]], sign=int(e["sign"]),
                                     convention_sign=bool(e.get("convention_sign", False)))
                        for e in doc["entries"])
        responses = ()
        if doc["entries"] and all("response" in e for e in doc["entries"]):
            responses = tuple(ExcitationResponse.from_dict(e["response"], entry.joint)
                              for e, entry in zip(doc["entries"], entries))
        mapping = cls(entries=entries, n_nodes=int(doc["n_nodes"]), hand_id=doc.get("hand_id", ""),
                      responses=responses)
        _check_distinct(mapping)
        return mapping


@dataclass(eq=False)
class PrimitiveAction:
    wrist_translation: np.ndarray
    wrist_rotation: np.ndarray
    nodes: np.ndarray  # N_h x 3, columns FLEX / ABD / ROT

    @classmethod
    def zeros(cls, n_nodes):
        return cls(np.zeros(3), np.zeros(3), np.zeros((n_nodes, N_PRIMITIVES)))

    @property
    def dim(self):
        return 6 + self.nodes.size

    def flat(self):
        return np.concatenate([self.wrist_translation, self.wrist_rotation, self.nodes.ravel()])

    @classmethod
    def from_flat(cls, vec, n_nodes):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (6 + 3 * n_nodes,):
            raise DimensionMismatchError(f"expected {6 + 3 * n_nodes} action components, got {vec.shape}")
        return cls(vec[:3].copy(), vec[3:6].copy(), vec[6:].reshape(n_nodes, 3).copy())


@dataclass(eq=False)
class PhysicalAction:
    wrist_translation: np.ndarray
    wrist_rotation: np.ndarray
    dq: np.ndarray

    @property
    def dim(self):
        return 6 + self.dq.size


def _check_distinct(mapping):
    seen = {}
    for e in mapping.entries:
        seen.setdefault((e.node, e.primitive), []).append(e.joint)
    for (node, prim), joints in seen.items():
        if len(joints) > 1:
            raise PrimitiveCollisionError(node, prim.name, joints)


def _abd_reference(tree, graph, palm):
    """Per-finger sign of the lateral direction that leaves the middle-finger axis."""
    poses = forward_kinematics(tree, np.zeros(tree.n_dof))
    roots = {}
    for n in graph.nodes:
        if n.joints and n.finger not in roots:
            roots[n.finger] = palm.point_to_palm(poses[n.anchor_link].translation)[1]
    ref = roots.get("middle", float(np.mean(list(roots.values()))) if roots else 0.0)
    away, convention = {}, {}
    for finger, lat in roots.items():
        off = lat - ref
        if abs(off) < 1e-9:
            away[finger], convention[finger] = 1.0, True
        else:
            away[finger], convention[finger] = float(np.sign(off)), False
    return away, convention


def identify_mapping(tree, graph, palm, delta=0.1, eps_lin_frac=0.1, margin=0.1, hand_id=None):
    """Excite each actuated joint, classify its response and build the indexing rule."""
    responses = [excite_joint(tree, graph, palm, j, delta) for j in tree.actuated]
    if not responses:
        return PrimitiveMapping(entries=(), n_nodes=graph.n_nodes, hand_id=hand_id or tree.name)
    eps_lin = eps_lin_frac * max(r.magnitude for r in responses)
    away, convention = _abd_reference(tree, graph, palm)
    j2n = graph.joint_to_node
    entries = []
    for r in responses:
        node = j2n[r.joint]
        finger = graph.nodes[node].finger
        prim, sign = classify_primitive(r, palm, r.link_axis, eps_lin=eps_lin,
                                        abd_away=away.get(finger, 1.0), margin=margin)
        entries.append(MappingEntry(joint=r.joint, node=node, primitive=prim, sign=sign,
                                    convention_sign=prim is Primitive.ABD and convention.get(finger, True)))
    mapping = PrimitiveMapping(entries=tuple(entries), n_nodes=graph.n_nodes,
                               hand_id=hand_id or tree.name, responses=tuple(responses))
    _check_distinct(mapping)
    return mapping


def derive_activation_mask(mapping):
    """M[i, p] = 1 iff some DoF maps to node i and primitive p."""
    mask = np.zeros((mapping.n_nodes, N_PRIMITIVES))
    for e in mapping.entries:
        mask[e.node, int(e.primitive)] = 1.0
    return mask


def _check_nodes(mapping, alpha):
    if alpha.shape != (mapping.n_nodes, N_PRIMITIVES):
        raise DimensionMismatchError(f"node primitives must be {(mapping.n_nodes, 3)}, got {alpha.shape}")


def primitive_joint_deltas(mapping, alpha):
    """dq_j = s_j * alpha[n_j, p_j]."""
    alpha = np.asarray(alpha, dtype=float)
    _check_nodes(mapping, alpha)
    if not mapping.entries:
        return np.zeros(0)
    return mapping.signs * alpha[mapping.nodes, mapping.primitives]


def primitives_to_physical(mapping, action):
    dq = primitive_joint_deltas(mapping, action.nodes)
    return PhysicalAction(np.array(action.wrist_translation, dtype=float),
                          np.array(action.wrist_rotation, dtype=float), dq)


def embed_physical(mapping, dq):
    """Place each joint value into its (node, primitive) cell with its sign; zeros elsewhere."""
    dq = np.asarray(dq, dtype=float)
    if dq.shape != (mapping.n_dof,):
        raise DimensionMismatchError(f"expected {mapping.n_dof} joint values, got {dq.shape}")
    out = np.zeros((mapping.n_nodes, N_PRIMITIVES))
    if mapping.entries:
        out[mapping.nodes, mapping.primitives] = mapping.signs * dq
    return out
