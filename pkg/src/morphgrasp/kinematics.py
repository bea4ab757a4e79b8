"""Forward kinematics and unit-excitation response analysis."""

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    AmbiguousResponseError,
    DegeneratePalmError,
    DimensionMismatchError,
    JointNotActuatedError,
)


class Primitive(enum.IntEnum):
    FLEX = 0
    ABD = 1
    ROT = 2


def rpy_matrix(rpy):
    """URDF roll-pitch-yaw: extrinsic rotations about X, then Y, then Z (R = Rz Ry Rx)."""
    r, p, y = rpy
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def axis_angle_matrix(axis, angle):
    """Rodrigues rotation about a unit ``axis``."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def rotation_vector(R):
    """Axis-angle vector of a rotation matrix (log map)."""
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-12:
        return 0.5 * w
    s = np.sin(angle)
    if s > 1e-9:
        return w * (angle / (2.0 * s))
    # near pi: recover the axis from the symmetric part
    axis = np.sqrt(np.maximum((np.diag(R) + 1.0) / 2.0, 0.0))
    k = int(np.argmax(axis))
    axis[(k + 1) % 3] = np.copysign(axis[(k + 1) % 3], R[k, (k + 1) % 3] + R[(k + 1) % 3, k])
    axis[(k + 2) % 3] = np.copysign(axis[(k + 2) % 3], R[k, (k + 2) % 3] + R[(k + 2) % 3, k])
    return axis / np.linalg.norm(axis) * angle


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def __matmul__(self, other):
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, point):
        return self.rotation @ point + self.translation

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    @property
    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


@lru_cache(maxsize=128)
def _origins(tree):
    return tuple((rpy_matrix(j.origin_rpy), np.asarray(j.origin_xyz, dtype=float), np.asarray(j.axis, dtype=float))
                 for j in tree.joints)


def joint_angles(tree, q):
    """Angle of every joint (fixed = 0, mimic = multiplier * master + offset)."""
    q = np.asarray(q, dtype=float)
    if q.shape != (tree.n_dof,):
        raise DimensionMismatchError(f"expected {tree.n_dof} joint angles, got shape {q.shape}")
    angles = np.zeros(len(tree.joints))
    angles[list(tree.actuated)] = q
    for i, j in enumerate(tree.joints):
        if j.kind == "mimic":
            angles[i] = j.mimic.multiplier * angles[j.mimic.master] + j.mimic.offset
    return angles


def forward_kinematics(tree, q):
    """Pose of every link in the root frame for actuated joint angles ``q``."""
    angles = joint_angles(tree, q)
    origins = _origins(tree)
    poses = [None] * len(tree.links)
    poses[tree.root] = Pose.identity()
    for ji in tree.topo_order:
        j = tree.joints[ji]
        R0, t0, axis = origins[ji]
        parent = poses[j.parent]
        R = parent.rotation @ R0
        t = parent.rotation @ t0 + parent.translation
        if j.moving and angles[ji] != 0.0:
            R = R @ axis_angle_matrix(axis, angles[ji])
        poses[j.child] = Pose(R, t)
    return poses


def link_positions(tree, q):
    return np.array([p.translation for p in forward_kinematics(tree, q)])


@dataclass(frozen=True, eq=False)
class PalmFrame:
    origin: np.ndarray
    normal: np.ndarray
    lateral: np.ndarray
    longitudinal: np.ndarray

    @property
    def rotation(self):
        """Columns are (normal, lateral, longitudinal) in the wrist-link frame."""
        return np.column_stack([self.normal, self.lateral, self.longitudinal])

    def to_palm(self, vec):
        return self.rotation.T @ np.asarray(vec, dtype=float)

    def point_to_palm(self, point):
        return self.rotation.T @ (np.asarray(point, dtype=float) - self.origin)

    def to_dict(self):
        return {"origin": self.origin.tolist(), "normal": self.normal.tolist(),
                "lateral": self.lateral.tolist(), "longitudinal": self.longitudinal.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(*(np.asarray(doc[k], dtype=float) for k in ("origin", "normal", "lateral", "longitudinal")))


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else np.zeros_like(v)


def build_palm_frame(tree, chains):
    """Palm reference frame at the wrist.

    The normal comes from the wrist link's declared ``<palm normal>`` or, failing
    that, from the best-fit plane through the finger roots, oriented toward the
    thumb tip. The longitudinal axis is the mean non-thumb finger direction projected
    into the palm plane; lateral = longitudinal x normal.
    """
    poses = forward_kinematics(tree, np.zeros(tree.n_dof))
    origin = poses[chains.wrist_link].translation.copy()
    roots, tips, labels = [], [], []
    for c in chains.chains:
        roots.append(poses[tree.joints[c.joints[0]].child].translation)
        tips.append(poses[c.tip_link].translation)
        labels.append(c.label)
    declared = tree.links[chains.wrist_link].palm_normal
    if declared is not None:
        normal = _unit(np.asarray(declared, dtype=float))
    else:
        pts = np.array(roots + [origin])
        if len(pts) < 3:
            raise DegeneratePalmError("need a declared palm normal: fewer than three reference points")
        centered = pts - pts.mean(axis=0)
        _, s, vt = np.linalg.svd(centered)
        if s[1] < 1e-9:
            raise DegeneratePalmError("finger roots are collinear; declare a palm normal")
        normal = vt[-1]
        ref = tips[labels.index("thumb")] if "thumb" in labels else np.mean(tips, axis=0)
        if (ref - pts.mean(axis=0)) @ normal < 0:
            normal = -normal
    if np.linalg.norm(normal) < 1e-12:
        raise DegeneratePalmError("palm normal has zero length")
    fingers = [i for i, l in enumerate(labels) if l != "thumb"] or list(range(len(labels)))
    mean_dir = np.mean([_unit(tips[i] - roots[i]) for i in fingers], axis=0)
    longitudinal = _unit(mean_dir - (mean_dir @ normal) * normal)
    if np.linalg.norm(longitudinal) < 1e-12:
        raise DegeneratePalmError("mean finger direction is parallel to the palm normal")
    lateral = np.cross(longitudinal, normal)
    return PalmFrame(origin=origin, normal=normal, lateral=lateral, longitudinal=longitudinal)


@dataclass(frozen=True, eq=False)
class ExcitationResponse:
    joint: int
    direction: np.ndarray  # unit linear displacement of the child node anchor, palm frame
    rotation_axis: np.ndarray  # unit rotation axis of the child link, palm frame
    magnitude: float  # linear displacement per radian of excitation
    link_axis: np.ndarray  # unit joint-to-child-anchor direction at zero pose, palm frame

    def to_dict(self):
        return {"direction": self.direction.tolist(), "rotation_axis": self.rotation_axis.tolist(),
                "magnitude": self.magnitude, "link_axis": self.link_axis.tolist()}

    @classmethod
    def from_dict(cls, doc, joint):
        return cls(joint=joint, direction=np.asarray(doc["direction"], dtype=float),
                   rotation_axis=np.asarray(doc["rotation_axis"], dtype=float),
                   magnitude=float(doc["magnitude"]), link_axis=np.asarray(doc["link_axis"], dtype=float))


def excite_joint(tree, graph, palm, joint, delta=0.1):
    """Difference FK at q = 0 and q = delta * e_joint and report the child-unit motion."""
    if joint not in tree.dof_index:
        raise JointNotActuatedError(tree.joints[joint].name if 0 <= joint < len(tree.joints) else joint)
    k = tree.dof_index[joint]
    q0 = np.zeros(tree.n_dof)
    q1 = q0.copy()
    q1[k] = delta
    p0, p1 = forward_kinematics(tree, q0), forward_kinematics(tree, q1)
    node = graph.joint_to_node[joint]
    child_node = graph.child_of(node)
    anchor = graph.nodes[child_node].anchor_link
    disp = palm.to_palm(p1[anchor].translation - p0[anchor].translation)
    jlink = tree.joints[joint].child
    R_rel = p1[jlink].rotation @ p0[jlink].rotation.T
    rot = palm.to_palm(rotation_vector(R_rel))
    link_axis = palm.to_palm(p0[anchor].translation - p0[jlink].translation)
    mag = float(np.linalg.norm(disp)) / delta
    return ExcitationResponse(joint=joint, direction=_unit(disp), rotation_axis=_unit(rot),
                              magnitude=mag, link_axis=_unit(link_axis))


def classify_primitive(resp, palm, link_axis, eps_lin=0.0, abd_away=1.0, margin=0.1):
    """Map an excitation response to (primitive, sign).

    Responses with linear magnitude below ``eps_lin`` are axial twists (ROT) scored
    by alignment of the rotation axis with ``link_axis``. Otherwise the displacement
    component along the palm normal scores FLEX and along the lateral axis scores ABD.
    ``abd_away`` is +1 when moving along +lateral leaves the middle-finger axis.
    Palm-frame vectors are (normal, lateral, longitudinal) components.
    """
    link_axis = np.asarray(link_axis, dtype=float)
    if resp.magnitude < eps_lin:
        align = float(resp.rotation_axis @ link_axis)
        return Primitive.ROT, (1 if align >= 0 else -1)
    d = resp.direction
    scores = {Primitive.FLEX: abs(float(d[0])), Primitive.ABD: abs(float(d[1]))}
    ranked = sorted(scores, key=scores.get, reverse=True)
    top, second = scores[ranked[0]], scores[ranked[1]]
    if top - second < margin * top or top < 1e-9:
        raise AmbiguousResponseError(resp.joint, {p.name: round(s, 6) for p, s in scores.items()})
    prim = ranked[0]
    if prim is Primitive.FLEX:
        sign = 1 if d[0] > 0 else -1
    else:
        sign = 1 if d[1] * abd_away > 0 else -1
    return prim, sign
