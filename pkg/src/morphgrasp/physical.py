"""URDF-derived static node priors and the link-length scaling perturbation."""

import math
from dataclasses import replace

import numpy as np

from .errors import InconsistentHandError, NonPositiveScaleError
from .kinematics import forward_kinematics

PHYSICAL_DIM = 27
LIMITS = slice(0, 6)
AXES = slice(6, 15)
VELOCITIES = slice(15, 21)
DAMPING = slice(21, 24)
LINK = slice(24, 27)

LIMIT_REF = math.pi
VELOCITY_REF = 10.0


def build_physical_features(tree, graph, mapping, palm, limit_ref=LIMIT_REF, velocity_ref=VELOCITY_REF):
    """Per-node feature rows ``[limits(6), axes(9), velocities(6), damping(3), link(3)]``.

    Primitive slots (FLEX, ABD, ROT) are filled from the joint that owns the slot;
    inactive slots stay zero. The wrist row carries the palm basis as its axes.
    """
    if mapping.n_nodes != graph.n_nodes:
        raise InconsistentHandError(f"mapping has {mapping.n_nodes} nodes, graph has {graph.n_nodes}")
    poses = forward_kinematics(tree, np.zeros(tree.n_dof))
    X = np.zeros((graph.n_nodes, PHYSICAL_DIM))
    for e in mapping.entries:
        j = tree.joints[e.joint]
        p = int(e.primitive)
        X[e.node, 2 * p] = np.clip(j.lower / limit_ref, -1.0, 1.0)
        X[e.node, 2 * p + 1] = np.clip(j.upper / limit_ref, -1.0, 1.0)
        axis_world = poses[j.child].rotation @ np.asarray(j.axis)
        X[e.node, 6 + 3 * p: 9 + 3 * p] = palm.to_palm(axis_world)
        X[e.node, 15 + 2 * p] = -j.velocity / velocity_ref
        X[e.node, 15 + 2 * p + 1] = j.velocity / velocity_ref
        X[e.node, 21 + p] = j.damping
    X[graph.wrist, AXES] = np.eye(3).ravel()
    anchors = np.array([palm.point_to_palm(poses[n.anchor_link].translation) for n in graph.nodes])
    for child, parent in enumerate(graph.parent):
        if parent is not None:
            X[child, LINK] = anchors[child] - anchors[parent]
    return X


def scale_links(tree, s):
    """Multiply every joint-origin translation by ``s``; rotations, axes, limits unchanged."""
    if not s > 0:
        raise NonPositiveScaleError(f"link scale must be positive, got {s}")
    joints = tuple(replace(j, origin_xyz=tuple(float(s) * x for x in j.origin_xyz)) for j in tree.joints)
    return replace(tree, joints=joints)
