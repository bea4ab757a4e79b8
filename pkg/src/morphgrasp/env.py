"""Deterministic kinematic grasp environment.

The hand is moved by forward kinematics with first-order joint tracking; the object
is a convex primitive represented by a fixed surface point cloud. Contacts are
proximity tests at node anchors and the force signal is a penetration-depth proxy.
The object rigidly follows the wrist while enough fingers touch it.
"""

import json
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import DimensionMismatchError, InvalidConfigError
from .kinematics import axis_angle_matrix, forward_kinematics, rotation_vector
from .magcn import StateGraph
from .primitives import PrimitiveAction, embed_physical, primitive_joint_deltas

EPISODE_SCHEMA = "episode/1"
OBJECT_SHAPES = ("sphere", "box", "cylinder")
DEFAULT_SIZES = {"sphere": (0.04,), "box": (0.035, 0.035, 0.035), "cylinder": (0.035, 0.05)}


@dataclass(frozen=True)
class RewardWeights:
    dis: float = 0.3
    contact: float = 1.0
    force: float = 0.5
    reg: float = 1.5
    pen: float = 0.3


@dataclass(frozen=True)
class EnvConfig:
    explore_steps: int = 120
    lift_steps: int = 30
    control_hz: float = 20.0
    substeps: int = 20
    finger_gain: float = 0.015  # per physics substep
    wrist_distance: float = 0.30
    distance_scale: float = 0.21  # shrinks the approach distance for toy-sized hands
    contact_radius: float = 0.008
    stiffness: float = 500.0  # N per m of penetration
    force_threshold: float = 1.0
    max_penetration: float = 0.003  # motion pushing an anchor deeper than this is truncated
    cloud_points: int = 512
    lift_speed: float = 0.01  # m per control step
    drop_speed: float = 0.05
    lift_height: float = 0.2
    hold_steps: int = 40
    node_action_scale: float = 0.1  # normalizes primitive outputs for the inactive-axis penalty
    lift_channel: int = 14
    weights: RewardWeights = field(default_factory=RewardWeights)
    # observation normalizers
    scale_distance: float = 0.1
    scale_angle: float = 1.0
    scale_joint_velocity: float = 5.0
    scale_force: float = 5.0
    scale_linear_velocity: float = 0.2
    scale_angular_velocity: float = 0.4
    obs_clip: float = 5.0

    @property
    def max_steps(self):
        return self.explore_steps + self.lift_steps

    @property
    def tracking_gain(self):
        """Equivalent one-step first-order tracking factor of the per-substep gain."""
        return 1.0 - (1.0 - self.finger_gain) ** self.substeps

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and f.name != "lift_channel" and not v > 0:
                raise InvalidConfigError(f"{f.name} must be positive, got {v}")
        if not 0 <= self.lift_channel < 15:
            raise InvalidConfigError(f"lift_channel must index the 15 global channels, got {self.lift_channel}")
        if self.hold_steps > self.max_steps:
            raise InvalidConfigError("hold_steps exceeds episode length")
        return self


# -- objects ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ObjectSpec:
    shape: str
    size: tuple

    @classmethod
    def named(cls, shape, size=None):
        if shape not in OBJECT_SHAPES:
            raise InvalidConfigError(f"unknown object shape {shape!r}; expected one of {OBJECT_SHAPES}")
        size = tuple(float(s) for s in (size or DEFAULT_SIZES[shape]))
        if len(size) != len(DEFAULT_SIZES[shape]) or min(size) <= 0:
            raise InvalidConfigError(f"bad size {size} for {shape}")
        return cls(shape, size)

    @classmethod
    def coerce(cls, obj):
        return obj if isinstance(obj, ObjectSpec) else cls.named(obj)

    def signed_distance(self, pts):
        """Signed distance of object-frame points to the surface (negative inside)."""
        pts = np.atleast_2d(pts)
        if self.shape == "sphere":
            return np.linalg.norm(pts, axis=1) - self.size[0]
        if self.shape == "box":
            q = np.abs(pts) - np.asarray(self.size)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            return outside + np.minimum(q.max(axis=1), 0.0)
        r, h = self.size
        radial = np.linalg.norm(pts[:, :2], axis=1)
        q = np.column_stack([radial - r, np.abs(pts[:, 2]) - h])
        return np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(q.max(axis=1), 0.0)

    def sample_surface(self, n, rng):
        if self.shape == "sphere":
            v = rng.standard_normal((n, 3))
            return self.size[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
        if self.shape == "box":
            e = np.asarray(self.size)
            areas = np.array([e[1] * e[2], e[0] * e[2], e[0] * e[1]]).repeat(2)
            face = rng.choice(6, size=n, p=areas / areas.sum())
            pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * e
            axis = face // 2
            pts[np.arange(n), axis] = np.where(face % 2 == 0, 1.0, -1.0) * e[axis]
            return pts
        r, h = self.size
        side, cap = 2 * np.pi * r * 2 * h, np.pi * r * r
        kind = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        phi = rng.uniform(0.0, 2 * np.pi, size=n)
        rad = np.where(kind == 0, r, r * np.sqrt(rng.uniform(0.0, 1.0, size=n)))
        z = np.where(kind == 0, rng.uniform(-h, h, size=n), np.where(kind == 1, h, -h))
        return np.column_stack([rad * np.cos(phi), rad * np.sin(phi), z])


# -- scene ----------------------------------------------------------------------


@dataclass(frozen=True)
class RewardBreakdown:
    r_dis: float
    r_contact: float
    r_force: float
    r_reg: float
    r_pen: float
    total: float
    weights: RewardWeights

    def to_dict(self):
        return {"r_dis": self.r_dis, "r_contact": self.r_contact, "r_force": self.r_force,
                "r_reg": self.r_reg, "r_pen": self.r_pen, "total": self.total}


@dataclass(eq=False)
class GraspScene:
    bundle: object
    obj: ObjectSpec
    config: EnvConfig
    physical: np.ndarray
    cloud: np.ndarray  # object-frame surface samples, fixed after reset
    cloud_index: cKDTree
    object_rotation: np.ndarray
    object_position: np.ndarray
    wrist_rotation: np.ndarray  # world from wrist link
    wrist_position: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    step: int = 0
    attached: bool = False
    attach_rotation: np.ndarray | None = None  # object pose in the wrist frame while attached
    attach_position: np.ndarray | None = None
    rest_height: float = 0.0
    initial_height: float = 0.0
    prev_wrist: tuple | None = None
    prev_object: tuple | None = None
    contacts: np.ndarray | None = None
    history: list = field(default_factory=list)

    @property
    def phase(self):
        return "lift" if self.step >= self.config.explore_steps else "explore"

    @property
    def palm_rotation(self):
        """World from palm frame (columns n, a, t in world coordinates)."""
        return self.wrist_rotation @ self.bundle.palm.rotation

    @property
    def object_height(self):
        return float(self.object_position[2])

    def node_anchors(self, q=None, wrist=None):
        poses = forward_kinematics(self.bundle.tree, self.q if q is None else q)
        R, p = wrist if wrist is not None else (self.wrist_rotation, self.wrist_position)
        local = np.array([poses[n.anchor_link].translation for n in self.bundle.graph.nodes])
        return local @ R.T + p

    def penetration(self, anchors):
        """Depth of each anchor inside the object (0 outside)."""
        local = (anchors - self.object_position) @ self.object_rotation
        return np.maximum(0.0, -self.obj.signed_distance(local))


def reset(bundle, obj="sphere", config=None, seed=0, physical=None):
    """Open-palm hand facing the object from a seeded random horizontal direction."""
    cfg = (config or EnvConfig()).validate()
    obj = ObjectSpec.coerce(obj)
    rng = np.random.default_rng(seed)
    R_obj = Rotation.random(random_state=rng).as_matrix()
    cloud = obj.sample_surface(cfg.cloud_points, rng)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    toward = np.array([np.cos(phi), np.sin(phi), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    palm_world = np.column_stack([toward, np.cross(up, toward), up])
    R_wrist = palm_world @ bundle.palm.rotation.T
    distance = cfg.wrist_distance * cfg.distance_scale
    # palm-frame origin sits at the wrist link origin plus the palm offset
    p_wrist = -distance * toward - R_wrist @ bundle.palm.origin
    n = bundle.tree.n_dof
    scene = GraspScene(bundle=bundle, obj=obj, config=cfg,
                       physical=bundle.physical if physical is None else np.asarray(physical),
                       cloud=cloud, cloud_index=cKDTree(cloud),
                       object_rotation=R_obj, object_position=np.zeros(3),
                       wrist_rotation=R_wrist, wrist_position=p_wrist,
                       q=np.zeros(n), qdot=np.zeros(n))
    scene.prev_wrist = (R_wrist.copy(), p_wrist.copy())
    scene.prev_object = (R_obj.copy(), np.zeros(3))
    return scene, build_observation(scene)


def _surface_query(scene, anchors):
    """Nearest cloud point (world), signed gap and raw displacement for each anchor."""
    R, p = scene.object_rotation, scene.object_position
    local = (anchors - p) @ R
    dist, idx = scene.cloud_index.query(local)
    nearest = scene.cloud[idx] @ R.T + p
    sdf = scene.obj.signed_distance(local)
    gap = np.where(sdf < 0.0, sdf, dist)
    return nearest - anchors, gap


def _contact_state(scene, gap):
    cfg = scene.config
    contact = (gap < cfg.contact_radius).astype(float)
    force = cfg.stiffness * np.maximum(0.0, -gap)
    return contact, force


def _velocity(prev, cur, hz):
    (R0, p0), (R1, p1) = prev, cur
    return (p1 - p0) * hz, rotation_vector(R1 @ R0.T) * hz


def build_observation(scene):
    cfg, b = scene.config, scene.bundle
    anchors = scene.node_anchors()
    disp, gap = _surface_query(scene, anchors)
    contact, force = _contact_state(scene, gap)
    scene.contacts = contact
    to_palm = scene.palm_rotation.T
    d = disp @ to_palm.T
    theta = embed_physical(b.mapping, scene.q)
    theta_dot = embed_physical(b.mapping, scene.qdot)
    hz = cfg.control_hz
    v_w, w_w = _velocity(scene.prev_wrist, (scene.wrist_rotation, scene.wrist_position), hz)
    v_o, w_o = _velocity(scene.prev_object, (scene.object_rotation, scene.object_position), hz)
    palm_origin = scene.wrist_rotation @ b.palm.origin + scene.wrist_position
    target = to_palm @ (scene.object_position - palm_origin)
    x_node = np.column_stack([
        d / cfg.scale_distance, theta / cfg.scale_angle, theta_dot / cfg.scale_joint_velocity,
        contact, force / cfg.scale_force, b.graph.finger_one_hot, b.graph.type_one_hot])
    x_global = np.concatenate([
        target / cfg.scale_distance,
        to_palm @ v_w / cfg.scale_linear_velocity, to_palm @ w_w / cfg.scale_angular_velocity,
        to_palm @ v_o / cfg.scale_linear_velocity, to_palm @ w_o / cfg.scale_angular_velocity])
    c = cfg.obs_clip
    x_node, x_global = np.clip(x_node, -c, c), np.clip(x_global, -c, c)
    if scene.phase == "lift":
        x_global[cfg.lift_channel] = 1.0
    obs = StateGraph(x_node=x_node, x_global=x_global, a_hat=b.a_hat, mask=b.mask,
                     wrist=b.graph.wrist, physical=scene.physical)
    obs.raw = {"d": d, "gap": gap, "contact": contact, "force": force}
    return obs


def reward(d, contact, force, dq, alpha, mask, weights=None, force_threshold=1.0):
    """Shaped grasp reward.

    ``d`` holds per-node displacement vectors to the surface (metres), ``alpha`` the
    node-primitive outputs in normalized units and ``mask`` the activation mask.
    """
    w = weights or RewardWeights()
    d = np.asarray(d, dtype=float).reshape(-1, 3) if np.size(d) else np.zeros((0, 3))
    r_dis = -float(np.sum(np.linalg.norm(d, axis=1)))
    r_contact = float(np.sum(contact))
    r_force = -float(np.sum(np.maximum(0.0, np.asarray(force, dtype=float) - force_threshold) ** 2))
    r_reg = -float(np.linalg.norm(dq))
    inactive = (1.0 - np.asarray(mask, dtype=float)) * np.asarray(alpha, dtype=float)
    r_pen = -w.pen * float(np.sum(inactive * inactive))
    total = w.dis * r_dis + w.contact * r_contact + w.force * r_force + w.reg * r_reg + r_pen
    return RewardBreakdown(r_dis, r_contact, r_force, r_reg, r_pen, total, w)


def _touching_fingers(scene, contact):
    return {scene.bundle.graph.nodes[i].finger for i in np.nonzero(contact)[0]}


def _attach_condition(scene, contact):
    fingers = _touching_fingers(scene, contact)
    opposing = "thumb" in fingers or "wrist" in fingers
    return len(fingers - {"wrist"}) >= 2 and opposing


def _blocked_fraction(scene, candidate, nodes, before, iters=10):
    """Largest fraction in [0, 1] of a motion that keeps ``nodes`` within the penetration allowance.

    ``candidate(beta)`` returns anchor positions after ``beta`` of the motion. A node
    already deeper than the allowance may not go deeper.
    """
    allowed = np.maximum(scene.config.max_penetration, before[nodes]) + 1e-12

    def ok(beta):
        return bool(np.all(scene.penetration(candidate(beta))[nodes] <= allowed))

    if ok(1.0):
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _wrist_motion(scene, action):
    """Target wrist pose as (rotation vector about the palm origin, translation) in world."""
    cfg, b = scene.config, scene.bundle
    if scene.phase == "lift":
        return np.zeros(3), np.array([0.0, 0.0, cfg.lift_speed])
    palm_R = scene.palm_rotation
    return palm_R @ np.asarray(action.wrist_rotation, dtype=float), \
        palm_R @ np.asarray(action.wrist_translation, dtype=float)


def _moved_wrist(scene, rotvec, translation, beta):
    R, p = scene.wrist_rotation, scene.wrist_position + beta * translation
    angle = float(np.linalg.norm(rotvec)) * beta
    if angle > 0.0:
        # rotate about the palm-frame origin so translation and rotation commands decouple
        pivot = scene.wrist_rotation @ scene.bundle.palm.origin + p
        Rw = axis_angle_matrix(rotvec / np.linalg.norm(rotvec), angle)
        R, p = Rw @ R, Rw @ (p - pivot) + pivot
    return R, p


def step(scene, action):
    """Advance one control step in place; returns (observation, reward, done).

    Wrist motion and each finger's joint motion are truncated where they would push
    a node anchor deeper than ``max_penetration`` into the object, so the object
    resists the hand without simulated dynamics.
    """
    cfg, b = scene.config, scene.bundle
    if not isinstance(action, PrimitiveAction):
        raise DimensionMismatchError("action must be a PrimitiveAction")
    if action.nodes.shape != (b.n_nodes, 3) or np.shape(action.wrist_translation) != (3,) \
            or np.shape(action.wrist_rotation) != (3,):
        raise DimensionMismatchError(
            f"action for {b.n_nodes} nodes must have node block {(b.n_nodes, 3)}, got {action.nodes.shape}")
    tree = b.tree
    lower = np.array([tree.joints[j].lower for j in tree.actuated])
    upper = np.array([tree.joints[j].upper for j in tree.actuated])
    dq = primitive_joint_deltas(b.mapping, action.nodes)
    target = np.clip(scene.q + dq, lower, upper)
    q_goal = np.clip(scene.q + cfg.tracking_gain * (target - scene.q), lower, upper)

    scene.prev_wrist = (scene.wrist_rotation.copy(), scene.wrist_position.copy())
    scene.prev_object = (scene.object_rotation.copy(), scene.object_position.copy())
    all_nodes = np.arange(b.n_nodes)

    rotvec, translation = _wrist_motion(scene, action)
    if scene.attached or scene.phase == "lift":
        beta = 1.0  # the scripted lift is never blocked
    else:
        before = scene.penetration(scene.node_anchors())
        beta = _blocked_fraction(
            scene, lambda x: scene.node_anchors(wrist=_moved_wrist(scene, rotvec, translation, x)),
            all_nodes, before)
    scene.wrist_rotation, scene.wrist_position = _moved_wrist(scene, rotvec, translation, beta)
    if scene.attached:
        scene.object_rotation = scene.wrist_rotation @ scene.attach_rotation
        scene.object_position = scene.wrist_rotation @ scene.attach_position + scene.wrist_position
        # the table supports a held object: the hand cannot press it below its resting height
        sink = scene.rest_height - scene.object_position[2]
        if sink > 0.0:
            scene.wrist_position = scene.wrist_position + np.array([0.0, 0.0, sink])
            scene.object_position = scene.object_position + np.array([0.0, 0.0, sink])

    q_new = scene.q.copy()
    before = scene.penetration(scene.node_anchors())
    for _, dofs, nodes in b.finger_groups:
        if dofs.size == 0 or np.all(q_goal[dofs] == scene.q[dofs]):
            continue

        def candidate(x, dofs=dofs):
            trial = q_new.copy()
            trial[dofs] = scene.q[dofs] + x * (q_goal[dofs] - scene.q[dofs])
            return scene.node_anchors(q=trial)

        frac = _blocked_fraction(scene, candidate, nodes, before)
        q_new[dofs] = scene.q[dofs] + frac * (q_goal[dofs] - scene.q[dofs])
    q_new = np.clip(q_new, lower, upper)
    scene.qdot = (q_new - scene.q) * cfg.control_hz
    scene.q = q_new
    scene.step += 1

    _, gap = _surface_query(scene, scene.node_anchors())
    contact, _ = _contact_state(scene, gap)
    if not scene.attached and _attach_condition(scene, contact):
        scene.attached = True
        scene.attach_rotation = scene.wrist_rotation.T @ scene.object_rotation
        scene.attach_position = scene.wrist_rotation.T @ (scene.object_position - scene.wrist_position)
    elif scene.attached and len(_touching_fingers(scene, contact) - {"wrist"}) < 2:
        scene.attached = False
    if not scene.attached and scene.object_position[2] > scene.rest_height:
        scene.object_position = scene.object_position.copy()
        scene.object_position[2] = max(scene.rest_height, scene.object_position[2] - cfg.drop_speed)

    obs = build_observation(scene)
    alpha = np.asarray(action.nodes, dtype=float) / cfg.node_action_scale
    # distances in observation units keep the shaping balance of a full-size scene
    rb = reward(obs.raw["d"] / cfg.scale_distance, obs.raw["contact"], obs.raw["force"], dq, alpha, b.mask,
                cfg.weights, cfg.force_threshold)
    scene.history.append({"step": scene.step, "reward": rb.to_dict(),
                          "contacts": [int(i) for i in np.nonzero(obs.raw["contact"])[0]],
                          "object_height": scene.object_height, "attached": scene.attached})
    done = scene.step >= cfg.max_steps
    return obs, rb, done


def evaluate_success(scene_or_history, initial_height=0.0, config=None):
    """Lifted by at least the configured height and attached through the final hold window."""
    if isinstance(scene_or_history, GraspScene):
        history, initial_height, cfg = scene_or_history.history, scene_or_history.initial_height, \
            scene_or_history.config
    else:
        history, cfg = scene_or_history, config or EnvConfig()
    if len(history) < cfg.hold_steps:
        return False
    window = history[-cfg.hold_steps:]
    held = all(h["attached"] for h in window)
    gain = history[-1]["object_height"] - initial_height
    return bool(held and gain >= cfg.lift_height)


class GraspEnv:
    """Object-style wrapper over :func:`reset` / :func:`step`."""

    def __init__(self, bundle, obj="sphere", config=None, physical=None):
        self.bundle = bundle
        self.obj = ObjectSpec.coerce(obj)
        self.config = (config or EnvConfig()).validate()
        self.physical = physical
        self.scene = None

    def reset(self, seed=0):
        self.scene, obs = reset(self.bundle, self.obj, self.config, seed, self.physical)
        return obs

    def step(self, action):
        return step(self.scene, action)

    def success(self):
        return evaluate_success(self.scene)


def episode_records(scene, header=None):
    """Line-delimited JSON records of one episode, header first."""
    head = {"schema": EPISODE_SCHEMA, "hand_id": scene.bundle.hand_id, "object": scene.obj.shape,
            "success": evaluate_success(scene), **(header or {})}
    return [json.dumps(head)] + [json.dumps(h) for h in scene.history]
