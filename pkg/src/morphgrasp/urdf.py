"""URDF subset parser, tree validation and finger-chain extraction."""

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from . import serialization
from .errors import (
    BranchAtNonWristError,
    CycleDetectedError,
    MissingLinkError,
    MultipleRootsError,
    NoBranchesError,
    UnknownMimicMasterError,
    UnsupportedJointKindError,
    XmlSyntaxError,
)

KINTREE_SCHEMA = "kintree/1"
FINGERS = ("thumb", "index", "middle", "ring", "little")
SUPPORTED_KINDS = ("revolute", "continuous", "fixed")
REJECTED_KINDS = ("prismatic", "planar", "floating")


@dataclass(frozen=True)
class Mimic:
    master: int
    multiplier: float = 1.0
    offset: float = 0.0


@dataclass(frozen=True)
class Joint:
    name: str
    kind: str  # revolute | continuous | fixed | mimic
    parent: int
    child: int
    origin_xyz: tuple = (0.0, 0.0, 0.0)
    origin_rpy: tuple = (0.0, 0.0, 0.0)
    axis: tuple = (1.0, 0.0, 0.0)
    lower: float = 0.0
    upper: float = 0.0
    velocity: float = 0.0
    damping: float = 0.0
    mimic: Mimic | None = None
    limits_synthesized: bool = False

    @property
    def moving(self):
        return self.kind != "fixed"


@dataclass(frozen=True)
class Link:
    name: str
    parent_joint: int | None = None
    palm_normal: tuple | None = None


@dataclass(frozen=True)
class KinematicTree:
    name: str
    links: tuple
    joints: tuple
    root: int

    @cached_property
    def actuated(self):
        """Joint indices of actuated DoF, in declared (command) order."""
        return tuple(i for i, j in enumerate(self.joints) if j.kind in ("revolute", "continuous"))

    @property
    def n_dof(self):
        return len(self.actuated)

    @cached_property
    def dof_index(self):
        return {j: k for k, j in enumerate(self.actuated)}

    @cached_property
    def child_joints(self):
        """Per link, indices of joints whose parent is that link (declared order)."""
        out = [[] for _ in self.links]
        for i, j in enumerate(self.joints):
            out[j.parent].append(i)
        return tuple(tuple(c) for c in out)

    @cached_property
    def topo_order(self):
        """Joint indices ordered so every joint follows the joint of its parent link."""
        order, stack = [], [self.root]
        while stack:
            link = stack.pop()
            kids = self.child_joints[link]
            order.extend(kids)
            stack.extend(self.joints[j].child for j in reversed(kids))
        return tuple(order)

    def link_index(self, name):
        for i, link in enumerate(self.links):
            if link.name == name:
                return i
        raise KeyError(name)

    def joint_index(self, name):
        for i, joint in enumerate(self.joints):
            if joint.name == name:
                return i
        raise KeyError(name)

    def descendants(self, link):
        """All links strictly below ``link``."""
        out, stack = [], [link]
        while stack:
            cur = stack.pop()
            for j in self.child_joints[cur]:
                c = self.joints[j].child
                out.append(c)
                stack.append(c)
        return out

    def has_actuated_below(self, joint):
        j = self.joints[joint]
        if j.kind in ("revolute", "continuous"):
            return True
        for link in self.descendants(j.child):
            pj = self.links[link].parent_joint
            if self.joints[pj].kind in ("revolute", "continuous"):
                return True
        return False

    def to_dict(self):
        links = [{"name": l.name,
                  "parent_joint": l.parent_joint,
                  "palm_normal": list(l.palm_normal) if l.palm_normal is not None else None}
                 for l in self.links]
        joints = []
        for j in self.joints:
            joints.append({
                "name": j.name,
                "kind": j.kind,
                "parent": j.parent,
                "child": j.child,
                "origin_xyz": list(j.origin_xyz),
                "origin_rpy": list(j.origin_rpy),
                "axis": list(j.axis),
                "lower": j.lower,
                "upper": j.upper,
                "velocity": j.velocity,
                "damping": j.damping,
                "mimic": None if j.mimic is None else {
                    "master": j.mimic.master,
                    "multiplier": j.mimic.multiplier,
                    "offset": j.mimic.offset,
                },
                "limits_synthesized": j.limits_synthesized,
            })
        return {"schema": KINTREE_SCHEMA, "name": self.name, "root": self.root,
                "links": links, "joints": joints}

    @classmethod
    def from_dict(cls, doc):
        serialization.check_schema(doc, KINTREE_SCHEMA)
        links = tuple(Link(name=l["name"], parent_joint=l["parent_joint"],
                           palm_normal=_vec(l["palm_normal"]) if l.get("palm_normal") is not None else None)
                      for l in doc["links"])
        joints = []
        for j in doc["joints"]:
            m = j.get("mimic")
            joints.append(Joint(
                name=j["name"], kind=j["kind"], parent=int(j["parent"]), child=int(j["child"]),
                origin_xyz=_vec(j["origin_xyz"]), origin_rpy=_vec(j["origin_rpy"]), axis=_vec(j["axis"]),
                lower=float(j["lower"]), upper=float(j["upper"]), velocity=float(j["velocity"]),
                damping=float(j["damping"]),
                mimic=None if m is None else Mimic(int(m["master"]), float(m["multiplier"]), float(m["offset"])),
                limits_synthesized=bool(j["limits_synthesized"]),
            ))
        return cls(name=doc["name"], links=links, joints=tuple(joints), root=int(doc["root"]))

    def dumps(self):
        return serialization.dumps(self.to_dict())


def _vec(values):
    return tuple(float(v) for v in values)


def _floats(text, n, default):
    if text is None:
        return default
    parts = text.split()
    if len(parts) != n:
        raise XmlSyntaxError(f"expected {n} numbers, got {text!r}")
    return tuple(float(p) for p in parts)


def _attr_float(elem, key, default=0.0):
    if elem is None or elem.get(key) is None:
        return default
    return float(elem.get(key))


def parse_urdf(xml_text):
    """Parse the kinematic subset of a URDF document into a :class:`KinematicTree`.

    Recognized elements are ``robot``, ``link``, ``joint`` and the joint children
    ``origin``, ``axis``, ``limit``, ``dynamics`` and ``mimic``. A ``<palm normal="x y z"/>``
    child of a link declares that link's palm-inward normal. Everything else is ignored.

    Degenerate axes and inverted limits are kept as-is and reported by
    :func:`validate_tree`; structural problems raise.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise XmlSyntaxError(str(exc), getattr(exc, "position", None)) from None
    if root.tag != "robot":
        raise XmlSyntaxError(f"root element must be <robot>, got <{root.tag}>", None)

    link_elems = root.findall("link")
    names = [l.get("name") for l in link_elems]
    index = {n: i for i, n in enumerate(names)}
    palm_normals = []
    for l in link_elems:
        palm = l.find("palm")
        palm_normals.append(_floats(palm.get("normal"), 3, None) if palm is not None else None)

    joint_elems = root.findall("joint")
    joint_names = [j.get("name") for j in joint_elems]
    joints = []
    pending_mimic = {}
    for i, je in enumerate(joint_elems):
        name = je.get("name")
        kind = je.get("type")
        if kind in REJECTED_KINDS or kind not in SUPPORTED_KINDS:
            raise UnsupportedJointKindError(name, kind)
        pe, ce = je.find("parent"), je.find("child")
        parent = pe.get("link") if pe is not None else None
        child = ce.get("link") if ce is not None else None
        for ln in (parent, child):
            if ln not in index:
                raise MissingLinkError(name, ln)
        origin = je.find("origin")
        xyz = _floats(origin.get("xyz") if origin is not None else None, 3, (0.0, 0.0, 0.0))
        rpy = _floats(origin.get("rpy") if origin is not None else None, 3, (0.0, 0.0, 0.0))
        axis_elem = je.find("axis")
        axis = _floats(axis_elem.get("xyz") if axis_elem is not None else None, 3, (1.0, 0.0, 0.0))
        if kind != "fixed":
            norm = math.sqrt(sum(a * a for a in axis))
            if norm > 1e-12:
                axis = tuple(a / norm for a in axis)
        limit = je.find("limit")
        lower, upper = _attr_float(limit, "lower"), _attr_float(limit, "upper")
        velocity = _attr_float(limit, "velocity")
        damping = _attr_float(je.find("dynamics"), "damping")
        synthesized = False
        if kind == "continuous":
            lower, upper, synthesized = -math.pi, math.pi, True
        mimic_elem = je.find("mimic")
        if mimic_elem is not None and kind != "fixed":
            pending_mimic[i] = (mimic_elem.get("joint"),
                                _attr_float(mimic_elem, "multiplier", 1.0),
                                _attr_float(mimic_elem, "offset", 0.0))
            kind = "mimic"
        joints.append(Joint(name=name, kind=kind, parent=index[parent], child=index[child],
                            origin_xyz=xyz, origin_rpy=rpy, axis=axis, lower=lower, upper=upper,
                            velocity=velocity, damping=damping, limits_synthesized=synthesized))

    for i, (master_name, mult, off) in pending_mimic.items():
        try:
            m = joint_names.index(master_name)
        except ValueError:
            raise UnknownMimicMasterError(joint_names[i], master_name) from None
        if joints[m].kind not in ("revolute", "continuous"):
            raise UnknownMimicMasterError(joint_names[i], master_name)
        joints[i] = replace(joints[i], mimic=Mimic(m, mult, off))

    parent_joint = [None] * len(names)
    for i, j in enumerate(joints):
        if parent_joint[j.child] is not None:
            raise CycleDetectedError(names[j.child], "link has more than one parent joint")
        parent_joint[j.child] = i
    roots = [n for n, p in zip(names, parent_joint) if p is None]
    if len(roots) > 1:
        raise MultipleRootsError(roots)
    if not roots:
        raise CycleDetectedError(names[0] if names else "<none>")
    root_idx = index[roots[0]]

    # every link must be reachable from the root, otherwise it sits on a cycle
    seen, stack = {root_idx}, [root_idx]
    children = [[] for _ in names]
    for j in joints:
        children[j.parent].append(j.child)
    while stack:
        cur = stack.pop()
        for c in children[cur]:
            if c not in seen:
                seen.add(c)
                stack.append(c)
    for i, n in enumerate(names):
        if i not in seen:
            raise CycleDetectedError(n)

    links = tuple(Link(name=n, parent_joint=p, palm_normal=pn)
                  for n, p, pn in zip(names, parent_joint, palm_normals))
    return KinematicTree(name=root.get("name", ""), links=links, joints=tuple(joints), root=root_idx)


@dataclass(frozen=True)
class Diagnostic:
    code: str
    severity: str
    element: str
    message: str = ""


def validate_tree(tree):
    """Check the tree invariants, returning diagnostics instead of raising."""
    out = []
    roots = [l.name for l in tree.links if l.parent_joint is None]
    if len(roots) != 1:
        out.append(Diagnostic("RootCount", "error", ",".join(roots), f"{len(roots)} root links"))
    n_links = len(tree.links)
    for j in tree.joints:
        if not (0 <= j.parent < n_links and 0 <= j.child < n_links):
            out.append(Diagnostic("MissingLink", "error", j.name))
            continue
        if tree.links[j.child].parent_joint is not None and tree.joints[tree.links[j.child].parent_joint] is not j:
            out.append(Diagnostic("MultipleParents", "error", tree.links[j.child].name))
        if j.moving:
            norm = float(np.linalg.norm(j.axis))
            if norm < 1e-12:
                out.append(Diagnostic("DegenerateAxis", "error", j.name, "axis has zero length"))
            elif abs(norm - 1.0) > 1e-9:
                out.append(Diagnostic("UnnormalizedAxis", "warning", j.name, f"|axis| = {norm}"))
        if j.kind in ("revolute", "mimic") and j.lower > j.upper:
            out.append(Diagnostic("InvertedLimits", "error", j.name, f"lower {j.lower} > upper {j.upper}"))
        if j.kind == "mimic" and (j.mimic is None or tree.joints[j.mimic.master].kind not in ("revolute", "continuous")):
            out.append(Diagnostic("BadMimic", "error", j.name))
    # reachability
    seen, stack = {tree.root}, [tree.root]
    while stack:
        cur = stack.pop()
        for ji in tree.child_joints[cur]:
            c = tree.joints[ji].child
            if c in seen:
                out.append(Diagnostic("CycleDetected", "error", tree.links[c].name))
                continue
            seen.add(c)
            stack.append(c)
    for i, l in enumerate(tree.links):
        if i not in seen:
            out.append(Diagnostic("Unreachable", "error", l.name))
    return out


@dataclass(frozen=True)
class FingerChain:
    label: str
    joints: tuple  # actuated joints, wrist outward
    path: tuple  # every joint along the chain including fixed and mimic ones
    tip_link: int


@dataclass(frozen=True)
class FingerChains:
    chains: tuple
    wrist_link: int

    def by_label(self, label):
        for c in self.chains:
            if c.label == label:
                return c
        raise KeyError(label)


def wrist_body(tree, wrist):
    """Links rigidly attached to the wrist through fixed joints."""
    body, stack = [wrist], [wrist]
    while stack:
        cur = stack.pop()
        for ji in tree.child_joints[cur]:
            j = tree.joints[ji]
            if j.kind == "fixed":
                body.append(j.child)
                stack.append(j.child)
    return body


def _walk_chain(tree, first_joint):
    path, actuated = [first_joint], []
    if tree.joints[first_joint].kind in ("revolute", "continuous"):
        actuated.append(first_joint)
    link = tree.joints[first_joint].child
    while True:
        kids = tree.child_joints[link]
        live = [k for k in kids if tree.has_actuated_below(k)]
        if len(live) > 1:
            raise BranchAtNonWristError(tree.links[link].name)
        if live:
            nxt = live[0]
        elif kids:
            # passive tail: follow the first declared child to the tip
            nxt = kids[0]
        else:
            return tuple(path), tuple(actuated), link
        path.append(nxt)
        if tree.joints[nxt].kind in ("revolute", "continuous"):
            actuated.append(nxt)
        link = tree.joints[nxt].child


def resolve_chains(tree, labels=None, wrist=None):
    """Extract one ordered joint chain per branch leaving the wrist.

    ``labels`` maps joint or link names to finger labels. Without hints the
    most-opposed branch is the thumb and the remaining branches are labelled
    index, middle, ring, little by increasing root distance from the thumb root.
    """
    from .kinematics import forward_kinematics

    wrist_idx = tree.root if wrist is None else tree.link_index(wrist)
    if not tree.actuated:
        raise NoBranchesError()
    body = set(wrist_body(tree, wrist_idx))
    starts = [ji for link in sorted(body) for ji in tree.child_joints[link]
              if tree.joints[ji].kind != "fixed" or
              (tree.joints[ji].child not in body and tree.has_actuated_below(ji))]
    starts = [s for s in starts if tree.joints[s].child not in body]
    starts.sort()
    walked = [_walk_chain(tree, s) for s in starts]
    walked = [w for w in walked if w[1]]
    if not walked:
        raise NoBranchesError()
    if len(walked) > len(FINGERS):
        raise BranchAtNonWristError(tree.links[wrist_idx].name)

    if labels:
        assigned = []
        for path, act, tip in walked:
            names = {tree.joints[j].name for j in path} | {tree.links[tree.joints[j].child].name for j in path}
            hits = {labels[n] for n in names if n in labels}
            if len(hits) != 1:
                raise ValueError(f"finger label hints must name exactly one label per branch, got {sorted(hits)}")
            assigned.append(hits.pop())
        if len(set(assigned)) != len(assigned):
            raise ValueError(f"duplicate finger labels {assigned}")
    else:
        poses = forward_kinematics(tree, np.zeros(tree.n_dof))
        roots = [poses[tree.joints[act[0]].child].translation for _, act, _ in walked]
        dirs = []
        for (path, act, tip), r in zip(walked, roots):
            d = poses[tip].translation - r
            n = np.linalg.norm(d)
            dirs.append(d / n if n > 1e-12 else d)
        if len(walked) == 1:
            order = [0]
        else:
            opposition = []
            for i, d in enumerate(dirs):
                others = np.mean([dirs[k] for k in range(len(dirs)) if k != i], axis=0)
                opposition.append(float(d @ others))
            # ties (parallel fingers) resolve to the first declared branch
            thumb = min(range(len(walked)), key=lambda i: (round(opposition[i], 6), i))
            rest = sorted((i for i in range(len(walked)) if i != thumb),
                          key=lambda i: (round(float(np.linalg.norm(roots[i] - roots[thumb])), 9), i))
            order = [thumb] + rest
        assigned = [None] * len(walked)
        for label, i in zip(FINGERS, order):
            assigned[i] = label

    chains = [FingerChain(label=lab, joints=act, path=path, tip_link=tip)
              for lab, (path, act, tip) in zip(assigned, walked)]
    chains.sort(key=lambda c: FINGERS.index(c.label))
    return FingerChains(chains=tuple(chains), wrist_link=wrist_idx)
