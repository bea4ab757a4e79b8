"""Compiled hand: every static artifact a policy needs, in one versioned file."""

import json
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from . import serialization
from .errors import InconsistentHandError
from .graph import HandGraph, build_graph, normalize_adjacency, partition_functional
from .kinematics import PalmFrame, build_palm_frame
from .physical import PHYSICAL_DIM, build_physical_features, scale_links
from .primitives import PrimitiveMapping, derive_activation_mask, identify_mapping
from .urdf import FingerChain, FingerChains, KinematicTree, parse_urdf, resolve_chains

BUNDLE_SCHEMA = "handbundle/1"
FIXTURE_DIR = Path(__file__).parent / "fixtures"


@dataclass(frozen=True, eq=False)
class HandBundle:
    hand_id: str
    tree: KinematicTree
    chains: FingerChains
    graph: HandGraph
    mapping: PrimitiveMapping
    palm: PalmFrame
    physical: np.ndarray
    metadata: dict

    @property
    def n_nodes(self):
        return self.graph.n_nodes

    @property
    def n_dof(self):
        return self.tree.n_dof

    @cached_property
    def mask(self):
        return derive_activation_mask(self.mapping)

    @cached_property
    def a_hat(self):
        return normalize_adjacency(self.graph.adjacency)

    @cached_property
    def finger_groups(self):
        """(label, DoF indices, node ids) per finger chain, for per-finger contact blocking."""
        out = []
        for c in self.chains.chains:
            dofs = np.array([self.tree.dof_index[j] for j in c.joints], dtype=int)
            nodes = np.array([n.id for n in self.graph.nodes if n.finger == c.label], dtype=int)
            out.append((c.label, dofs, nodes))
        return tuple(out)

    def with_link_scale(self, s):
        """Same hand with physical priors rebuilt from a tree whose links are scaled by ``s``.

        Only the feature pipeline sees the scaled tree; geometry used for simulation
        stays nominal.
        """
        if s == 1:
            return self
        scaled = scale_links(self.tree, s)
        palm = build_palm_frame(scaled, self.chains)
        physical = build_physical_features(scaled, self.graph, self.mapping, palm)
        return replace(self, physical=physical, metadata={**self.metadata, "link_scale": float(s)})

    def to_dict(self):
        t = self.tree
        chains = {"wrist_link": t.links[self.chains.wrist_link].name,
                  "chains": [{"label": c.label,
                              "joints": [t.joints[j].name for j in c.joints],
                              "path": [t.joints[j].name for j in c.path],
                              "tip_link": t.links[c.tip_link].name} for c in self.chains.chains]}
        return {
            "schema": BUNDLE_SCHEMA,
            "hand_id": self.hand_id,
            "n_nodes": self.n_nodes,
            "n_dof": self.n_dof,
            "kintree": t.to_dict(),
            "chains": chains,
            "handgraph": self.graph.to_dict(),
            "primmap": self.mapping.to_dict(t),
            "palm_frame": self.palm.to_dict(),
            "physical": {"shape": list(self.physical.shape), "data": serialization.encode_array(self.physical)},
            "metadata": self.metadata,
        }

    def dumps(self):
        return serialization.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc):
        serialization.check_schema(doc, BUNDLE_SCHEMA)
        tree = KinematicTree.from_dict(doc["kintree"])
        c = doc["chains"]
        chains = FingerChains(
            chains=tuple(FingerChain(label=x["label"],
                                     joints=tuple(tree.joint_index(n) for n in x["joints"]),
                                     path=tuple(tree.joint_index(n) for n in x["path"]),
                                     tip_link=tree.link_index(x["tip_link"])) for x in c["chains"]),
            wrist_link=tree.link_index(c["wrist_link"]))
        graph = HandGraph.from_dict(doc["handgraph"], tree)
        mapping = PrimitiveMapping.from_dict(doc["primmap"], tree)
        shape = tuple(doc["physical"]["shape"])
        physical = serialization.decode_array(doc["physical"]["data"], shape)
        bundle = cls(hand_id=doc["hand_id"], tree=tree, chains=chains, graph=graph, mapping=mapping,
                     palm=PalmFrame.from_dict(doc["palm_frame"]), physical=physical,
                     metadata=dict(doc.get("metadata", {})))
        check_bundle(bundle, declared=(doc.get("n_nodes"), doc.get("n_dof")))
        return bundle

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def check_bundle(bundle, declared=(None, None)):
    """Cross-check counts between the sections of a bundle."""
    n, l = bundle.graph.n_nodes, bundle.tree.n_dof
    dn, dl = declared
    problems = []
    if dn is not None and dn != n:
        problems.append(f"declared n_nodes {dn} != graph {n}")
    if dl is not None and dl != l:
        problems.append(f"declared n_dof {dl} != tree {l}")
    if bundle.mapping.n_nodes != n:
        problems.append(f"mapping n_nodes {bundle.mapping.n_nodes} != graph {n}")
    if bundle.mapping.n_dof != l:
        problems.append(f"mapping covers {bundle.mapping.n_dof} DoF, tree has {l}")
    if bundle.physical.shape != (n, PHYSICAL_DIM):
        problems.append(f"physical features shape {bundle.physical.shape} != {(n, PHYSICAL_DIM)}")
    if int(bundle.graph.adjacency.sum()) != n - 1:
        problems.append(f"graph has {int(bundle.graph.adjacency.sum())} edges, expected {n - 1}")
    if problems:
        raise InconsistentHandError("; ".join(problems))
    return bundle


def compile_hand(urdf_text, hand_id=None, labels=None, overrides=None, metadata=None):
    """parse -> chains -> partition -> graph -> palm -> mapping -> physical priors."""
    tree = parse_urdf(urdf_text)
    chains = resolve_chains(tree, labels=labels)
    graph = build_graph(partition_functional(tree, chains, overrides=overrides))
    palm = build_palm_frame(tree, chains)
    hid = hand_id or tree.name
    mapping = identify_mapping(tree, graph, palm, hand_id=hid)
    physical = build_physical_features(tree, graph, mapping, palm)
    return check_bundle(HandBundle(hand_id=hid, tree=tree, chains=chains, graph=graph, mapping=mapping,
                                   palm=palm, physical=physical, metadata=dict(metadata or {})))


def compile_file(path, **kw):
    path = Path(path)
    meta = {"source": path.name, **kw.pop("metadata", {})}
    return compile_hand(path.read_text(), metadata=meta, **kw)


def fixture_path(name):
    """Path of a bundled fixture URDF (``name`` with or without the suffix)."""
    stem = name[:-5] if name.endswith(".urdf") else name
    path = FIXTURE_DIR / f"{stem}.urdf"
    if not path.exists():
        raise FileNotFoundError(f"no fixture named {name!r}")
    return path


def load_fixture(name):
    return compile_file(fixture_path(name))
