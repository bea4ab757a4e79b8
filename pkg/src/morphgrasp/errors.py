"""Exception hierarchy.

Every domain failure raised by the package derives from :class:`MorphGraspError`,
which lets the CLI map them to exit code 1.
"""


class MorphGraspError(Exception):
    """Base class for all domain errors."""


# -- URDF parsing ---------------------------------------------------------


class XmlSyntaxError(MorphGraspError):
    def __init__(self, message, position=None):
        super().__init__(f"XML syntax error at {position}: {message}")
        self.position = position


class MissingLinkError(MorphGraspError):
    def __init__(self, joint, link):
        super().__init__(f"joint {joint!r} references undeclared link {link!r}")
        self.joint = joint
        self.link = link


class CycleDetectedError(MorphGraspError):
    def __init__(self, link, detail="link is part of a kinematic cycle"):
        super().__init__(f"{detail}: {link!r}")
        self.link = link


class MultipleRootsError(MorphGraspError):
    def __init__(self, names):
        super().__init__(f"expected exactly one root link, found {list(names)}")
        self.names = list(names)


class UnsupportedJointKindError(MorphGraspError):
    def __init__(self, name, kind):
        super().__init__(f"joint {name!r} has unsupported type {kind!r}")
        self.name = name
        self.kind = kind


class UnknownMimicMasterError(MorphGraspError):
    def __init__(self, joint, master):
        super().__init__(f"mimic joint {joint!r} follows unknown or non-actuated joint {master!r}")
        self.joint = joint
        self.master = master


class BranchAtNonWristError(MorphGraspError):
    def __init__(self, link):
        super().__init__(f"finger chain branches at non-wrist link {link!r}")
        self.link = link


class NoBranchesError(MorphGraspError):
    def __init__(self):
        super().__init__("tree has no actuated joints below the wrist")


# -- graph construction ---------------------------------------------------


class TooManyJointsInGroupError(MorphGraspError):
    def __init__(self, node, joints):
        super().__init__(f"semantic node {node!r} would hold {len(joints)} joints (max 3): {list(joints)}")
        self.node = node
        self.joints = list(joints)


class OverrideConflictError(MorphGraspError):
    def __init__(self, joint):
        super().__init__(f"overrides assign joint {joint!r} more than once")
        self.joint = joint


class DisconnectedNodeError(MorphGraspError):
    def __init__(self, node):
        super().__init__(f"semantic node {node} is not adjacent to any other node")
        self.node = node


class InvalidPermutationError(MorphGraspError):
    pass


# -- kinematics / mapping -------------------------------------------------


class DimensionMismatchError(MorphGraspError, ValueError):
    pass


class JointNotActuatedError(MorphGraspError):
    def __init__(self, joint):
        super().__init__(f"joint {joint!r} is not an actuated DoF")
        self.joint = joint


class AmbiguousResponseError(MorphGraspError):
    def __init__(self, joint, scores):
        super().__init__(f"excitation response of joint {joint!r} is ambiguous: {scores}")
        self.joint = joint
        self.scores = scores


class PrimitiveCollisionError(MorphGraspError):
    def __init__(self, node, primitive, joints):
        super().__init__(f"node {node} primitive {primitive} claimed by joints {list(joints)}")
        self.node = node
        self.primitive = primitive
        self.joints = list(joints)


class DegeneratePalmError(MorphGraspError):
    pass


class InconsistentHandError(MorphGraspError):
    pass


class NonPositiveScaleError(MorphGraspError, ValueError):
    pass


# -- numerics / network ---------------------------------------------------


class ShapeMismatchError(MorphGraspError, ValueError):
    def __init__(self, op, *shapes):
        desc = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")
        self.shapes = shapes


class NotScalarLossError(MorphGraspError, ValueError):
    pass


class NonFiniteError(MorphGraspError, FloatingPointError):
    pass


class MissingPhysicalFeaturesError(MorphGraspError):
    pass


class SchemaVersionMismatchError(MorphGraspError):
    def __init__(self, expected, found):
        super().__init__(f"expected schema {expected!r}, found {found!r}")
        self.expected = expected
        self.found = found


class MissingParameterError(MorphGraspError):
    def __init__(self, name):
        super().__init__(f"weight file is missing parameter {name!r}")
        self.name = name


class UnknownParameterError(MorphGraspError):
    def __init__(self, name):
        super().__init__(f"weight file contains unknown parameter {name!r}")
        self.name = name


class ParameterShapeError(MorphGraspError):
    def __init__(self, name, expected, found):
        super().__init__(f"parameter {name!r}: expected shape {tuple(expected)}, found {tuple(found)}")
        self.name = name


# -- env / training -------------------------------------------------------


class InvalidConfigError(MorphGraspError, ValueError):
    pass


class LengthMismatchError(MorphGraspError, ValueError):
    pass


class NaNDetectedError(MorphGraspError, FloatingPointError):
    def __init__(self, where, diagnostics=None):
        super().__init__(f"non-finite values detected in {where}")
        self.diagnostics = diagnostics or {}
