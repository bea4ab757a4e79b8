"""Cross-embodiment dexterous grasping: URDF hands compiled to morphology-aligned graphs,
a shared primitive action space, and a graph-convolutional PPO policy."""

from .bundle import HandBundle, compile_file, compile_hand, load_fixture
from .env import EnvConfig, GraspEnv, ObjectSpec, RewardWeights
from .errors import MorphGraspError
from .estimators import HandCompiler, MAGCNGraspPolicy
from .magcn import PolicyNetwork, StateGraph
from .primitives import PrimitiveAction
from .trainer import PpoConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "EnvConfig", "GraspEnv", "HandBundle", "HandCompiler", "MAGCNGraspPolicy", "MorphGraspError",
    "ObjectSpec", "PolicyNetwork", "PpoConfig", "PrimitiveAction", "RewardWeights", "StateGraph",
    "compile_file", "compile_hand", "evaluate", "load_fixture", "train",
]
