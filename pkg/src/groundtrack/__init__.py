"""Joint natural-language grounding and tracking on synthetic moving-shapes clips."""

from .estimator import DescriptionTokenizer, JointGroundingTracker
from .evalkit import MetricsReport, Protocol
from .model import FLAVORS, JointModel, ModelConfig
from .synthworld import WorldConfig, build_world, generate_sequence, tokenize

__version__ = "0.1.0"

__all__ = [
    "DescriptionTokenizer", "JointGroundingTracker", "JointModel", "ModelConfig", "FLAVORS",
    "MetricsReport", "Protocol", "WorldConfig", "build_world", "generate_sequence", "tokenize",
]
