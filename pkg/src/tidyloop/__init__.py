"""Preference-aware rearrangement planning with a human-in-the-loop service."""

__version__ = "0.1.0"

from .scene import ObjectNode, Pose, Relation, RelationKind, SceneGraph  # noqa: F401
from .objectives import ObjectiveBreakdown, ObjectiveWeights  # noqa: F401
