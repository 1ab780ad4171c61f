"""Trainable agent-memory engine.

The package implements a full memory cycle for LLM agents — storage,
gated retrieval, and iterative utilization — together with the training
machinery that improves each stage from collected trajectories.
"""

from memcycle.core import (
    MemoryStore,
    MemoryUnit,
    ParseError,
    StepRecord,
    Trajectory,
    TrajectoryRecord,
)

__all__ = [
    "MemoryStore",
    "MemoryUnit",
    "ParseError",
    "StepRecord",
    "Trajectory",
    "TrajectoryRecord",
]
