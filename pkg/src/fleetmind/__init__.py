"""Hierarchical multi-robot task orchestration with event-driven replanning.

A centralized task manager plans over natural-language goals and dispatches
them to simulated heterogeneous robot agents over a deterministic message
bus; a benchmark harness scores plan quality on five metrics.
"""

from .domain import (
    Assignment,
    ChatEntry,
    ChatHistory,
    ChatRole,
    Event,
    Plan,
    Relevance,
    RobotSpec,
    ScenarioConfig,
    TaskClass,
    TaskRecord,
    TaskStatus,
    canonical_step,
    validate_scenario,
)

__all__ = [
    "Assignment",
    "ChatEntry",
    "ChatHistory",
    "ChatRole",
    "Event",
    "Plan",
    "Relevance",
    "RobotSpec",
    "ScenarioConfig",
    "TaskClass",
    "TaskRecord",
    "TaskStatus",
    "canonical_step",
    "validate_scenario",
]

__version__ = "0.1.0"
