"""Static rules and the per-deliberation dynamic snapshot, plus the
deterministic prompt assembly both planner backends consume."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Optional

from .domain import ChatEntry, Event, ScenarioConfig


@dataclass(frozen=True)
class StaticRules:
    """Fixed rules-and-format text loaded once per scenario run."""

    text: str

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    @classmethod
    def load(cls, path: str) -> "StaticRules":
        with open(path, "r", encoding="utf-8") as handle:
            return cls(handle.read())


@dataclass(frozen=True)
class RobotView:
    id: str
    posture: str
    position: tuple[float, float]
    busy: bool


@dataclass(frozen=True)
class OutstandingTask:
    """A unit of work the next plan must still cover: a dispatched record that
    is not completed, or a planned step that was never dispatched."""

    order: int
    step_id: str
    assignee: str
    instruction: str
    required_capabilities: frozenset[str]
    depends_on: frozenset[str]
    sync_group: Optional[str]
    status: str  # "pending" | "in_progress" | "interrupted"
    source_command_id: str
    record_id: str = ""


@dataclass(frozen=True)
class EventView:
    event: Event
    meta: Mapping = field(default_factory=dict)


@dataclass(frozen=True)
class DynamicContext:
    """Immutable snapshot of bus state as of the assembly tick."""

    config: ScenarioConfig
    command: str = ""
    commands: tuple[str, ...] = ()
    history: tuple[ChatEntry, ...] = ()
    robots: tuple[RobotView, ...] = ()
    records: tuple[dict, ...] = ()
    outstanding: tuple[OutstandingTask, ...] = ()
    pending_events: tuple[EventView, ...] = ()
    humans: tuple[str, ...] = ()
    help_pending: bool = False

    def robot_positions(self) -> dict[str, tuple[float, float]]:
        if self.robots:
            return {r.id: r.position for r in self.robots}
        return {r.id: r.initial_pose.position for r in self.config.robots}


def assemble_context(
    static: StaticRules, dyn: DynamicContext, config: ScenarioConfig
) -> str:
    """Concatenate the prompt in a fixed section order. Identical inputs
    produce identical text; the section layout is part of the contract."""
    lines: list[str] = []
    lines.append("== RULES ==")
    lines.append(static.text.rstrip("\n"))
    if config.humans:
        lines.append(
            "Humans available: "
            + ", ".join(config.humans)
            + ". Assign a step to a human when no robot capability covers it; "
            "dependent steps wait until the human confirms."
        )
    lines.append("== SCENARIO ==")
    lines.append(f"name: {config.name}")
    for spec in config.robots:
        lines.append(
            f"robot: {spec.id} | kind: {spec.kind} | capabilities: "
            + ", ".join(sorted(spec.capabilities))
            + (" | constraints: " + "; ".join(spec.constraints) if spec.constraints else "")
        )
    for human in config.humans:
        lines.append(f"human: {human}")
    for rule in config.rules:
        lines.append(f"rule: {rule}")
    for name in sorted(config.locations):
        x, y = config.locations[name]
        lines.append(f"location: {name} = ({x:g}, {y:g})")
    lines.append("== HISTORY ==")
    for entry in dyn.history:
        lines.append(f"[{entry.tick}] {entry.role.value}: {entry.text}")
    lines.append("== ROBOT STATUS ==")
    for robot in dyn.robots:
        lines.append(
            f"{robot.id} | posture={robot.posture or 'none'} "
            f"position=({robot.position[0]:.2f}, {robot.position[1]:.2f}) "
            f"busy={'yes' if robot.busy else 'no'}"
        )
    lines.append("== TASK STATUS ==")
    for record in dyn.records:
        lines.append(
            f"{record['record_id']} | {record['owner']} | "
            f"{record['instruction']} | {record['status']}"
        )
    lines.append("== EVENTS ==")
    for view in dyn.pending_events:
        lines.append(
            f"{view.event.event_id} [{view.event.tick}] {view.event.source}: "
            f"{view.event.description}"
        )
    lines.append("== COMMAND ==")
    lines.append(dyn.command)
    return "\n".join(lines) + "\n"


def context_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()
