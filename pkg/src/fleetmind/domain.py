"""Shared vocabulary: scenario configuration, tasks, plans, statuses, events, chat."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence


class TaskClass(str, Enum):
    INDEPENDENT = "independent"
    SEQUENTIAL = "sequential"
    COORDINATED = "coordinated"
    INFEASIBLE = "infeasible"


class TaskStatus(str, Enum):
    COMPLETED = "completed"
    IN_PROGRESS = "in_progress"
    INTERRUPTED = "interrupted"


# The only legal status edges. COMPLETED is terminal; an interrupted task
# may be resumed.
LEGAL_TRANSITIONS: frozenset[tuple[TaskStatus, TaskStatus]] = frozenset(
    {
        (TaskStatus.IN_PROGRESS, TaskStatus.COMPLETED),
        (TaskStatus.IN_PROGRESS, TaskStatus.INTERRUPTED),
        (TaskStatus.INTERRUPTED, TaskStatus.IN_PROGRESS),
    }
)


def is_legal_transition(old: TaskStatus, new: TaskStatus) -> bool:
    return (old, new) in LEGAL_TRANSITIONS


class Relevance(str, Enum):
    RELEVANT = "relevant"
    IRRELEVANT = "irrelevant"
    UNCLASSIFIED = "unclassified"


class ChatRole(str, Enum):
    USER = "user"
    TASK_MANAGER = "task_manager"
    EVENT = "event"
    ROBOT = "robot"


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    posture: str = "standing"

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class RobotSpec:
    id: str
    kind: str
    capabilities: frozenset[str]
    constraints: tuple[str, ...] = ()
    initial_pose: Pose = Pose(0.0, 0.0)
    sensing_radius: float = 3.0
    speed: Optional[float] = None  # falls back to the scenario default
    skills: tuple[str, ...] = ()


@dataclass(frozen=True)
class ObjectSpec:
    id: str
    position: tuple[float, float] = (0.0, 0.0)
    attached_to: Optional[str] = None
    container: bool = False
    capture_radius: float = 0.45


@dataclass(frozen=True)
class GoalPredicate:
    """A ground-truth success check evaluated against the simulated world."""

    kind: str  # "at" | "attached" | "posture"
    entity: str = ""
    position: tuple[float, float] = (0.0, 0.0)
    tolerance: float = 0.3
    parent: str = ""
    posture: str = ""

    def to_dict(self) -> dict:
        if self.kind == "at":
            return {
                "kind": "at",
                "entity": self.entity,
                "position": list(self.position),
                "tolerance": self.tolerance,
            }
        if self.kind == "attached":
            return {"kind": "attached", "entity": self.entity, "parent": self.parent}
        return {"kind": "posture", "entity": self.entity, "posture": self.posture}

    @classmethod
    def from_dict(cls, data: Mapping) -> "GoalPredicate":
        kind = data["kind"]
        if kind == "at":
            return cls(
                kind="at",
                entity=data["entity"],
                position=tuple(data["position"]),
                tolerance=float(data.get("tolerance", 0.3)),
            )
        if kind == "attached":
            return cls(kind="attached", entity=data["entity"], parent=data["parent"])
        if kind == "posture":
            return cls(kind="posture", entity=data["entity"], posture=data["posture"])
        raise ValueError(f"unknown goal predicate kind: {kind!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    robots: tuple[RobotSpec, ...]
    humans: tuple[str, ...] = ()
    rules: tuple[str, ...] = ()
    locations: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    objects: tuple[ObjectSpec, ...] = ()
    regions: Mapping[str, tuple[tuple[float, float], ...]] = field(default_factory=dict)
    speed: float = 0.2
    tick_budget: int = 300
    goals: tuple[GoalPredicate, ...] = ()

    def robot(self, robot_id: str) -> RobotSpec:
        for spec in self.robots:
            if spec.id == robot_id:
                return spec
        raise KeyError(robot_id)

    def robot_ids(self) -> list[str]:
        return [spec.id for spec in self.robots]

    def has_robot(self, name: str) -> bool:
        return any(spec.id == name for spec in self.robots)

    def has_human(self, name: str) -> bool:
        return name in self.humans


def _finite(value: float) -> bool:
    return isinstance(value, (int, float)) and math.isfinite(value)


def validate_scenario(config: ScenarioConfig) -> list[str]:
    """Check every scenario invariant; returns [] when the config is sound.

    Violations are returned (never raised) and each names the offending field.
    """
    violations: list[str] = []
    seen: set[str] = set()
    for spec in config.robots:
        if not spec.id:
            violations.append("robot with empty id")
            continue
        if spec.id in seen:
            violations.append(f"duplicate id {spec.id!r}")
        seen.add(spec.id)
        if not spec.capabilities:
            violations.append(f"robot {spec.id!r} has empty capabilities")
        if not (_finite(spec.initial_pose.x) and _finite(spec.initial_pose.y)):
            violations.append(f"robot {spec.id!r} initial_pose is not finite")
    for human in config.humans:
        if not human:
            violations.append("human with empty id")
        elif human in seen:
            violations.append(f"duplicate id {human!r}")
        seen.add(human)
    for obj in config.objects:
        if not obj.id:
            violations.append("object with empty id")
        elif obj.id in seen:
            violations.append(f"duplicate id {obj.id!r}")
        seen.add(obj.id)
        if not (_finite(obj.position[0]) and _finite(obj.position[1])):
            violations.append(f"object {obj.id!r} position is not finite")
        if obj.attached_to is not None and obj.attached_to not in seen | {
            s.id for s in config.robots
        } | {o.id for o in config.objects}:
            violations.append(f"object {obj.id!r} attached_to unknown id {obj.attached_to!r}")
    for name, coords in config.locations.items():
        if len(coords) != 2 or not (_finite(coords[0]) and _finite(coords[1])):
            violations.append(f"location {name!r} coordinate is not finite")
    return violations


# Fixed verb synonym table shared with the capability table and the IoU
# step matcher. Applied token-wise after punctuation stripping.
VERB_SYNONYMS: dict[str, str] = {
    "grab": "pick",
    "take": "pick",
    "fetch": "pick",
    "put": "place",
    "set": "place",
    "goto": "move",
    "bring": "deliver",
}

_PUNCT_RE = re.compile(r"[^a-z0-9]+")


def canonical_step(instruction: str) -> str:
    """Normalize an instruction to a canonical action token string.

    Lowercase, strip punctuation, collapse whitespace, map verb synonyms
    through a fixed table. Idempotent by construction.
    """
    lowered = instruction.lower()
    tokens = [t for t in _PUNCT_RE.split(lowered) if t]
    mapped = [VERB_SYNONYMS.get(t, t) for t in tokens]
    return " ".join(mapped)


@dataclass(frozen=True)
class Assignment:
    step_id: str
    assignee: str
    instruction: str
    required_capabilities: frozenset[str] = frozenset()
    depends_on: frozenset[str] = frozenset()
    sync_group: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "step_id": self.step_id,
            "assignee": self.assignee,
            "instruction": self.instruction,
            "required_capabilities": sorted(self.required_capabilities),
            "depends_on": sorted(self.depends_on),
            "sync_group": self.sync_group,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Assignment":
        return cls(
            step_id=str(data["step_id"]),
            assignee=str(data["assignee"]),
            instruction=str(data["instruction"]),
            required_capabilities=frozenset(data.get("required_capabilities", ())),
            depends_on=frozenset(str(d) for d in data.get("depends_on", ())),
            sync_group=data.get("sync_group"),
        )


@dataclass(frozen=True)
class Plan:
    plan_id: str
    classes: frozenset[TaskClass]
    steps: tuple[Assignment, ...]
    source_command_id: str = ""

    def step(self, step_id: str) -> Assignment:
        for s in self.steps:
            if s.step_id == step_id:
                return s
        raise KeyError(step_id)

    def to_dict(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "classes": sorted(c.value for c in self.classes),
            "steps": [s.to_dict() for s in self.steps],
            "source_command_id": self.source_command_id,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: Mapping) -> "Plan":
        return cls(
            plan_id=str(data["plan_id"]),
            classes=frozenset(TaskClass(c) for c in data.get("classes", ())),
            steps=tuple(Assignment.from_dict(s) for s in data.get("steps", ())),
            source_command_id=str(data.get("source_command_id", "")),
        )

    @classmethod
    def from_json(cls, raw: str) -> "Plan":
        return cls.from_dict(json.loads(raw))


def find_dependency_cycle(steps: Sequence[Assignment]) -> Optional[list[str]]:
    """Return one dependency cycle as a step-id path, or None if the DAG is acyclic."""
    edges = {s.step_id: sorted(s.depends_on) for s in steps}
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {sid: WHITE for sid in edges}
    path: list[str] = []

    def visit(sid: str) -> Optional[list[str]]:
        color[sid] = GRAY
        path.append(sid)
        for dep in edges.get(sid, ()):
            if dep not in color:
                continue
            if color[dep] == GRAY:
                start = path.index(dep)
                return path[start:] + [dep]
            if color[dep] == WHITE:
                cycle = visit(dep)
                if cycle:
                    return cycle
        path.pop()
        color[sid] = BLACK
        return None

    for sid in sorted(edges):
        if color[sid] == WHITE:
            cycle = visit(sid)
            if cycle:
                return cycle
    return None


def validate_plan_structure(plan: Plan, config: Optional[ScenarioConfig] = None) -> list[str]:
    """Structural plan invariants (the executability check lives in backends)."""
    violations: list[str] = []
    seen: set[str] = set()
    for s in plan.steps:
        if s.step_id in seen:
            violations.append(f"duplicate step_id {s.step_id!r}")
        seen.add(s.step_id)
    for s in plan.steps:
        for dep in sorted(s.depends_on):
            if dep not in seen:
                violations.append(f"step {s.step_id!r} depends_on missing step {dep!r}")
    cycle = find_dependency_cycle(plan.steps)
    if cycle:
        violations.append("cycle: " + " -> ".join(cycle))
    if TaskClass.INFEASIBLE in plan.classes:
        if plan.classes != {TaskClass.INFEASIBLE}:
            violations.append("infeasible never co-occurs with another class")
        if config is not None:
            for s in plan.steps:
                if not config.has_human(s.assignee):
                    violations.append(
                        f"infeasible plan may only carry human assignments, got {s.assignee!r}"
                    )
    # Sync-group members must share identical dependencies so they can be
    # released in one cycle.
    groups: dict[str, list[Assignment]] = {}
    for s in plan.steps:
        if s.sync_group:
            groups.setdefault(s.sync_group, []).append(s)
    for name, members in sorted(groups.items()):
        deps = {m.depends_on for m in members}
        if len(deps) > 1:
            violations.append(f"sync_group {name!r} members have differing depends_on")
    return violations


@dataclass(frozen=True)
class Event:
    event_id: str
    source: str
    description: str
    tick: int
    relevance: Relevance = Relevance.UNCLASSIFIED

    def classified(self, relevance: Relevance) -> "Event":
        return Event(self.event_id, self.source, self.description, self.tick, relevance)

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "source": self.source,
            "description": self.description,
            "tick": self.tick,
            "relevance": self.relevance.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Event":
        return cls(
            event_id=str(data["event_id"]),
            source=str(data["source"]),
            description=str(data["description"]),
            tick=int(data["tick"]),
            relevance=Relevance(data.get("relevance", "unclassified")),
        )


@dataclass(frozen=True)
class ChatEntry:
    seq: int
    role: ChatRole
    text: str
    tick: int

    def to_dict(self) -> dict:
        return {"seq": self.seq, "role": self.role.value, "text": self.text, "tick": self.tick}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ChatEntry":
        return cls(
            seq=int(data["seq"]),
            role=ChatRole(data["role"]),
            text=str(data["text"]),
            tick=int(data["tick"]),
        )


class ChatHistory:
    """Append-only, temporally ordered dialogue record."""

    def __init__(self) -> None:
        self._entries: list[ChatEntry] = []

    def append(self, role: ChatRole, text: str, tick: int) -> ChatEntry:
        if self._entries and tick < self._entries[-1].tick:
            raise ValueError(
                f"chat ticks must be nondecreasing: {tick} < {self._entries[-1].tick}"
            )
        entry = ChatEntry(seq=len(self._entries), role=role, text=text, tick=tick)
        self._entries.append(entry)
        return entry

    def entries(self) -> tuple[ChatEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def to_json(self) -> str:
        return json.dumps(
            [e.to_dict() for e in self._entries], sort_keys=True, separators=(",", ":")
        )

    @classmethod
    def from_json(cls, raw: str) -> "ChatHistory":
        history = cls()
        for item in json.loads(raw):
            entry = ChatEntry.from_dict(item)
            history._entries.append(entry)
        return history


class IllegalTransition(Exception):
    pass


@dataclass
class TaskRecord:
    """A dispatched assignment with a live status and a transition log."""

    record_id: str
    assignment: Assignment
    owner: str
    status: TaskStatus = TaskStatus.IN_PROGRESS
    history: list[tuple[TaskStatus, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.history:
            self.history = [(self.status, 0)]

    def transition(self, new: TaskStatus, tick: int) -> None:
        if new == self.status:
            return  # idempotent repeat, not a transition
        if not is_legal_transition(self.status, new):
            raise IllegalTransition(f"{self.record_id}: {self.status.value} -> {new.value}")
        self.status = new
        self.history.append((new, tick))

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "assignment": self.assignment.to_dict(),
            "owner": self.owner,
            "status": self.status.value,
            "history": [[s.value, t] for s, t in self.history],
        }


def derive_classes(steps: Iterable[Assignment]) -> frozenset[TaskClass]:
    """Classes from plan structure: sync groups imply coordination, dependency
    edges imply sequencing, otherwise the tasks run independently."""
    steps = list(steps)
    classes: set[TaskClass] = set()
    if any(s.sync_group for s in steps):
        classes.add(TaskClass.COORDINATED)
    if any(s.depends_on for s in steps):
        classes.add(TaskClass.SEQUENTIAL)
    if not classes:
        classes.add(TaskClass.INDEPENDENT)
    return frozenset(classes)
