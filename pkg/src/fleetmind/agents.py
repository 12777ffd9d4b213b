"""Per-robot brain: skill composition, one-command-at-a-time execution,
local event classification, and proactive status/event reporting."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from . import bus as busmod
from .domain import Relevance, RobotSpec, TaskStatus, canonical_step
from .world import Change, SkillCommand, SkillResult

_COORD_RE = re.compile(r"\((-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\)")


@dataclass(frozen=True)
class SkillLibraryEntry:
    name: str
    description: str = ""
    parameters: tuple[str, ...] = ()


# Descriptions shown to LLM composers; the names map 1:1 onto simulator skills.
SKILL_DESCRIPTIONS: dict[str, SkillLibraryEntry] = {
    "move_to": SkillLibraryEntry(
        "move_to", "drive or fly to a target position or entity", ("target",)
    ),
    "find": SkillLibraryEntry("find", "locate an object with the camera", ("object",)),
    "reach": SkillLibraryEntry("reach", "approach an object and stop next to it", ("object",)),
    "pick": SkillLibraryEntry("pick", "grasp an object within reach", ("object",)),
    "place": SkillLibraryEntry(
        "place", "put a held object onto a target entity or position", ("object", "target")
    ),
    "sit": SkillLibraryEntry("sit", "lower into the sitting posture", ()),
    "stand": SkillLibraryEntry("stand", "rise into the standing posture", ()),
    "push": SkillLibraryEntry("push", "push an object toward a target", ("object", "target")),
    "form_carry": SkillLibraryEntry(
        "form_carry", "carry an object in rigid formation with a group", ("object", "target", "group")
    ),
    "survey": SkillLibraryEntry("survey", "fly a coverage pattern over a region", ("region",)),
}


def library_for(spec: RobotSpec) -> tuple[SkillLibraryEntry, ...]:
    return tuple(SKILL_DESCRIPTIONS[name] for name in spec.skills if name in SKILL_DESCRIPTIONS)


@dataclass(frozen=True)
class ProgramStep:
    skill: str
    args: Mapping
    expect_attached: Optional[str] = None  # verify the object ends up on this parent

    def to_command(self, robot_id: str) -> SkillCommand:
        return SkillCommand(robot=robot_id, skill=self.skill, args=dict(self.args))


@dataclass(frozen=True)
class SkillProgram:
    steps: tuple[ProgramStep, ...]
    instruction: str
    composer: str  # "rule" | "llm"


class CompositionFailure(Exception):
    pass


def _light(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def _parse_target(text: str) -> object:
    """A trailing coordinate pair if present, otherwise the cleaned name."""
    m = _COORD_RE.search(text)
    if m:
        return [float(m.group(1)), float(m.group(2))]
    cleaned = re.sub(r"^(the|a|an)\s+", "", text.strip())
    return re.sub(r"[.,!?]+$", "", cleaned)


def _has(library: Sequence[SkillLibraryEntry], name: str) -> bool:
    return any(entry.name == name for entry in library)


_NOOP_RE = re.compile(r"^(await|wait|watch|stand by|standby|hold)\b")


def _compose_clause(
    clause: str,
    library: Sequence[SkillLibraryEntry],
    last_object: Optional[str],
    hints: Mapping,
) -> tuple[list[ProgramStep], Optional[str]]:
    text = _light(clause)
    text = re.sub(r"[.,!?]+$", "", text)
    if not text or _NOOP_RE.match(text):
        return [], last_object

    def obj_of(raw: str) -> str:
        name = str(_parse_target(raw))
        if name in ("it", "them"):
            if last_object is None:
                raise CompositionFailure(f"dangling pronoun in {clause!r}")
            return last_object
        return name

    m = re.match(r"^sit\b", text)
    if m:
        return [ProgramStep("sit", {})], last_object
    m = re.match(r"^stand\b", text)
    if m:
        return [ProgramStep("stand", {})], last_object

    m = re.match(r"^(approach|reach) (.+)$", text)
    if m:
        target = obj_of(m.group(2))
        steps: list[ProgramStep] = []
        if _has(library, "find"):
            steps.append(ProgramStep("find", {"object": target}))
        if _has(library, "reach"):
            steps.append(ProgramStep("reach", {"object": target}))
        else:
            steps.append(ProgramStep("move_to", {"target": target}))
        return steps, target

    m = re.match(r"^find (.+)$", text)
    if m:
        return [ProgramStep("find", {"object": obj_of(m.group(2))})], obj_of(m.group(2))

    m = re.match(r"^survey (?:the )?(.+?)(?: for .+)?$", text)
    if m:
        region = str(m.group(1)).replace(" ", "_")
        return [ProgramStep("survey", {"region": region})], last_object

    m = re.match(r"^(?:pick|grab|take|fetch)(?: up)? (.+?)(?: from .+)?$", text)
    if m:
        target = obj_of(m.group(1))
        steps = []
        if _has(library, "move_to"):
            steps.append(ProgramStep("move_to", {"target": target}))
        steps.append(ProgramStep("pick", {"object": target}))
        return steps, target

    m = re.match(r"^(?:place|put|set) (.+?) (?:on|onto|into|in|at) (.+)$", text)
    if m:
        obj = obj_of(m.group(1))
        target = _parse_target(m.group(2))
        steps = []
        if _has(library, "move_to"):
            steps.append(ProgramStep("move_to", {"target": target}))
        steps.append(ProgramStep("place", {"object": obj, "target": target}))
        return steps, obj

    m = re.match(r"^push (.+?) (?:into|in) (.+)$", text)
    if m:
        obj = obj_of(m.group(1))
        target = _parse_target(m.group(2))
        return [
            ProgramStep("push", {"object": obj, "target": target}, expect_attached=str(target))
        ], obj

    m = re.match(r"^push (.+?) (?:to|toward|towards|off) (.+)$", text)
    if m:
        obj = obj_of(m.group(1))
        return [ProgramStep("push", {"object": obj, "target": _parse_target(m.group(2))})], obj

    m = re.match(r"^(?:carry|return|bring) (.+?)(?: back)? to (.+)$", text)
    if m:
        obj = obj_of(m.group(1))
        target = _parse_target(m.group(2))
        group = hints.get("group")
        if group and _has(library, "form_carry"):
            return [
                ProgramStep("form_carry", {"object": obj, "target": target, "group": list(group)})
            ], obj
        return [ProgramStep("move_to", {"target": target})], obj

    m = re.match(r"^deliver (.+?) to (.+)$", text)
    if m:
        obj = obj_of(m.group(1))
        target = _parse_target(m.group(2))
        steps = [ProgramStep("move_to", {"target": target})]
        if _has(library, "place"):
            steps.append(ProgramStep("place", {"object": obj, "target": target}))
        return steps, obj

    m = re.match(r"^(?:move|go|head|fly|drive|stage)(?: to| near| toward| towards)? (.+)$", text)
    if m:
        return [ProgramStep("move_to", {"target": _parse_target(m.group(1))})], last_object

    raise CompositionFailure(f"no composition rule matches {clause!r}")


def rule_compose(
    instruction: str,
    library: Sequence[SkillLibraryEntry],
    hints: Optional[Mapping] = None,
) -> SkillProgram:
    """Deterministic instruction-to-program composition over the skill library."""
    hints = hints or {}
    # Pronouns bind left to right across "and"-joined sub-clauses.
    clauses = re.split(r"\s+and\s+", _light(instruction))
    steps: list[ProgramStep] = []
    last_object: Optional[str] = None
    for clause in clauses:
        part, last_object = _compose_clause(clause, library, last_object, hints)
        steps.extend(part)
    if not steps:
        raise CompositionFailure(f"instruction composes to an empty program: {instruction!r}")
    for step in steps:
        if not _has(library, step.skill):
            raise CompositionFailure(f"skill {step.skill!r} not in library")
    return SkillProgram(steps=tuple(steps), instruction=instruction, composer="rule")


_CALL_RE = re.compile(r"\b(move_to|find|reach|pick|place|sit|stand|push|form_carry|survey)\s*\(([^)]*)\)")


def parse_program_text(
    reply: str, instruction: str, library: Sequence[SkillLibraryEntry]
) -> SkillProgram:
    """Parse code-shaped backend output into an interpretable skill sequence."""
    steps: list[ProgramStep] = []
    for m in _CALL_RE.finditer(reply):
        skill = m.group(1)
        raw_args = [a.strip().strip("'\"") for a in m.group(2).split(",") if a.strip()]
        entry = SKILL_DESCRIPTIONS[skill]
        args: dict = {}
        for name, value in zip(entry.parameters, raw_args):
            coord = _COORD_RE.match(value)
            args[name] = (
                [float(coord.group(1)), float(coord.group(2))] if coord else value
            )
        steps.append(ProgramStep(skill, args))
    if not steps:
        raise CompositionFailure("backend reply contains no recognizable skill calls")
    program = SkillProgram(steps=tuple(steps), instruction=instruction, composer="llm")
    for step in program.steps:
        if not _has(library, step.skill):
            raise CompositionFailure(f"skill {step.skill!r} not in library")
    return program


def classify_change(
    change_entity: str,
    former_parent: str,
    team_context: Sequence[Mapping],
    robot_ids: Sequence[str],
) -> Relevance:
    """Rule classifier: a change matters iff the entity is referenced by a
    non-completed robot-assigned instruction, or it was cargo of a teammate.
    Changes to objects a human is already handling are expected, not events."""
    if former_parent and former_parent in robot_ids:
        return Relevance.RELEVANT
    entity_tokens = {t for t in change_entity.split("_") if not t.isdigit()}
    if not entity_tokens:
        return Relevance.IRRELEVANT
    for item in team_context:
        if item.get("status") == TaskStatus.COMPLETED.value:
            continue
        if item.get("assignee") not in robot_ids:
            continue
        words = set(canonical_step(item.get("instruction", "")).split())
        normalized = {w.rstrip("s") for w in words} | words
        if all(t in normalized or t.rstrip("s") in normalized for t in entity_tokens):
            return Relevance.RELEVANT
    return Relevance.IRRELEVANT


@dataclass
class _ActiveTask:
    record_id: str
    instruction: str
    program: SkillProgram
    pc: int = 0
    cargo: tuple[str, ...] = ()  # object names watched for attachment loss
    awaiting_result: bool = False


class RobotAgent:
    """Single-threaded logical actor for one robot. Talks to the rest of the
    system only through the bus; skill commands go to the clock owner."""

    def __init__(self, spec: RobotSpec, bus: busmod.Bus, backend=None) -> None:
        self.spec = spec
        self.id = spec.id
        self.bus = bus
        self.backend = backend
        self.library = library_for(spec)
        self.active: Optional[_ActiveTask] = None
        self.team_context: list[dict] = []
        self.robot_ids: list[str] = []
        self.robot_kinds: dict[str, str] = {}
        self._event_n = 0
        self._pending_command: Optional[SkillCommand] = None
        self._cancel_world = False
        self.decision_log: list[dict] = []

    # ----------------------------------------------------------- bus handling

    def process(self, envelopes: Sequence[busmod.Envelope], tick: int) -> None:
        for env in envelopes:
            if env.kind is busmod.Kind.ASSIGN_TASK:
                self._on_assign(env, tick)
            elif env.kind is busmod.Kind.CANCEL_TASK:
                self._on_cancel(env, tick)
            elif env.kind is busmod.Kind.PLAN_POSTED:
                self.team_context = list(env.payload.get("active_instructions", ()))
        if self.active and not self.active.awaiting_result and self._pending_command is None:
            self._queue_next(tick)

    def _on_assign(self, env: busmod.Envelope, tick: int) -> None:
        payload = env.payload
        record_id = payload["record_id"]
        instruction = payload["instruction"]
        if self.active is not None:
            self._report_status(record_id, TaskStatus.INTERRUPTED, tick, "agent busy, rejected")
            return
        hints = {"group": payload.get("group")}
        try:
            program = self._compose(instruction, hints)
        except CompositionFailure as exc:
            self.decision_log.append(
                {"tick": tick, "kind": "composition_failure", "instruction": instruction,
                 "reason": str(exc)}
            )
            self._report_status(
                record_id, TaskStatus.INTERRUPTED, tick, f"composition failure: {exc}"
            )
            return
        self.decision_log.append(
            {
                "tick": tick,
                "kind": "composition",
                "instruction": instruction,
                "composer": program.composer,
                "program": [[s.skill, dict(s.args)] for s in program.steps],
            }
        )
        cargo = self._cargo_watch(instruction, program)
        self.active = _ActiveTask(
            record_id=record_id, instruction=instruction, program=program, cargo=cargo
        )

    def _compose(self, instruction: str, hints: Mapping) -> SkillProgram:
        if self.backend is not None and getattr(self.backend, "kind", "rule") == "remote":
            try:
                return self.backend.compose_program(instruction, self.library, hints)
            except CompositionFailure:
                raise
            except Exception as exc:  # degrade to the rule composer
                self.decision_log.append(
                    {"kind": "compose_degraded", "reason": str(exc), "instruction": instruction}
                )
        return rule_compose(instruction, self.library, hints)

    def _cargo_watch(self, instruction: str, program: SkillProgram) -> tuple[str, ...]:
        canon = canonical_step(instruction)
        if not any(v in canon.split() for v in ("carry", "deliver", "return")):
            return ()
        names = []
        for step in program.steps:
            for key in ("object",):
                if key in step.args and isinstance(step.args[key], str):
                    names.append(step.args[key])
        m = re.match(r"^(?:carry|deliver|return) (?:the |a |an )?(.+?) (?:back )?to\b", canon)
        if m:
            names.append(m.group(1))
        return tuple(dict.fromkeys(names))

    def _on_cancel(self, env: busmod.Envelope, tick: int) -> None:
        if self.active is None or env.payload.get("record_id") != self.active.record_id:
            return
        reason = env.payload.get("reason", "cancelled")
        record_id = self.active.record_id
        self.active = None
        self._pending_command = None
        self._cancel_world = True
        self._report_status(record_id, TaskStatus.INTERRUPTED, tick, reason)

    # ------------------------------------------------------------- world side

    def take_command(self) -> Optional[SkillCommand]:
        command, self._pending_command = self._pending_command, None
        return command

    def take_cancel(self) -> bool:
        flag, self._cancel_world = self._cancel_world, False
        return flag

    def _queue_next(self, tick: int) -> None:
        task = self.active
        step = task.program.steps[task.pc]
        self._pending_command = step.to_command(self.id)
        task.awaiting_result = True

    def on_skill_result(self, result: SkillResult, tick: int) -> None:
        task = self.active
        if task is None:
            return
        task.awaiting_result = False
        if result.outcome == "cancelled":
            return
        if result.outcome == "failed":
            record_id = task.record_id
            self.active = None
            self._report_status(record_id, TaskStatus.INTERRUPTED, tick, result.reason)
            return
        step = task.program.steps[task.pc]
        if step.expect_attached is not None:
            attached = result.detail.get("attached_to")
            expected = step.expect_attached.replace(" ", "_")
            if attached != expected:
                obj = result.detail.get("object", step.args.get("object", "object"))
                record_id = task.record_id
                self.active = None
                description = (
                    f"the {str(obj).replace('_', ' ')} fell outside the "
                    f"{str(step.expect_attached).replace('_', ' ')}"
                )
                self._report_status(record_id, TaskStatus.INTERRUPTED, tick, description)
                self._report_event(
                    description,
                    tick,
                    meta={
                        "kind": "outside_container",
                        "entity": str(obj),
                        "container": expected,
                        "position": result.detail.get("position", [0.0, 0.0]),
                    },
                )
                return
        task.pc += 1
        if task.pc >= len(task.program.steps):
            record_id = task.record_id
            self.active = None
            self._report_status(record_id, TaskStatus.COMPLETED, tick)

    def on_attachment_loss(self, change: Change, tick: int) -> None:
        """The owning robot always knows its own attachment state."""
        task = self.active
        if task is None:
            return
        name = change.entity.replace("_", " ")
        if not any(name == c or change.entity == c.replace(" ", "_") for c in task.cargo):
            return
        record_id = task.record_id
        self.active = None
        self._pending_command = None
        self._cancel_world = True
        self._report_status(
            record_id, TaskStatus.INTERRUPTED, tick, f"carry disrupted: {name} fell off"
        )

    # ----------------------------------------------------- event classification

    def on_observations(self, changes: Sequence[Change], tick: int) -> None:
        for change in changes:
            relevance = self._classify(change)
            self.decision_log.append(
                {
                    "tick": tick,
                    "kind": "classification",
                    "entity": change.entity,
                    "change": change.kind,
                    "relevance": relevance.value,
                }
            )
            if relevance is Relevance.RELEVANT:
                self._report_event(self._describe(change), tick, meta=self._meta(change))

    def _classify(self, change: Change) -> Relevance:
        if self.backend is not None and getattr(self.backend, "kind", "rule") == "remote":
            try:
                return self.backend.classify_event(
                    self._describe(change), self.active, self.team_context
                )
            except Exception:
                self.decision_log.append(
                    {"kind": "classify_degraded", "entity": change.entity}
                )
        return classify_change(
            change.entity, change.former_parent, self.team_context, self.robot_ids
        )

    def _describe(self, change: Change) -> str:
        name = change.entity.replace("_", " ")
        x, y = change.position
        if change.kind == "detached":
            parent = self.robot_kinds.get(change.former_parent, change.former_parent)
            parent = parent.replace("_", " ") or "its carrier"
            return f"the {name} fell off the {parent} at ({x:.1f}, {y:.1f})"
        if change.kind == "appeared":
            return f"{name} detected at ({x:.1f}, {y:.1f})"
        return f"the {name} moved to ({x:.1f}, {y:.1f})"

    def _meta(self, change: Change) -> dict:
        return {
            "kind": change.kind,
            "entity": change.entity,
            "former_parent": change.former_parent,
            "position": [change.position[0], change.position[1]],
            "change_tick": change.tick,
        }

    # -------------------------------------------------------------- reporting

    def _report_status(
        self, record_id: str, status: TaskStatus, tick: int, reason: str = ""
    ) -> None:
        self.bus.post(
            self.id,
            "task_manager",
            tick,
            busmod.Kind.STATUS_UPDATE,
            {"record_id": record_id, "status": status.value, "reason": reason},
        )

    def _report_event(self, description: str, tick: int, meta: Optional[dict] = None) -> None:
        self._event_n += 1
        self.bus.post(
            self.id,
            "task_manager",
            tick,
            busmod.Kind.EVENT_REPORT,
            {
                "event_id": f"{self.id}-e{self._event_n}",
                "description": description,
                "tick": tick,
                "source": self.id,
                "meta": meta or {},
            },
        )
