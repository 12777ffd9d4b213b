"""Deterministic tick-based 2D world: entities, attachments, skills, scripts.

Motion is kinematic (straight lines at fixed speed). Skill effects apply at
completion; only movement progresses continuously. Scripted disturbances are
applied after skill progress within the same tick. Two runs with identical
inputs produce identical trajectories.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .domain import GoalPredicate, RobotSpec, ScenarioConfig

log = logging.getLogger(__name__)

SKILL_NAMES = (
    "move_to",
    "find",
    "reach",
    "pick",
    "place",
    "sit",
    "stand",
    "push",
    "form_carry",
    "survey",
)

GRASP_RADIUS = 0.75  # pick/place reach
ARM_REACH = 1.5  # push reach
REACH_STOP = 0.5  # how far from an object reach() stops
STAGING_RADIUS = 1.5  # how close formation members must be to the carried object
FORM_BARRIER_WINDOW = 5  # ticks the formation barrier waits for all members

_FIXED_DURATIONS = {"find": 2, "pick": 2, "place": 2, "sit": 2, "stand": 2, "push": 3}

_ARTICLE_RE = re.compile(r"^(the|a|an)\s+")


def _dist(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _step_toward(
    pos: tuple[float, float], target: tuple[float, float], speed: float
) -> tuple[float, float]:
    d = _dist(pos, target)
    if d <= speed:
        return target
    f = speed / d
    return (pos[0] + (target[0] - pos[0]) * f, pos[1] + (target[1] - pos[1]) * f)


@dataclass
class Entity:
    id: str
    position: tuple[float, float]
    posture: str = ""
    attached_to: Optional[str] = None
    is_robot: bool = False
    container: bool = False
    capture_radius: float = 0.45


@dataclass(frozen=True)
class ScriptEffect:
    tick: int
    effect: str  # detach | spawn | move | utterance
    object: str = ""
    position: tuple[float, float] = (0.0, 0.0)
    text: str = ""
    source: str = "script"

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScriptEffect":
        return cls(
            tick=int(data["tick"]),
            effect=str(data["effect"]),
            object=str(data.get("object", "")),
            position=tuple(data.get("position", (0.0, 0.0))),
            text=str(data.get("text", "")),
            source=str(data.get("source", "script")),
        )

    def to_dict(self) -> dict:
        out: dict = {"tick": self.tick, "effect": self.effect}
        if self.object:
            out["object"] = self.object
        if self.effect in ("spawn", "move"):
            out["position"] = list(self.position)
        if self.text:
            out["text"] = self.text
        if self.source != "script":
            out["source"] = self.source
        return out


def load_script(items: Sequence[Mapping]) -> tuple[ScriptEffect, ...]:
    effects = tuple(ScriptEffect.from_dict(item) for item in items)
    for a, b in zip(effects, effects[1:]):
        if b.tick < a.tick:
            raise ValueError("script trigger ticks must be nondecreasing")
    return effects


@dataclass(frozen=True)
class Change:
    """A scripted world disturbance, observable by camera-equipped robots."""

    tick: int
    kind: str  # appeared | detached | moved
    entity: str
    position: tuple[float, float]
    former_parent: str = ""

    def to_dict(self) -> dict:
        return {
            "tick": self.tick,
            "kind": self.kind,
            "entity": self.entity,
            "position": [self.position[0], self.position[1]],
            "former_parent": self.former_parent,
        }


@dataclass(frozen=True)
class SkillCommand:
    robot: str
    skill: str
    args: Mapping

    def to_dict(self) -> dict:
        return {"robot": self.robot, "skill": self.skill, "args": dict(self.args)}


@dataclass(frozen=True)
class SkillResult:
    robot: str
    skill: str
    args: Mapping
    outcome: str  # completed | failed | cancelled
    reason: str = ""
    detail: Mapping = field(default_factory=dict)


@dataclass
class _Execution:
    command: SkillCommand
    started: int
    elapsed: int = 0
    waypoint_index: int = 0
    barrier_met: bool = False
    offsets: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass
class StepOutput:
    tick: int
    results: list[SkillResult]
    utterances: list[tuple[str, str]]  # (source, text)
    attachment_losses: list[tuple[str, Change]]  # (owner robot, change)


def sitting_requirements(spec: RobotSpec) -> list[str]:
    """Keywords of targets this robot may only place onto while they sit.

    Parsed from free-text constraint clauses of the form
    "... only when the quadruped is sitting".
    """
    out = []
    for clause in spec.constraints:
        m = re.search(r"only when (?:the )?([\w-]+) (?:is )?sitting", clause.lower())
        if m:
            out.append(m.group(1))
    return out


class World:
    """Single-owner world state. Agents never touch this directly; the clock
    owner submits commands and copies snapshots out per tick."""

    def __init__(
        self,
        config: ScenarioConfig,
        script: Sequence[ScriptEffect] = (),
        seed: int = 0,
    ) -> None:
        self.config = config
        self.script = tuple(script)
        self.rng_seed = seed
        self.tick = 0
        self.entities: dict[str, Entity] = {}
        for spec in config.robots:
            self.entities[spec.id] = Entity(
                id=spec.id,
                position=spec.initial_pose.position,
                posture=spec.initial_pose.posture,
                is_robot=True,
            )
        for obj in config.objects:
            self.entities[obj.id] = Entity(
                id=obj.id,
                position=tuple(obj.position),
                attached_to=obj.attached_to,
                container=obj.container,
                capture_radius=obj.capture_radius,
            )
        self._sync_attachments()
        self._executions: dict[str, _Execution] = {}
        self._submitted: list[SkillCommand] = []
        self._script_index = 0
        # Pending scripted changes per camera robot; a change stays pending
        # until the robot comes within sensing range of it.
        self._pending: dict[str, list[Change]] = {
            spec.id: [] for spec in config.robots if "camera" in spec.capabilities
        }

    # ------------------------------------------------------------------ setup

    def robot_speed(self, robot_id: str) -> float:
        spec = self.config.robot(robot_id)
        return spec.speed if spec.speed is not None else self.config.speed

    def resolve_entity(self, name: str, attached_to: Optional[str] = None) -> Optional[str]:
        """Map a free-text object name to an entity id.

        Exact id match wins; otherwise an underscore-normalized prefix match
        over sorted ids, then a robot-kind match ("the quadruped" -> go2).
        With attached_to set, entities attached to that parent are preferred
        (used to pick "the first aid kit" still being carried).
        """
        cleaned = _ARTICLE_RE.sub("", name.strip().lower()).replace(" ", "_").replace("-", "_")
        if not cleaned:
            return None
        if cleaned in self.entities:
            return self._prefer_attached([cleaned], attached_to)
        matches = [
            eid
            for eid in sorted(self.entities)
            if eid.startswith(cleaned) or cleaned.startswith(eid)
        ]
        if matches:
            return self._prefer_attached(matches, attached_to)
        for spec in sorted(self.config.robots, key=lambda s: s.id):
            kind = spec.kind.lower().replace(" ", "_").replace("-", "_")
            if kind and (cleaned in kind or kind.startswith(cleaned)):
                return spec.id
        return None

    def _prefer_attached(self, matches: list[str], attached_to: Optional[str]) -> str:
        if attached_to is not None:
            held = [m for m in matches if self.entities[m].attached_to == attached_to]
            if held:
                return held[0]
        return matches[0]

    def _target_position(self, target) -> Optional[tuple[float, float]]:
        if isinstance(target, (list, tuple)) and len(target) == 2:
            return (float(target[0]), float(target[1]))
        name = _ARTICLE_RE.sub("", str(target).strip().lower()).replace(" ", "_")
        if name in self.config.locations:
            return tuple(self.config.locations[name])
        eid = self.resolve_entity(name)
        if eid is not None:
            return self.entities[eid].position
        return None

    # ----------------------------------------------------------- command flow

    def submit(self, command: SkillCommand) -> None:
        self._submitted.append(command)

    def cancel(self, robot_id: str) -> Optional[SkillResult]:
        """Abort the robot's active skill; movement progress so far stays."""
        execution = self._executions.pop(robot_id, None)
        self._submitted = [c for c in self._submitted if c.robot != robot_id]
        if execution is None:
            return None
        return SkillResult(
            robot=robot_id,
            skill=execution.command.skill,
            args=execution.command.args,
            outcome="cancelled",
        )

    def busy(self, robot_id: str) -> bool:
        return robot_id in self._executions

    # -------------------------------------------------------------- stepping

    def step(self) -> StepOutput:
        """Advance exactly one tick: admit commands, progress skills, apply
        scripted effects triggered at the new tick."""
        self.tick += 1
        results: list[SkillResult] = []

        for command in self._submitted:
            self._admit(command, results)
        self._submitted = []

        self._progress_skills(results)
        self._sync_attachments()

        utterances: list[tuple[str, str]] = []
        losses: list[tuple[str, Change]] = []
        while (
            self._script_index < len(self.script)
            and self.script[self._script_index].tick <= self.tick
        ):
            effect = self.script[self._script_index]
            self._script_index += 1
            self._apply_effect(effect, utterances, losses)
        self._sync_attachments()

        return StepOutput(
            tick=self.tick, results=results, utterances=utterances, attachment_losses=losses
        )

    def _admit(self, command: SkillCommand, results: list[SkillResult]) -> None:
        def reject(reason: str) -> None:
            results.append(
                SkillResult(command.robot, command.skill, command.args, "failed", reason)
            )

        if command.robot not in self.entities or not self.entities[command.robot].is_robot:
            reject(f"unknown robot {command.robot!r}")
            return
        if command.robot in self._executions:
            reject("robot already executing a skill")
            return
        if command.skill not in SKILL_NAMES:
            reject(f"unknown skill {command.skill!r}")
            return
        violation = check_precondition(command.skill, command.args, self, command.robot)
        if violation is not None:
            reject(violation)
            return
        self._executions[command.robot] = _Execution(command=command, started=self.tick)

    def _progress_skills(self, results: list[SkillResult]) -> None:
        done: list[str] = []
        for robot_id in sorted(self._executions):
            execution = self._executions[robot_id]
            if execution.command.skill == "form_carry":
                continue  # handled as a group below
            result = self._progress_single(robot_id, execution)
            if result is not None:
                results.append(result)
                done.append(robot_id)
        for robot_id in done:
            self._executions.pop(robot_id, None)
        self._progress_formations(results)

    def _progress_single(self, robot_id: str, execution: _Execution) -> Optional[SkillResult]:
        command = execution.command
        violation = check_precondition(command.skill, command.args, self, robot_id)
        if violation is not None:
            return SkillResult(robot_id, command.skill, command.args, "failed", violation)
        execution.elapsed += 1
        skill = command.skill
        robot = self.entities[robot_id]
        speed = self.robot_speed(robot_id)

        if skill in ("move_to", "reach"):
            target = command.args.get("target") or command.args.get("object")
            target_pos = self._target_position(target)
            if target_pos is None:
                return SkillResult(robot_id, skill, command.args, "failed", "target vanished")
            stop = REACH_STOP if skill == "reach" else 0.0
            if _dist(robot.position, target_pos) <= stop:
                return self._completed(robot_id, execution)
            robot.position = _step_toward(robot.position, target_pos, speed)
            if _dist(robot.position, target_pos) <= stop + 1e-9:
                return self._completed(robot_id, execution)
            return None

        if skill == "survey":
            waypoints = self.config.regions.get(str(command.args.get("region", "")), ())
            if not waypoints:
                return SkillResult(robot_id, skill, command.args, "failed", "unknown region")
            target_pos = tuple(waypoints[execution.waypoint_index])
            robot.position = _step_toward(robot.position, target_pos, speed)
            if _dist(robot.position, target_pos) <= 1e-9:
                execution.waypoint_index += 1
                if execution.waypoint_index >= len(waypoints):
                    return self._completed(robot_id, execution)
            return None

        duration = _FIXED_DURATIONS[skill]
        if execution.elapsed < duration:
            return None
        return self._completed(robot_id, execution)

    def _completed(self, robot_id: str, execution: _Execution) -> SkillResult:
        """Apply the skill's postcondition mutation and build the result."""
        command = execution.command
        skill = command.skill
        robot = self.entities[robot_id]
        detail: dict = {}

        if skill == "pick":
            obj_id = self.resolve_entity(str(command.args["object"]))
            self.entities[obj_id].attached_to = robot_id
            self.entities[obj_id].position = robot.position
            detail = {"object": obj_id, "attached_to": robot_id}
        elif skill == "place":
            obj_id = self.resolve_entity(str(command.args["object"]), attached_to=robot_id)
            target = command.args["target"]
            obj = self.entities[obj_id]
            if isinstance(target, (list, tuple)):
                obj.attached_to = None
                obj.position = (float(target[0]), float(target[1]))
            else:
                target_id = self.resolve_entity(str(target))
                if target_id is not None and target_id in self.entities:
                    obj.attached_to = target_id
                    obj.position = self.entities[target_id].position
                else:
                    loc = self._target_position(target)
                    obj.attached_to = None
                    if loc is not None:
                        obj.position = loc
            detail = {"object": obj_id, "attached_to": obj.attached_to}
        elif skill == "sit":
            robot.posture = "sitting"
        elif skill == "stand":
            robot.posture = "standing"
        elif skill == "push":
            obj_id = self.resolve_entity(str(command.args["object"]))
            target_pos = self._target_position(command.args["target"])
            obj = self.entities[obj_id]
            # Open-loop push: the object slides straight off the edge onto the
            # catch row; lateral position is inherited, only the row is aimed.
            landing = (obj.position[0], target_pos[1])
            obj.attached_to = None
            obj.position = landing
            captured = self._capture_into_container(obj_id)
            detail = {
                "object": obj_id,
                "position": [obj.position[0], obj.position[1]],
                "attached_to": captured,
            }
        elif skill == "find":
            obj_id = self.resolve_entity(str(command.args["object"]))
            detail = {
                "object": obj_id,
                "position": list(self.entities[obj_id].position),
            }

        if skill in ("move_to", "reach", "survey"):
            detail = {"position": [robot.position[0], robot.position[1]]}

        return SkillResult(robot_id, skill, command.args, "completed", detail=detail)

    def _capture_into_container(self, obj_id: str) -> Optional[str]:
        obj = self.entities[obj_id]
        for cid in sorted(self.entities):
            c = self.entities[cid]
            if c.container and cid != obj_id and _dist(obj.position, c.position) <= c.capture_radius:
                obj.attached_to = cid
                obj.position = c.position
                return cid
        return None

    def _progress_formations(self, results: list[SkillResult]) -> None:
        groups: dict[tuple, list[str]] = {}
        for robot_id, execution in self._executions.items():
            if execution.command.skill != "form_carry":
                continue
            args = execution.command.args
            key = (str(args["object"]), json.dumps(args["target"]), tuple(sorted(args["group"])))
            groups.setdefault(key, []).append(robot_id)

        finished: list[str] = []
        for key in sorted(groups, key=str):
            obj_name, _, group = key
            present = sorted(groups[key])
            executions = [self._executions[r] for r in present]
            first = min(e.started for e in executions)
            if set(present) != set(group):
                if self.tick - first >= FORM_BARRIER_WINDOW:
                    for r in present:
                        results.append(
                            SkillResult(
                                r,
                                "form_carry",
                                self._executions[r].command.args,
                                "failed",
                                "formation incomplete",
                            )
                        )
                        finished.append(r)
                continue

            obj_id = self.resolve_entity(obj_name)
            if obj_id is None:
                for r in present:
                    results.append(
                        SkillResult(
                            r, "form_carry", self._executions[r].command.args,
                            "failed", f"unknown object {obj_name!r}",
                        )
                    )
                    finished.append(r)
                continue
            obj = self.entities[obj_id]

            if not all(e.barrier_met for e in executions):
                displaced = [
                    r
                    for r in present
                    if _dist(self.entities[r].position, obj.position) > STAGING_RADIUS
                ]
                if displaced:
                    for r in present:
                        results.append(
                            SkillResult(
                                r,
                                "form_carry",
                                self._executions[r].command.args,
                                "failed",
                                f"not at staging poses: {', '.join(displaced)}",
                            )
                        )
                        finished.append(r)
                    continue
                for e in executions:
                    e.barrier_met = True
                    e.offsets = {
                        r: (
                            self.entities[r].position[0] - obj.position[0],
                            self.entities[r].position[1] - obj.position[1],
                        )
                        for r in present
                    }

            target_pos = self._target_position(executions[0].command.args["target"])
            obj.position = _step_toward(obj.position, target_pos, self.config.speed)
            offsets = executions[0].offsets
            for r in present:
                dx, dy = offsets[r]
                self.entities[r].position = (obj.position[0] + dx, obj.position[1] + dy)
            if _dist(obj.position, target_pos) <= 1e-9:
                for r in present:
                    results.append(
                        SkillResult(
                            r,
                            "form_carry",
                            self._executions[r].command.args,
                            "completed",
                            detail={"position": list(obj.position)},
                        )
                    )
                    finished.append(r)
        for r in finished:
            self._executions.pop(r, None)

    # ------------------------------------------------------- script + changes

    def _apply_effect(
        self,
        effect: ScriptEffect,
        utterances: list[tuple[str, str]],
        losses: list[tuple[str, Change]],
    ) -> None:
        if effect.effect == "utterance":
            utterances.append((effect.source, effect.text))
            return
        if effect.effect == "spawn":
            self.entities[effect.object] = Entity(
                id=effect.object, position=tuple(effect.position)
            )
            self._record_change(Change(self.tick, "appeared", effect.object, tuple(effect.position)))
            return
        eid = self.resolve_entity(effect.object)
        if eid is None:
            log.warning("script references unknown entity %r", effect.object)
            return
        entity = self.entities[eid]
        if effect.effect == "detach":
            former = entity.attached_to or ""
            entity.attached_to = None
            change = Change(self.tick, "detached", eid, entity.position, former_parent=former)
            self._record_change(change)
            if former and former in self.entities and self.entities[former].is_robot:
                losses.append((former, change))
        elif effect.effect == "move":
            entity.attached_to = None
            entity.position = tuple(effect.position)
            self._capture_into_container(eid)
            self._record_change(Change(self.tick, "moved", eid, entity.position))
        else:
            log.warning("unknown script effect %r", effect.effect)

    def _record_change(self, change: Change) -> None:
        for robot_id in self._pending:
            self._pending[robot_id].append(change)

    def observe(self, robot_id: str) -> list[Change]:
        """Scripted changes not yet seen by this robot that currently lie
        within its sensing radius. Robots without a camera see nothing."""
        if robot_id not in self._pending:
            return []
        spec = self.config.robot(robot_id)
        here = self.entities[robot_id].position
        seen: list[Change] = []
        still_pending: list[Change] = []
        for change in self._pending[robot_id]:
            position = change.position
            if change.entity in self.entities:
                position = self.entities[change.entity].position
            if _dist(here, position) <= spec.sensing_radius:
                seen.append(change)
            else:
                still_pending.append(change)
        self._pending[robot_id] = still_pending
        return seen

    # ------------------------------------------------------------- inspection

    def _sync_attachments(self) -> None:
        for eid in sorted(self.entities):
            entity = self.entities[eid]
            if entity.attached_to is None:
                continue
            root = entity
            hops = 0
            while root.attached_to is not None:
                root = self.entities[root.attached_to]
                hops += 1
                if hops > len(self.entities):
                    raise RuntimeError("attachment cycle detected")
            entity.position = root.position

    def attachment_is_forest(self) -> bool:
        try:
            self._sync_attachments()
        except RuntimeError:
            return False
        return True

    def attached_children(self, parent_id: str) -> list[str]:
        return sorted(
            eid for eid, e in self.entities.items() if e.attached_to == parent_id
        )

    def snapshot(self) -> dict:
        return {
            "tick": self.tick,
            "entities": {
                eid: {
                    "position": [round(e.position[0], 6), round(e.position[1], 6)],
                    "posture": e.posture,
                    "attached_to": e.attached_to,
                }
                for eid, e in sorted(self.entities.items())
            },
        }

    def digest(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))

    def goal_satisfied(self, predicates: Sequence[GoalPredicate]) -> list[bool]:
        out: list[bool] = []
        for p in predicates:
            out.append(self._eval_goal(p))
        return out

    def _eval_goal(self, p: GoalPredicate) -> bool:
        if p.kind == "at":
            if p.entity not in self.entities:
                log.warning("goal references unknown entity %r", p.entity)
                return False
            return _dist(self.entities[p.entity].position, p.position) <= p.tolerance
        if p.kind == "attached":
            if p.entity not in self.entities or p.parent not in self.entities:
                log.warning("goal references unknown entity %r/%r", p.entity, p.parent)
                return False
            return self.entities[p.entity].attached_to == p.parent
        if p.kind == "posture":
            if p.entity not in self.entities:
                log.warning("goal references unknown entity %r", p.entity)
                return False
            return self.entities[p.entity].posture == p.posture
        log.warning("unknown goal kind %r", p.kind)
        return False


def check_precondition(skill: str, args: Mapping, world: World, robot_id: str) -> Optional[str]:
    """Side-effect-free skill precondition check; None means satisfied."""
    robot = world.entities.get(robot_id)
    if robot is None:
        return f"unknown robot {robot_id!r}"
    spec = world.config.robot(robot_id)

    if skill in ("move_to", "reach", "survey"):
        if robot.posture == "sitting":
            return "cannot move while sitting"
        if skill == "survey":
            region = str(args.get("region", ""))
            if region not in world.config.regions:
                return f"unknown region {region!r}"
            return None
        target = args.get("target") or args.get("object")
        if target is None:
            return "missing target"
        if world._target_position(target) is None:
            return f"unknown entity {target!r}"
        return None

    if skill == "find":
        if world.resolve_entity(str(args.get("object", ""))) is None:
            return f"unknown entity {args.get('object')!r}"
        return None

    if skill == "pick":
        obj_id = world.resolve_entity(str(args.get("object", "")))
        if obj_id is None:
            return f"unknown entity {args.get('object')!r}"
        obj = world.entities[obj_id]
        if _dist(robot.position, obj.position) > GRASP_RADIUS:
            return f"{obj_id} out of grasp range"
        return None

    if skill == "place":
        obj_id = world.resolve_entity(str(args.get("object", "")), attached_to=robot_id)
        if obj_id is None:
            return f"unknown entity {args.get('object')!r}"
        obj = world.entities[obj_id]
        if obj.attached_to != robot_id and _dist(robot.position, obj.position) > GRASP_RADIUS:
            return f"not holding {obj_id} and it is out of grasp range"
        target = args.get("target")
        target_pos = world._target_position(target)
        if target_pos is None:
            return f"unknown target {target!r}"
        if _dist(robot.position, target_pos) > GRASP_RADIUS:
            return "target out of placement range"
        if not isinstance(target, (list, tuple)):
            target_id = world.resolve_entity(str(target))
            if target_id is not None and world.entities[target_id].is_robot:
                target_spec = world.config.robot(target_id)
                for keyword in sitting_requirements(spec):
                    if keyword in target_spec.kind or keyword == target_id:
                        if world.entities[target_id].posture != "sitting":
                            return "requires sitting"
        return None

    if skill == "sit":
        if "sit" not in spec.capabilities:
            return "cannot sit"
        return None

    if skill == "stand":
        return None

    if skill == "push":
        obj_id = world.resolve_entity(str(args.get("object", "")))
        if obj_id is None:
            return f"unknown entity {args.get('object')!r}"
        if _dist(robot.position, world.entities[obj_id].position) > ARM_REACH:
            return f"{obj_id} out of reach"
        if world._target_position(args.get("target")) is None:
            return f"unknown target {args.get('target')!r}"
        return None

    if skill == "form_carry":
        obj_id = world.resolve_entity(str(args.get("object", "")))
        if obj_id is None:
            return f"unknown entity {args.get('object')!r}"
        group = args.get("group", ())
        if robot_id not in group:
            return "robot not in its own formation group"
        for member in group:
            if member not in world.entities:
                return f"unknown group member {member!r}"
        if world._target_position(args.get("target")) is None:
            return f"unknown target {args.get('target')!r}"
        return None

    return f"unknown skill {skill!r}"
