"""Scenario file loading: robots, world layout, disturbance script, goals."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .domain import (
    GoalPredicate,
    ObjectSpec,
    Pose,
    RobotSpec,
    ScenarioConfig,
    validate_scenario,
)
from .world import ScriptEffect, load_script


@dataclass(frozen=True)
class LoadedScenario:
    config: ScenarioConfig
    script: tuple[ScriptEffect, ...]


class ScenarioError(Exception):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


def robot_from_dict(data: Mapping) -> RobotSpec:
    pose = data.get("initial_pose", {})
    return RobotSpec(
        id=str(data["id"]),
        kind=str(data.get("kind", "")),
        capabilities=frozenset(data.get("capabilities", ())),
        constraints=tuple(data.get("constraints", ())),
        initial_pose=Pose(
            x=float(pose.get("x", 0.0)),
            y=float(pose.get("y", 0.0)),
            posture=str(pose.get("posture", "standing")),
        ),
        sensing_radius=float(data.get("sensing_radius", 3.0)),
        speed=float(data["speed"]) if "speed" in data else None,
        skills=tuple(data.get("skills", ())),
    )


def object_from_dict(data: Mapping) -> ObjectSpec:
    return ObjectSpec(
        id=str(data["id"]),
        position=tuple(data.get("position", (0.0, 0.0))),
        attached_to=data.get("attached_to"),
        container=bool(data.get("container", False)),
        capture_radius=float(data.get("capture_radius", 0.45)),
    )


def config_from_dict(data: Mapping) -> ScenarioConfig:
    world = data.get("world", {})
    return ScenarioConfig(
        name=str(data.get("name", "unnamed")),
        robots=tuple(robot_from_dict(r) for r in data.get("robots", ())),
        humans=tuple(data.get("humans", ())),
        rules=tuple(data.get("rules", ())),
        locations={k: tuple(v) for k, v in data.get("locations", {}).items()},
        objects=tuple(object_from_dict(o) for o in world.get("objects", ())),
        regions={
            k: tuple(tuple(p) for p in v) for k, v in world.get("regions", {}).items()
        },
        speed=float(world.get("speed", 0.2)),
        tick_budget=int(data.get("tick_budget", 300)),
        goals=tuple(GoalPredicate.from_dict(g) for g in data.get("goals", ())),
    )


def scenario_from_dict(data: Mapping, strict: bool = True) -> LoadedScenario:
    config = config_from_dict(data)
    if strict:
        violations = validate_scenario(config)
        if violations:
            raise ScenarioError(violations)
    script = load_script(data.get("script", ()))
    return LoadedScenario(config=config, script=script)


def load_scenario(path: str | Path, strict: bool = True) -> LoadedScenario:
    with open(path, "r", encoding="utf-8") as handle:
        data = json.load(handle)
    return scenario_from_dict(data, strict=strict)
