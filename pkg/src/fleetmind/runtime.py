"""Deterministic run loop wiring the world clock, bus, agents, manager, and
the scripted human gateway together. One instance owns one scenario run."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import bus as busmod
from .agents import RobotAgent
from .backends import RuleBackend
from .context import RobotView, StaticRules
from .domain import GoalPredicate, ScenarioConfig
from .manager import MANAGER_ID, TaskManager
from .scenario import LoadedScenario
from .world import ScriptEffect, World

DEFAULT_RULES_TEXT = """Task classes: independent tasks run in parallel without
cooperation; sequential tasks hand work between robots in order; coordinated
tasks move robots in lock-step formation; infeasible tasks exceed every
agent's capabilities.
Allocation: assign each subtask to a robot whose capabilities cover it,
respecting scenario constraints and robot postures. Prefer idle robots.
Replanning: when a relevant event or intent change arrives, produce a fresh
plan covering every task not yet completed, including interrupted tasks, and
cancel superseded work explicitly.
Output format: reply with a single JSON object
{"plan_id": str, "classes": [str], "source_command_id": str,
 "steps": [{"step_id": str, "assignee": str, "instruction": str,
            "required_capabilities": [str], "depends_on": [str],
            "sync_group": str or null}]}
"""


@dataclass
class RunResult:
    outcome: str  # goals_satisfied | budget_exhausted | infeasible | help_pending | idle | planner_failure
    ticks: int
    goals: list[bool] = field(default_factory=list)
    log_dir: Optional[str] = None

    @property
    def goals_ok(self) -> bool:
        return bool(self.goals) and all(self.goals)


class ScenarioRun:
    def __init__(
        self,
        loaded: LoadedScenario,
        backend=None,
        seed: int = 0,
        log_dir: Optional[str | Path] = None,
        static_rules: Optional[StaticRules] = None,
        auto_help_ticks: Optional[int] = None,
        extra_script: Sequence[ScriptEffect] = (),
    ) -> None:
        self.config: ScenarioConfig = loaded.config
        script = tuple(sorted(loaded.script + tuple(extra_script), key=lambda e: e.tick))
        self.log_dir = Path(log_dir) if log_dir else None
        self._bus_stream = None
        self._traj_stream = None
        if self.log_dir:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            self._bus_stream = open(self.log_dir / "bus.jsonl", "w", encoding="utf-8")
            self._traj_stream = open(self.log_dir / "trajectory.jsonl", "w", encoding="utf-8")
        self.bus = busmod.Bus(log_stream=self._bus_stream)
        self.world = World(self.config, script, seed=seed)
        backend = backend if backend is not None else RuleBackend()
        rules = static_rules if static_rules is not None else StaticRules(DEFAULT_RULES_TEXT)
        self.manager = TaskManager(self.config, backend, self.bus, rules)
        self.agents: dict[str, RobotAgent] = {}
        for spec in self.config.robots:
            agent = RobotAgent(spec, self.bus, backend=backend)
            agent.robot_ids = [r.id for r in self.config.robots]
            agent.robot_kinds = {r.id: r.kind for r in self.config.robots}
            self.agents[spec.id] = agent
        self.bus.register(MANAGER_ID)
        for rid in self.agents:
            self.bus.register(rid)
        for human in self.config.humans:
            self.bus.register(human)
        self.auto_help_ticks = auto_help_ticks
        self._auto_help_due: list[tuple[int, str, str]] = []  # (tick, human, record_id)
        self.seed = seed

    # ------------------------------------------------------------------ ticks

    def _robot_views(self) -> list[RobotView]:
        views = []
        for rid in sorted(self.agents):
            entity = self.world.entities[rid]
            views.append(
                RobotView(
                    id=rid,
                    posture=entity.posture,
                    position=entity.position,
                    busy=self.agents[rid].active is not None,
                )
            )
        return views

    def step_once(self) -> None:
        tick = self.world.tick + 1
        self.manager.process(self.bus.drain(MANAGER_ID), tick, self._robot_views())

        for rid in sorted(self.agents):
            agent = self.agents[rid]
            agent.process(self.bus.drain(rid), tick)
            if agent.take_cancel():
                self.world.cancel(rid)
            command = agent.take_command()
            if command is not None:
                self.world.submit(command)

        out = self.world.step()

        for result in out.results:
            self.agents[result.robot].on_skill_result(result, tick)
        for owner, change in out.attachment_losses:
            self.agents[owner].on_attachment_loss(change, tick)
        for rid in sorted(self.agents):
            if "camera" not in self.agents[rid].spec.capabilities:
                continue
            changes = self.world.observe(rid)
            if changes:
                self.agents[rid].on_observations(changes, tick)

        for source, text in out.utterances:
            self.bus.post(
                source, MANAGER_ID, tick, busmod.Kind.HUMAN_INPUT,
                {"text": text, "source": source},
            )

        self._gateway(tick)

        if self._traj_stream is not None:
            self._traj_stream.write(self.world.digest() + "\n")
        self.bus.flush_log()

    def _gateway(self, tick: int) -> None:
        """Scripted human: optionally auto-confirms help requests after a
        fixed delay so headless runs never hang."""
        for human in self.config.humans:
            for env in self.bus.drain(human):
                if env.kind is busmod.Kind.HELP_REQUEST and self.auto_help_ticks is not None:
                    self._auto_help_due.append(
                        (tick + self.auto_help_ticks, human, env.payload["record_id"])
                    )
        due = [item for item in self._auto_help_due if item[0] <= tick]
        self._auto_help_due = [item for item in self._auto_help_due if item[0] > tick]
        for _, human, record_id in due:
            self.bus.post(
                human, MANAGER_ID, tick, busmod.Kind.HELP_DONE, {"record_id": record_id}
            )

    # -------------------------------------------------------------------- run

    def _agents_idle(self) -> bool:
        return all(agent.active is None for agent in self.agents.values())

    def _script_exhausted(self) -> bool:
        return self.world._script_index >= len(self.world.script)

    def run(
        self,
        tick_budget: Optional[int] = None,
        goals: Optional[Sequence[GoalPredicate]] = None,
    ) -> RunResult:
        budget = tick_budget if tick_budget is not None else self.config.tick_budget
        goals = list(goals) if goals is not None else list(self.config.goals)
        outcome = "budget_exhausted"
        while self.world.tick < budget:
            self.step_once()
            # Goals count only once the dispatched work has actually run to
            # completion; initial placements often satisfy "at" goals trivially.
            if (
                goals
                and self.manager.plans_posted
                and self.manager.quiescent()
                and self._agents_idle()
                and all(self.world.goal_satisfied(goals))
            ):
                outcome = "goals_satisfied"
                break
            if self.manager.paused and self._agents_idle():
                outcome = "planner_failure"
                break
            if (
                self._script_exhausted()
                and self._agents_idle()
                and self.manager.quiescent()
                and self.bus.peek_count(MANAGER_ID) == 0
            ):
                if self.manager.help_pending():
                    outcome = "help_pending"
                elif self.manager.infeasible_posted():
                    outcome = "infeasible"
                else:
                    outcome = "idle"
                break
        flags = self.world.goal_satisfied(goals) if goals else []
        self._write_logs(flags)
        return RunResult(
            outcome=outcome,
            ticks=self.world.tick,
            goals=flags,
            log_dir=str(self.log_dir) if self.log_dir else None,
        )

    def _write_logs(self, goal_flags: list[bool]) -> None:
        if self.log_dir is None:
            self._close_streams()
            return
        with open(self.log_dir / "manager_decisions.jsonl", "w", encoding="utf-8") as f:
            for entry in self.manager.decision_log:
                f.write(json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n")
        with open(self.log_dir / "agent_decisions.jsonl", "w", encoding="utf-8") as f:
            for rid in sorted(self.agents):
                for entry in self.agents[rid].decision_log:
                    row = {"robot": rid, **entry}
                    f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
        with open(self.log_dir / "chat.json", "w", encoding="utf-8") as f:
            f.write(self.manager.chat.to_json())
        with open(self.log_dir / "goal_report.json", "w", encoding="utf-8") as f:
            report = {
                "goals": [g.to_dict() for g in self.config.goals],
                "satisfied": goal_flags,
                "all_satisfied": bool(goal_flags) and all(goal_flags),
                "final_tick": self.world.tick,
            }
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
        self._close_streams()

    def _close_streams(self) -> None:
        for stream in (self._bus_stream, self._traj_stream):
            if stream is not None:
                stream.close()
        self._bus_stream = None
        self._traj_stream = None
