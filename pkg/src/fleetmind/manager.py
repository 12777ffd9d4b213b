"""Centralized deliberator: plans over natural-language goals, dispatches
respecting dependencies and sync groups, and replans on relevant events or
human input, reconsidering only work that has not completed."""

from __future__ import annotations

from typing import Optional, Sequence

from . import bus as busmod
from .backends import PlannerFailure
from .context import (
    DynamicContext,
    EventView,
    OutstandingTask,
    RobotView,
    StaticRules,
    assemble_context,
    context_hash,
)
from .domain import (
    ChatHistory,
    ChatRole,
    Event,
    IllegalTransition,
    Plan,
    Relevance,
    ScenarioConfig,
    TaskRecord,
    TaskStatus,
    canonical_step,
    validate_plan_structure,
)

MANAGER_ID = "task_manager"

_PENDING = "pending"
_DISPATCHED = "dispatched"
_DONE = "done"


class TaskManager:
    """Single logical actor consuming a strictly ordered inbox. All TaskRecord
    mutation happens here; state snapshots are exported read-only."""

    def __init__(
        self,
        config: ScenarioConfig,
        backend,
        bus: busmod.Bus,
        static_rules: StaticRules,
    ) -> None:
        self.config = config
        self.backend = backend
        self.bus = bus
        self.static_rules = static_rules
        self.chat = ChatHistory()
        self.records: dict[str, TaskRecord] = {}
        self.plan: Optional[Plan] = None
        self.plans_posted: list[Plan] = []
        self._step_state: dict[str, str] = {}
        self._step_record: dict[str, str] = {}
        self._closed_records: set[str] = set()
        self._help_steps: dict[str, str] = {}  # record_id -> step_id
        self._pending_events: list[EventView] = []
        self._seen_changes: set[tuple] = set()
        self._queued_commands: list[tuple[str, str]] = []  # (text, command_id)
        self._robot_views: tuple[RobotView, ...] = ()
        self.paused = False
        self.decision_log: list[dict] = []
        self._record_n = 0
        self._plan_n = 0
        self._command_n = 0
        self._interruption_views: list[EventView] = []
        self.decision_log.append(
            {"kind": "static_rules", "sha256": static_rules.sha256}
        )

    # ------------------------------------------------------------- main cycle

    def process(
        self,
        envelopes: Sequence[busmod.Envelope],
        tick: int,
        robot_views: Sequence[RobotView] = (),
    ) -> None:
        if robot_views:
            self._robot_views = tuple(robot_views)
        for env in envelopes:
            if env.kind is busmod.Kind.HUMAN_INPUT:
                self.on_human_input(env.payload["text"], env.payload["source"], tick)
            elif env.kind is busmod.Kind.STATUS_UPDATE:
                self._on_status(env, tick)
            elif env.kind is busmod.Kind.EVENT_REPORT:
                self._on_event_report(env, tick)
            elif env.kind is busmod.Kind.HELP_DONE:
                self._on_help_done(env.payload["record_id"], tick)

        if self.paused:
            return
        while self._queued_commands:
            text, command_id = self._queued_commands.pop(0)
            self.plan_command(text, command_id, tick)
        if self._pending_events or self._interruption_views:
            self.on_event(tick)
        self.dispatch(tick)

    # ---------------------------------------------------------------- inbound

    def on_human_input(self, text: str, source: str, tick: int) -> None:
        """Every input lands in the chat history first, then gets routed."""
        self.chat.append(ChatRole.USER, text, tick)
        label, resolved = self.backend.route_input(text, self.build_context(tick))
        self.decision_log.append(
            {"tick": tick, "kind": "route", "text": text, "label": label}
        )
        if label == "new_command":
            self._command_n += 1
            self._queued_commands.append((resolved or text, f"c-{self._command_n}"))
        elif label == "intent_change":
            event = Event(
                event_id=f"{source}-intent-{tick}",
                source=source,
                description=f"intent change: {text}",
                tick=tick,
                relevance=Relevance.RELEVANT,
            )
            self._pending_events.append(
                EventView(event=event, meta={"kind": "intent_change", "text": text})
            )
        elif label == "help_done":
            for record_id, step_id in sorted(self._help_steps.items()):
                self._on_help_done(record_id, tick)
                break

    def _on_status(self, env: busmod.Envelope, tick: int) -> None:
        payload = env.payload
        record = self.records.get(payload["record_id"])
        if record is None:
            return
        new = TaskStatus(payload["status"])
        reason = payload.get("reason", "")
        try:
            record.transition(new, tick)
        except IllegalTransition as exc:
            self.decision_log.append(
                {"tick": tick, "kind": "illegal_transition", "detail": str(exc)}
            )
            return
        step_id = self._step_for_record(record.record_id)
        if new is TaskStatus.COMPLETED:
            if step_id is not None:
                self._step_state[step_id] = _DONE
            self.chat.append(
                ChatRole.ROBOT,
                f"{record.owner}: completed: {record.assignment.instruction}",
                tick,
            )
        elif new is TaskStatus.INTERRUPTED:
            if reason.startswith("agent busy"):
                if step_id is not None:
                    self._step_state[step_id] = _PENDING
                return
            if reason.startswith("superseded"):
                return
            self.chat.append(
                ChatRole.ROBOT,
                f"{record.owner}: interrupted: {reason}",
                tick,
            )
            self._interruption_views.append(
                EventView(
                    event=Event(
                        event_id=f"{record.record_id}-interrupted",
                        source=record.owner,
                        description=f"task interrupted: {reason}",
                        tick=tick,
                        relevance=Relevance.RELEVANT,
                    ),
                    meta={"kind": "interruption", "record_id": record.record_id},
                )
            )

    def _on_event_report(self, env: busmod.Envelope, tick: int) -> None:
        payload = env.payload
        meta = payload.get("meta", {})
        # The same world change seen by several observers (possibly much
        # later, once it enters their sensing range) is one event.
        if "change_tick" in meta:
            key = (meta.get("kind"), meta.get("entity"), meta.get("change_tick"))
            if key in self._seen_changes:
                self.decision_log.append(
                    {"tick": tick, "kind": "duplicate_event", "event_id": payload["event_id"]}
                )
                return
            self._seen_changes.add(key)
        event = Event(
            event_id=payload["event_id"],
            source=payload["source"],
            description=payload["description"],
            tick=int(payload["tick"]),
            relevance=Relevance.RELEVANT,
        )
        self.chat.append(ChatRole.EVENT, event.description, tick)
        self._pending_events.append(EventView(event=event, meta=meta))

    def _on_help_done(self, record_id: str, tick: int) -> None:
        record = self.records.get(record_id)
        if record is None or record_id not in self._help_steps:
            return
        step_id = self._help_steps.pop(record_id)
        try:
            record.transition(TaskStatus.COMPLETED, tick)
        except IllegalTransition as exc:
            self.decision_log.append(
                {"tick": tick, "kind": "illegal_transition", "detail": str(exc)}
            )
            return
        self._step_state[step_id] = _DONE
        self.chat.append(
            ChatRole.TASK_MANAGER,
            f"human confirmed: {record.assignment.instruction}",
            tick,
        )

    # ------------------------------------------------------------ deliberation

    def build_context(self, tick: int, command: str = "") -> DynamicContext:
        records_rows = tuple(
            {
                "record_id": r.record_id,
                "owner": r.owner,
                "instruction": r.assignment.instruction,
                "status": r.status.value,
            }
            for _, r in sorted(self.records.items())
        )
        return DynamicContext(
            config=self.config,
            command=command,
            commands=tuple(
                e.text for e in self.chat.entries() if e.role is ChatRole.USER
            ),
            history=self.chat.entries(),
            robots=self._robot_views,
            records=records_rows,
            outstanding=tuple(self.outstanding()),
            pending_events=tuple(self._pending_events + self._interruption_views),
            humans=self.config.humans,
            help_pending=bool(self._help_steps),
        )

    def outstanding(self) -> list[OutstandingTask]:
        """Work the next plan must still cover, in plan order."""
        if self.plan is None:
            return []
        out: list[OutstandingTask] = []
        for idx, step in enumerate(self.plan.steps):
            state = self._step_state.get(step.step_id, _PENDING)
            if state == _DONE:
                continue
            record_id = self._step_record.get(step.step_id, "")
            status = _PENDING
            if record_id:
                status = self.records[record_id].status.value
                if status == TaskStatus.COMPLETED.value:
                    continue
            out.append(
                OutstandingTask(
                    order=idx,
                    step_id=step.step_id,
                    assignee=step.assignee,
                    instruction=step.instruction,
                    required_capabilities=step.required_capabilities,
                    depends_on=step.depends_on,
                    sync_group=step.sync_group,
                    status=status,
                    source_command_id=self.plan.source_command_id,
                    record_id=record_id,
                )
            )
        return out

    def assemble_context(self, tick: int, command: str = "") -> str:
        return assemble_context(self.static_rules, self.build_context(tick, command), self.config)

    def plan_command(self, text: str, command_id: str, tick: int) -> None:
        self._plan_n += 1
        context = self.build_context(tick, command=text)
        prompt = assemble_context(self.static_rules, context, self.config)
        if self.outstanding():
            # A fresh command while work is in flight folds into a replan so
            # running tasks are preserved or superseded explicitly.
            self._pending_events.append(
                EventView(
                    event=Event(
                        event_id=f"{command_id}-cmd",
                        source="user",
                        description=f"new command: {text}",
                        tick=tick,
                        relevance=Relevance.RELEVANT,
                    ),
                    meta={"kind": "new_command", "text": text},
                )
            )
            self.on_event(tick)
            return
        try:
            plan, notes = self.backend.make_plan(
                text, context, self.static_rules, f"p-{self._plan_n}", command_id
            )
        except PlannerFailure as exc:
            self._planner_failure(str(exc), tick)
            return
        self.decision_log.append(
            {
                "tick": tick,
                "kind": "plan",
                "backend": getattr(self.backend, "id", "unknown"),
                "context_sha256": context_hash(prompt),
                "plan": plan.to_dict(),
                "notes": notes,
            }
        )
        self._adopt_plan(plan, tick)

    def on_event(self, tick: int) -> None:
        """Replan over everything not completed plus event-implied recovery."""
        events = self._pending_events + self._interruption_views
        if not events:
            return
        context = self.build_context(tick)
        self._pending_events = []
        self._interruption_views = []
        if not context.outstanding and not any(
            v.meta.get("kind") == "new_command" for v in events
        ):
            self.decision_log.append(
                {"tick": tick, "kind": "replan_noop", "events": [v.event.event_id for v in events]}
            )
            return
        self._plan_n += 1
        prompt = assemble_context(self.static_rules, context, self.config)
        source = self.plan.source_command_id if self.plan else ""
        try:
            plan, notes = self.backend.make_replan(
                events, context, self.static_rules, f"p-{self._plan_n}", source
            )
        except PlannerFailure as exc:
            self._planner_failure(str(exc), tick)
            return
        self.decision_log.append(
            {
                "tick": tick,
                "kind": "replan",
                "backend": getattr(self.backend, "id", "unknown"),
                "context_sha256": context_hash(prompt),
                "events": [v.event.to_dict() for v in events],
                "plan": plan.to_dict(),
                "notes": notes,
            }
        )
        self._adopt_plan(plan, tick, replan=True)

    def _planner_failure(self, detail: str, tick: int) -> None:
        self.paused = True
        self.chat.append(ChatRole.TASK_MANAGER, f"planner_failure: {detail}", tick)
        self.decision_log.append({"tick": tick, "kind": "planner_failure", "detail": detail})

    # --------------------------------------------------------------- adoption

    def _adopt_plan(self, plan: Plan, tick: int, replan: bool = False) -> None:
        structural = validate_plan_structure(plan, self.config)
        unknown = [
            s.assignee
            for s in plan.steps
            if not self.config.has_robot(s.assignee) and not self.config.has_human(s.assignee)
        ]
        if structural or unknown:
            detail = "; ".join(
                structural + [f"unknown assignee {a!r}" for a in sorted(set(unknown))]
            )
            self._planner_failure(f"plan rejected before dispatch: {detail}", tick)
            return

        open_records = {
            rid: record
            for rid, record in self.records.items()
            if record.status is not TaskStatus.COMPLETED and rid not in self._closed_records
        }
        matched: dict[str, str] = {}  # step_id -> record_id
        used: set[str] = set()
        for step in plan.steps:
            key = (step.assignee, canonical_step(step.instruction))
            for rid, record in sorted(open_records.items()):
                if rid in used:
                    continue
                if (
                    record.owner,
                    canonical_step(record.assignment.instruction),
                ) == key:
                    matched[step.step_id] = rid
                    used.add(rid)
                    break

        self._step_state = {s.step_id: _PENDING for s in plan.steps}
        old_help = dict(self._help_steps)
        self._step_record = {}
        self._help_steps = {}

        for step in plan.steps:
            rid = matched.get(step.step_id)
            if rid is None:
                continue
            record = self.records[rid]
            record.assignment = step
            self._step_record[step.step_id] = rid
            if rid in old_help:
                self._help_steps[rid] = step.step_id
                self._step_state[step.step_id] = _DISPATCHED
                continue
            if record.status is TaskStatus.IN_PROGRESS:
                deps_done = all(
                    self._step_state.get(d) == _DONE for d in step.depends_on
                )
                if deps_done:
                    # Adopt in flight: the robot keeps running, no re-dispatch.
                    self._step_state[step.step_id] = _DISPATCHED
                else:
                    self._cancel_record(record, tick, "superseded by replanning: must wait")
            # interrupted records stay pending until dependencies clear.

        for rid, record in sorted(open_records.items()):
            if rid in used:
                continue
            if record.status is TaskStatus.IN_PROGRESS:
                self._cancel_record(record, tick, "superseded by replanning")
            self._closed_records.add(rid)
            if rid in old_help:
                self.decision_log.append(
                    {"tick": tick, "kind": "help_dropped", "record_id": rid}
                )

        self.plan = plan
        self.plans_posted.append(plan)
        summary = self._summarize(plan)
        self.chat.append(ChatRole.TASK_MANAGER, summary, tick)
        self.bus.post(
            MANAGER_ID,
            busmod.BROADCAST,
            tick,
            busmod.Kind.PLAN_POSTED,
            {
                "plan": plan.to_dict(),
                "active_instructions": [
                    {
                        "assignee": s.assignee,
                        "instruction": s.instruction,
                        "status": self.records[self._step_record[s.step_id]].status.value
                        if s.step_id in self._step_record
                        else "pending",
                    }
                    for s in plan.steps
                ],
            },
        )

    def _summarize(self, plan: Plan) -> str:
        classes = ", ".join(sorted(c.value for c in plan.classes))
        parts = [f"plan {plan.plan_id} [{classes}]"]
        for step in plan.steps:
            dep = f" after {', '.join(sorted(step.depends_on))}" if step.depends_on else ""
            parts.append(f"{step.step_id}: {step.assignee} -> {step.instruction}{dep}")
        return "; ".join(parts)

    def _cancel_record(self, record: TaskRecord, tick: int, reason: str) -> None:
        self.bus.post(
            MANAGER_ID,
            record.owner,
            tick,
            busmod.Kind.CANCEL_TASK,
            {"record_id": record.record_id, "reason": reason},
        )
        try:
            record.transition(TaskStatus.INTERRUPTED, tick)
        except IllegalTransition:
            pass

    # ---------------------------------------------------------------- dispatch

    def _step_for_record(self, record_id: str) -> Optional[str]:
        for step_id, rid in self._step_record.items():
            if rid == record_id:
                return step_id
        return None

    def _robot_idle(self, robot_id: str) -> bool:
        return not any(
            r.owner == robot_id and r.status is TaskStatus.IN_PROGRESS
            for r in self.records.values()
        )

    def _deps_done(self, step) -> bool:
        return all(self._step_state.get(d) == _DONE for d in step.depends_on)

    def dispatch(self, tick: int) -> None:
        """Release every step whose prerequisites completed. Sync groups are
        released together, in one cycle, only when all members are idle."""
        if self.plan is None or self.paused:
            return
        visited_groups: set[str] = set()
        for step in self.plan.steps:
            if self._step_state.get(step.step_id) != _PENDING:
                continue
            if not self._deps_done(step):
                continue
            if self.config.has_human(step.assignee):
                self._dispatch_help(step, tick)
                continue
            if step.sync_group:
                if step.sync_group in visited_groups:
                    continue
                visited_groups.add(step.sync_group)
                members = [
                    s for s in self.plan.steps if s.sync_group == step.sync_group
                ]
                if any(self._step_state.get(m.step_id) != _PENDING for m in members):
                    continue
                if not all(self._deps_done(m) for m in members):
                    continue
                if not all(self._robot_idle(m.assignee) for m in members):
                    continue
                for m in members:
                    self._dispatch_step(m, tick, group=[x.assignee for x in members])
                continue
            if not self._robot_idle(step.assignee):
                continue
            self._dispatch_step(step, tick)

    def _ensure_record(self, step, tick: int) -> TaskRecord:
        rid = self._step_record.get(step.step_id)
        if rid is not None:
            record = self.records[rid]
            if record.status is TaskStatus.INTERRUPTED:
                record.transition(TaskStatus.IN_PROGRESS, tick)
            return record
        self._record_n += 1
        record = TaskRecord(
            record_id=f"r-{self._record_n}",
            assignment=step,
            owner=step.assignee,
            status=TaskStatus.IN_PROGRESS,
            history=[(TaskStatus.IN_PROGRESS, tick)],
        )
        self.records[record.record_id] = record
        self._step_record[step.step_id] = record.record_id
        return record

    def _dispatch_step(self, step, tick: int, group: Optional[list[str]] = None) -> None:
        record = self._ensure_record(step, tick)
        self._step_state[step.step_id] = _DISPATCHED
        payload = {
            "record_id": record.record_id,
            "step_id": step.step_id,
            "plan_id": self.plan.plan_id if self.plan else "",
            "assignee": step.assignee,
            "instruction": step.instruction,
            "sync_group": step.sync_group,
            "group": group,
        }
        self.bus.post(MANAGER_ID, step.assignee, tick, busmod.Kind.ASSIGN_TASK, payload)

    def _dispatch_help(self, step, tick: int) -> None:
        record = self._ensure_record(step, tick)
        self._step_state[step.step_id] = _DISPATCHED
        self._help_steps[record.record_id] = step.step_id
        self.bus.post(
            MANAGER_ID,
            step.assignee,
            tick,
            busmod.Kind.HELP_REQUEST,
            {
                "record_id": record.record_id,
                "instruction": step.instruction,
                "assignee": step.assignee,
            },
        )
        self.chat.append(
            ChatRole.TASK_MANAGER,
            f"help needed from {step.assignee}: {step.instruction}",
            tick,
        )

    # ------------------------------------------------------------------ export

    def quiescent(self) -> bool:
        if self._queued_commands or self._pending_events or self._interruption_views:
            return False
        if self.plan is None:
            return True
        for step in self.plan.steps:
            state = self._step_state.get(step.step_id)
            if state == _PENDING:
                return False
            if state == _DISPATCHED:
                rid = self._step_record.get(step.step_id)
                if rid is None or self.records[rid].status is not TaskStatus.COMPLETED:
                    return False
        return True

    def help_pending(self) -> bool:
        return bool(self._help_steps)

    def infeasible_posted(self) -> bool:
        from .domain import TaskClass

        return any(TaskClass.INFEASIBLE in p.classes for p in self.plans_posted)

    def export_state(self) -> dict:
        return {
            "chat": [e.to_dict() for e in self.chat.entries()],
            "records": [r.to_dict() for _, r in sorted(self.records.items())],
            "plan": self.plan.to_dict() if self.plan else None,
            "paused": self.paused,
        }
