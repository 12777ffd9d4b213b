"""Interchangeable deliberation engines behind one interface.

The rule backend is a deterministic planner used for reproducible tests. The
remote backend talks to any chat-completion-compatible HTTP endpoint. Plan
parsing and executability validation are shared by both.
"""

from __future__ import annotations

import json
import math
import re
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Optional, Sequence

import httpx

from .domain import (
    Assignment,
    Plan,
    ScenarioConfig,
    TaskClass,
    canonical_step,
    derive_classes,
    validate_plan_structure,
)

if TYPE_CHECKING:
    from .context import DynamicContext


class BackendUnavailable(Exception):
    pass


class PlanParseError(Exception):
    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class PlannerFailure(Exception):
    pass


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "rule"  # "rule" | "remote"
    endpoint: str = ""
    model: str = ""
    temperature: float = 0.5
    timeout: float = 30.0
    max_retries: int = 3
    api_key_env: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("rule", "remote"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "remote" and (not self.endpoint or not self.model):
            raise ValueError("remote backend requires endpoint and model")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be within [0, 2]")

    @classmethod
    def from_dict(cls, data: Mapping) -> "BackendConfig":
        return cls(
            kind=str(data.get("kind", "rule")),
            endpoint=str(data.get("endpoint", "")),
            model=str(data.get("model", "")),
            temperature=float(data.get("temperature", 0.5)),
            timeout=float(data.get("timeout", 30.0)),
            max_retries=int(data.get("max_retries", 3)),
            api_key_env=str(data.get("api_key_env", "")),
        )


def load_backend_config(path: str) -> BackendConfig:
    with open(path, "rb") as handle:
        raw = handle.read()
    if path.endswith(".toml"):
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib

        return BackendConfig.from_dict(tomllib.loads(raw.decode("utf-8")))
    return BackendConfig.from_dict(json.loads(raw.decode("utf-8")))


# --------------------------------------------------------------------- client


def complete(
    prompt: str,
    config: BackendConfig,
    api_key: str = "",
    request_log: Optional[list] = None,
    sleep_fn=time.sleep,
    backoff_base: float = 0.25,
) -> str:
    """One chat-completion round trip with exponential backoff on transport
    errors and 5xx replies. Request records are logged with secrets redacted."""
    if config.kind != "remote":
        raise BackendUnavailable("complete() requires a remote backend")
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    body = {
        "model": config.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": config.temperature,
    }

    def record(attempt: int, status: Optional[int], error: str = "") -> None:
        if request_log is None:
            return
        request_log.append(
            {
                "url": config.endpoint,
                "model": config.model,
                "attempt": attempt,
                "status": status,
                "error": error,
                "authorization": "REDACTED" if api_key else "",
            }
        )

    last_error = ""
    for attempt in range(config.max_retries + 1):
        try:
            with httpx.Client(timeout=config.timeout) as client:
                response = client.post(config.endpoint, json=body, headers=headers)
        except httpx.HTTPError as exc:
            last_error = f"transport error: {exc}"
            record(attempt, None, last_error)
        else:
            if response.status_code >= 500:
                last_error = f"server error {response.status_code}"
                record(attempt, response.status_code, last_error)
            elif response.status_code >= 400:
                record(attempt, response.status_code, "client error")
                raise BackendUnavailable(
                    f"endpoint rejected request: HTTP {response.status_code}"
                )
            else:
                record(attempt, response.status_code)
                try:
                    return response.json()["choices"][0]["message"]["content"]
                except (KeyError, IndexError, ValueError) as exc:
                    raise BackendUnavailable(f"malformed completion reply: {exc}")
        if attempt < config.max_retries:
            sleep_fn(min(backoff_base * (2**attempt), 4.0))
    raise BackendUnavailable(f"gave up after {config.max_retries + 1} attempts: {last_error}")


# ----------------------------------------------------------- capability table

# Verb/phrase to required capability tags. Total over the bundled scenario
# vocabulary; synonyms are folded in by canonical_step before lookup.
VERB_CAPS: dict[str, frozenset[str]] = {
    "approach": frozenset({"navigate"}),
    "move": frozenset({"navigate"}),
    "stage": frozenset({"navigate"}),
    "reach": frozenset({"navigate"}),
    "carry": frozenset({"navigate", "carry"}),
    "deliver": frozenset({"navigate", "carry"}),
    "transport": frozenset({"navigate", "carry"}),
    "return": frozenset({"navigate", "carry"}),
    "pick": frozenset({"pick"}),
    "place": frozenset({"place"}),
    "push": frozenset({"push"}),
    "sit": frozenset({"sit"}),
    "stand": frozenset({"stand"}),
    "survey": frozenset({"fly", "camera"}),
    "search": frozenset({"camera"}),
    "find": frozenset({"camera"}),
    "fly": frozenset({"fly"}),
}


@dataclass(frozen=True)
class CapabilityTable:
    verbs: Mapping[str, frozenset[str]] = field(default_factory=lambda: dict(VERB_CAPS))


DEFAULT_TABLE = CapabilityTable()


def infer_required(instruction: str, table: CapabilityTable = DEFAULT_TABLE) -> frozenset[str]:
    """Union of capability tags for every table verb found in the instruction."""
    tokens = canonical_step(instruction).split()
    caps: set[str] = set()
    for i, token in enumerate(tokens):
        if token == "stand" and i + 1 < len(tokens) and tokens[i + 1] == "by":
            continue  # "stand by" is idle phrasing, not the posture skill
        if token in table.verbs:
            caps |= table.verbs[token]
    return frozenset(caps)


# ------------------------------------------------------------- plan synthesis

_COORD_RE = re.compile(r"\((-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\)")


def _light(text: str) -> str:
    """Lowercased, whitespace-collapsed text that keeps coordinates intact."""
    return re.sub(r"\s+", " ", text.strip().lower())


def _coords_text(x: float, y: float) -> str:
    return f"({x:g}, {y:g})"


def _spaced(entity_id: str) -> str:
    return entity_id.replace("_", " ")


def _object_refs(text: str, config: ScenarioConfig) -> set[str]:
    canon = " " + canonical_step(text) + " "
    refs = set()
    for obj in config.objects:
        if " " + _spaced(obj.id) + " " in canon:
            refs.add(obj.id)
    return refs


def _robot_label(spec) -> str:
    return spec.kind if spec.kind else spec.id


def _distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def select_robot(
    config: ScenarioConfig,
    caps: frozenset[str],
    exclude: Sequence[str] = (),
    near: Optional[tuple[float, float]] = None,
    positions: Optional[Mapping[str, tuple[float, float]]] = None,
) -> tuple[Optional[str], bool]:
    """Pick the capable robot: nearest when a location is given, otherwise
    lexicographically first. Second value flags a logged tie-break."""
    candidates = [
        r for r in config.robots if caps <= r.capabilities and r.id not in exclude
    ]
    if not candidates:
        return None, False
    if near is not None:
        pos = positions or {}

        def key(r):
            p = pos.get(r.id, r.initial_pose.position)
            return (round(_distance(p, near), 9), r.id)

        candidates.sort(key=key)
    else:
        candidates.sort(key=lambda r: r.id)
    return candidates[0].id, len(candidates) > 1


@dataclass
class _Clause:
    text: str
    assignee: Optional[str] = None  # user-addressed robot
    chain_after: Optional[int] = None  # index of predecessor clause


def _normalize_name(name: str) -> str:
    return name.strip().lower().replace("-", "_").replace(" ", "_")


def _match_addressed(sentence: str, config: ScenarioConfig) -> tuple[Optional[str], str]:
    m = re.match(r"^([A-Za-z0-9][\w\s-]*?),\s+(.*)$", sentence)
    if not m:
        return None, sentence
    prefix = _normalize_name(m.group(1))
    for spec in config.robots:
        if prefix == spec.id or spec.id.startswith(prefix):
            return spec.id, m.group(2)
    return None, sentence


def _split_chain(text: str) -> list[str]:
    parts = re.split(r"\s*,?\s*\band then\b\s*|\s*,\s*\bthen\b\s*|\s+\bthen\b\s+", text)
    return [p.strip() for p in parts if p.strip()]


def segment_command(command: str, config: ScenarioConfig) -> list[_Clause]:
    clauses: list[_Clause] = []
    for sentence in re.split(r"[.;!?]+", command):
        sentence = sentence.strip()
        if not sentence:
            continue
        assignee, rest = _match_addressed(sentence, config)
        parts = _split_chain(rest)
        prev: Optional[int] = None
        for part in parts:
            clause = _Clause(text=part, assignee=assignee, chain_after=prev)
            clauses.append(clause)
            prev = len(clauses) - 1
    return clauses


class _StepBuilder:
    def __init__(self) -> None:
        self.steps: list[Assignment] = []
        self.notes: list[str] = []
        self._n = 0

    def add(
        self,
        assignee: str,
        instruction: str,
        caps: frozenset[str],
        deps: Sequence[str] = (),
        sync_group: Optional[str] = None,
    ) -> str:
        self._n += 1
        sid = f"s{self._n}"
        self.steps.append(
            Assignment(
                step_id=sid,
                assignee=assignee,
                instruction=instruction,
                required_capabilities=caps,
                depends_on=frozenset(deps),
                sync_group=sync_group,
            )
        )
        return sid


def _transport_conditions(config: ScenarioConfig) -> Optional[dict]:
    containers = sorted(o.id for o in config.objects if o.container)
    pushers = sorted(r.id for r in config.robots if "push" in r.capabilities)
    formation = sorted(r.id for r in config.robots if "formation_carry" in r.capabilities)
    if containers and pushers and len(formation) >= 2 and "catch_point" in config.locations:
        return {"container": containers[0], "pusher": pushers[0], "formation": formation}
    return None


def _relay_conditions(config: ScenarioConfig) -> Optional[dict]:
    arms = sorted(
        r.id for r in config.robots if {"pick", "place"} <= r.capabilities
    )
    carriers = sorted(
        r.id for r in config.robots if {"navigate", "carry"} <= r.capabilities
    )
    if len(arms) >= 2 and carriers:
        return {"arms": arms, "carrier": carriers[0]}
    return None


def _emit_transport(builder: _StepBuilder, config: ScenarioConfig, obj: str, target: str) -> None:
    setup = _transport_conditions(config)
    formation = setup["formation"]
    approach_ids = [
        builder.add(
            f,
            f"carry the {_spaced(setup['container'])} to the catch point",
            frozenset({"navigate", "formation_carry"}),
            sync_group="formation-approach",
        )
        for f in formation
    ]
    push_id = builder.add(
        setup["pusher"],
        f"push the {_spaced(obj)} into the {_spaced(setup['container'])}",
        frozenset({"push"}),
        deps=approach_ids,
    )
    for f in formation:
        builder.add(
            f,
            f"carry the {_spaced(setup['container'])} to {target}",
            frozenset({"navigate", "formation_carry"}),
            deps=[push_id],
            sync_group="formation-deliver",
        )


def _emit_relay(
    builder: _StepBuilder,
    config: ScenarioConfig,
    obj_id: str,
    target_label: str,
    target_pos: Optional[tuple[float, float]],
    positions: Mapping[str, tuple[float, float]],
) -> None:
    setup = _relay_conditions(config)
    obj_pos = next(
        (tuple(o.position) for o in config.objects if o.id == obj_id), (0.0, 0.0)
    )
    chef, _ = select_robot(
        config, frozenset({"pick", "place"}), near=obj_pos, positions=positions
    )
    helper, _ = select_robot(
        config,
        frozenset({"pick", "place"}),
        exclude=[chef],
        near=target_pos or obj_pos,
        positions=positions,
    )
    carrier = setup["carrier"]
    carrier_label = _robot_label(config.robot(carrier))
    s1 = builder.add(
        chef,
        f"place the {_spaced(obj_id)} on the {carrier_label}",
        frozenset({"place"}),
    )
    s2 = builder.add(
        carrier,
        f"carry the {_spaced(obj_id)} to the {target_label}",
        frozenset({"navigate", "carry"}),
        deps=[s1],
    )
    builder.add(
        helper,
        f"take the {_spaced(obj_id)} from the {carrier_label} and place it on the serving table",
        frozenset({"pick", "place"}),
        deps=[s2],
    )


def _target_of(text: str, config: ScenarioConfig) -> tuple[str, Optional[tuple[float, float]]]:
    """Extract a delivery target from '... to <target>' as (label, position)."""
    m = _COORD_RE.search(text)
    if m:
        x, y = float(m.group(1)), float(m.group(2))
        return _coords_text(x, y), (x, y)
    m = re.search(r"\bto (?:the )?([\w\s-]+?)\s*$", _light(text))
    if m:
        label = m.group(1).strip()
        key = _normalize_name(label)
        if key in config.locations:
            return f"the {label}", tuple(config.locations[key])
        return f"the {label}", None
    return "", None


def _pick_food_object(config: ScenarioConfig) -> Optional[str]:
    for key in ("plate", "food", "meal", "tray"):
        for obj in sorted(config.objects, key=lambda o: o.id):
            if key in obj.id:
                return obj.id
    return None


def _pick_bed_location(config: ScenarioConfig) -> Optional[str]:
    for key in ("bed", "patient", "patient_bed"):
        if key in config.locations:
            return key
    return None


def rule_plan(
    command: str,
    context: "DynamicContext",
    table: CapabilityTable = DEFAULT_TABLE,
    plan_id: str = "p-1",
    source_command_id: str = "",
) -> tuple[Plan, list[str]]:
    """Deterministic plan synthesis: segment the command, expand recipes,
    allocate by capabilities (nearest, then lexicographic tie-break)."""
    config = context.config
    positions = context.robot_positions()
    builder = _StepBuilder()
    infeasible: list[str] = []

    clauses = segment_command(command, config)
    light_command = _light(command)
    if not clauses and re.search(r"\b(hungry|starving)\b", light_command):
        clauses = [_Clause(text=command)]

    clause_steps: dict[int, str] = {}
    for idx, clause in enumerate(clauses):
        text = clause.text
        light = _light(text)
        canon = canonical_step(text)
        deps: list[str] = []
        if clause.chain_after is not None and clause.chain_after in clause_steps:
            deps.append(clause_steps[clause.chain_after])

        # Intent: hunger implies food delivery.
        if re.search(r"\b(hungry|starving)\b", light):
            food = _pick_food_object(config)
            bed = _pick_bed_location(config)
            if food and bed and _relay_conditions(config):
                _emit_relay(
                    builder, config, food, _spaced(bed),
                    tuple(config.locations[bed]), positions,
                )
                continue
            infeasible.append(text)
            continue

        # Search-and-rescue: scan a region for survivors; when the clause also
        # asks for deliveries, stage the carrier to act on reported positions.
        if re.search(r"\b(survivors?|victims?)\b", canon) and canon.split()[0] in (
            "find",
            "search",
            "survey",
            "locate",
        ):
            region = sorted(config.regions)[0] if config.regions else None
            rid, _tie = select_robot(config, frozenset({"fly", "camera"}))
            if region and rid:
                clause_steps[idx] = builder.add(
                    rid,
                    f"survey the {_spaced(region)} for survivors",
                    frozenset({"fly", "camera"}),
                    deps=deps,
                )
                if ("first aid" in light or "deliver" in canon) and "staging_point" in config.locations:
                    carrier, _ = select_robot(
                        config, frozenset({"navigate", "carry"}), exclude=[rid]
                    )
                    if carrier:
                        builder.add(
                            carrier,
                            "move to the staging point and await survivor reports",
                            frozenset({"navigate"}),
                        )
                continue
            infeasible.append(text)
            continue

        # Standby clause: kit deliveries wait for reported coordinates.
        if "first aid" in light and clause.assignee is None:
            rid, _tie = select_robot(config, frozenset({"navigate", "carry"}))
            if rid and "staging_point" in config.locations:
                clause_steps[idx] = builder.add(
                    rid,
                    "move to the staging point and await survivor reports",
                    frozenset({"navigate"}),
                    deps=deps,
                )
                continue

        # Unaddressed delivery: try the coordinated transport recipe, then
        # the two-arm relay, then a plain single-robot carry.
        verb = canon.split()[0] if canon.split() else ""
        if clause.assignee is None and verb in ("deliver", "carry", "transport"):
            refs = sorted(_object_refs(text, config))
            target_label, target_pos = _target_of(text, config)
            if refs:
                obj = refs[0]
                setup = _transport_conditions(config)
                container = next((o for o in config.objects if o.id == obj and o.container), None)
                if setup and container and target_label:
                    # Carrying the container itself is a plain formation move.
                    group = "formation-" + str(idx + 1)
                    for f in setup["formation"]:
                        builder.add(
                            f,
                            f"carry the {_spaced(obj)} to {target_label}",
                            frozenset({"navigate", "formation_carry"}),
                            sync_group=group,
                        )
                    continue
                if setup and target_label:
                    _emit_transport(builder, config, obj, target_label)
                    continue
                if _relay_conditions(config) and target_label:
                    _emit_relay(
                        builder, config, obj, target_label.removeprefix("the "),
                        target_pos, positions,
                    )
                    continue

        # Plain clause: allocate by inferred capabilities.
        caps = infer_required(text, table)
        if not caps:
            infeasible.append(text)
            continue
        if clause.assignee is not None:
            spec = config.robot(clause.assignee)
            if caps <= spec.capabilities:
                clause_steps[idx] = builder.add(clause.assignee, text, caps, deps=deps)
            else:
                infeasible.append(text)
            continue
        busy = [s.assignee for s in builder.steps if not s.depends_on]
        rid, tie = select_robot(config, caps, exclude=busy)
        if rid is None:
            rid, tie = select_robot(config, caps)
        if rid is None:
            infeasible.append(text)
            continue
        if tie:
            builder.notes.append(f"tie-break: chose {rid} lexicographically for {text!r}")
        clause_steps[idx] = builder.add(rid, text, caps, deps=deps)

    # Shared-object chains between otherwise independent clauses run in order.
    emitted = [builder.steps[i] for i in range(len(builder.steps))]
    for i, earlier in enumerate(emitted):
        for later in emitted[i + 1 :]:
            if later.depends_on or later.sync_group or earlier.sync_group:
                continue
            if later.assignee == earlier.assignee:
                continue
            shared = _object_refs(earlier.instruction, config) & _object_refs(
                later.instruction, config
            )
            if shared:
                idx2 = builder.steps.index(later)
                builder.steps[idx2] = Assignment(
                    step_id=later.step_id,
                    assignee=later.assignee,
                    instruction=later.instruction,
                    required_capabilities=later.required_capabilities,
                    depends_on=later.depends_on | {earlier.step_id},
                    sync_group=later.sync_group,
                )

    if infeasible:
        if context.humans:
            human = sorted(context.humans)[0]
            for text in infeasible:
                builder.add(human, text, frozenset())
                builder.notes.append(f"assigned to human {human}: {text!r}")
            if not any(not context.config.has_human(s.assignee) for s in builder.steps):
                classes = frozenset({TaskClass.INFEASIBLE})
            else:
                classes = derive_classes(builder.steps)
        else:
            builder.notes.append(f"infeasible: no assignee covers {infeasible!r}")
            return (
                Plan(
                    plan_id=plan_id,
                    classes=frozenset({TaskClass.INFEASIBLE}),
                    steps=(),
                    source_command_id=source_command_id,
                ),
                builder.notes,
            )
    else:
        classes = derive_classes(builder.steps)

    return (
        Plan(
            plan_id=plan_id,
            classes=classes,
            steps=tuple(builder.steps),
            source_command_id=source_command_id,
        ),
        builder.notes,
    )


# ------------------------------------------------------------------ reploning


def rule_replan(
    events: Sequence,
    context: "DynamicContext",
    table: CapabilityTable = DEFAULT_TABLE,
    plan_id: str = "p-2",
    source_command_id: str = "",
) -> tuple[Plan, list[str]]:
    """Recovery planning over every task not yet completed plus the steps the
    triggering events imply. Interrupted work is explicitly re-included."""
    config = context.config
    builder = _StepBuilder()
    outstanding = [t for t in context.outstanding if t.status != "completed"]
    handled: set[str] = set()  # outstanding keys already replaced by recovery
    resume_deps: dict[str, list[str]] = {}  # outstanding key -> extra deps
    replaced: dict[str, str] = {}  # old step_id -> new step_id
    dropped_sources: set[str] = set()

    def key_of(task) -> str:
        return f"{task.assignee}|{canonical_step(task.instruction)}"

    primary = events[0] if events else None
    for event in events:
        meta = event.meta
        kind = meta.get("kind", "")

        if kind == "detached" and meta.get("former_parent"):
            obj = meta["entity"]
            owner = meta["former_parent"]
            helper, _ = select_robot(
                config,
                frozenset({"pick", "place"}),
                exclude=[owner],
                near=tuple(meta.get("position", (0.0, 0.0))),
                positions=context.robot_positions(),
            )
            if helper is None:
                continue
            owner_label = _robot_label(config.robot(owner))
            needs_sit = _needs_sitting(config, helper, owner)
            s_pick = builder.add(helper, f"pick up the {_spaced(obj)}", frozenset({"pick"}))
            place_deps = [s_pick]
            if needs_sit:
                s_sit = builder.add(owner, "sit", frozenset({"sit"}))
                place_deps.append(s_sit)
            s_place = builder.add(
                helper,
                f"place the {_spaced(obj)} on the {owner_label}",
                frozenset({"place"}),
                deps=place_deps,
            )
            after_owner = s_place
            if needs_sit:
                after_owner = builder.add(owner, "stand", frozenset({"stand"}), deps=[s_place])
            for task in outstanding:
                if task.assignee == owner:
                    resume_deps.setdefault(key_of(task), []).append(after_owner)
                elif task.assignee == helper:
                    resume_deps.setdefault(key_of(task), []).append(s_place)

        elif kind == "outside_container":
            obj = meta["entity"]
            container = meta.get("container", "")
            fixer, _ = select_robot(config, frozenset({"pick", "place"}))
            instruction = f"place the {_spaced(obj)} into the {_spaced(container)}"
            if fixer is not None:
                fix_id = builder.add(fixer, instruction, frozenset({"pick", "place"}))
            elif context.humans:
                human = sorted(context.humans)[0]
                fix_id = builder.add(human, instruction, frozenset())
                builder.notes.append(f"assigned to human {human}: {instruction!r}")
            else:
                builder.notes.append(f"no assignee for recovery step: {instruction!r}")
                continue
            for task in outstanding:
                canon = canonical_step(task.instruction)
                if _spaced(obj) in canon and task.status == "interrupted":
                    handled.add(key_of(task))
                    replaced[task.step_id] = fix_id
                    builder.notes.append(
                        f"reassignment: {task.assignee} task {task.instruction!r} "
                        f"taken over via {fix_id}"
                    )

        elif kind == "appeared" and "survivor" in meta.get("entity", ""):
            x, y = meta.get("position", (0.0, 0.0))
            carrier, _ = select_robot(config, frozenset({"navigate", "place"}))
            if carrier is None:
                continue
            builder.add(
                carrier,
                f"deliver a first aid kit to the survivor at ({x:.1f}, {y:.1f})",
                frozenset({"navigate", "place"}),
            )

        elif kind == "new_command":
            sub_plan, sub_notes = rule_plan(
                meta.get("text", ""), context, table, plan_id="sub", source_command_id=""
            )
            builder.notes.extend(sub_notes)
            sub_map: dict[str, str] = {}
            for s in sub_plan.steps:
                sub_map[s.step_id] = builder.add(
                    s.assignee,
                    s.instruction,
                    s.required_capabilities,
                    deps=[sub_map[d] for d in sorted(s.depends_on) if d in sub_map],
                    sync_group=s.sync_group,
                )

        elif kind == "intent_change":
            target_task = None
            for task in outstanding:
                verb = canonical_step(task.instruction).split()[0:1]
                if verb and verb[0] in ("carry", "deliver"):
                    target_task = task
                    break
            if target_task is None:
                continue
            refs = sorted(_object_refs(target_task.instruction, config))
            obj = refs[0] if refs else ""
            origin = next(
                (k for k in ("kitchen_table", "table", "kitchen", "home") if k in config.locations),
                None,
            )
            if not obj or origin is None:
                continue
            builder.add(
                target_task.assignee,
                f"carry the {_spaced(obj)} back to the {_spaced(origin)}",
                frozenset({"navigate", "carry"}),
            )
            dropped_sources.add(target_task.source_command_id)
            for task in outstanding:
                if task.source_command_id == target_task.source_command_id:
                    handled.add(key_of(task))
                    builder.notes.append(
                        f"intent change: dropped {task.assignee} task {task.instruction!r}"
                    )

    # Re-include everything outstanding that recovery did not replace.
    id_map: dict[str, str] = dict(replaced)
    for task in sorted(outstanding, key=lambda t: t.order):
        key = key_of(task)
        if key in handled:
            continue
        deps = list(resume_deps.get(key, []))
        for old_dep in sorted(task.depends_on):
            if old_dep in id_map:
                deps.append(id_map[old_dep])
        new_id = builder.add(
            task.assignee,
            task.instruction,
            task.required_capabilities,
            deps=deps,
            sync_group=task.sync_group,
        )
        id_map[task.step_id] = new_id

    classes = derive_classes(builder.steps) if builder.steps else frozenset(
        {TaskClass.INDEPENDENT}
    )
    return (
        Plan(
            plan_id=plan_id,
            classes=classes,
            steps=tuple(builder.steps),
            source_command_id=source_command_id,
        ),
        builder.notes,
    )


def _needs_sitting(config: ScenarioConfig, placer: str, target: str) -> bool:
    from .world import sitting_requirements

    placer_spec = config.robot(placer)
    target_spec = config.robot(target)
    for keyword in sitting_requirements(placer_spec):
        if keyword in target_spec.kind or keyword == target:
            return True
    return False


# -------------------------------------------------------------------- parsing

_FENCE_RE = re.compile(r"```(?:json)?\s*(\{.*?\})\s*```", re.DOTALL)


def _first_json_object(text: str) -> Optional[str]:
    m = _FENCE_RE.search(text)
    if m:
        return m.group(1)
    start = text.find("{")
    while start != -1:
        depth = 0
        for i in range(start, len(text)):
            if text[i] == "{":
                depth += 1
            elif text[i] == "}":
                depth -= 1
                if depth == 0:
                    return text[start : i + 1]
        start = text.find("{", start + 1)
    return None


def parse_plan(raw: str) -> Plan:
    """Extract the first JSON object conforming to the plan schema from a raw
    backend reply. Unknown fields are ignored; problems raise PlanParseError
    with the detail used for re-prompting."""
    blob = _first_json_object(raw)
    if blob is None:
        raise PlanParseError("no JSON object found in reply")
    try:
        data = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise PlanParseError(f"invalid JSON: {exc}")
    if not isinstance(data, dict):
        raise PlanParseError("plan JSON root must be an object")

    missing = [key for key in ("classes", "steps") if key not in data]
    if missing:
        raise PlanParseError(f"missing required fields: {', '.join(missing)}")
    if not isinstance(data["steps"], list):
        raise PlanParseError("steps must be an array")
    for i, step in enumerate(data["steps"]):
        if not isinstance(step, dict):
            raise PlanParseError(f"steps[{i}] must be an object")
        step_missing = [k for k in ("step_id", "assignee", "instruction") if k not in step]
        if step_missing:
            raise PlanParseError(
                f"steps[{i}] missing required fields: {', '.join(step_missing)}"
            )
    try:
        classes = frozenset(TaskClass(c) for c in data["classes"])
    except ValueError as exc:
        raise PlanParseError(f"unknown task class: {exc}")

    plan = Plan(
        plan_id=str(data.get("plan_id", "p-parsed")),
        classes=classes,
        steps=tuple(
            Assignment(
                step_id=str(s["step_id"]),
                assignee=str(s["assignee"]),
                instruction=str(s["instruction"]),
                required_capabilities=frozenset(s.get("required_capabilities", ())),
                depends_on=frozenset(str(d) for d in s.get("depends_on", ())),
                sync_group=s.get("sync_group"),
            )
            for s in data["steps"]
        ),
        source_command_id=str(data.get("source_command_id", "")),
    )
    structural = validate_plan_structure(plan)
    if structural:
        raise PlanParseError("; ".join(structural))
    return plan


# ----------------------------------------------------------------- validation

_PLACE_ON_RE = re.compile(r"place .*? (?:on|onto) (?:the )?([a-z0-9_ ]+?)$")


def step_verdicts(plan: Plan, config: ScenarioConfig) -> dict[str, list[str]]:
    """Per-step executability violations; an empty list means feasible."""
    verdicts: dict[str, list[str]] = {}
    by_id = {s.step_id: s for s in plan.steps}

    def ancestors(step_id: str) -> set[str]:
        seen: set[str] = set()
        stack = [step_id]
        while stack:
            current = by_id.get(stack.pop())
            if current is None:
                continue
            for dep in current.depends_on:
                if dep not in seen:
                    seen.add(dep)
                    stack.append(dep)
        return seen

    for step in plan.steps:
        problems: list[str] = []
        if config.has_human(step.assignee):
            verdicts[step.step_id] = problems
            continue
        if not config.has_robot(step.assignee):
            problems.append(f"unknown assignee {step.assignee!r}")
            verdicts[step.step_id] = problems
            continue
        spec = config.robot(step.assignee)
        required = step.required_capabilities or infer_required(step.instruction)
        for cap in sorted(required - spec.capabilities):
            problems.append(f"missing capability {cap}")

        canon = canonical_step(step.instruction)
        m = _PLACE_ON_RE.search(canon)
        if m:
            target_words = m.group(1).strip()
            target = _find_robot_by_phrase(config, target_words)
            if target is not None and _needs_sitting(config, step.assignee, target):
                sit_steps = [
                    s
                    for s in plan.steps
                    if s.assignee == target and canonical_step(s.instruction) == "sit"
                ]
                orderable = [
                    s for s in sit_steps if step.step_id not in ancestors(s.step_id)
                ]
                if not orderable:
                    problems.append(
                        f"constraint unsatisfiable: requires a sit step for {target} "
                        "before placement"
                    )
        verdicts[step.step_id] = problems
    return verdicts


def _find_robot_by_phrase(config: ScenarioConfig, phrase: str) -> Optional[str]:
    key = _normalize_name(phrase)
    for spec in config.robots:
        if spec.id == key or key in _normalize_name(spec.kind):
            return spec.id
    for spec in config.robots:
        if _normalize_name(spec.kind) and _normalize_name(spec.kind) in key:
            return spec.id
    return None


def validate_plan(plan: Plan, config: ScenarioConfig) -> list[str]:
    out: list[str] = []
    for step_id, problems in step_verdicts(plan, config).items():
        for problem in problems:
            out.append(f"step {step_id}: {problem}")
    return out


# ------------------------------------------------------------ backend handles


def rule_route(text: str, context: "DynamicContext") -> tuple[str, str]:
    """Classify human input into a routing label, resolving references
    against chat history. Returns (label, resolved command text)."""
    low = _light(text)
    if context.help_pending and re.search(
        r"\b(done|finished|placed|handled|ok|okay|completed?)\b", low
    ):
        return "help_done", ""
    if re.search(r"don'?t want|no longer|never ?mind|changed my mind|stop it|cancel", low):
        return "intent_change", text
    if "repeat" in low:
        for entry in reversed(context.history):
            if entry.role.value == "user" and "repeat" not in entry.text.lower():
                return "new_command", entry.text
        return "information", text
    if re.search(r"\b(hungry|starving)\b", low):
        return "new_command", text
    clauses = segment_command(text, context.config)
    for clause in clauses:
        if infer_required(clause.text):
            return "new_command", text
    return "information", text


class RuleBackend:
    """Deterministic deliberation engine for reproducible runs and tests."""

    kind = "rule"
    id = "rule"

    def __init__(self, table: CapabilityTable = DEFAULT_TABLE) -> None:
        self.table = table

    def make_plan(
        self, command: str, context: "DynamicContext", static, plan_id: str,
        source_command_id: str,
    ) -> tuple[Plan, list[str]]:
        return rule_plan(command, context, self.table, plan_id, source_command_id)

    def make_replan(
        self, events: Sequence, context: "DynamicContext", static, plan_id: str,
        source_command_id: str,
    ) -> tuple[Plan, list[str]]:
        return rule_replan(events, context, self.table, plan_id, source_command_id)

    def route_input(self, text: str, context: "DynamicContext") -> tuple[str, str]:
        return rule_route(text, context)


class FixedPlanBackend:
    """Dispatches one externally supplied plan; used to execute candidate
    plans in the simulator when scoring correctness."""

    kind = "fixed"
    id = "fixed"

    def __init__(self, plan: Plan) -> None:
        self._plan = plan
        self._served = False

    def make_plan(self, command, context, static, plan_id, source_command_id):
        if self._served:
            raise PlannerFailure("fixed-plan backend already served its plan")
        self._served = True
        return self._plan, []

    def make_replan(self, events, context, static, plan_id, source_command_id):
        raise PlannerFailure("fixed-plan backend cannot replan")

    def route_input(self, text: str, context: "DynamicContext") -> tuple[str, str]:
        return rule_route(text, context)


_RELEVANT_RE = re.compile(r"\birrelevant\b|\bIRRELEVANT\b")


class RemoteBackend:
    """Chat-completion client behind the same interface as the rule backend.

    One handle per agent role keeps dialogue histories independent. The
    re-prompt-on-validation-error loop lives here so the task manager only
    ever sees valid plans or a planner failure."""

    kind = "remote"

    def __init__(
        self,
        config: BackendConfig,
        api_key: str = "",
        request_log: Optional[list] = None,
        sleep_fn=time.sleep,
        reprompt_limit: int = 3,
    ) -> None:
        self.config = config
        self.id = config.model or "remote"
        self.api_key = api_key
        self.request_log = request_log if request_log is not None else []
        self.sleep_fn = sleep_fn
        self.reprompt_limit = reprompt_limit

    def _complete(self, prompt: str) -> str:
        return complete(
            prompt,
            self.config,
            api_key=self.api_key,
            request_log=self.request_log,
            sleep_fn=self.sleep_fn,
        )

    def _plan_loop(
        self, prompt: str, context: "DynamicContext", plan_id: str, source_command_id: str
    ) -> tuple[Plan, list[str]]:
        notes: list[str] = []
        current = prompt
        for attempt in range(self.reprompt_limit):
            try:
                reply = self._complete(current)
            except BackendUnavailable as exc:
                raise PlannerFailure(str(exc))
            try:
                plan = parse_plan(reply)
            except PlanParseError as exc:
                notes.append(f"reprompt {attempt + 1}: {exc.detail}")
                current = prompt + f"\nThe previous reply was invalid: {exc.detail}\n"
                continue
            unknown = [
                s.assignee
                for s in plan.steps
                if not context.config.has_robot(s.assignee)
                and not context.config.has_human(s.assignee)
            ]
            if unknown:
                detail = f"unknown assignees: {', '.join(sorted(set(unknown)))}"
                notes.append(f"reprompt {attempt + 1}: {detail}")
                current = prompt + f"\nThe previous reply was invalid: {detail}\n"
                continue
            plan = Plan(
                plan_id=plan_id,
                classes=plan.classes,
                steps=plan.steps,
                source_command_id=source_command_id,
            )
            return plan, notes
        raise PlannerFailure(f"backend output unparseable after {self.reprompt_limit} attempts")

    def make_plan(self, command, context, static, plan_id, source_command_id):
        from .context import assemble_context

        prompt = assemble_context(static, context, context.config)
        return self._plan_loop(prompt, context, plan_id, source_command_id)

    def make_replan(self, events, context, static, plan_id, source_command_id):
        from .context import assemble_context

        prompt = assemble_context(static, context, context.config)
        return self._plan_loop(prompt, context, plan_id, source_command_id)

    def route_input(self, text: str, context: "DynamicContext") -> tuple[str, str]:
        prompt = (
            "Classify the user input into exactly one label: new_command, "
            "intent_change, help_done, information.\n"
            f"Input: {text}\nLabel:"
        )
        try:
            reply = self._complete(prompt).strip().lower()
        except BackendUnavailable:
            return rule_route(text, context)
        for label in ("new_command", "intent_change", "help_done", "information"):
            if label in reply:
                return label, text
        return rule_route(text, context)

    def compose_program(self, instruction: str, library, hints):
        from .agents import parse_program_text

        described = "\n".join(
            f"- {e.name}({', '.join(e.parameters)}): {e.description}" for e in library
        )
        prompt = (
            "Compose a program for the instruction using only these functions, "
            "one call per line.\n"
            f"{described}\nInstruction: {instruction}\nProgram:"
        )
        reply = self._complete(prompt)
        return parse_program_text(reply, instruction, library)

    def classify_event(self, description: str, own_task, team_context):
        from .domain import Relevance

        team = "\n".join(
            f"- {t.get('assignee')}: {t.get('instruction')} [{t.get('status')}]"
            for t in team_context
        )
        prompt = (
            "Given the team's active tasks, answer RELEVANT or IRRELEVANT for "
            f"the observed event.\nTasks:\n{team}\nEvent: {description}\nAnswer:"
        )
        reply = self._complete(prompt)
        if _RELEVANT_RE.search(reply):
            return Relevance.IRRELEVANT
        if re.search(r"\brelevant\b|\bRELEVANT\b", reply):
            return Relevance.RELEVANT
        raise PlanParseError(f"unparseable relevance reply: {reply[:80]!r}")


def make_backend(
    config: BackendConfig, api_key: str = "", request_log: Optional[list] = None,
    sleep_fn=time.sleep,
):
    if config.kind == "rule":
        return RuleBackend()
    return RemoteBackend(config, api_key=api_key, request_log=request_log, sleep_fn=sleep_fn)
