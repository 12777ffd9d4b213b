"""Dataset loading, the five plan-quality metrics, and the planning and
replanning evaluation protocols with report emission."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .backends import (
    BackendUnavailable,
    PlannerFailure,
    make_backend,
    step_verdicts,
)
from .context import DynamicContext, StaticRules
from .domain import GoalPredicate, Plan, ScenarioConfig, TaskClass, canonical_step
from .runtime import DEFAULT_RULES_TEXT, ScenarioRun
from .scenario import LoadedScenario, load_scenario
from .world import ScriptEffect
from . import bus as busmod
from .backends import FixedPlanBackend

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReplanExtension:
    event: str
    accepted_classes: tuple[frozenset[TaskClass], ...]
    accepted_plans: tuple[Plan, ...]
    goals: tuple[GoalPredicate, ...]


@dataclass(frozen=True)
class BenchmarkCase:
    id: str
    scenario: str
    prompt: str
    accepted_classes: tuple[frozenset[TaskClass], ...]
    ground_truth: tuple[Plan, ...]
    goals: tuple[GoalPredicate, ...] = ()
    correctness_mode: str = "executed"  # "executed" | "match"
    paraphrases: tuple[str, ...] = ()
    tick_budget: int = 200
    replan: Optional[ReplanExtension] = None

    def prompts(self) -> list[tuple[int, str]]:
        return [(0, self.prompt)] + [(i + 1, p) for i, p in enumerate(self.paraphrases)]


@dataclass
class Dataset:
    root: Path
    scenarios: dict[str, LoadedScenario]
    cases: list[BenchmarkCase]
    replan_cases: list[BenchmarkCase]

    def config(self, name: str) -> ScenarioConfig:
        return self.scenarios[name].config


def _case_from_dict(data: dict, with_replan: bool) -> BenchmarkCase:
    replan = None
    if with_replan:
        replan = ReplanExtension(
            event=data.get("event", ""),
            accepted_classes=tuple(
                frozenset(TaskClass(c) for c in group)
                for group in data.get("replan_accepted_classes", ())
            ),
            accepted_plans=tuple(Plan.from_dict(p) for p in data.get("replan_plans", ())),
            goals=tuple(GoalPredicate.from_dict(g) for g in data.get("goals", ())),
        )
    return BenchmarkCase(
        id=data["id"],
        scenario=data["scenario"],
        prompt=data["prompt"],
        accepted_classes=tuple(
            frozenset(TaskClass(c) for c in group) for group in data["accepted_classes"]
        ),
        ground_truth=tuple(Plan.from_dict(p) for p in data["ground_truth_plans"]),
        goals=tuple(GoalPredicate.from_dict(g) for g in data.get("goals", ())),
        correctness_mode=data.get("correctness_mode", "executed"),
        paraphrases=tuple(data.get("paraphrases", ())),
        tick_budget=int(data.get("tick_budget", 200)),
        replan=replan,
    )


def load_dataset(root: str | Path) -> Dataset:
    """A dataset directory holds scenarios/*.json plus cases.json and
    optionally replan_cases.json."""
    root = Path(root)
    scenarios: dict[str, LoadedScenario] = {}
    for path in sorted((root / "scenarios").glob("*.json")):
        loaded = load_scenario(path)
        scenarios[loaded.config.name] = loaded
    with open(root / "cases.json", "r", encoding="utf-8") as f:
        cases = [_case_from_dict(c, with_replan=False) for c in json.load(f)["cases"]]
    replan_cases: list[BenchmarkCase] = []
    replan_path = root / "replan_cases.json"
    if replan_path.exists():
        with open(replan_path, "r", encoding="utf-8") as f:
            replan_cases = [_case_from_dict(c, with_replan=True) for c in json.load(f)["cases"]]
    for case in cases + replan_cases:
        if case.scenario not in scenarios:
            raise ValueError(f"case {case.id} references unknown scenario {case.scenario!r}")
    return Dataset(root=root, scenarios=scenarios, cases=cases, replan_cases=replan_cases)


# ---------------------------------------------------------------------- scores


def step_pairs(plan: Plan) -> frozenset[tuple[str, str]]:
    return frozenset((s.assignee, canonical_step(s.instruction)) for s in plan.steps)


def score_ta(plan: Plan, case: BenchmarkCase, config: ScenarioConfig) -> int:
    """1 iff some accepted plan is fully covered: every ground-truth subtask
    appears (canonical match) under a capable assignee, and the assignee
    multiset matches the accepted plan's."""
    produced = {canonical_step(s.instruction): s for s in plan.steps}
    for truth in case.ground_truth:
        ok = True
        for g in truth.steps:
            candidate = produced.get(canonical_step(g.instruction))
            if candidate is None:
                ok = False
                break
            if config.has_human(candidate.assignee):
                continue
            if not config.has_robot(candidate.assignee):
                ok = False
                break
            spec = config.robot(candidate.assignee)
            if not g.required_capabilities <= spec.capabilities:
                ok = False
                break
        if not ok:
            continue
        if Counter(s.assignee for s in plan.steps) == Counter(s.assignee for s in truth.steps):
            return 1
    return 0


def score_tc(plan: Plan, case: BenchmarkCase) -> int:
    accepted = case.accepted_classes
    return 1 if any(plan.classes == group for group in accepted) else 0


def score_iou(plan: Plan, case: BenchmarkCase) -> float:
    """Best overlap of (assignee, canonical action) pairs over accepted plans."""
    mine = step_pairs(plan)
    best = 0.0
    for truth in case.ground_truth:
        theirs = step_pairs(truth)
        union = mine | theirs
        if not union:
            continue
        best = max(best, len(mine & theirs) / len(union))
    return best


def score_exec(plan: Plan, config: ScenarioConfig) -> float:
    if not plan.steps:
        log.warning("executability of an empty plan scored as 0")
        return 0.0
    verdicts = step_verdicts(plan, config)
    feasible = sum(1 for problems in verdicts.values() if not problems)
    return feasible / len(plan.steps)


def execute_plan(
    plan: Plan,
    scenario: LoadedScenario,
    prompt: str,
    goals: Sequence[GoalPredicate],
    tick_budget: int,
) -> tuple[int, str]:
    """Dispatch a candidate plan in a scriptless copy of the scenario world
    and check the case goals within the tick budget."""
    clean = LoadedScenario(config=scenario.config, script=())
    run = ScenarioRun(
        clean,
        backend=FixedPlanBackend(plan),
        extra_script=[ScriptEffect(tick=1, effect="utterance", source="user", text=prompt)],
    )
    result = run.run(tick_budget=tick_budget, goals=list(goals))
    if result.outcome == "goals_satisfied":
        return 1, "goals satisfied"
    return 0, f"outcome {result.outcome}, goals {result.goals}"


def score_correctness(
    plan: Plan,
    case: BenchmarkCase,
    scenario: LoadedScenario,
    mode: Optional[str] = None,
    prompt: Optional[str] = None,
) -> tuple[int, str]:
    mode = mode or case.correctness_mode
    if mode == "executed":
        return execute_plan(
            plan, scenario, prompt or case.prompt, case.goals, case.tick_budget
        )
    # MATCH: exact step overlap with an accepted plan plus a correct class set.
    value = 1 if score_iou(plan, case) == 1.0 and score_tc(plan, case) == 1 else 0
    return value, "match mode"


# --------------------------------------------------------------------- reports


@dataclass
class ScoreRow:
    case_id: str
    variant: int
    iteration: int
    backend: str
    status: str = "scored"  # scored | skipped | gated
    ta: Optional[int] = None
    tc: Optional[int] = None
    iou: Optional[float] = None
    exec: Optional[float] = None
    correctness: Optional[int] = None
    mode: str = ""
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "variant": self.variant,
            "iteration": self.iteration,
            "backend": self.backend,
            "status": self.status,
            "TA": self.ta,
            "TC": self.tc,
            "IoU": self.iou,
            "Exec": self.exec,
            "Correctness": self.correctness,
            "mode": self.mode,
            "detail": self.detail,
        }


_METRICS = ("TA", "TC", "IoU", "Exec", "Correctness")


@dataclass
class Report:
    kind: str
    backend: str
    iterations: int
    rows: list[ScoreRow] = field(default_factory=list)

    def scored_rows(self) -> list[ScoreRow]:
        return [r for r in self.rows if r.status == "scored"]

    def means(self, rows: Optional[list[ScoreRow]] = None) -> dict[str, Optional[float]]:
        rows = self.scored_rows() if rows is None else [r for r in rows if r.status == "scored"]
        out: dict[str, Optional[float]] = {}
        values = {
            "TA": [r.ta for r in rows],
            "TC": [r.tc for r in rows],
            "IoU": [r.iou for r in rows],
            "Exec": [r.exec for r in rows],
            "Correctness": [r.correctness for r in rows],
        }
        for name, vals in values.items():
            vals = [v for v in vals if v is not None]
            out[name] = sum(vals) / len(vals) if vals else None
        return out

    def per_scenario(self) -> dict[str, dict[str, Optional[float]]]:
        groups: dict[str, list[ScoreRow]] = {}
        for row in self.rows:
            groups.setdefault(row.case_id.split(".")[0], []).append(row)
        return {name: self.means(rows) for name, rows in sorted(groups.items())}

    def per_case(self) -> dict[str, dict[str, Optional[float]]]:
        """Paraphrase variants of one prompt group under their case id."""
        groups: dict[str, list[ScoreRow]] = {}
        for row in self.rows:
            groups.setdefault(row.case_id, []).append(row)
        return {name: self.means(rows) for name, rows in sorted(groups.items())}

    def counts(self) -> dict[str, int]:
        c = Counter(r.status for r in self.rows)
        return {"attempted": len(self.rows), "scored": c.get("scored", 0),
                "skipped": c.get("skipped", 0), "gated": c.get("gated", 0)}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "backend": self.backend,
            "iterations": self.iterations,
            "rows": [r.to_dict() for r in self.rows],
            "aggregates": {
                "overall": self.means(),
                "per_scenario": self.per_scenario(),
                "per_case": self.per_case(),
                "counts": self.counts(),
            },
        }

    def render_table(self) -> str:
        lines = []
        header = f"{'case':28s} {'var':>3s} {'it':>2s} {'TA':>4s} {'TC':>4s} {'IoU':>5s} {'Exec':>5s} {'Corr':>4s}  status"
        lines.append(header)
        lines.append("-" * len(header))

        def fmt(v, width, decimals=2):
            if v is None:
                return " " * (width - 1) + "-"
            return f"{v:>{width}.{decimals}f}" if isinstance(v, float) else f"{v:>{width}d}"

        for r in self.rows:
            lines.append(
                f"{r.case_id:28s} {r.variant:>3d} {r.iteration:>2d} "
                f"{fmt(r.ta, 4)} {fmt(r.tc, 4)} {fmt(r.iou, 5)} {fmt(r.exec, 5)} "
                f"{fmt(r.correctness, 4)}  {r.status}"
            )
        lines.append("-" * len(header))
        means = self.means()
        lines.append(
            "means: "
            + "  ".join(
                f"{m}={means[m]:.3f}" if means[m] is not None else f"{m}=-" for m in _METRICS
            )
        )
        counts = self.counts()
        lines.append(
            f"rows: attempted={counts['attempted']} scored={counts['scored']} "
            f"skipped={counts['skipped']} gated={counts['gated']}"
        )
        return "\n".join(lines)


def _static_rules(dataset: Dataset) -> StaticRules:
    path = dataset.root / "static_rules.txt"
    if path.exists():
        return StaticRules.load(str(path))
    return StaticRules(DEFAULT_RULES_TEXT)


def _obtain_plan(backend, prompt: str, config: ScenarioConfig, static: StaticRules) -> Plan:
    context = DynamicContext(config=config, humans=config.humans)
    plan, _notes = backend.make_plan(prompt, context, static, "p-bench", "c-bench")
    return plan


def run_benchmark(dataset: Dataset, backend, iterations: int = 5) -> Report:
    """Score every case (and paraphrase variant) `iterations` times.

    `backend` is a BackendConfig or an already constructed backend handle.
    Backend-unavailable rows are marked skipped, never zero."""
    handle = backend if hasattr(backend, "make_plan") else make_backend(backend)
    static = _static_rules(dataset)
    report = Report(kind="benchmark", backend=getattr(handle, "id", "unknown"), iterations=iterations)
    for case in dataset.cases:
        scenario = dataset.scenarios[case.scenario]
        for variant, prompt in case.prompts():
            for iteration in range(1, iterations + 1):
                row = ScoreRow(
                    case_id=case.id, variant=variant, iteration=iteration,
                    backend=report.backend, mode=case.correctness_mode,
                )
                try:
                    plan = _obtain_plan(handle, prompt, scenario.config, static)
                except (BackendUnavailable, PlannerFailure) as exc:
                    row.status = "skipped"
                    row.detail = str(exc)
                    report.rows.append(row)
                    continue
                row.ta = score_ta(plan, case, scenario.config)
                row.tc = score_tc(plan, case)
                row.iou = score_iou(plan, case)
                row.exec = score_exec(plan, scenario.config)
                row.correctness, row.detail = score_correctness(
                    plan, case, scenario, prompt=prompt
                )
                report.rows.append(row)
    return report


def run_replan_benchmark(dataset: Dataset, backend, iterations: int = 5) -> Report:
    """Two-phase protocol: the post-event plan is scored only when the initial
    plan is correct and the triggering event was classified relevant; rows
    failing the gate are reported GATED and excluded from means."""
    if hasattr(backend, "make_plan"):
        backend_config = None
        backend_id = getattr(backend, "id", "unknown")
    else:
        backend_config = backend
        backend_id = backend.model if backend.kind == "remote" else "rule"
    report = Report(kind="replan_benchmark", backend=backend_id, iterations=iterations)
    for case in dataset.replan_cases:
        scenario = dataset.scenarios[case.scenario]
        for iteration in range(1, iterations + 1):
            row = ScoreRow(
                case_id=case.id, variant=0, iteration=iteration,
                backend=report.backend, mode="executed",
            )
            handle = backend if backend_config is None else make_backend(backend_config)
            run = ScenarioRun(scenario, backend=handle)
            try:
                result = run.run(tick_budget=case.tick_budget)
            except (BackendUnavailable, PlannerFailure) as exc:
                row.status = "skipped"
                row.detail = str(exc)
                report.rows.append(row)
                continue
            plans = run.manager.plans_posted
            if not plans:
                row.status = "skipped"
                row.detail = "no plan posted"
                report.rows.append(row)
                continue
            initial = plans[0]
            initial_ok = (
                score_iou(initial, case) == 1.0 and score_tc(initial, case) == 1
            )
            event_relevant = any(
                e.kind is busmod.Kind.EVENT_REPORT for e in run.bus.log()
            ) or any(
                d.get("kind") == "route" and d.get("label") == "intent_change"
                for d in run.manager.decision_log
            )
            if not initial_ok or not event_relevant or len(plans) < 2:
                row.status = "gated"
                row.detail = (
                    f"initial_ok={initial_ok} event_relevant={event_relevant} "
                    f"plans={len(plans)}"
                )
                report.rows.append(row)
                continue
            replanned = plans[1]
            replan_case = BenchmarkCase(
                id=case.id,
                scenario=case.scenario,
                prompt=case.prompt,
                accepted_classes=case.replan.accepted_classes,
                ground_truth=case.replan.accepted_plans,
                goals=case.replan.goals,
                tick_budget=case.tick_budget,
            )
            row.ta = score_ta(replanned, replan_case, scenario.config)
            row.tc = score_tc(replanned, replan_case)
            row.iou = score_iou(replanned, replan_case)
            row.exec = score_exec(replanned, scenario.config)
            goal_flags = run.world.goal_satisfied(list(case.replan.goals))
            row.correctness = 1 if goal_flags and all(goal_flags) else 0
            row.detail = f"run outcome {result.outcome}"
            report.rows.append(row)
    return report


def write_report(report: Report, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / f"{report.kind}.json"
    text_path = out / f"{report.kind}.txt"
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(text_path, "w", encoding="utf-8") as f:
        f.write(report.render_table() + "\n")
    return json_path, text_path
