"""Operator command line: headless scenario runs, benchmark evaluation, and
the live gateway. The mode is chosen by flags: --dataset runs the benchmark,
--serve starts the gateway, otherwise --scenario runs headless."""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from .backends import RuleBackend, load_backend_config, make_backend
from .benchmark import load_dataset, run_benchmark, run_replan_benchmark, write_report
from .context import StaticRules
from .runtime import DEFAULT_RULES_TEXT, ScenarioRun
from .scenario import ScenarioError, load_scenario
from .world import load_script


def bundled_data_dir() -> Path:
    return Path(str(resources.files("fleetmind") / "data"))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fleetmind",
        description="Run multi-robot scenarios, benchmarks, or the live gateway.",
    )
    parser.add_argument("--scenario", help="scenario JSON file")
    parser.add_argument("--script", help="override the scenario's event script (JSON list)")
    parser.add_argument("--backend", default="rule",
                        help="'rule' or a backend config file (JSON/TOML)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--ticks", type=int, help="tick budget override")
    parser.add_argument("--dataset", help="dataset directory; runs the benchmark")
    parser.add_argument("--iterations", type=int, default=5)
    parser.add_argument("--replan", action="store_true",
                        help="also run the replanning benchmark")
    parser.add_argument("--serve", metavar="ADDR",
                        help="serve the gateway on host:port")
    parser.add_argument("--tps", type=float, default=20.0,
                        help="wall-clock ticks per second for --serve")
    parser.add_argument("--out", default="runs", help="output directory for logs/reports")
    parser.add_argument("--rules", help="static rules text file")
    parser.add_argument("--auto-confirm-help", type=int, metavar="N",
                        help="scripted human confirms help requests after N ticks")
    parser.add_argument("--floor", type=float, default=0.0,
                        help="benchmark fails if any metric mean falls below this")
    return parser


def _load_backend(arg: str):
    if arg == "rule":
        return RuleBackend()
    config = load_backend_config(arg)
    import os

    api_key = os.environ.get(config.api_key_env, "") if config.api_key_env else ""
    return make_backend(config, api_key=api_key)


def _load_rules(arg) -> StaticRules:
    if arg:
        return StaticRules.load(arg)
    bundled = bundled_data_dir() / "static_rules.txt"
    if bundled.exists():
        return StaticRules.load(str(bundled))
    return StaticRules(DEFAULT_RULES_TEXT)


def cli_run(args) -> int:
    try:
        loaded = load_scenario(args.scenario)
    except ScenarioError as exc:
        for violation in exc.violations:
            print(f"scenario validation: {violation}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"cannot load scenario: {exc}", file=sys.stderr)
        return 2
    if args.script:
        try:
            with open(args.script, "r", encoding="utf-8") as f:
                script = load_script(json.load(f))
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            print(f"cannot load script: {exc}", file=sys.stderr)
            return 2
        from .scenario import LoadedScenario

        loaded = LoadedScenario(config=loaded.config, script=script)
    try:
        backend = _load_backend(args.backend)
    except (OSError, ValueError) as exc:
        print(f"cannot load backend config: {exc}", file=sys.stderr)
        return 2

    run = ScenarioRun(
        loaded,
        backend=backend,
        seed=args.seed,
        log_dir=Path(args.out) / loaded.config.name,
        static_rules=_load_rules(args.rules),
        auto_help_ticks=args.auto_confirm_help,
    )
    result = run.run(tick_budget=args.ticks)
    print(f"outcome: {result.outcome} after {result.ticks} ticks")
    for goal, ok in zip(loaded.config.goals, result.goals):
        print(f"goal {goal.to_dict()}: {'satisfied' if ok else 'NOT satisfied'}")
    print(f"logs: {result.log_dir}")
    if result.outcome == "goals_satisfied":
        return 0
    if result.outcome in ("infeasible", "help_pending"):
        return 0
    return 1


def cli_bench(args) -> int:
    dataset_dir = Path(args.dataset)
    if not dataset_dir.exists():
        print(f"dataset directory not found: {dataset_dir}", file=sys.stderr)
        return 2
    try:
        dataset = load_dataset(dataset_dir)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"cannot load dataset: {exc}", file=sys.stderr)
        return 2
    try:
        backend = _load_backend(args.backend)
    except (OSError, ValueError) as exc:
        print(f"cannot load backend config: {exc}", file=sys.stderr)
        return 2

    report = run_benchmark(dataset, backend, iterations=args.iterations)
    json_path, _ = write_report(report, args.out)
    print(report.render_table())
    print(f"report: {json_path}")
    exit_code = 0
    means = report.means()
    if any(v is not None and v < args.floor for v in means.values()):
        print(f"FAIL: a metric mean fell below the floor {args.floor}", file=sys.stderr)
        exit_code = 1
    if args.replan:
        replan_report = run_replan_benchmark(dataset, backend, iterations=args.iterations)
        replan_json, _ = write_report(replan_report, args.out)
        print(replan_report.render_table())
        print(f"replan report: {replan_json}")
        replan_means = replan_report.means()
        if any(v is not None and v < args.floor for v in replan_means.values()):
            print(f"FAIL: a replan metric mean fell below the floor {args.floor}",
                  file=sys.stderr)
            exit_code = 1
    return exit_code


def cli_serve(args) -> int:
    if not args.scenario:
        print("--serve requires --scenario", file=sys.stderr)
        return 2
    try:
        loaded = load_scenario(args.scenario)
        backend = _load_backend(args.backend)
    except (OSError, ValueError, ScenarioError, json.JSONDecodeError) as exc:
        print(f"cannot start gateway: {exc}", file=sys.stderr)
        return 2
    from .server import serve

    run = ScenarioRun(
        loaded,
        backend=backend,
        seed=args.seed,
        static_rules=_load_rules(args.rules),
        auto_help_ticks=args.auto_confirm_help,
    )
    serve(run, args.serve, tps=args.tps)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.dataset:
        return cli_bench(args)
    if args.serve:
        return cli_serve(args)
    if not args.scenario:
        _build_parser().print_usage(sys.stderr)
        print("one of --scenario, --dataset, or --serve is required", file=sys.stderr)
        return 2
    return cli_run(args)


if __name__ == "__main__":
    sys.exit(main())
