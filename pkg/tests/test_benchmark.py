import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetmind.backends import BackendConfig
from fleetmind.benchmark import (
    BenchmarkCase,
    Dataset,
    ReplanExtension,
    load_dataset,
    run_benchmark,
    run_replan_benchmark,
    score_correctness,
    score_exec,
    score_iou,
    score_ta,
    score_tc,
    step_pairs,
    write_report,
)
from fleetmind.domain import Assignment, Plan, TaskClass, canonical_step


def plan_of(steps, classes=(TaskClass.INDEPENDENT,), plan_id="p"):
    return Plan(plan_id=plan_id, classes=frozenset(classes), steps=tuple(steps))


def case_of(ground_truth, accepted_classes, scenario="drop_recovery", **kwargs):
    return BenchmarkCase(
        id=kwargs.pop("id", "test.case"),
        scenario=scenario,
        prompt=kwargs.pop("prompt", "do the thing"),
        accepted_classes=tuple(frozenset(c) for c in accepted_classes),
        ground_truth=tuple(ground_truth),
        **kwargs,
    )


@pytest.fixture(scope="module")
def dataset(data_dir=None):
    import tests.conftest as c

    return load_dataset(c.DATA_DIR)


ORACLE_4 = plan_of(
    [
        Assignment("g1", "waffle", "pick up the green object",
                   required_capabilities=frozenset({"pick"})),
        Assignment("g2", "go2", "sit", required_capabilities=frozenset({"sit"})),
        Assignment("g3", "waffle", "place the green object on the quadruped",
                   required_capabilities=frozenset({"place"}),
                   depends_on=frozenset({"g1", "g2"})),
        Assignment("g4", "go2", "stand", required_capabilities=frozenset({"stand"}),
                   depends_on=frozenset({"g3"})),
    ],
    classes=(TaskClass.SEQUENTIAL,),
)


class TestScoreTA:
    def test_oracle_vs_itself(self, dataset):
        case = case_of([ORACLE_4], [["sequential"]])
        assert score_ta(ORACLE_4, case, dataset.config("drop_recovery")) == 1

    def test_carry_assigned_to_armless_robot(self, dataset):
        case = case_of([ORACLE_4], [["sequential"]])
        broken = plan_of(
            [
                Assignment("s1", "burger", "pick up the green object"),
                Assignment("s2", "go2", "sit"),
                Assignment("s3", "burger", "place the green object on the quadruped"),
                Assignment("s4", "go2", "stand"),
            ],
            classes=(TaskClass.SEQUENTIAL,),
        )
        assert score_ta(broken, case, dataset.config("drop_recovery")) == 0

    def test_alternate_accepted_plan(self, dataset):
        alternate = plan_of(
            [Assignment("a1", "burger", "move to (1, 1)",
                        required_capabilities=frozenset({"navigate"}))],
        )
        case = case_of([ORACLE_4, alternate], [["sequential"], ["independent"]])
        produced = plan_of([Assignment("s1", "burger", "move to (1, 1)")])
        assert score_ta(produced, case, dataset.config("drop_recovery")) == 1


class TestScoreTC:
    def test_transport_class_pair(self):
        case = case_of([ORACLE_4], [["sequential", "coordinated"]])
        plan = plan_of([], classes=(TaskClass.SEQUENTIAL, TaskClass.COORDINATED))
        assert score_tc(plan, case) == 1

    def test_membership_in_set_of_sets(self):
        case = case_of([ORACLE_4], [["independent"], ["sequential"]])
        assert score_tc(plan_of([], classes=(TaskClass.INDEPENDENT,)), case) == 1
        assert score_tc(plan_of([], classes=(TaskClass.SEQUENTIAL,)), case) == 1

    def test_infeasible_for_feasible_case(self):
        case = case_of([ORACLE_4], [["sequential"]])
        assert score_tc(plan_of([], classes=(TaskClass.INFEASIBLE,)), case) == 0


class TestScoreIoU:
    def test_identical_plan(self):
        case = case_of([ORACLE_4], [["sequential"]])
        assert score_iou(ORACLE_4, case) == 1.0

    def test_disjoint_step_sets(self):
        case = case_of([ORACLE_4], [["sequential"]])
        other = plan_of([Assignment("x", "drone", "survey the area")])
        assert score_iou(other, case) == 0.0

    def test_one_step_reassigned_gives_three_fifths(self):
        # Independent oracle: brute-force set computation over the pairs.
        reassigned = plan_of(
            [
                Assignment("s1", "waffle", "pick up the green object"),
                Assignment("s2", "go2", "sit"),
                Assignment("s3", "burger", "place the green object on the quadruped"),
                Assignment("s4", "go2", "stand"),
            ],
            classes=(TaskClass.SEQUENTIAL,),
        )
        mine = {(s.assignee, canonical_step(s.instruction)) for s in reassigned.steps}
        truth = {(s.assignee, canonical_step(s.instruction)) for s in ORACLE_4.steps}
        expected = len(mine & truth) / len(mine | truth)
        assert expected == pytest.approx(0.6)
        case = case_of([ORACLE_4], [["sequential"]])
        assert score_iou(reassigned, case) == pytest.approx(0.6)

    @staticmethod
    def random_plan(draw_ids):
        steps = [
            Assignment(f"s{i}", who, what)
            for i, (who, what) in enumerate(draw_ids)
        ]
        return plan_of(steps)

    @given(
        a=st.lists(st.tuples(st.sampled_from(["r1", "r2", "r3"]),
                             st.sampled_from(["go", "sit", "push", "lift"])),
                   min_size=1, max_size=6, unique=True),
        b=st.lists(st.tuples(st.sampled_from(["r1", "r2", "r3"]),
                             st.sampled_from(["go", "sit", "push", "lift"])),
                   min_size=1, max_size=6, unique=True),
    )
    @settings(max_examples=200)
    def test_bounded_symmetric_and_self_unit(self, a, b):
        plan_a, plan_b = self.random_plan(a), self.random_plan(b)
        case_b = case_of([plan_b], [["independent"]])
        case_a = case_of([plan_a], [["independent"]])
        value = score_iou(plan_a, case_b)
        assert 0.0 <= value <= 1.0
        assert value == pytest.approx(score_iou(plan_b, case_a))  # symmetric
        assert score_iou(plan_a, case_a) == 1.0

    @given(
        a=st.lists(st.tuples(st.sampled_from(["r1", "r2"]),
                             st.sampled_from(["go", "sit", "push", "lift", "scan"])),
                   min_size=2, max_size=6, unique=True),
    )
    @settings(max_examples=100)
    def test_monotone_nonincreasing_as_intersection_shrinks(self, a):
        full = self.random_plan(a)
        case = case_of([full], [["independent"]])
        previous = score_iou(full, case)
        for keep in range(len(a) - 1, 0, -1):
            smaller = self.random_plan(a[:keep])
            value = score_iou(smaller, case)
            assert value <= previous + 1e-12
            previous = value


class TestScoreExec:
    def test_oracle_plan_fully_feasible(self, dataset):
        case = next(c for c in dataset.cases if c.id == "transport.t1")
        truth = case.ground_truth[0]
        assert score_exec(truth, dataset.config("transport")) == 1.0

    def test_one_infeasible_step_of_four(self, dataset):
        plan = plan_of(
            [
                Assignment("s1", "waffle", "pick up the green object",
                           required_capabilities=frozenset({"pick"})),
                Assignment("s2", "go2", "sit", required_capabilities=frozenset({"sit"})),
                Assignment("s3", "burger", "pick up the bottle",
                           required_capabilities=frozenset({"pick"})),
                Assignment("s4", "go2", "stand", required_capabilities=frozenset({"stand"})),
            ]
        )
        assert score_exec(plan, dataset.config("drop_recovery")) == pytest.approx(0.75)

    def test_all_steps_infeasible(self, dataset):
        plan = plan_of(
            [
                Assignment("s1", "burger", "fly up", required_capabilities=frozenset({"fly"})),
                Assignment("s2", "burger", "sit", required_capabilities=frozenset({"sit"})),
            ]
        )
        assert score_exec(plan, dataset.config("drop_recovery")) == 0.0

    def test_empty_plan_scores_zero_with_warning(self, dataset, caplog):
        import logging

        with caplog.at_level(logging.WARNING):
            assert score_exec(plan_of([]), dataset.config("drop_recovery")) == 0.0
        assert any("empty plan" in r.message for r in caplog.records)


class TestScoreCorrectness:
    def test_oracle_transport_executed(self, dataset):
        case = next(c for c in dataset.cases if c.id == "transport.t1")
        scenario = dataset.scenarios["transport"]
        value, _ = score_correctness(case.ground_truth[0], case, scenario)
        assert value == 1

    def test_missing_sit_step_fails_executed(self, dataset):
        case = next(c for c in dataset.cases if c.id == "drop_recovery.t1")
        scenario = dataset.scenarios["drop_recovery"]
        # waffle must hand the object over, but nobody makes the quadruped sit
        bad = plan_of(
            [
                Assignment("s1", "go2", "carry the green object to (3, 0)",
                           required_capabilities=frozenset({"navigate", "carry"})),
                Assignment("s2", "waffle", "place the green object on the quadruped",
                           required_capabilities=frozenset({"place"})),
            ],
            classes=(TaskClass.INDEPENDENT,),
        )
        value, detail = score_correctness(bad, case, scenario)
        assert value == 0

    def test_oracle_match_mode(self, dataset):
        case = next(c for c in dataset.cases if c.id == "human_assist.t1")
        scenario = dataset.scenarios["human_assist"]
        value, _ = score_correctness(case.ground_truth[0], case, scenario, mode="match")
        assert value == 1


class TestRunBenchmark:
    def test_rule_backend_all_ones(self, dataset, rule_backend):
        report = run_benchmark(dataset, rule_backend, iterations=1)
        means = report.means()
        for metric, value in means.items():
            assert value == 1.0, (metric, value)
        assert report.counts()["skipped"] == 0

    def test_iterations_one_gives_one_row_per_case(self, dataset, rule_backend):
        plain = Dataset(
            root=dataset.root,
            scenarios=dataset.scenarios,
            cases=[c for c in dataset.cases if not c.paraphrases],
            replan_cases=[],
        )
        report = run_benchmark(plain, rule_backend, iterations=1)
        assert len(report.rows) == len(plain.cases)

    def test_report_totals_match_counts(self, dataset, rule_backend, tmp_path):
        report = run_benchmark(dataset, rule_backend, iterations=1)
        counts = report.counts()
        assert counts["scored"] + counts["skipped"] + counts["gated"] == counts["attempted"]
        json_path, text_path = write_report(report, tmp_path)
        data = json.loads(json_path.read_text())
        assert len(data["rows"]) == counts["attempted"]
        assert "means" in text_path.read_text()


class _SequenceHandler(BaseHTTPRequestHandler):
    replies = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        self.rfile.read(length)
        content = _SequenceHandler.replies.pop(0)
        payload = json.dumps({"choices": [{"message": {"content": content}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


class TestCannedBackend:
    def test_one_bad_plan_of_fifteen(self, dataset):
        """Canned chat-style outputs: 3 match-mode cases x 5 iterations with
        exactly one wrong plan gives a correctness mean of 14/15."""
        simple_truth = plan_of(
            [Assignment("s1", "burger", "move to (1, 1)",
                        required_capabilities=frozenset({"navigate"}))]
        )
        cases = [
            case_of([simple_truth], [["independent"]], id=f"canned.t{i}",
                    prompt="Burger, move to (1, 1).", correctness_mode="match")
            for i in range(3)
        ]
        mini = Dataset(root=dataset.root, scenarios=dataset.scenarios,
                       cases=cases, replan_cases=[])
        good = json.dumps({
            "plan_id": "p", "classes": ["independent"],
            "steps": [{"step_id": "s1", "assignee": "burger",
                       "instruction": "move to (1, 1)"}],
        })
        bad = json.dumps({
            "plan_id": "p", "classes": ["independent"],
            "steps": [{"step_id": "s1", "assignee": "waffle",
                       "instruction": "move to (9, 9)"}],
        })
        replies = [good] * 15
        replies[7] = bad
        _SequenceHandler.replies = list(replies)
        server = HTTPServer(("127.0.0.1", 0), _SequenceHandler)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        try:
            config = BackendConfig(
                kind="remote",
                endpoint=f"http://127.0.0.1:{server.server_port}/v1/chat/completions",
                model="canned", timeout=5.0, max_retries=0,
            )
            report = run_benchmark(mini, config, iterations=5)
        finally:
            server.shutdown()
        correctness = [r.correctness for r in report.scored_rows()]
        assert len(correctness) == 15
        assert sum(correctness) == 14
        assert report.means()["Correctness"] == pytest.approx(14 / 15)


class TestReplanBenchmark:
    def test_rule_backend_correctness_one(self, dataset, rule_backend):
        report = run_replan_benchmark(dataset, rule_backend, iterations=1)
        assert report.counts()["gated"] == 0
        assert report.means()["Correctness"] == 1.0

    def test_wrong_initial_plan_is_gated(self, dataset, rule_backend):
        base = dataset.replan_cases[0]
        wrong_truth = plan_of([Assignment("z1", "burger", "move to (9, 9)")])
        gated_case = BenchmarkCase(
            id="gated.initial", scenario=base.scenario, prompt=base.prompt,
            accepted_classes=base.accepted_classes, ground_truth=(wrong_truth,),
            tick_budget=base.tick_budget, replan=base.replan,
        )
        mini = Dataset(root=dataset.root, scenarios=dataset.scenarios,
                       cases=[], replan_cases=[gated_case])
        report = run_replan_benchmark(mini, rule_backend, iterations=1)
        assert [r.status for r in report.rows] == ["gated"]

    def test_irrelevant_event_is_gated(self, dataset, rule_backend):
        base = next(c for c in dataset.cases if c.id == "irrelevant_event.t2")
        # the scripted red object is classified irrelevant, so no replan happens
        case = BenchmarkCase(
            id="gated.irrelevant", scenario="irrelevant_event",
            prompt="Waffle, approach the bottle. Go2, carry the green object to (3, 0).",
            accepted_classes=(frozenset({TaskClass.INDEPENDENT}),),
            ground_truth=(plan_of(
                [
                    Assignment("g1", "waffle", "approach the bottle",
                               required_capabilities=frozenset({"navigate"})),
                    Assignment("g2", "go2", "carry the green object to (3, 0)",
                               required_capabilities=frozenset({"navigate", "carry"})),
                ],
            ),),
            tick_budget=120,
            replan=ReplanExtension(event="a red object appeared", accepted_classes=(),
                                   accepted_plans=(), goals=()),
        )
        mini = Dataset(root=dataset.root, scenarios=dataset.scenarios,
                       cases=[], replan_cases=[case])
        report = run_replan_benchmark(mini, rule_backend, iterations=1)
        assert [r.status for r in report.rows] == ["gated"]
        assert "event_relevant=False" in report.rows[0].detail
