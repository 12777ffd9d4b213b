import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fleetmind.domain import (
    Assignment,
    ChatHistory,
    ChatRole,
    IllegalTransition,
    LEGAL_TRANSITIONS,
    Plan,
    Pose,
    RobotSpec,
    ScenarioConfig,
    TaskClass,
    TaskRecord,
    TaskStatus,
    canonical_step,
    derive_classes,
    find_dependency_cycle,
    validate_plan_structure,
    validate_scenario,
)


def _robot(rid, caps=("navigate",)):
    return RobotSpec(id=rid, kind="bot", capabilities=frozenset(caps), initial_pose=Pose(0, 0))


class TestValidateScenario:
    def test_duplicate_robot_ids(self):
        config = ScenarioConfig(name="x", robots=(_robot("waffle"), _robot("waffle")))
        violations = validate_scenario(config)
        assert any("duplicate id 'waffle'" in v for v in violations)

    def test_empty_capabilities(self):
        config = ScenarioConfig(name="x", robots=(
            RobotSpec(id="a", kind="bot", capabilities=frozenset()),
        ))
        assert any("empty capabilities" in v for v in validate_scenario(config))

    def test_bundled_transport_scenario_is_clean(self, transport_scenario):
        assert validate_scenario(transport_scenario.config) == []

    def test_nonfinite_location(self):
        config = ScenarioConfig(
            name="x", robots=(_robot("a"),), locations={"goal": (float("nan"), 0.0)}
        )
        assert any("location 'goal'" in v for v in validate_scenario(config))


class TestCanonicalStep:
    def test_lowercases_and_strips_punctuation(self):
        assert canonical_step("Pick up the green object.") == "pick up the green object"

    def test_synonym_table(self):
        assert canonical_step("Grab the green object") == "pick the green object"

    @given(st.text(max_size=80))
    def test_idempotent(self, text):
        once = canonical_step(text)
        assert canonical_step(once) == once


class TestTaskStatus:
    def test_exactly_three_legal_edges(self):
        assert len(LEGAL_TRANSITIONS) == 3

    def test_record_rejects_illegal_transition(self):
        record = TaskRecord(
            record_id="r-1",
            assignment=Assignment("s1", "a", "sit"),
            owner="a",
            status=TaskStatus.IN_PROGRESS,
        )
        record.transition(TaskStatus.COMPLETED, 5)
        with pytest.raises(IllegalTransition):
            record.transition(TaskStatus.IN_PROGRESS, 6)

    def test_resumption_path(self):
        record = TaskRecord(
            record_id="r-1",
            assignment=Assignment("s1", "a", "sit"),
            owner="a",
            status=TaskStatus.IN_PROGRESS,
        )
        record.transition(TaskStatus.INTERRUPTED, 3)
        record.transition(TaskStatus.IN_PROGRESS, 7)
        record.transition(TaskStatus.COMPLETED, 9)
        assert [s.value for s, _ in record.history] == [
            "in_progress", "interrupted", "in_progress", "completed",
        ]

    def test_repeat_status_is_not_a_transition(self):
        record = TaskRecord(
            record_id="r-1",
            assignment=Assignment("s1", "a", "sit"),
            owner="a",
            status=TaskStatus.IN_PROGRESS,
        )
        record.transition(TaskStatus.IN_PROGRESS, 2)
        assert len(record.history) == 1


class TestChatHistory:
    def test_append_only_and_ordered(self):
        history = ChatHistory()
        history.append(ChatRole.USER, "hello", 1)
        history.append(ChatRole.TASK_MANAGER, "plan", 1)
        with pytest.raises(ValueError):
            history.append(ChatRole.USER, "too-early", 0)
        assert len(history) == 2

    def test_round_trip_is_byte_identical(self):
        history = ChatHistory()
        history.append(ChatRole.USER, "Deliver the blue ball to (4, 0).", 1)
        history.append(ChatRole.EVENT, "the ball fell", 7)
        raw = history.to_json()
        assert ChatHistory.from_json(raw).to_json() == raw

    @given(st.lists(st.tuples(st.sampled_from(list(ChatRole)), st.text(max_size=30)), max_size=20))
    def test_length_never_decreases(self, items):
        history = ChatHistory()
        previous = 0
        for tick, (role, text) in enumerate(items):
            history.append(role, text, tick)
            assert len(history) == previous + 1
            previous = len(history)


class TestPlanStructure:
    def test_cycle_detection(self):
        steps = (
            Assignment("s1", "a", "x", depends_on=frozenset({"s2"})),
            Assignment("s2", "a", "y", depends_on=frozenset({"s1"})),
        )
        cycle = find_dependency_cycle(steps)
        assert cycle is not None

    def test_infeasible_never_co_occurs(self):
        plan = Plan(
            plan_id="p",
            classes=frozenset({TaskClass.INFEASIBLE, TaskClass.SEQUENTIAL}),
            steps=(),
        )
        assert any("never co-occurs" in v for v in validate_plan_structure(plan))

    def test_missing_dependency_target(self):
        plan = Plan(
            plan_id="p",
            classes=frozenset({TaskClass.SEQUENTIAL}),
            steps=(Assignment("s1", "a", "x", depends_on=frozenset({"nope"})),),
        )
        assert any("missing step" in v for v in validate_plan_structure(plan))

    def test_sync_group_members_share_dependencies(self):
        plan = Plan(
            plan_id="p",
            classes=frozenset({TaskClass.COORDINATED}),
            steps=(
                Assignment("s1", "a", "x", sync_group="g"),
                Assignment("s2", "b", "x", sync_group="g", depends_on=frozenset({"s1"})),
            ),
        )
        assert any("differing depends_on" in v for v in validate_plan_structure(plan))

    def test_json_round_trip(self):
        plan = Plan(
            plan_id="p-1",
            classes=frozenset({TaskClass.SEQUENTIAL, TaskClass.COORDINATED}),
            steps=(
                Assignment(
                    "s1", "a", "carry the box",
                    required_capabilities=frozenset({"navigate"}),
                    sync_group="g",
                ),
                Assignment("s2", "b", "push", depends_on=frozenset({"s1"})),
            ),
            source_command_id="c-1",
        )
        assert Plan.from_json(plan.to_json()).to_json() == plan.to_json()


class TestDeriveClasses:
    def test_no_edges_is_independent(self):
        classes = derive_classes([Assignment("s1", "a", "x"), Assignment("s2", "b", "y")])
        assert classes == {TaskClass.INDEPENDENT}

    def test_edges_and_sync_groups(self):
        classes = derive_classes([
            Assignment("s1", "a", "x", sync_group="g"),
            Assignment("s2", "b", "y", depends_on=frozenset({"s1"})),
        ])
        assert classes == {TaskClass.SEQUENTIAL, TaskClass.COORDINATED}


class TestCorruptedConfigs:
    def test_ten_corrupted_configs_are_rejected(self, drop_scenario):
        base = drop_scenario.config
        corruptions = []

        def variant(**kwargs):
            corruptions.append(kwargs)

        variant(robots=base.robots + (base.robots[0],))  # duplicate robot
        variant(robots=(RobotSpec(id="", kind="x", capabilities=frozenset({"a"})),))
        variant(robots=(RobotSpec(id="a", kind="x", capabilities=frozenset()),))
        variant(humans=("waffle",))  # shadows a robot id
        variant(humans=("", "user"))
        variant(locations={"goal": (float("inf"), 0.0)})
        variant(locations={"goal": (0.0,)})
        variant(objects=base.objects + (base.objects[0],))  # duplicate object
        variant(
            objects=(type(base.objects[0])(id="ball", position=(float("nan"), 0.0)),)
        )
        variant(objects=(type(base.objects[0])(id="ball", attached_to="ghost"),))

        assert len(corruptions) == 10
        for kwargs in corruptions:
            config = ScenarioConfig(
                name=base.name,
                robots=kwargs.get("robots", base.robots),
                humans=kwargs.get("humans", base.humans),
                rules=base.rules,
                locations=kwargs.get("locations", dict(base.locations)),
                objects=kwargs.get("objects", base.objects),
            )
            assert validate_scenario(config), f"corruption not caught: {kwargs.keys()}"

    def test_all_bundled_scenarios_accepted(self, data_dir):
        import fleetmind.scenario as scen

        for path in sorted((data_dir / "scenarios").glob("*.json")):
            loaded = scen.load_scenario(path)
            assert validate_scenario(loaded.config) == []
