import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetmind.domain import GoalPredicate
from fleetmind.scenario import scenario_from_dict
from fleetmind.world import (
    Change,
    ScriptEffect,
    SkillCommand,
    World,
    check_precondition,
    load_script,
)


def small_world(script=()):
    data = {
        "name": "mini",
        "robots": [
            {
                "id": "quad",
                "kind": "quadruped",
                "capabilities": ["navigate", "carry", "sit", "stand"],
                "initial_pose": {"x": 0.0, "y": 0.0},
                "skills": ["move_to", "sit", "stand"],
            },
            {
                "id": "scout",
                "kind": "differential drive",
                "capabilities": ["navigate", "camera", "pick", "place"],
                "constraints": ["the arm reaches the quadruped's back only when the quadruped is sitting"],
                "initial_pose": {"x": 1.0, "y": 0.0},
                "sensing_radius": 3.0,
                "skills": ["move_to", "find", "reach", "pick", "place"],
            },
        ],
        "locations": {"goal": [3.0, 0.0]},
        "world": {
            "speed": 0.5,
            "objects": [
                {"id": "green_object", "position": [0.0, 0.0], "attached_to": "quad"},
                {"id": "box", "position": [5.0, 5.0], "container": True},
            ],
        },
    }
    loaded = scenario_from_dict(data)
    return World(loaded.config, script=tuple(script), seed=0)


class TestStep:
    def test_identity_step(self):
        world = small_world()
        before = world.snapshot()["entities"]
        out = world.step()
        assert out.tick == 1
        after = world.snapshot()["entities"]
        assert before == after

    def test_scripted_detach_freezes_position(self):
        script = (ScriptEffect(tick=3, effect="detach", object="green_object"),)
        world = small_world(script)
        world.submit(SkillCommand("quad", "move_to", {"target": [3.0, 0.0]}))
        for _ in range(3):
            world.step()
        green = world.entities["green_object"]
        assert green.attached_to is None
        # frozen where the quadruped was at the drop tick (3 ticks at 0.5 m)
        assert green.position == pytest.approx((1.5, 0.0))
        world.step()
        assert world.entities["green_object"].position == pytest.approx((1.5, 0.0))

    def test_unknown_entity_command_rejected_world_advances(self):
        world = small_world()
        world.submit(SkillCommand("ghost", "move_to", {"target": [1, 1]}))
        out = world.step()
        assert out.tick == 1
        assert out.results[0].outcome == "failed"
        assert "unknown robot" in out.results[0].reason

    def test_push_capture_into_container(self):
        data = {
            "name": "pushy",
            "robots": [
                {"id": "arm", "kind": "fixed arm", "capabilities": ["push"],
                 "initial_pose": {"x": 0.0, "y": 3.0}, "skills": ["push"]}
            ],
            "locations": {"catch_point": [0.0, 2.0]},
            "world": {"objects": [
                {"id": "ball", "position": [0.0, 2.8]},
                {"id": "box", "position": [0.0, 2.0], "container": True, "capture_radius": 0.45},
            ]},
        }
        world = World(scenario_from_dict(data).config)
        world.submit(SkillCommand("arm", "push", {"object": "ball", "target": "catch_point"}))
        result = None
        for _ in range(5):
            out = world.step()
            if out.results:
                result = out.results[0]
                break
        assert result.outcome == "completed"
        assert result.detail["attached_to"] == "box"
        assert world.entities["ball"].attached_to == "box"


class TestPreconditions:
    def test_place_requires_sitting(self):
        world = small_world()
        world.entities["scout"].position = (0.5, 0.0)
        world.entities["green_object"].attached_to = "scout"
        world.entities["green_object"].position = world.entities["scout"].position
        violation = check_precondition(
            "place", {"object": "green object", "target": "quad"}, world, "scout"
        )
        assert violation == "requires sitting"
        world.entities["quad"].posture = "sitting"
        assert check_precondition(
            "place", {"object": "green object", "target": "quad"}, world, "scout"
        ) is None

    def test_sit_is_satisfied_for_capable_robot(self):
        world = small_world()
        assert check_precondition("sit", {}, world, "quad") is None
        assert check_precondition("sit", {}, world, "scout") == "cannot sit"

    def test_formation_with_displaced_member_is_violated(self):
        data = {
            "name": "form",
            "robots": [
                {"id": f"m{i}", "kind": "differential drive",
                 "capabilities": ["navigate", "formation_carry"],
                 "initial_pose": {"x": x, "y": y}, "skills": ["move_to", "form_carry"]}
                for i, (x, y) in enumerate([(-1, 0), (1, 0), (9, 9)])
            ],
            "locations": {"goal": [4.0, 0.0]},
            "world": {"objects": [{"id": "box", "position": [0.0, 0.0], "container": True}]},
        }
        world = World(scenario_from_dict(data).config)
        group = ["m0", "m1", "m2"]
        for rid in group:
            world.submit(SkillCommand(rid, "form_carry",
                                      {"object": "box", "target": "goal", "group": group}))
        out = world.step()
        failures = [r for r in out.results if r.outcome == "failed"]
        assert len(failures) == 3
        assert all("not at staging poses" in r.reason for r in failures)
        assert all("m2" in r.reason for r in failures)

    def test_cancel_leaves_only_motion_progress(self):
        world = small_world()
        world.submit(SkillCommand("quad", "move_to", {"target": [3.0, 0.0]}))
        world.step()
        world.step()
        moved = world.entities["quad"].position
        assert moved == pytest.approx((1.0, 0.0))
        cancelled = world.cancel("quad")
        assert cancelled.outcome == "cancelled"
        world.step()
        assert world.entities["quad"].position == pytest.approx(moved)


class TestObserve:
    def test_change_within_radius_reported_once(self):
        script = (ScriptEffect(tick=1, effect="spawn", object="red_object",
                               position=(1.5, 0.0)),)
        world = small_world(script)
        world.step()
        changes = world.observe("scout")
        assert [c.kind for c in changes] == ["appeared"]
        assert world.observe("scout") == []

    def test_out_of_range_stays_pending_until_reached(self):
        script = (ScriptEffect(tick=1, effect="spawn", object="far_thing",
                               position=(8.0, 0.0)),)
        world = small_world(script)
        world.step()
        assert world.observe("scout") == []
        world.entities["scout"].position = (7.0, 0.0)
        assert [c.entity for c in world.observe("scout")] == ["far_thing"]

    def test_camera_required(self):
        script = (ScriptEffect(tick=1, effect="spawn", object="near",
                               position=(0.2, 0.0)),)
        world = small_world(script)
        world.step()
        assert world.observe("quad") == []

    def test_two_changes_one_tick_in_script_order(self):
        script = (
            ScriptEffect(tick=1, effect="spawn", object="thing_b", position=(1.2, 0.0)),
            ScriptEffect(tick=1, effect="spawn", object="thing_a", position=(1.4, 0.0)),
        )
        world = small_world(script)
        world.step()
        assert [c.entity for c in world.observe("scout")] == ["thing_b", "thing_a"]


class TestGoals:
    def test_at_attached_posture(self):
        world = small_world()
        goals = [
            GoalPredicate(kind="at", entity="green_object", position=(0, 0), tolerance=0.3),
            GoalPredicate(kind="attached", entity="green_object", parent="quad"),
            GoalPredicate(kind="posture", entity="quad", posture="standing"),
        ]
        assert world.goal_satisfied(goals) == [True, True, True]

    def test_unknown_reference_is_false(self):
        world = small_world()
        goals = [GoalPredicate(kind="at", entity="nope", position=(0, 0))]
        assert world.goal_satisfied(goals) == [False]


class TestDeterminismAndForest:
    def test_identical_runs_identical_digests(self):
        def trajectory():
            script = (ScriptEffect(tick=2, effect="detach", object="green_object"),)
            world = small_world(script)
            world.submit(SkillCommand("quad", "move_to", {"target": [3.0, 0.0]}))
            world.submit(SkillCommand("scout", "move_to", {"target": [0.0, 2.0]}))
            digests = []
            for _ in range(12):
                world.step()
                digests.append(world.digest())
            return digests

        assert trajectory() == trajectory()

    @given(
        st.lists(
            st.tuples(
                st.sampled_from(["move_quad", "move_scout", "pick", "detach", "spawn", "noop"]),
                st.integers(min_value=0, max_value=6),
            ),
            min_size=1,
            max_size=25,
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_attachment_forest_invariant(self, ops):
        world = small_world()
        spawn_n = 0
        for op, arg in ops:
            if op == "move_quad" and not world.busy("quad"):
                world.submit(SkillCommand("quad", "move_to", {"target": [float(arg), 0.0]}))
            elif op == "move_scout" and not world.busy("scout"):
                world.submit(SkillCommand("scout", "move_to", {"target": [0.0, float(arg)]}))
            elif op == "pick" and not world.busy("scout"):
                world.submit(SkillCommand("scout", "pick", {"object": "green_object"}))
            elif op == "detach":
                world.entities["green_object"].attached_to = None
            elif op == "spawn":
                spawn_n += 1
                world.entities[f"junk_{spawn_n}"] = type(world.entities["box"])(
                    id=f"junk_{spawn_n}", position=(float(arg), 1.0)
                )
            world.step()
            assert world.attachment_is_forest()
            for eid, entity in world.entities.items():
                if entity.attached_to is not None:
                    parent = world.entities[entity.attached_to]
                    assert entity.position == parent.position


class TestScriptLoading:
    def test_nondecreasing_trigger_ticks_enforced(self):
        with pytest.raises(ValueError):
            load_script([
                {"tick": 5, "effect": "detach", "object": "x"},
                {"tick": 3, "effect": "detach", "object": "y"},
            ])
