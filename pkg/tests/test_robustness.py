"""Arbitrary text and garbage commands must never crash the deliberator or
the world; they degrade to information routing, infeasible plans, or rejected
commands."""

from hypothesis import given, settings
from hypothesis import strategies as st

from fleetmind import bus as busmod
from fleetmind.backends import RuleBackend, rule_route
from fleetmind.context import DynamicContext, StaticRules
from fleetmind.domain import Plan
from fleetmind.manager import MANAGER_ID, TaskManager
from fleetmind.scenario import LoadedScenario
from fleetmind.runtime import ScenarioRun
from fleetmind.world import SkillCommand, World

import tests.conftest as c

text_strategy = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",)), max_size=120
)


class TestPlannerNeverCrashes:
    @given(text_strategy)
    @settings(max_examples=200, deadline=None)
    def test_rule_route_total(self, text):
        context = DynamicContext(config=c.scenario("drop_recovery").config)
        label, _resolved = rule_route(text, context)
        assert label in ("new_command", "intent_change", "help_done", "information")

    @given(text_strategy)
    @settings(max_examples=200, deadline=None)
    def test_rule_plan_total(self, text):
        loaded = c.scenario("transport")
        context = DynamicContext(config=loaded.config, humans=loaded.config.humans)
        plan, _notes = RuleBackend().make_plan(
            text, context, StaticRules("x"), "p-1", "c-1"
        )
        assert isinstance(plan, Plan)

    @given(st.lists(text_strategy, min_size=1, max_size=4))
    @settings(max_examples=50, deadline=None)
    def test_manager_survives_arbitrary_human_input(self, texts):
        loaded = c.scenario("drop_recovery")
        bus = busmod.Bus()
        bus.register(MANAGER_ID)
        for spec in loaded.config.robots:
            bus.register(spec.id)
        manager = TaskManager(loaded.config, RuleBackend(), bus, StaticRules("x"))
        for tick, text in enumerate(texts, start=1):
            env = busmod.Envelope(
                sender="user", msg_id=bus.next_msg_id("user"),
                recipient=MANAGER_ID, tick=tick, kind=busmod.Kind.HUMAN_INPUT,
                payload={"text": text, "source": "user"},
            )
            manager.process([env], tick)
        assert len(manager.chat.entries()) >= len(texts)


class TestWorldNeverCrashes:
    @given(
        st.lists(
            st.tuples(
                st.sampled_from(["move_to", "find", "reach", "pick", "place",
                                 "sit", "stand", "push", "form_carry", "survey",
                                 "bogus_skill"]),
                st.dictionaries(
                    st.sampled_from(["object", "target", "region", "group"]),
                    st.one_of(
                        text_strategy,
                        st.lists(st.floats(allow_nan=False, allow_infinity=False,
                                           min_value=-50, max_value=50),
                                 min_size=2, max_size=2),
                    ),
                    max_size=3,
                ),
            ),
            max_size=10,
        )
    )
    @settings(max_examples=100, deadline=None)
    def test_garbage_commands_rejected_world_advances(self, commands):
        loaded = c.scenario("drop_recovery")
        world = World(loaded.config)
        for skill, args in commands:
            world.submit(SkillCommand("waffle", skill, args))
            out = world.step()
            assert out.tick == world.tick
            assert world.attachment_is_forest()


class TestRunWithArbitraryCommandScript:
    @given(text_strategy)
    @settings(max_examples=25, deadline=None)
    def test_full_run_with_random_first_command(self, text):
        from fleetmind.world import ScriptEffect

        loaded = c.scenario("drop_recovery")
        run = ScenarioRun(
            LoadedScenario(config=loaded.config, script=(
                ScriptEffect(tick=1, effect="utterance", source="user", text=text),
            )),
        )
        result = run.run(tick_budget=60)
        assert result.outcome in (
            "goals_satisfied", "budget_exhausted", "infeasible", "idle",
            "help_pending", "planner_failure",
        )
