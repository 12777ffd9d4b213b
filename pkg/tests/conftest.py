import pathlib

import pytest

from fleetmind.backends import RuleBackend
from fleetmind.context import StaticRules
from fleetmind.scenario import load_scenario

DATA_DIR = pathlib.Path(__file__).resolve().parents[1] / "src" / "fleetmind" / "data"
SCENARIOS = DATA_DIR / "scenarios"


@pytest.fixture(scope="session")
def data_dir():
    return DATA_DIR


def scenario(name):
    return load_scenario(SCENARIOS / f"{name}.json")


@pytest.fixture(scope="session")
def drop_scenario():
    return scenario("drop_recovery")


@pytest.fixture(scope="session")
def transport_scenario():
    return scenario("transport")


@pytest.fixture
def rule_backend():
    return RuleBackend()


@pytest.fixture
def static_rules():
    return StaticRules.load(str(DATA_DIR / "static_rules.txt"))
