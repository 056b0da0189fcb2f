import pytest

from fedff.federation import World
from fedff.trajgen import generate_all, load_path_specs


@pytest.fixture(scope="session")
def path_specs():
    return load_path_specs()


@pytest.fixture(scope="session")
def trajectories(path_specs):
    return generate_all(path_specs)


@pytest.fixture(scope="session")
def world(trajectories):
    return World(trajectories=trajectories, seed=0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
