import json
from pathlib import Path

import pytest
from hypothesis import settings

from abrw.offspring import DEATH1, NN1, load_law

settings.register_profile("repo", deadline=None)
settings.load_profile("repo")

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
LAWS = CONFIGS / "laws"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte Carlo run")


@pytest.fixture
def nn1():
    return NN1


@pytest.fixture
def death1():
    return DEATH1


@pytest.fixture
def death2():
    return load_law(LAWS / "death2.json")


@pytest.fixture
def nn2():
    return load_law(LAWS / "nn2.json")


@pytest.fixture
def law_doc():
    def _doc(name):
        return json.loads((LAWS / name).read_text())
    return _doc


_LINES = pytest.StashKey[list]()


def pytest_sessionstart(session):
    session.config.stash[_LINES] = []


@pytest.fixture
def acceptance(request):
    """``report(n, passed, summary, seconds, limit)`` prints and records one criterion line."""
    lines = request.config.stash[_LINES]

    def report(n, passed, summary, seconds, limit):
        status = "PASS" if passed else "FAIL"
        line = f"{status} criterion {n:>2}: {summary} [{seconds:.1f} s, limit {limit:.0f} s]"
        print(line)
        lines.append((n, line))
        return passed
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
