from __future__ import annotations

import json
import os

import pytest
from hypothesis import HealthCheck, settings

from abheat import DomainSpec, build_lattice

from oracles import FROZEN

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def derived() -> dict:
    return json.loads(FROZEN.read_text())


@pytest.fixture(scope="session")
def square4():
    """Unit square at eps = 1/4 with interior holding time eps**2."""
    return build_lattice(DomainSpec.rectangle(1, 1), 0.25, qv_rate=1)


@pytest.fixture(scope="session")
def square8():
    return build_lattice(DomainSpec.rectangle(1, 1), 1 / 8)


@pytest.fixture(scope="session")
def disc8():
    return build_lattice(DomainSpec.disc((0, 0), 1), 1 / 8)


# one summary line per acceptance criterion, printed after the test session
ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def verdict():
    def record(name: str, ok: bool, detail: str, seconds: float | None = None) -> bool:
        took = "" if seconds is None else f" [{seconds:.1f} s]"
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}{took}"
        ACCEPTANCE[name] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE[key])
