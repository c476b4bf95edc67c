import functools
import json

import numpy as np
import pytest

from swarm_dmpc.harness import load_scenario, run

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@functools.lru_cache(maxsize=None)
def _cached(name: str, overrides_json: str):
    return run(load_scenario(name, json.loads(overrides_json)))


def cached_run(name: str, **overrides):
    """Closed-loop run shared between unit tests (keys use ``__`` for ``.``)."""
    ov = {k.replace("__", "."): v for k, v in overrides.items()}
    return _cached(name, json.dumps(ov, sort_keys=True))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
