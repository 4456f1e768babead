import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_KEY] = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance line, then assert it."""
    store = request.config.stash[_KEY]

    def record(criterion: int, ok: bool, detail: str):
        line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'} | {detail}"
        store[criterion] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_KEY, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for k in sorted(store):
            terminalreporter.write_line(store[k])
