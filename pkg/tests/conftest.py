"""Shared fixtures.  ``acceptance`` collects one verdict line per criterion
and the terminal summary prints them after the run."""

import pytest

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance(request):
    """``acceptance(n, name, passed, detail)`` records criterion ``n``."""
    store = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(n, name, passed, detail):
        store[n] = (name, bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        name, passed, detail = store[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n}. {name}: {detail}")
