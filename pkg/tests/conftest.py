import pytest

_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_KEY] = []


@pytest.fixture
def criterion(request):
    """Record an acceptance outcome for the end-of-run summary, then assert it."""
    def check(number, ok, detail):
        request.config.stash[_KEY].append((number, bool(ok), detail))
        assert ok, f"criterion {number}: {detail}"
    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(_KEY, []))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in lines:
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
