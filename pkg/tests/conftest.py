import pytest


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    store = request.config._acceptance

    def record(k: int, ok: bool, detail: str) -> bool:
        line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        store[k] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = getattr(config, "_acceptance", {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, 16):
        terminalreporter.write_line(store.get(k, f"criterion {k:2d}: FAIL  (not run or errored before recording)"))
