import pytest

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the summary is printed at the end of the session."""
    lines = request.config.stash[ACCEPTANCE]

    def record(number: int, ok: bool, detail: str) -> bool:
        lines[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[ACCEPTANCE]
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
