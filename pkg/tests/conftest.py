import pytest

_ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the summary is printed at the end of the run."""

    def record(number: int, ok: bool, detail: str):
        _ACCEPTANCE.append((number, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}")
