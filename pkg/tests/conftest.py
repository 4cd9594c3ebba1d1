"""Collects one PASS/FAIL line per acceptance criterion and prints them at
the end of the session."""
import pytest

_LINES: dict[int, str] = {}


class Recorder:
    def __call__(self, number: int, ok: bool, detail: str) -> bool:
        _LINES[number] = f"CRITERION {number} {'PASS' if ok else 'FAIL'}  {detail}"
        print(_LINES[number])
        return ok


@pytest.fixture(scope="session")
def criterion():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
