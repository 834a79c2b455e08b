import contextlib

import pytest

_VERDICTS: list[tuple[int, str, bool, str]] = []


class Criterion:
    """Collects a verdict for one acceptance criterion; the line is printed
    whether the body passes, fails an assertion or raises."""

    def __init__(self):
        self.detail = ""

    @contextlib.contextmanager
    def __call__(self, number: int, name: str):
        ok = False
        try:
            yield self
            ok = True
        finally:
            _VERDICTS.append((number, name, ok, self.detail))


@pytest.fixture
def criterion():
    return Criterion()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(_VERDICTS):
        tail = f"  ({detail})" if detail else ""
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {name}{tail}")
