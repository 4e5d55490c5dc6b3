"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""

import pytest

ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def verdict():
    def record(criterion: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[criterion]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
