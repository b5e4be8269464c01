from __future__ import annotations

# criterion id -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if passed else 'FAIL'}  {detail}")
