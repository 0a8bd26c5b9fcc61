ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number} {title}: {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
