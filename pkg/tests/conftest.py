"""Collects one verdict line per acceptance criterion and prints them at the end."""

VERDICTS: list[str] = []


def record(criterion: int, passed: bool | None, detail: str) -> str:
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    line = f"criterion {criterion}: {status} | {detail}"
    VERDICTS.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
