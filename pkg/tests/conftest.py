import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[int, tuple[str, str]] = {}


def pytest_runtest_makereport(item, call):
    number = getattr(item.function, "criterion", None)
    if number is None or call.when != "call":
        return
    status = "PASS" if call.excinfo is None else "FAIL"
    note = getattr(item.function, "note", None)
    if status == "PASS" and note:
        status = note()
    _criteria[number] = (status, item.function.__doc__.strip().splitlines()[0])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
