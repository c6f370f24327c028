import re

_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.failed:
        number = int(re.search(r"test_criterion_(\d+)", report.nodeid).group(1))
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[number] = (report.passed, report.nodeid.split("::")[-1], detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, name, detail = _CRITERIA[number]
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {name}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
