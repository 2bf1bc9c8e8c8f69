"""Prints one pass/fail line per acceptance criterion at the end of the run."""

import re

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2).replace("_", " "))
    if report.when == "call" or report.failed:
        prev_status, detail = _ACCEPTANCE.get(key, ("PASS", ""))
        for name, text in report.sections:
            if "stdout" in name and text.strip():
                detail = text.strip().splitlines()[-1]
        failed = report.failed or prev_status == "FAIL"
        _ACCEPTANCE[key] = ("FAIL" if failed else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title), (status, detail) in sorted(_ACCEPTANCE.items()):
        line = f"criterion {n} [{title}]: {status}"
        terminalreporter.write_line(f"{line} | {detail}" if detail else line)
