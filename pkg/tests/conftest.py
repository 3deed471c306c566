"""Shared pytest hooks.

The acceptance tests are named test_criterion_NN_*; after the run a
summary section lists one PASS/FAIL line per criterion so the verdict
survives output capture.
"""

import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if getattr(report, "when", "call") not in ("call", "setup"):
                continue
            match = _CRITERION.search(report.nodeid)
            if not match:
                continue
            num = int(match.group(1))
            verdict = "PASS" if outcome == "passed" else "FAIL"
            label = match.group(2).replace("_", " ")
            # setup (fixture) failures count as FAIL for the criterion
            if num not in lines or verdict == "FAIL":
                lines[num] = f"criterion {num:2d} {verdict}  {label}"
    if lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(lines):
            terminalreporter.write_line(lines[num])
