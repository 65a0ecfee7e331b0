"""Shared pytest hooks.

The acceptance suite records one ``[criterion N] PASS/FAIL`` line per check;
echo them after the run so they are visible even when pytest captures the
passing tests' stdout.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", []) if module else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
