import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from helpers import REPORT  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
