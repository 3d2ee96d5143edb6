import sys
from pathlib import Path

# shared oracles live next to the tests
sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if oracles.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in oracles.VERDICTS:
            terminalreporter.write_line(line)
