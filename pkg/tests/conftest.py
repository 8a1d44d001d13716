import sys
from pathlib import Path

# lets test modules share fixtures and helpers by plain import
sys.path.insert(0, str(Path(__file__).parent))

# acceptance criterion number -> result line, filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
