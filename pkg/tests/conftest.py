import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from symdoqkd.config import ScenarioConfig  # noqa: E402
from symdoqkd.scenarios import simulate_subnet  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def calibration_config() -> ScenarioConfig:
    return ScenarioConfig()


@pytest.fixture(scope="session")
def calibration_stream(calibration_config):
    """30 s of the default (C49, C31) subnet at the shipped seed."""
    return simulate_subnet(calibration_config, calibration_config.run.combo_id)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number: int, description: str, passed: bool, detail: str = "") -> None:
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] criterion {number:>2}: {description}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
