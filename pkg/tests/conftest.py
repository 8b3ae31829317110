from pathlib import Path

import pytest

from pemsim.devices import DeviceParams
from pemsim.macromodel import Macromodel

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"

# pass/fail lines collected by the acceptance suite, echoed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def ewh_params():
    return DeviceParams.ewh(4.5, 275.0, 52.0, (48.9, 55.1))


@pytest.fixture(scope="session")
def ewh_model(ewh_params):
    return Macromodel(ewh_params, n_bins=20, dt=60.0, n_devices=2000)


@pytest.fixture(scope="session")
def ess_model():
    return Macromodel(DeviceParams.ess(), n_bins=20, dt=60.0, n_devices=100)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
