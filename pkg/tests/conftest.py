import numpy as np
import pytest

from vdpbc.control import ControllerConfig, SinusoidalTrajectory
from vdpbc.phmech import TwoLinkArm, table1_model


@pytest.fixture(scope="session")
def fjr():
    return table1_model(31.0)


@pytest.fixture(scope="session")
def fjr_soft():
    return table1_model(3.1)


@pytest.fixture(scope="session")
def gains():
    return ControllerConfig.table1()


@pytest.fixture(scope="session")
def traj():
    return SinusoidalTrajectory()


@pytest.fixture(scope="session")
def still():
    """q_d identically zero."""
    return SinusoidalTrajectory(amplitude=0.0)


@pytest.fixture(scope="session")
def arm():
    return TwoLinkArm()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """record(key, passed, detail) stores one acceptance line for the summary."""

    def record(key, passed, detail):
        _ACCEPTANCE[key] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: (int(k.rstrip("ab")), k)):
        passed, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
