import numpy as np
import pytest

from evtol_pinn.ecm import EcmParams, OcvCurve, RcBranch

OCV_KNOTS = [(0.0, 3.0), (0.1, 3.45), (0.2, 3.55), (0.4, 3.65), (0.6, 3.8), (0.8, 3.95), (1.0, 4.2)]


@pytest.fixture
def ocv():
    return OcvCurve.from_knots(OCV_KNOTS)


@pytest.fixture
def linear_ocv():
    return OcvCurve.from_knots([(0.0, 3.0), (1.0, 4.2)])


@pytest.fixture
def params(ocv):
    return EcmParams(r0=0.015, branches=(RcBranch(0.01, 10.0), RcBranch(0.02, 100.0)), capacity_ah=3.0, ocv=ocv)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance criteria register a one-line verdict here; printed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
