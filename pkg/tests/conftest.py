import warnings

import numpy as np
import pytest

from delayfl.bounds import HyperParams
from delayfl.cost_model import CostWeights
from delayfl.experiments import ExperimentConfig, sample_profiles


@pytest.fixture(autouse=True)
def _quiet_linalg():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


def default_devices(seed=0):
    """Five devices drawn like the experiments do (sorted capacitance and cycles)."""
    return sample_profiles(ExperimentConfig(), seed)


@pytest.fixture
def hp():
    return HyperParams()


@pytest.fixture
def weights():
    return CostWeights()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = dict(report.user_properties).get("detail", "")
        name = report.nodeid.split("::")[-1]
        _VERDICTS[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_VERDICTS):
        verdict, detail = _VERDICTS[name]
        terminalreporter.write_line(f"{verdict}  {name}  {detail}")
