import numpy as np
import pytest

from miniresnet.data import PreparedDataset
from miniresnet.model import ModelConfig

TINY_MODEL = ModelConfig(name="tiny", input_size=16, stacks=(1, 1), stack_widths=(4, 8))


def toy_dataset(n=12, size=16, seed=0):
    """Random images whose yaw label is a linear function of mean brightness."""
    rng = np.random.default_rng(seed)
    images = rng.uniform(-1, 1, (n, 1, size, size)).astype(np.float32)
    yaw = np.round(rng.uniform(-60, 60, n), 2)
    images += (yaw / 120.0)[:, None, None, None].astype(np.float32)
    images = np.clip(images, -1, 1)
    degrees = np.stack([yaw, np.zeros(n), np.zeros(n)], axis=1)
    return PreparedDataset(images, degrees)


@pytest.fixture
def tiny_model():
    return TINY_MODEL


@pytest.fixture
def toy():
    return toy_dataset()


# -- acceptance summary ----------------------------------------------------

_criteria: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        _criteria[name] = ("PASS" if report.passed else "FAIL", report.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(n.split("_")[2])):
        status, _ = _criteria[name]
        terminalreporter.write_line(f"{status}  {name}")
