import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from comofusion import _kernels

sys.path.insert(0, str(Path(__file__).parent))

KERNELS = ("sobel", "histogram256", "sf_terms", "average_gradient", "qabf_sums", "filter_valid")


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    """Run the test once per kernel backend."""
    for name in KERNELS:
        monkeypatch.setattr(_kernels, name, getattr(_kernels, f"{name}_{request.param}"))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


# ------------------------------------------------------------ acceptance report
ACCEPTANCE = {}


def record_acceptance(number, title, ok, detail):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    number = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
    if number not in ACCEPTANCE:
        ACCEPTANCE[number] = f"criterion {number} {'PASS' if report.passed else 'FAIL'}: raised before checking"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
