import numpy as np
import pytest

from margindiff.denoiser import Architecture, init_network
from margindiff.schedule import build_linear_schedule

TINY_ARCH = Architecture(H=4, W=4, C=1, K=3, hidden_width=8, time_dim=8, cond_dim=4, T=50)


@pytest.fixture
def tiny_net64():
    return init_network(TINY_ARCH, seed=3, dtype=np.float64)


@pytest.fixture
def tiny_schedule():
    return build_linear_schedule(TINY_ARCH.T, 1e-4, 0.02)


_ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record ``(number, passed, detail)`` for the acceptance summary."""

    def record(number, passed, detail):
        _ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'} - {detail}")
