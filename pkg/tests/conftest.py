import numpy as np
import pytest

from remsched import ProcessModel
from remsched.channel import ChannelModel


def scalar_process(a=1.3, w=1.0, v=1.0, tau_max=16):
    return ProcessModel.from_matrices([[a]], [[1.0]], [[w]], [[v]], tau_max=tau_max)


@pytest.fixture
def tiny_system():
    """Two scalar processes, one channel, two channel levels."""
    procs = [scalar_process(1.3, tau_max=4), scalar_process(1.1, tau_max=4)]
    dist = np.array([[[0.3, 0.7]], [[0.6, 0.4]]])
    return procs, ChannelModel(dist, np.array([0.4, 0.1]))


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Records one ``PASS``/``FAIL`` line per acceptance criterion."""
    lines = request.config._acceptance_lines

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        lines.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
