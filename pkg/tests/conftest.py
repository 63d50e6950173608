import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from deformreg.volgrid import VolumeGrid

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_volume(rng, dims, lo=-1000.0, hi=1000.0) -> VolumeGrid:
    return VolumeGrid(rng.uniform(lo, hi, dims).astype(np.float32))


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
