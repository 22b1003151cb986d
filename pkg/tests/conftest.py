import numpy as np
import pytest

from mmfed import data, model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_arch():
    return model.ARCH_PRESETS["tiny"]


@pytest.fixture(scope="session")
def tiny_data(tiny_arch):
    return data.synth_generate(10, 6, 0.05, seed=3, arch=tiny_arch)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE, key=lambda r: str(r[0])):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}")
