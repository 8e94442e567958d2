import numpy as np
import pytest

from lapobench.envlib import make_builtin_env
from lapobench.oracle import GraphDistanceField, OracleFdm, OracleIdm


@pytest.fixture(scope="session")
def quadrant4():
    return make_builtin_env("quadrant4")


@pytest.fixture(scope="session")
def affine8():
    return make_builtin_env("affine8")


@pytest.fixture(scope="session")
def q4_field(quadrant4):
    return GraphDistanceField(quadrant4, resolution=256)


@pytest.fixture(scope="session")
def q4_oracle(q4_field, quadrant4):
    return OracleIdm(q4_field), OracleFdm(quadrant4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def a8_oracle(affine8):
    return OracleIdm(GraphDistanceField(affine8, resolution=256)), OracleFdm(affine8)


def pytest_terminal_summary(terminalreporter):
    from _runs import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
