import numpy as np
import pytest

from ccmpc.dynamics import lotka_volterra, scalar_linear
from ccmpc.metric import constant_certificate
from ccmpc.synthesis import SynthesisConfig, synthesize


@pytest.fixture(scope="session")
def lv_model():
    return lotka_volterra()


@pytest.fixture(scope="session")
def lv_cert(lv_model):
    """Contraction certificate for the predator/prey benchmark (synthesised once per session)."""
    return synthesize(lv_model, SynthesisConfig(beta=0.1))


@pytest.fixture(scope="session")
def lv_l2_cert(lv_model):
    """Dissipative certificate with gain bound 2."""
    return synthesize(lv_model, SynthesisConfig(beta=0.1, mode="dissipative", alpha_gain=2.0, max_condition=1e4))


@pytest.fixture(scope="session")
def scalar_model():
    return scalar_linear(1.1, 1.0)


@pytest.fixture(scope="session")
def scalar_cert(scalar_model):
    # hand-feasible point: W = 1, L = -0.3 gives closed-loop gain 0.8
    return constant_certificate([[1.0]], [[-0.3]], 0.1, state_box=scalar_model.state_box)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-criterion lines collected by ``test_acceptance``."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
