import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


class OracleModel:
    """Clean-prediction stand-in that always predicts a fixed point."""

    parameterization = "clean"
    conditional = False

    def __init__(self, x_star):
        self.x_star = np.asarray(x_star, dtype=np.float64)
        self.dim = self.x_star.size

    def forward(self, x, t, labels=None):
        return np.broadcast_to(self.x_star, np.atleast_2d(x).shape).copy()

    def input_vjp(self, x, t, v, labels=None):
        x = np.atleast_2d(x)
        return self.forward(x, t), np.zeros_like(x)


@pytest.fixture
def oracle_model():
    return OracleModel


@pytest.fixture
def small_schedule():
    from modal_diffusion.schedule import build_schedule
    return build_schedule(20, 1e-3, 0.3)


@pytest.fixture(scope="session")
def toy_result():
    """One full default toy run (about three minutes), shared across test files."""
    from modal_diffusion.toy import ToyConfig, run_toy
    return run_toy(ToyConfig())


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
