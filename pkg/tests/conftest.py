import math

import numpy as np
import pytest

from qdmess.bath import BathSpec, SpectralDensity
from qdmess.modefit import Mode, ModeSet


@pytest.fixture(scope="session")
def subohmic_zero_t():
    """eta = 1/2, alpha = 0.05, omega_c = 10 at T = 0."""
    return BathSpec(SpectralDensity("sub-ohmic-exponential-cutoff", alpha=0.05, omega_c=10.0, eta=0.5), math.inf)


@pytest.fixture(scope="session")
def ohmic_warm():
    return BathSpec(SpectralDensity("ohmic-exponential-cutoff", alpha=0.05, omega_c=10.0), 1.0)


@pytest.fixture
def two_modes():
    """Complex-weight modes with both signs of oscillation frequency."""
    return ModeSet((Mode(0.2 - 0.08j, 1.0, 1.5), Mode(0.12 + 0.04j, 0.5, -0.8)))


def power_law_zero_t(alpha, omega_c, eta, t):
    """Closed-form T = 0 correlation of ``alpha omega_c^(1-eta) omega^eta exp(-omega/omega_c)``."""
    pref = alpha * omega_c ** (1 - eta) * math.gamma(eta + 1) / math.pi
    return pref * (1.0 / omega_c + 1j * np.asarray(t, float)) ** (-(eta + 1))


# ---------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion, printed after the run

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Callable ``criterion(tag, ok, detail)`` that logs one acceptance line."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def log(tag, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {tag}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
