"""Small model systems used by the CLI, the examples and the tests."""

from __future__ import annotations

import math

import numpy as np

from .fpheom import SystemSpec
from .modefit import Mode, ModeSet

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
ID2 = np.eye(2, dtype=complex)

NAMED_OPERATORS = {"sx": SX, "sy": SY, "sz": SZ, "id": ID2}


def spin_boson(delta: float = 1.0, epsilon: float = 0.0, coupling=None, rho0=None) -> SystemSpec:
    """Two-level system ``H = (epsilon sz + delta sx) / 2`` coupled through ``q``.

    Defaults: ``q = sz / 2`` and the system starts in the upper ``sz`` state.
    The observables ``sx``, ``sy`` and ``sz`` are registered.
    """
    H = 0.5 * (epsilon * SZ + delta * SX)
    q = 0.5 * SZ if coupling is None else np.asarray(coupling, dtype=complex)
    rho0 = np.array([[1, 0], [0, 0]], dtype=complex) if rho0 is None else rho0
    return SystemSpec(H, q, rho0, {"sx": SX, "sy": SY, "sz": SZ})


def pure_dephasing(epsilon: float = 1.0) -> SystemSpec:
    """Qubit with ``H = epsilon sz / 2``, ``q = sz`` and an equal superposition start."""
    plus = np.full((2, 2), 0.5, dtype=complex)
    return SystemSpec(0.5 * epsilon * SZ, SZ, plus, {"sx": SX, "sy": SY, "sz": SZ})


def drude_modes(lam: float, gamma: float, beta: float, n_matsubara: int = 0) -> ModeSet:
    """Real-pole mode set of a Drude-Lorentz bath (high-temperature leading term).

    The leading mode ``d = lam gamma (cot(beta gamma / 2) - i)``, ``z = gamma``
    plus optional Matsubara corrections ``z = nu_j = 2 pi j / beta``.  All
    poles are on the real ``z`` axis, so conventional HEOM applies.
    """
    modes = [Mode(complex(lam * gamma / math.tan(beta * gamma / 2), -lam * gamma), gamma, 0.0)]
    for j in range(1, n_matsubara + 1):
        nu = 2 * math.pi * j / beta
        d = 4 * lam * gamma / beta * nu / (nu * nu - gamma * gamma)
        modes.append(Mode(complex(d), nu, 0.0))
    return ModeSet(tuple(modes))
