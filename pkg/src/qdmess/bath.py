"""Spectral densities, noise power and reference bath correlation functions.

A bath is described by an odd spectral density ``J(omega)`` and an inverse
temperature ``beta``.  ``beta = inf`` is the zero-temperature limit, in which
the thermal factors are replaced by their exact limits rather than evaluated
at a large finite number.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, special
from scipy.interpolate import PchipInterpolator

__all__ = [
    "SpectralDensity",
    "BathSpec",
    "LorentzianNoise",
    "QuadratureError",
    "noise_power",
    "correlation_quadrature",
    "dephasing_exponent",
]

FAMILIES = (
    "ohmic-exponential-cutoff",
    "sub-ohmic-exponential-cutoff",
    "lorentzian-sum",
    "tabulated",
)


class QuadratureError(RuntimeError):
    """Raised when a reference integral does not reach its tolerance."""


@dataclass(frozen=True)
class SpectralDensity:
    """Odd spectral density ``J(omega)``.

    Parameters
    ----------
    family : str
        One of ``ohmic-exponential-cutoff``, ``sub-ohmic-exponential-cutoff``,
        ``lorentzian-sum`` or ``tabulated``.
    alpha, omega_c, eta : float
        Coupling, cutoff and exponent of the power-law families, with
        ``J = alpha * omega_c**(1-eta) * omega**eta * exp(-omega/omega_c)``.
        The ohmic family fixes ``eta = 1``.
    lorentzians : sequence of (omega0, gamma, weight)
        Peaks of the ``lorentzian-sum`` family,
        ``J = sum w*(g/((w-w0)^2+g^2) - g/((w+w0)^2+g^2))``.
    table : tuple of arrays
        ``(omega, J)`` samples on ``omega >= 0`` for the ``tabulated`` family.
    extrapolate : bool
        Allow queries beyond the tabulated grid, where ``J`` is taken as 0.
    """

    family: str
    alpha: float = 0.0
    omega_c: float = 1.0
    eta: float = 1.0
    lorentzians: tuple = ()
    table: Optional[tuple] = None
    extrapolate: bool = False
    _interp: Optional[PchipInterpolator] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown spectral density family {self.family!r}")
        if self.family == "ohmic-exponential-cutoff" and self.eta != 1.0:
            object.__setattr__(self, "eta", 1.0)
        if self.family in FAMILIES[:2]:
            if self.alpha < 0 or self.omega_c <= 0 or self.eta <= 0:
                raise ValueError("need alpha >= 0, omega_c > 0 and eta > 0")
        elif self.family == "lorentzian-sum":
            peaks = tuple(tuple(float(x) for x in p) for p in self.lorentzians)
            if not peaks:
                raise ValueError("lorentzian-sum needs at least one peak")
            for w0, g, r in peaks:
                if w0 < 0 or g <= 0 or r < 0:
                    raise ValueError("Lorentzian peaks need omega0 >= 0, gamma > 0, weight >= 0")
            object.__setattr__(self, "lorentzians", peaks)
        else:
            if self.table is None:
                raise ValueError("tabulated family needs a table")
            w, j = (np.asarray(a, dtype=float) for a in self.table)
            if w.ndim != 1 or w.shape != j.shape or w.size < 2:
                raise ValueError("table must hold two equal-length 1-d arrays")
            if np.any(w < 0) or np.any(np.diff(w) <= 0):
                raise ValueError("tabulated frequencies must be >= 0 and strictly increasing")
            if np.any(j < 0):
                raise ValueError("tabulated J must be >= 0 on omega >= 0")
            if w[0] > 0:
                # J(0) = 0 is part of the model, so the origin is always a node
                w = np.concatenate([[0.0], w])
                j = np.concatenate([[0.0], j])
            elif j[0] != 0:
                raise ValueError("tabulated J must vanish at omega = 0")
            object.__setattr__(self, "table", (w, j))
            object.__setattr__(self, "_interp", PchipInterpolator(w, j, extrapolate=False))

    @property
    def omega_max_table(self) -> float:
        return float(self.table[0][-1]) if self.family == "tabulated" else math.inf

    def __call__(self, omega):
        w = np.asarray(omega, dtype=float)
        a = np.abs(w)
        if self.family in FAMILIES[:2]:
            with np.errstate(over="ignore", under="ignore"):
                val = self.alpha * self.omega_c ** (1 - self.eta) * a**self.eta * np.exp(-a / self.omega_c)
        elif self.family == "lorentzian-sum":
            val = np.zeros_like(a)
            for w0, g, r in self.lorentzians:
                val = val + r * (g / ((a - w0) ** 2 + g * g) - g / ((a + w0) ** 2 + g * g))
        else:
            wmax = self.table[0][-1]
            if np.any(a > wmax) and not self.extrapolate:
                raise ValueError(
                    f"tabulated J queried at |omega| = {a.max():g} beyond grid end {wmax:g}; "
                    "set extrapolate=True to allow it"
                )
            val = np.where(a <= wmax, np.nan_to_num(self._interp(np.minimum(a, wmax))), 0.0)
        return np.sign(w) * val

    def slope_at_zero(self) -> float:
        """``J'(0)``, which may be infinite for sub-ohmic densities."""
        if self.family in FAMILIES[:2]:
            if self.eta < 1:
                return math.inf if self.alpha > 0 else 0.0
            if self.eta > 1:
                return 0.0
            return float(self.alpha)
        if self.family == "lorentzian-sum":
            return float(sum(4 * r * g * w0 / (w0 * w0 + g * g) ** 2 for w0, g, r in self.lorentzians))
        return float(self._interp.derivative()(0.0))

    def tail_bound(self, omega_max: float, beta: float) -> float:
        """Upper bound on ``(1/pi) int_{omega_max}^inf J coth(beta w/2) dw``."""
        thermal = 1.0 if math.isinf(beta) else 1.0 / math.tanh(beta * omega_max / 2)
        if self.family in FAMILIES[:2]:
            x = omega_max / self.omega_c
            s = self.eta + 1
            tail = self.alpha * self.omega_c ** (1 - self.eta) * self.omega_c**s * special.gamma(s) * special.gammaincc(s, x)
        elif self.family == "lorentzian-sum":
            # for w > w0: J <= sum 4 r g w0 w / (w - w0)^4 integrated exactly
            tail = 0.0
            for w0, g, r in self.lorentzians:
                u = omega_max - w0
                if u <= 0:
                    return math.inf
                tail += 4 * r * g * w0 * (1 / (2 * u * u) + w0 / (3 * u**3))
        else:
            tail = 0.0 if omega_max >= self.omega_max_table else math.inf
        return thermal * tail / math.pi


@dataclass(frozen=True)
class BathSpec:
    """Spectral density together with an inverse temperature (``inf`` for T = 0)."""

    density: SpectralDensity
    beta: float = math.inf

    def __post_init__(self):
        if not (self.beta > 0):
            raise ValueError("beta must be positive (use math.inf for zero temperature)")

    @property
    def zero_temperature(self) -> bool:
        return math.isinf(self.beta)

    def noise_power(self, omega):
        return noise_power(self, omega)

    def thermal_weight(self, omega):
        """``J(omega) coth(beta omega / 2)``, finite continuation at 0 where it exists."""
        w = np.asarray(omega, dtype=float)
        j = self.density(w)
        if self.zero_temperature:
            return np.abs(j)
        x = self.beta * np.abs(w)
        out = np.empty_like(w)
        small = x < 1e-3
        with np.errstate(divide="ignore", invalid="ignore"):
            out[~small] = np.abs(j[~small]) / np.tanh(x[~small] / 2)
            xs = x[small]
            # coth(x/2) = 2/x + x/6 - x^3/360 + ...
            out[small] = np.abs(j[small]) * (2 / xs + xs / 6 - xs**3 / 360)
        zero = w == 0
        if np.any(zero):
            out[zero] = 2 * self.density.slope_at_zero() / self.beta
        return out


@dataclass(frozen=True)
class LorentzianNoise:
    """Noise power given directly as a sum of Lorentzian peaks.

    ``S(omega) = sum_k 2 Re[d_k / (z_k - i omega)]`` with ``z_k = gamma_k + i omega_k``.
    The exact correlation function is ``sum_k d_k exp(-z_k t)``, so a rational fit
    of ``S`` must return exactly these modes.  Each entry of ``peaks`` is
    ``(d, gamma, omega)`` with ``d`` complex.
    """

    peaks: tuple

    def noise_power(self, omega):
        w = np.asarray(omega, dtype=float)
        out = np.zeros_like(w)
        for d, g, om in self.peaks:
            out = out + 2 * np.real(complex(d) / (complex(g, om) - 1j * w))
        return out

    def correlation(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=complex)
        for d, g, om in self.peaks:
            out = out + complex(d) * np.exp(-complex(g, om) * t)
        return out


def noise_power(spec: BathSpec, omega):
    """Noise power ``S(omega) = 2 n(omega) J(omega)``.

    Parameters
    ----------
    spec : BathSpec
    omega : float or ndarray
        Real frequencies of either sign.

    Returns
    -------
    float or ndarray
        Non-negative noise power.  At ``omega = 0`` the continuous limit
        ``2 J'(0) / beta`` is returned (0 at zero temperature, ``inf`` for
        sub-ohmic densities at finite temperature).
    """
    scalar = np.ndim(omega) == 0
    w = np.atleast_1d(np.asarray(omega, dtype=float))
    j = spec.density(w)
    if spec.zero_temperature:
        out = np.where(w > 0, 2 * j, 0.0)
    else:
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            # n(w) = 1 / (1 - exp(-beta w)) = -1 / expm1(-beta w)
            out = 2 * j / (-np.expm1(-spec.beta * w))
        out = np.where(np.isfinite(out) | (w == 0), out, 0.0)
        zero = w == 0
        if np.any(zero):
            out[zero] = 2 * spec.density.slope_at_zero() / spec.beta
    out = np.maximum(out, 0.0)
    return float(out[0]) if scalar else out


def _omega_max(spec: BathSpec, tol: float) -> float:
    d = spec.density
    if d.family == "tabulated":
        return d.omega_max_table
    if d.family == "lorentzian-sum":
        w = max(w0 + g for w0, g, _ in d.lorentzians) * 2 + 1.0
    else:
        w = d.omega_c
    while d.tail_bound(w, spec.beta) > tol:
        w *= 1.25
    return w


def _panel_points(omega_max: float, tmax: float, min_panels: int = 8) -> np.ndarray:
    width = omega_max / min_panels
    if tmax > 0:
        width = min(width, math.pi / (4 * tmax))
    n = int(math.ceil(omega_max / width))
    return np.linspace(0.0, omega_max, n + 1)[1:-1]


def correlation_quadrature(spec: BathSpec, t, tol: float = 1e-10, max_subintervals: int = 200000,
                           method: str = "oscillatory"):
    """Bath correlation function by direct quadrature over frequency.

    ``C(t) = int_0^inf (J/pi) [coth(beta w/2) cos(w t) - i sin(w t)] dw``.

    Parameters
    ----------
    spec : BathSpec
    t : float or array_like
        Non-negative times.
    tol : float
        Absolute accuracy target.  The frequency integral is cut at the
        point where an analytic tail bound drops below ``tol / 10``.
    max_subintervals : int
        Budget for the adaptive scheme.
    method : {"oscillatory", "adaptive"}
        ``oscillatory`` (default) uses the Fourier-weighted QUADPACK routine
        time by time, which stays cheap at long times.  ``adaptive``
        integrates all times at once with vector Gauss-Kronrod panels no
        wider than ``pi / (4 t_max)`` and serves as an independent cross-check.

    Raises
    ------
    QuadratureError
        If the requested accuracy is not reached within the budget.
    """
    scalar = np.ndim(t) == 0
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(ts < 0):
        raise ValueError("times must be non-negative")
    wmax = _omega_max(spec, tol / 10)
    J = spec.density
    if method == "adaptive":
        tmax = float(ts.max()) if ts.size else 0.0
        pts = _panel_points(wmax, tmax)

        def f(w):
            if w == 0:
                return np.zeros(2 * ts.size)
            a = spec.thermal_weight(np.array([w]))[0] / math.pi
            b = J(np.array([w]))[0] / math.pi
            return np.concatenate([a * np.cos(w * ts), -b * np.sin(w * ts)])

        res, err, info = integrate.quad_vec(f, 0.0, wmax, epsabs=tol / 4, epsrel=0, norm="max",
                                            points=pts, limit=max_subintervals, full_output=True)
        if info.status != 0 or err > tol:
            raise QuadratureError(f"adaptive quadrature failed: error estimate {err:.3g} > {tol:.3g}")
        out = res[: ts.size] + 1j * res[ts.size:]
    elif method == "oscillatory":
        out = np.empty(ts.size, dtype=complex)
        fre = lambda w: spec.thermal_weight(np.array([w]))[0] / math.pi if w > 0 else 0.0
        fim = lambda w: J(np.array([w]))[0] / math.pi
        for i, ti in enumerate(ts):
            # failures surface as QuadratureError below, not as warnings
            with np.errstate(all="ignore"), warnings.catch_warnings():
                warnings.simplefilter("ignore", integrate.IntegrationWarning)
                if ti == 0:
                    re, e1 = integrate.quad(fre, 0, wmax, epsabs=tol / 4, epsrel=0, limit=2000)[:2]
                    im, e2 = 0.0, 0.0
                else:
                    re, e1 = integrate.quad(fre, 0, wmax, weight="cos", wvar=ti, epsabs=tol / 4,
                                            epsrel=0, limit=2000)[:2]
                    im, e2 = integrate.quad(fim, 0, wmax, weight="sin", wvar=ti, epsabs=tol / 4,
                                            epsrel=0, limit=2000)[:2]
            if e1 + e2 > tol:
                raise QuadratureError(f"oscillatory quadrature at t={ti:g} failed: {e1 + e2:.3g} > {tol:.3g}")
            out[i] = re - 1j * im
    else:
        raise ValueError(f"unknown quadrature method {method!r}")
    return complex(out[0]) if scalar else out


def dephasing_exponent(spec: BathSpec, t, tol: float = 1e-10):
    """Double time integral of the real correlation, ``Phi(t) = int_0^t (t-u) Re C(u) du``.

    Evaluated in frequency space as
    ``(1/pi) int_0^inf J coth(beta w/2) (1 - cos w t) / w^2 dw``.
    For a system that commutes with its coupling ``q`` (pure dephasing), the
    coherence between eigenstates ``a`` and ``b`` of ``q`` decays as
    ``|rho_ab(t)| = |rho_ab(0)| exp(-(q_a - q_b)^2 Phi(t))``.
    """
    scalar = np.ndim(t) == 0
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    wmax = _omega_max(spec, tol / 10)
    tmax = float(ts.max()) if ts.size else 0.0
    pts = _panel_points(wmax, tmax)

    def f(w):
        if w == 0:
            return np.zeros(ts.size)
        a = spec.thermal_weight(np.array([w]))[0]
        return a * (2 * np.sin(w * ts / 2) ** 2) / (math.pi * w * w)

    res, err, info = integrate.quad_vec(f, 0.0, wmax, epsabs=tol / 4, epsrel=0, norm="max",
                                        points=pts, limit=200000, full_output=True)
    if info.status != 0 or err > tol:
        raise QuadratureError(f"dephasing quadrature failed: error estimate {err:.3g}")
    return float(res[0]) if scalar else res
