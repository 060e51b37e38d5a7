import math

import numpy as np
import pytest
from scipy import integrate

from conftest import power_law_zero_t
from qdmess.bath import (BathSpec, LorentzianNoise, QuadratureError, SpectralDensity, correlation_quadrature,
                         dephasing_exponent, noise_power)


def test_subohmic_c0_frozen(subohmic_zero_t):
    # alpha omega_c^2 Gamma(3/2) / pi
    assert correlation_quadrature(subohmic_zero_t, 0.0) == pytest.approx(1.4104739588654784, rel=1e-10)


@pytest.mark.parametrize("eta", [0.5, 1.0, 1.7])
def test_zero_temperature_closed_form(eta):
    fam = "ohmic-exponential-cutoff" if eta == 1.0 else "sub-ohmic-exponential-cutoff"
    spec = BathSpec(SpectralDensity(fam, alpha=0.1, omega_c=5.0, eta=eta), math.inf)
    t = np.array([0.0, 0.05, 0.3, 1.0, 4.0, 20.0])
    C = correlation_quadrature(spec, t)
    assert np.max(np.abs(C - power_law_zero_t(0.1, 5.0, eta, t))) < 1e-9


def test_adaptive_and_oscillatory_agree(ohmic_warm):
    t = np.linspace(0, 3, 7)
    a = correlation_quadrature(ohmic_warm, t, method="adaptive")
    b = correlation_quadrature(ohmic_warm, t, method="oscillatory")
    assert np.max(np.abs(a - b)) < 1e-8


def test_unknown_method_rejected(ohmic_warm):
    with pytest.raises(ValueError):
        correlation_quadrature(ohmic_warm, [0.0], method="simpson")


def test_negative_time_rejected(ohmic_warm):
    with pytest.raises(ValueError):
        correlation_quadrature(ohmic_warm, [-0.5])


def test_detailed_balance(ohmic_warm):
    w = np.linspace(0.1, 30, 50)
    S_pos, S_neg = noise_power(ohmic_warm, w), noise_power(ohmic_warm, -w)
    assert np.allclose(S_neg, np.exp(-ohmic_warm.beta * w) * S_pos, rtol=1e-12)


def test_noise_power_zero_frequency(ohmic_warm):
    # 2 J'(0) / beta = 2 alpha / beta
    assert noise_power(ohmic_warm, 0.0) == pytest.approx(0.1)
    cold = BathSpec(ohmic_warm.density, math.inf)
    assert noise_power(cold, 0.0) == 0.0
    assert np.all(noise_power(cold, -np.array([0.5, 3.0])) == 0.0)


def test_noise_power_continuous_near_zero(ohmic_warm):
    assert noise_power(ohmic_warm, 1e-9) == pytest.approx(noise_power(ohmic_warm, 0.0), rel=1e-8)


def test_subohmic_finite_t_diverges_at_zero():
    spec = BathSpec(SpectralDensity("sub-ohmic-exponential-cutoff", alpha=0.05, omega_c=10, eta=0.5), 2.0)
    assert math.isinf(noise_power(spec, 0.0))


def test_spectral_density_is_odd():
    J = SpectralDensity("lorentzian-sum", lorentzians=((2.0, 0.5, 1.0), (5.0, 1.0, 0.3)))
    w = np.linspace(-10, 10, 41)
    assert np.allclose(J(-w), -J(w))


@pytest.mark.parametrize("kw", [dict(alpha=-1.0, omega_c=1.0), dict(alpha=1.0, omega_c=0.0)])
def test_invalid_power_law(kw):
    with pytest.raises(ValueError):
        SpectralDensity("ohmic-exponential-cutoff", **kw)


def test_unknown_family():
    with pytest.raises(ValueError):
        SpectralDensity("super-ohmic")


def test_tabulated_matches_analytic():
    w = np.linspace(0.05, 60, 400)
    ref = SpectralDensity("ohmic-exponential-cutoff", alpha=0.05, omega_c=10)
    tab = SpectralDensity("tabulated", table=(w, ref(w)))
    q = np.linspace(0.1, 50, 97)
    assert np.max(np.abs(tab(q) - ref(q))) < 1e-5
    assert tab(0.0) == 0.0


def test_tabulated_bounds():
    w = np.linspace(0.1, 5, 20)
    tab = SpectralDensity("tabulated", table=(w, w * np.exp(-w)))
    with pytest.raises(ValueError):
        tab(6.0)
    ext = SpectralDensity("tabulated", table=(w, w * np.exp(-w)), extrapolate=True)
    assert ext(6.0) == 0.0
    with pytest.raises(ValueError):
        SpectralDensity("tabulated", table=(w, -w))
    with pytest.raises(ValueError):
        SpectralDensity("tabulated", table=(w[::-1], w))


def test_lorentzian_noise_correlation_matches_fourier():
    src = LorentzianNoise(((0.3 - 0.1j, 0.7, 1.2), (0.2 + 0.05j, 1.5, -0.4)))
    t = 0.8
    # C(t) = (1/2 pi) int S(w) exp(-i w t) dw
    re = integrate.quad(lambda w: src.noise_power(w) * np.cos(w * t), -400, 400, limit=2000)[0]
    im = -integrate.quad(lambda w: src.noise_power(w) * np.sin(w * t), -400, 400, limit=2000)[0]
    assert complex(re, im) / (2 * np.pi) == pytest.approx(complex(src.correlation(t)), abs=2e-3)


def test_dephasing_exponent_against_direct_integral():
    spec = BathSpec(SpectralDensity("ohmic-exponential-cutoff", alpha=0.05, omega_c=10), math.inf)
    t = 0.7
    # Phi(t) = int_0^t (t - u) Re C(u) du with the closed-form C
    ref = integrate.quad(lambda u: (t - u) * power_law_zero_t(0.05, 10, 1.0, u).real, 0, t, epsabs=1e-14)[0]
    assert dephasing_exponent(spec, t) == pytest.approx(ref, rel=1e-8)


def test_dephasing_exponent_zero_at_origin(ohmic_warm):
    assert dephasing_exponent(ohmic_warm, 0.0) == pytest.approx(0.0, abs=1e-14)


def test_quadrature_error_on_tiny_budget(ohmic_warm):
    with pytest.raises(QuadratureError):
        correlation_quadrature(ohmic_warm, [3.0], tol=1e-22)
