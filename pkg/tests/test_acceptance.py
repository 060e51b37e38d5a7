"""Acceptance suite: one PASS/FAIL line per criterion.

Run under pytest (lines are collected into the terminal summary) or as a
script, ``python tests/test_acceptance.py``.  Tolerances are pinned and not
tuned to the implementation; criteria that cannot be met are marked as
expected failures and still print their FAIL line with the measured numbers.
"""

import math
import time

import numpy as np
import pytest

from qdmess.bath import BathSpec, SpectralDensity, correlation_quadrature, dephasing_exponent
from qdmess.fpheom import Truncation, dense_generator
from qdmess.fpheom import propagate as fp_propagate
from qdmess.integrate import IntegratorConfig
from qdmess.modefit import FrequencyWindow, Mode, ModeSet, decompose, log_regression, mode_count_scan, reconstruct_C
from qdmess.models import drude_modes, pure_dephasing, spin_boson
from qdmess.mpo import build_mpo, check_site_commutation, contract_dense
from qdmess.representations import (alt_lindblad_model, conventional_heom_propagate, convergence_order,
                                    lindblad_model, propagate_boson_model, redfield_plus_propagate)
from qdmess.stochastic import EnsembleConfig, HOPSNoise, SLNNoise, hops_ensemble, sln_ensemble, trajectory_rng

SUBOHMIC = BathSpec(SpectralDensity("sub-ohmic-exponential-cutoff", alpha=0.05, omega_c=10.0, eta=0.5), math.inf)
SUBOHMIC_EPS = np.logspace(-1, -6, 11)
SUBOHMIC_OMEGA_D, SUBOHMIC_DELTA = 100.0, 1e-9

# weak-coupling spin-boson instance shared by the equivalence and stochastic checks
SB = spin_boson(1.0, 0.5)
WEAK = ModeSet((Mode(0.02 - 0.008j, 1.0, 1.5), Mode(0.012 + 0.004j, 0.5, -0.8)))
T_SB = 10.0

# every FP-HEOM record produced here is re-checked for the structural invariants
FP_RUNS = []


def fp(system, modes, t_final, L, config=None, tag=""):
    rec, _ = fp_propagate(system, system, modes, t_final, config or IntegratorConfig(n_samples=51), Truncation(L))
    FP_RUNS.append((tag or f"K={modes.K} L={L}", rec))
    return rec


def sz_dev(a, b):
    return float(np.max(np.abs(a.observables["sz"] - b.observables["sz"])))


# --------------------------------------------------------------------------- 1

def test_criterion1_mode_count_scaling(criterion):
    t0 = time.perf_counter()
    rows = mode_count_scan(SUBOHMIC, SUBOHMIC_EPS, SUBOHMIC_OMEGA_D, SUBOHMIC_DELTA)
    elapsed = time.perf_counter() - t0
    K = [r.K for r in rows]
    slope, _, r2 = log_regression(rows)
    monotone = all(r.ok for r in rows) and all(b > a for a, b in zip(K, K[1:]))
    ok = r2 >= 0.9 and monotone and elapsed <= 300
    criterion("criterion 1 (mode count vs ln(1/omega_eps))", ok,
              f"K={K}, slope={slope:.3f}, R^2={r2:.4f}, strictly increasing={monotone}, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 2

def _fidelity(bath, eps, omega_D, delta, c0=None):
    t0 = time.perf_counter()
    ms = decompose(bath, FrequencyWindow(eps, omega_D, 20), delta, c0=c0)
    t = np.linspace(0.0, 1.0 / eps, 41)
    ref = correlation_quadrature(bath, t)
    dev = float(np.max(np.abs(reconstruct_C(ms, t) - ref)))
    bound = 100 * delta * abs(ref[0])
    return ms, dev, bound, time.perf_counter() - t0


OHMIC = BathSpec(SpectralDensity("ohmic-exponential-cutoff", alpha=0.05, omega_c=10.0), 1.0)
DEPHASING_BATH = BathSpec(SpectralDensity("ohmic-exponential-cutoff", alpha=0.02, omega_c=5.0), 1.0)


@pytest.mark.parametrize("name,bath,eps,omega_D,delta,anchor", [
    ("ohmic alpha=0.05 beta=1", OHMIC, 1e-2, 1e3, 1e-9, False),
    ("ohmic alpha=0.02 beta=1, sum-rule anchored", DEPHASING_BATH, 1e-2, 200.0, 1e-9, True),
])
def test_criterion2_decomposition_fidelity(criterion, name, bath, eps, omega_D, delta, anchor):
    c0 = correlation_quadrature(bath, 0.0).real if anchor else None
    ms, dev, bound, elapsed = _fidelity(bath, eps, omega_D, delta, c0)
    ok = ms.achieved_error <= delta and dev <= bound and elapsed <= 60
    criterion(f"criterion 2 [{name}]", ok,
              f"K={ms.K}, fit error {ms.achieved_error:.2e} (<= {delta:.0e}), "
              f"max|C_modes - C_ref| {dev:.2e} (<= {bound:.2e}), {elapsed:.1f}s")
    assert ok


@pytest.mark.xfail(strict=True, reason="the T=0 sub-ohmic noise power has a sqrt cusp inside the unsampled "
                                       "gap |omega| < omega_eps; no fit on the grid pins C(t) to 100*delta*C(0)")
def test_criterion2_subohmic_bath(criterion):
    worst, fit_ok, slow = 0.0, True, 0.0
    for eps in SUBOHMIC_EPS:
        ms, dev, bound, elapsed = _fidelity(SUBOHMIC, eps, SUBOHMIC_OMEGA_D, SUBOHMIC_DELTA)
        fit_ok &= ms.achieved_error <= SUBOHMIC_DELTA
        worst = max(worst, dev / bound)
        slow = max(slow, elapsed)
    ok = fit_ok and worst <= 1.0 and slow <= 60
    criterion("criterion 2 [sub-ohmic T=0, all scan windows]", ok,
              f"fit error <= delta on all windows: {fit_ok}; worst time-domain deviation {worst:.2e} x bound; "
              f"slowest {slow:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 3

def test_criterion3_exact_dephasing(criterion):
    t0 = time.perf_counter()
    omega_c = 5.0
    ms = decompose(DEPHASING_BATH, FrequencyWindow(1e-2, 200.0, 20), 1e-8)
    s = pure_dephasing(1.0)
    T = 10 / omega_c
    cfg = IntegratorConfig(n_samples=21)
    coh = {}
    for L in (2, 3):
        rec = fp(s, ms, T, L, cfg, tag=f"dephasing L={L}")
        coh[L] = np.abs(rec.observables["sx"] + 1j * rec.observables["sy"]) / 2
    exact = 0.5 * np.exp(-4 * dephasing_exponent(DEPHASING_BATH, rec.t))
    rel = float(np.max(np.abs(coh[3] / exact - 1)))
    cert = float(np.max(np.abs(coh[3] / coh[2] - 1)))
    elapsed = time.perf_counter() - t0
    ok = rel <= 1e-4 and cert <= 1e-5 and elapsed <= 120
    criterion("criterion 3 (pure dephasing vs exact exponent)", ok,
              f"K={ms.K}, L=3, max rel err {rel:.2e} (<= 1e-4), L2->L3 change {cert:.1e}, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 4

@pytest.fixture(scope="module")
def equivalence_runs():
    t0 = time.perf_counter()
    cfg = IntegratorConfig(n_samples=101)
    out = {
        "fp": fp(SB, WEAK, T_SB, 6, cfg, tag="weak L=6"),
        "fp+": fp(SB, WEAK, T_SB, 7, cfg, tag="weak L=7"),
        "lindblad": propagate_boson_model(lindblad_model(SB, WEAK, 4), SB, T_SB, cfg),
        "lindblad+": propagate_boson_model(lindblad_model(SB, WEAK, 5), SB, T_SB, cfg),
        "alt": propagate_boson_model(alt_lindblad_model(SB, WEAK, 4), SB, T_SB, cfg),
        "alt+": propagate_boson_model(alt_lindblad_model(SB, WEAK, 5), SB, T_SB, cfg),
    }
    real = drude_modes(0.02, 1.0, 1.0, 2)
    out["real fp"] = fp(SB, real, T_SB, 6, cfg, tag="real-pole L=6")
    out["real fp+"] = fp(SB, real, T_SB, 7, cfg, tag="real-pole L=7")
    out["real conventional"] = conventional_heom_propagate(SB, real, Truncation(6), T_SB, cfg)
    out["real lindblad"] = propagate_boson_model(lindblad_model(SB, real, 4), SB, T_SB, cfg)
    out["elapsed"] = time.perf_counter() - t0
    return out


def test_criterion4_hierarchy_lindblad_conventional(criterion, equivalence_runs):
    r = equivalence_runs
    cert = max(sz_dev(r["fp"], r["fp+"]), sz_dev(r["lindblad"], r["lindblad+"]),
               sz_dev(r["real fp"], r["real fp+"]))
    pair = sz_dev(r["fp"], r["lindblad"])
    conv = max(sz_dev(r["real conventional"], r["real fp"]), sz_dev(r["real lindblad"], r["real fp"]))
    ok = cert <= 1e-6 and pair <= 1e-4 and conv <= 1e-4 and r["elapsed"] <= 600
    criterion("criterion 4 [FP-HEOM, Lindblad-type, conventional HEOM]", ok,
              f"truncation change {cert:.1e}; FP vs Lindblad {pair:.2e}; real-pole set: conventional/Lindblad vs "
              f"FP {conv:.2e} (<= 1e-4), {r['elapsed']:.1f}s")
    assert ok


@pytest.mark.xfail(strict=True, reason="the non-Hermitian form weights the bra-ket cross term by |d| instead of "
                                       "d and does not conserve trace, so it differs at second order when Im d != 0")
def test_criterion4_alt_lindblad(criterion, equivalence_runs):
    r = equivalence_runs
    cert = sz_dev(r["alt"], r["alt+"])
    dev = max(sz_dev(r["alt"], r["fp"]), sz_dev(r["alt"], r["lindblad"]))
    ok = cert <= 1e-6 and dev <= 1e-4
    criterion("criterion 4 [alternative Lindblad form, complex d]", ok,
              f"truncation change {cert:.1e}; max deviation from FP-HEOM / Lindblad-type {dev:.2e} (<= 1e-4)")
    assert ok


def test_criterion4_alt_lindblad_real_weights(criterion):
    # the same poles with real weights: the alternative form reduces to the
    # Lindblad-type one and must agree
    real_d = ModeSet(tuple(Mode(abs(m.d), m.gamma, m.omega) for m in WEAK.modes))
    cfg = IntegratorConfig(n_samples=101)
    a = propagate_boson_model(alt_lindblad_model(SB, real_d, 4), SB, T_SB, cfg)
    b = fp(SB, real_d, T_SB, 6, cfg, tag="real-d L=6")
    dev = sz_dev(a, b)
    ok = dev <= 1e-4
    criterion("criterion 4 [alternative Lindblad form, real d]", ok, f"deviation from FP-HEOM {dev:.2e} (<= 1e-4)")
    assert ok


# --------------------------------------------------------------------------- 6

REDFIELD_BASE = ModeSet((Mode(0.2 - 0.08j, 1.0, 1.5), Mode(0.12 + 0.04j, 0.5, -0.8)))


def test_criterion6_redfield_order(criterion):
    t0 = time.perf_counter()
    cfg = IntegratorConfig(n_samples=51)
    devs = []
    for lam in (1.0, 0.5, 0.25):
        modes = REDFIELD_BASE.scaled(lam**2)
        ref = fp(SB, modes, T_SB, 8, cfg, tag=f"redfield reference lambda={lam}")
        devs.append(sz_dev(redfield_plus_propagate(SB, modes, T_SB, "tier1", cfg), ref))
    ratios = [devs[0] / devs[1], devs[1] / devs[2]]
    modes = REDFIELD_BASE.scaled(0.25)
    tier1 = redfield_plus_propagate(SB, modes, T_SB, "tier1", IntegratorConfig(n_samples=11, atol=1e-12, rtol=1e-10,
                                                                                method="rk45"))
    steps = [0.02, 0.01, 0.005]
    errs = [sz_dev(redfield_plus_propagate(SB, modes, T_SB, "history-integral", IntegratorConfig(n_samples=11, dt=h)),
                   tier1) for h in steps]
    order = convergence_order(errs, steps)
    elapsed = time.perf_counter() - t0
    ok = (all(12 <= q <= 20 for q in ratios) and order >= 1 and errs[0] > errs[1] > errs[2]
          and elapsed <= 300)
    criterion("criterion 6 (Redfield+ fourth order, variant agreement)", ok,
              f"deviation {', '.join(f'{d:.2e}' for d in devs)} for lambda 1, 1/2, 1/4; "
              f"halving ratios {ratios[0]:.1f}, {ratios[1]:.1f} (in [12, 20]); tier-1 vs history "
              f"{', '.join(f'{e:.1e}' for e in errs)} at dt {steps}, order {order:.2f}; {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 7

M_TRAJ = 10_000


@pytest.fixture(scope="module")
def stochastic_reference():
    return fp(SB, WEAK, T_SB, 6, IntegratorConfig(n_samples=51), tag="stochastic reference L=6")


def _within_3se(rec, ref):
    # t = 0 is deterministic: exact equality instead of a standard-error test
    exact0 = abs(rec.observables["sz"][0] - ref.observables["sz"][0]) < 1e-12
    z = np.abs(rec.observables["sz"].real - ref.observables["sz"].real)[1:] / rec.stderr["sz"][1:]
    return exact0, float(np.mean(z <= 3)), float(z.max())


@pytest.mark.slow
@pytest.mark.parametrize("method", ["sln", "hops"])
def test_criterion7_stochastic_ensembles(criterion, stochastic_reference, method):
    t0 = time.perf_counter()
    cfg = EnsembleConfig(n_traj=M_TRAJ, seed=1, t_final=T_SB, n_samples=51, dt=0.01, chunk=2500)
    rec = sln_ensemble(SB, WEAK, cfg) if method == "sln" else hops_ensemble(SB, WEAK, Truncation(4), cfg)
    exact0, frac, zmax = _within_3se(rec, stochastic_reference)
    elapsed = time.perf_counter() - t0
    ok = exact0 and frac >= 0.95 and elapsed <= 1200
    criterion(f"criterion 7 [{method.upper()} ensemble, M={M_TRAJ}]", ok,
              f"{100 * frac:.0f}% of t > 0 within 3 SE (>= 95%), max |z| {zmax:.2f}, t=0 exact {exact0}, "
              f"{elapsed:.1f}s")
    assert ok


def _z(samples, target):
    se = samples.std() / np.sqrt(samples.size)
    return abs(samples.mean() - target) / max(se, 1e-15)


PAIRS = [(0, 0), (5, 0), (20, 3), (40, 10), (60, 60), (70, 45), (15, 50), (90, 30)]


def test_criterion7_noise_targets(criterion):
    h, n = 0.1, 101
    C = WEAK.correlation(h * np.arange(n))
    sln = SLNNoise(WEAK, h, n)
    xi, nu = sln.sample([trajectory_rng(3, i) for i in range(M_TRAJ)])
    zs = []
    for j, l in PAIRS:
        zs.append(_z(xi[:, j] * xi[:, l], C[abs(j - l)].real))
        target = 2j * C[j - l].imag if j > l else 0.0
        prod = xi[:, j] * nu[:, l]
        zs += [_z(prod.real, np.real(target)), _z(prod.imag, np.imag(target))]
        nn = nu[:, j] * nu[:, l]
        zs += [_z(nn.real, 0.0), _z(nn.imag, 0.0)]
    hops = HOPSNoise(WEAK, h, n, "conjugate")
    Z = hops.sample([trajectory_rng(3, i) for i in range(M_TRAJ)])
    # equal times are left out: Im C(0) != 0 for these modes, which no
    # stationary complex process can reproduce
    for j, l in [p for p in PAIRS if p[0] != p[1]]:
        alpha = np.conj(C[abs(j - l)])
        target = alpha if j >= l else np.conj(alpha)
        prod = Z[:, j] * np.conj(Z[:, l])
        zz = Z[:, j] * Z[:, l]
        zs += [_z(prod.real, target.real), _z(prod.imag, target.imag), _z(zz.real, 0.0), _z(zz.imag, 0.0)]
    zmax = max(zs)
    ok = zmax <= 3
    criterion("criterion 7 [noise two-point targets]", ok,
              f"{len(zs)} second moments from {M_TRAJ} draws, max |z| {zmax:.2f} (<= 3), "
              f"SLN clipped spectral mass {sln.clip_mass:.1e}")
    assert ok


# --------------------------------------------------------------------------- 8

def test_criterion8_mpo(criterion):
    t0 = time.perf_counter()
    s = spin_boson(1.0, 0.3)
    base = (Mode(0.2 - 0.08j, 1.0, 1.5), Mode(0.12 + 0.04j, 0.5, -0.8))
    worst, cases = 0.0, 0
    for K in (0, 1, 2):
        modes = ModeSet(base[:K])
        for caps in ([()] if K == 0 else [c for c in np.ndindex(*(2,) * K)]):
            caps = [c + 1 for c in caps]
            G = contract_dense(build_mpo(s, modes, caps))
            worst = max(worst, float(np.max(np.abs(G - dense_generator(s, modes, caps)))))
            cases += 1
    exch = max(check_site_commutation(build_mpo(s, ModeSet(base), caps))["max_deviation"]
               for caps in ([1, 1], [1, 2], [2, 2]))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and exch <= 1e-12 and elapsed <= 60
    criterion("criterion 8 (MPO vs dense generator)", ok,
              f"{cases} instances, max |MPO - dense| {worst:.1e}; site exchange {exch:.1e} (<= 1e-12), {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 5
# last, so that it sees every hierarchy run made above

def test_criterion5_structural_invariants(criterion):
    rabi_cfg = IntegratorConfig(method="rk45", n_samples=51, atol=1e-12, rtol=1e-10)
    rabi = fp(spin_boson(1.3), ModeSet(()), 10.0, 0, rabi_cfg, tag="unitary")
    unitary = float(np.max(np.abs(rabi.observables["sz"] - np.cos(1.3 * rabi.t))))
    if len(FP_RUNS) < 2:
        fp(SB, WEAK, T_SB, 4, tag="weak L=4")
    trace = max(float(np.max(np.abs(r.diagnostics["trace"] - 1))) for _, r in FP_RUNS)
    herm = max(float(np.max(r.diagnostics["herm_residual"])) for _, r in FP_RUNS)
    # integrator tolerance: a few hundred local tolerances accumulated over the run
    unitary_tol = 1e3 * (rabi_cfg.atol + rabi_cfg.rtol)
    ok = trace <= 1e-8 and herm <= 1e-10 and unitary <= unitary_tol
    criterion("criterion 5 (structural invariants)", ok,
              f"{len(FP_RUNS)} hierarchy runs: max |tr rho - 1| {trace:.1e} (<= 1e-8), Hermitian pairing "
              f"{herm:.1e} (<= 1e-10); unitary limit {unitary:.1e} (<= {unitary_tol:.0e})")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
