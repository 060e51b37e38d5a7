import math

import numpy as np
import pytest
from scipy.special import comb

from qdmess.fpheom import (FPHEOM, HierarchyState, SystemSpec, Truncation, build_index_set, default_step,
                           dense_generator, propagate, rhs)
from qdmess.integrate import IntegratorConfig
from qdmess.modefit import Mode, ModeSet
from qdmess.models import SZ, pure_dephasing, spin_boson


@pytest.mark.parametrize("K,L", [(1, 3), (2, 4), (3, 2)])
def test_index_count(K, L):
    idx = build_index_set(K, Truncation(L))
    assert len(idx) == comb(2 * K + L, L, exact=True)
    assert idx[0] == (0,) * (2 * K)
    assert len(set(idx)) == len(idx)


def test_caps_restrict_indices():
    idx = build_index_set(2, Truncation(6, caps=(1, 2)))
    assert all(i[0] <= 1 and i[2] <= 1 and i[1] <= 2 and i[3] <= 2 for i in idx)
    assert len(idx) == (2 * 3) ** 2


def test_index_budget():
    with pytest.raises(MemoryError):
        build_index_set(6, Truncation(8), max_indices=1000)


def test_cap_vector_validation():
    with pytest.raises(ValueError):
        Truncation(2, caps=(1, 2, 3)).cap_vector(2)
    with pytest.raises(ValueError):
        Truncation(-1)


@pytest.mark.parametrize("kw", [
    dict(H=[[0, 1], [0, 0]], q=SZ, rho0=np.eye(2) / 2),
    dict(H=np.eye(2), q=SZ, rho0=np.eye(2)),
    dict(H=np.eye(2), q=SZ, rho0=np.diag([1.5, -0.5])),
    dict(H=np.eye(3), q=SZ, rho0=np.eye(2) / 2),
])
def test_system_validation(kw):
    with pytest.raises(ValueError):
        SystemSpec(**kw)


@pytest.mark.parametrize("method", ["rk4", "rk45"])
def test_rabi_oracle(method):
    s = spin_boson(delta=1.3)
    cfg = IntegratorConfig(method=method, n_samples=51, atol=1e-12, rtol=1e-10)
    rec, _ = propagate(s, s, ModeSet(()), 10.0, cfg, Truncation(0))
    assert np.max(np.abs(rec.observables["sz"] - np.cos(1.3 * rec.t))) < 1e-8


def _dense_basis_map(op, N, caps):
    """Flat position of every (block, i, j) in the dense (i, m1, n1, ..., j) basis."""
    K = len(caps)
    dims = [N] + [c + 1 for c in caps for _ in range(2)] + [N]
    pos = np.zeros((op.size, N, N), dtype=np.int64)
    for b, idx in enumerate(op.indices):
        occ = []
        for k in range(K):
            occ += [idx[k], idx[K + k]]
        for i in range(N):
            for j in range(N):
                pos[b, i, j] = np.ravel_multi_index(tuple([i] + occ + [j]), dims)
    return pos


@pytest.mark.parametrize("K", [1, 2])
def test_rhs_matches_dense_generator(two_modes, K):
    s = spin_boson(1.0, 0.4)
    modes = ModeSet(two_modes.modes[:K])
    caps = [2] * K
    op = FPHEOM(s, modes, Truncation(4 * K, caps=tuple(caps)))
    G = dense_generator(s, modes, caps)
    rng = np.random.default_rng(3)
    blocks = rng.normal(size=(op.size, 2, 2)) + 1j * rng.normal(size=(op.size, 2, 2))
    pos = _dense_basis_map(op, 2, caps)
    v = np.zeros(G.shape[0], complex)
    v[pos.ravel()] = blocks.ravel()
    assert np.max(np.abs((G @ v)[pos] - op(0.0, blocks))) < 1e-13
    state = HierarchyState(op.indices, blocks, 0.0)
    assert np.array_equal(rhs(state, s, modes, Truncation(4 * K, caps=tuple(caps))), op(0.0, blocks))


def test_structural_invariants(two_modes):
    s = spin_boson(1.0, 0.5)
    rec, final = propagate(s, s, two_modes, 5.0, IntegratorConfig(n_samples=26), Truncation(5))
    assert np.max(np.abs(rec.diagnostics["trace"] - 1)) < 1e-12
    assert np.max(rec.diagnostics["herm_residual"]) < 1e-12
    assert final.t == pytest.approx(5.0)
    assert np.allclose(final.rho, final.rho.conj().T)


def test_restart_from_state(two_modes):
    s = spin_boson(1.0, 0.5)
    cfg = IntegratorConfig(n_samples=11, dt=0.01)
    full, _ = propagate(s, s, two_modes, 2.0, cfg, Truncation(4))
    _, mid = propagate(s, s, two_modes, 1.0, IntegratorConfig(n_samples=6, dt=0.01), Truncation(4))
    rest, _ = propagate(mid, s, two_modes, 2.0, IntegratorConfig(n_samples=6, dt=0.01))
    assert np.max(np.abs(rest.observables["sz"][-1] - full.observables["sz"][-1])) < 1e-12


def test_pure_dephasing_mode_formula():
    # with [q, H] = 0 the coherence decays as exp(-4 Re sum d (z t - 1 + e^{-z t}) / z^2)
    modes = ModeSet((Mode(0.05 - 0.02j, 2.0, 1.0), Mode(0.03 + 0.01j, 0.7, -0.5)))
    s = pure_dephasing(1.0)
    rec, _ = propagate(s, s, modes, 4.0, IntegratorConfig(n_samples=21), Truncation(8))
    t = rec.t[:, None]
    z, d = modes.z[None, :], modes.d[None, :]
    phi = np.real(np.sum(d * (z * t - 1 + np.exp(-z * t)) / z**2, axis=1))
    coh = np.abs(rec.observables["sx"] + 1j * rec.observables["sy"]) / 2
    assert np.max(np.abs(coh / (0.5 * np.exp(-4 * phi)) - 1)) < 1e-7


def test_default_step_scales_with_rates():
    s = spin_boson(1.0)
    assert default_step(s, ModeSet(())) == pytest.approx(0.01)
    assert default_step(s, ModeSet((Mode(1.0, 100.0, 0.0),))) == pytest.approx(1e-3)


def test_initial_state_layout(two_modes):
    s = spin_boson()
    idx = build_index_set(2, Truncation(2))
    st = HierarchyState.initial(s, idx)
    assert np.array_equal(st.rho, s.rho0)
    assert np.count_nonzero(st.blocks[1:]) == 0
