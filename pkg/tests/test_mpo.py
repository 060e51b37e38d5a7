import itertools

import numpy as np
import pytest

from qdmess.fpheom import dense_generator
from qdmess.modefit import Mode, ModeSet
from qdmess.models import spin_boson
from qdmess.mpo import (BudgetError, MpoChain, MpoTensor, build_mpo, check_site_commutation, contract_dense,
                        load_chain, localize_deviation, save_chain, verify_mpo)

SYS = spin_boson(1.0, 0.3)
MODES = ModeSet((Mode(0.2 - 0.08j, 1.0, 1.5), Mode(0.12 + 0.04j, 0.5, -0.8)))


@pytest.mark.parametrize("K,caps", [(0, []), (1, [1]), (1, [2]), (2, [1, 1]), (2, [1, 2]), (2, [2, 2])])
def test_dense_equivalence(K, caps):
    modes = ModeSet(MODES.modes[:K])
    chain = build_mpo(SYS, modes, caps)
    G = contract_dense(chain)
    assert np.max(np.abs(G - dense_generator(SYS, modes, caps))) < 1e-12


def test_unitary_chain_is_liouvillian():
    G = contract_dense(build_mpo(SYS, ModeSet(()), []))
    H = SYS.H
    L = -1j * (np.kron(H, np.eye(2)) - np.kron(np.eye(2), H.T))
    assert np.allclose(G, L, atol=1e-15)


def test_bond_dimension_and_labels():
    chain = build_mpo(SYS, MODES, 2)
    assert chain.site_map == ["i", "m1", "n1", "m2", "n2", "j"]
    assert [t.blocks.shape[:2] for t in chain.tensors] == [(1, 4)] + [(4, 4)] * 4 + [(4, 1)]
    assert chain.phys_dims == [2, 3, 3, 3, 3, 2]


def test_site_exchange_invariance():
    rep = check_site_commutation(build_mpo(SYS, MODES, 2))
    assert rep["max_deviation"] < 1e-12
    assert rep["block_deviation"] < 1e-12


def test_site_exchange_needs_two_modes():
    with pytest.raises(ValueError):
        check_site_commutation(build_mpo(SYS, ModeSet(MODES.modes[:1]), 2))


def test_corrupted_site_is_localized():
    fresh = build_mpo(SYS, MODES, 2)
    bad_tensors = [MpoTensor(t.blocks.copy(), t.label) for t in fresh.tensors]
    bad_tensors[3].blocks[1, 0, 0, 1] += 1e-3
    bad = MpoChain(bad_tensors, list(fresh.site_map))
    rep = verify_mpo(bad, dense_generator(SYS, MODES, [2, 2]), reference_chain=fresh)
    assert not rep["passed"]
    assert rep["max_deviation"] == pytest.approx(1e-3, rel=1e-6)
    assert rep["suspect_site"] == "m2"
    # without the reference chain the operator-level measure still points at m2
    rep2 = verify_mpo(bad, dense_generator(SYS, MODES, [2, 2]))
    assert rep2["suspect_site"] == "m2"


def test_localize_deviation_product():
    dims = [2, 3, 2]
    A = np.arange(9.0).reshape(3, 3)
    D = np.kron(np.kron(np.eye(2), A), np.eye(2))
    loc = localize_deviation(D, dims, ["a", "b", "c"])
    assert loc["a"] < 1e-14 and loc["c"] < 1e-14 and loc["b"] > 1


def test_budget():
    with pytest.raises(BudgetError):
        contract_dense(build_mpo(SYS, MODES, 2), budget=100)


def test_chain_roundtrip(tmp_path):
    chain = build_mpo(SYS, MODES, [1, 2])
    p = tmp_path / "chain.txt"
    save_chain(chain, p)
    back = load_chain(p)
    assert back.site_map == chain.site_map
    for a, b in zip(chain.tensors, back.tensors):
        assert np.array_equal(a.blocks, b.blocks)


def test_chain_validation():
    t = build_mpo(SYS, MODES, 1).tensors
    with pytest.raises(ValueError):
        MpoChain([t[0], t[2]])
    with pytest.raises(ValueError):
        build_mpo(SYS, MODES, [1])
