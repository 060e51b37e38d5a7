"""Free-pole hierarchical equations of motion.

Each bath mode ``d exp(-z t)`` gets two occupation indices, ``m`` acting from
the left and ``n`` from the right.  The auxiliary density operators
``rho_{m,n}`` obey the balanced hierarchy

    d/dt rho_{m,n} = -(i L_s + sum m_k z_k + sum n_k z_k*) rho_{m,n}
                     - sum sqrt((m_k+1) d_k)  [q, rho_{m+e_k, n}]
                     + sum sqrt((n_k+1) d_k*) [q, rho_{m, n+e_k}]
                     + sum sqrt(m_k d_k)       q rho_{m-e_k, n}
                     + sum sqrt(n_k d_k*)      rho_{m, n-e_k} q

with ``sqrt`` the principal branch.  ``rho_{0,0}`` is the reduced density
matrix.  The hierarchy is closed by dropping every index outside the set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from .integrate import IntegratorConfig, TrajectoryRecord, integrate, sample_times
from .modefit import ModeSet

__all__ = [
    "SystemSpec",
    "Truncation",
    "HierarchyState",
    "FPHEOM",
    "build_index_set",
    "rhs",
    "propagate",
    "dense_generator",
    "default_step",
]

_HERM_TOL = 1e-12


def _as_matrix(a, name: str) -> np.ndarray:
    m = np.asarray(a, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    return m


@dataclass
class SystemSpec:
    """System Hamiltonian, bath coupling operator, initial state and observables.

    Parameters
    ----------
    H : (N, N) array_like
        Hermitian system Hamiltonian.
    q : (N, N) array_like
        Hermitian coupling operator.
    rho0 : (N, N) array_like
        Initial reduced density matrix (Hermitian, unit trace, positive).
    observables : dict of str -> (N, N) array_like, optional
    """

    H: np.ndarray
    q: np.ndarray
    rho0: np.ndarray
    observables: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.H = _as_matrix(self.H, "H")
        self.q = _as_matrix(self.q, "q")
        self.rho0 = _as_matrix(self.rho0, "rho0")
        N = self.H.shape[0]
        if self.q.shape != (N, N) or self.rho0.shape != (N, N):
            raise ValueError("H, q and rho0 must share one dimension")
        scale = max(1.0, float(np.max(np.abs(self.H))))
        if np.max(np.abs(self.H - self.H.conj().T)) > _HERM_TOL * scale:
            raise ValueError("H is not Hermitian")
        if np.max(np.abs(self.q - self.q.conj().T)) > _HERM_TOL * max(1.0, float(np.max(np.abs(self.q)))):
            raise ValueError("q is not Hermitian")
        if np.max(np.abs(self.rho0 - self.rho0.conj().T)) > 1e-10:
            raise ValueError("rho0 is not Hermitian")
        if abs(np.trace(self.rho0) - 1) > 1e-10:
            raise ValueError("rho0 must have unit trace")
        if np.min(np.linalg.eigvalsh((self.rho0 + self.rho0.conj().T) / 2)) < -1e-10:
            raise ValueError("rho0 must be positive semidefinite")
        self.observables = {k: _as_matrix(v, k) for k, v in self.observables.items()}
        for k, v in self.observables.items():
            if v.shape != (N, N):
                raise ValueError(f"observable {k} has the wrong shape")

    @property
    def N(self) -> int:
        return self.H.shape[0]


@dataclass(frozen=True)
class Truncation:
    """Hierarchy closure: total tier ``L`` plus per-index caps.

    ``caps`` may be a single integer or a sequence of length ``2K`` ordered
    ``(m_1..m_K, n_1..n_K)``; ``None`` means only the tier bound applies.
    """

    L: int
    caps: Union[None, int, Tuple[int, ...]] = None

    def __post_init__(self):
        if self.L < 0:
            raise ValueError("tier L must be >= 0")

    def cap_vector(self, K: int) -> Tuple[int, ...]:
        if self.caps is None:
            return (self.L,) * (2 * K)
        if isinstance(self.caps, (int, np.integer)):
            return (int(self.caps),) * (2 * K)
        caps = tuple(int(c) for c in self.caps)
        if len(caps) == K:
            caps = caps + caps
        if len(caps) != 2 * K:
            raise ValueError("caps must have K or 2K entries")
        if min(caps) < 0:
            raise ValueError("caps must be >= 0")
        return caps


def build_index_set(K: int, trunc: Truncation, max_indices: int = 2_000_000) -> List[Tuple[int, ...]]:
    """Admissible hierarchy indices ``(m_1..m_K, n_1..n_K)`` in lexicographic order.

    An index is admissible when ``sum(m) + sum(n) <= L`` and every entry is
    within its cap.  The all-zero index comes first and the set is closed
    under exchanging ``m`` with ``n`` whenever the caps are symmetric.

    Raises
    ------
    MemoryError
        If the set would exceed ``max_indices`` entries.
    """
    caps = trunc.cap_vector(K)
    out: List[Tuple[int, ...]] = []
    cur = [0] * (2 * K)

    def rec(pos: int, left: int):
        if pos == 2 * K:
            out.append(tuple(cur))
            if len(out) > max_indices:
                raise MemoryError(f"hierarchy exceeds {max_indices} indices")
            return
        for v in range(min(caps[pos], left) + 1):
            cur[pos] = v
            rec(pos + 1, left - v)
        cur[pos] = 0

    rec(0, trunc.L)
    return out


@dataclass
class HierarchyState:
    """All auxiliary density operators at one time, stacked as ``(n_idx, N, N)``."""

    indices: List[Tuple[int, ...]]
    blocks: np.ndarray
    t: float = 0.0

    @property
    def rho(self) -> np.ndarray:
        return self.blocks[0]

    @classmethod
    def initial(cls, system: SystemSpec, indices) -> "HierarchyState":
        blocks = np.zeros((len(indices), system.N, system.N), dtype=complex)
        blocks[0] = system.rho0
        return cls(list(indices), blocks, 0.0)


def default_step(system: SystemSpec, modes: ModeSet) -> float:
    """``min(0.01, 0.1 / max(|z_k|, ||H_s||))``."""
    rate = float(np.linalg.norm(system.H, 2))
    if modes.K:
        rate = max(rate, float(np.max(np.abs(modes.z))))
    return min(0.01, 0.1 / rate) if rate > 0 else 0.01


class FPHEOM:
    """Hierarchy right-hand side with precomputed connectivity.

    Parameters
    ----------
    system : SystemSpec
    modes : ModeSet
    trunc : Truncation
    """

    def __init__(self, system: SystemSpec, modes: ModeSet, trunc: Truncation, max_indices: int = 2_000_000):
        self.system = system
        self.modes = modes
        self.trunc = trunc
        K = modes.K
        self.indices = build_index_set(K, trunc, max_indices)
        n = len(self.indices)
        lookup = {idx: i for i, idx in enumerate(self.indices)}
        self.lookup = lookup
        arr = np.array(self.indices, dtype=np.int64).reshape(n, 2 * K)
        z, sd = modes.z, np.sqrt(modes.d.astype(complex))
        m, nn = arr[:, :K], arr[:, K:]
        self.decay = (m @ z + nn @ z.conj()) if K else np.zeros(n, dtype=complex)

        # up: sum_k sqrt((m_k+1) d_k) rho_{m+} - sqrt((n_k+1) d_k*) rho_{n+}, enters as -[q, up]
        # left: sum_k sqrt(m_k d_k) rho_{m-}, enters as q @ left
        # right: sum_k sqrt(n_k d_k*) rho_{n-}, enters as right @ q
        up_r, up_c, up_v = [], [], []
        lt_r, lt_c, lt_v = [], [], []
        rt_r, rt_c, rt_v = [], [], []
        for i, idx in enumerate(self.indices):
            for k in range(K):
                for pos, coef_src, sign in ((k, sd[k], 1.0), (K + k, sd[k].conjugate(), -1.0)):
                    plus = list(idx)
                    plus[pos] += 1
                    j = lookup.get(tuple(plus))
                    if j is not None:
                        up_r.append(i)
                        up_c.append(j)
                        up_v.append(sign * math.sqrt(idx[pos] + 1) * coef_src)
                    if idx[pos] > 0:
                        minus = list(idx)
                        minus[pos] -= 1
                        j = lookup[tuple(minus)]
                        val = math.sqrt(idx[pos]) * coef_src
                        if pos < K:
                            lt_r.append(i), lt_c.append(j), lt_v.append(val)
                        else:
                            rt_r.append(i), rt_c.append(j), rt_v.append(val)
        mk = lambda r, c, v: sparse.csr_matrix((np.array(v, dtype=complex), (r, c)), shape=(n, n))
        self.up = mk(up_r, up_c, up_v)
        self.left = mk(lt_r, lt_c, lt_v)
        self.right = mk(rt_r, rt_c, rt_v)
        swap = [lookup.get(idx[K:] + idx[:K]) for idx in self.indices]
        self.swap = np.array([-1 if s is None else s for s in swap])

    @property
    def size(self) -> int:
        return len(self.indices)

    def __call__(self, t: float, blocks: np.ndarray) -> np.ndarray:
        H, q = self.system.H, self.system.q
        n, N, _ = blocks.shape
        flat = blocks.reshape(n, N * N)
        out = -1j * (H @ blocks - blocks @ H) - self.decay[:, None, None] * blocks
        if self.modes.K:
            up = (self.up @ flat).reshape(n, N, N)
            out -= q @ up - up @ q
            out += q @ (self.left @ flat).reshape(n, N, N)
            out += (self.right @ flat).reshape(n, N, N) @ q
        return out

    def herm_residual(self, blocks: np.ndarray) -> float:
        """``max ||rho_{m,n} - rho_{n,m}^dagger||`` over pairs present in the set."""
        ok = self.swap >= 0
        if not np.any(ok):
            return 0.0
        a = blocks[ok]
        b = np.conj(np.transpose(blocks[self.swap[ok]], (0, 2, 1)))
        return float(np.max(np.abs(a - b)))


def rhs(state: HierarchyState, system: SystemSpec, modes: ModeSet, trunc: Optional[Truncation] = None) -> np.ndarray:
    """Time derivative of every auxiliary operator in ``state``.

    Builds the connectivity on each call; use :class:`FPHEOM` directly in loops.
    """
    if trunc is None:
        L = max(sum(idx) for idx in state.indices)
        trunc = Truncation(L)
    op = FPHEOM(system, modes, trunc)
    if op.indices != list(state.indices):
        raise ValueError("state index set does not match the truncation")
    return op(state.t, state.blocks)


def _observe(system: SystemSpec, rho: np.ndarray) -> Dict[str, complex]:
    return {k: complex(np.trace(O @ rho)) for k, O in system.observables.items()}


def propagate(state_or_system, system: Optional[SystemSpec] = None, modes: Optional[ModeSet] = None,
              t_final: float = 1.0, config: Optional[IntegratorConfig] = None,
              trunc: Optional[Truncation] = None, op: Optional[FPHEOM] = None):
    """Integrate the hierarchy to ``t_final`` and sample observables.

    Parameters
    ----------
    state_or_system : HierarchyState or SystemSpec
        Start from an explicit state, or from ``rho0`` with all auxiliaries zero.
    system, modes : SystemSpec, ModeSet
    t_final : float
    config : IntegratorConfig
    trunc : Truncation
        Required when starting from a system.
    op : FPHEOM, optional
        Reuse a prebuilt operator.

    Returns
    -------
    record : TrajectoryRecord
        Observables plus ``trace``, ``herm_residual`` and ``min_eig`` diagnostics.
    final : HierarchyState
    """
    if isinstance(state_or_system, SystemSpec):
        system = state_or_system
        state = None
    else:
        state = state_or_system
    if system is None or modes is None:
        raise ValueError("system and modes are required")
    config = config or IntegratorConfig()
    if op is None:
        if trunc is None:
            if state is None:
                raise ValueError("a truncation is required")
            trunc = Truncation(max(sum(i) for i in state.indices))
        op = FPHEOM(system, modes, trunc)
    if state is None:
        state = HierarchyState.initial(system, op.indices)
    t0 = state.t
    times = t0 + sample_times(t_final - t0, config.n_samples)
    obs = {k: [] for k in system.observables}
    trace, herm, mineig = [], [], []

    def on_sample(t, y):
        rho = y[0]
        for k, v in _observe(system, rho).items():
            obs[k].append(v)
        trace.append(np.trace(rho))
        herm.append(op.herm_residual(y))
        mineig.append(np.min(np.linalg.eigvalsh((rho + rho.conj().T) / 2)))

    final = {}

    def keep_last(t, y):
        on_sample(t, y)
        final["y"] = y

    stats = integrate(op, state.blocks, times, config, keep_last, dt=default_step(system, modes),
                      error_norm=lambda e: float(np.max(e)))
    rec = TrajectoryRecord(
        times,
        {k: np.array(v) for k, v in obs.items()},
        {"trace": np.array(trace), "herm_residual": np.array(herm), "min_eig": np.array(mineig)},
        meta={"method": "fp-heom", "n_indices": op.size, "K": modes.K, "L": op.trunc.L, **stats},
    )
    return rec, HierarchyState(op.indices, final["y"], float(times[-1]))


def dense_generator(system: SystemSpec, modes: ModeSet, caps: Sequence[int]) -> np.ndarray:
    """Generator of the capped hierarchy as one dense matrix, built entry by entry.

    The basis is ``(i, m_1, n_1, ..., m_K, n_K, j)`` in row-major order, with
    ``0 <= m_k, n_k <= caps[k]`` and no tier bound.  Every term of the
    hierarchy is written out as explicit index arithmetic; this is the
    reference that the tensor-network form and the vectorized right-hand
    side are compared against.
    """
    N, K = system.N, modes.K
    caps = list(caps)
    if len(caps) != K:
        raise ValueError("need one cap per mode")
    H, q = system.H, system.q
    d, z = modes.d, modes.z
    occ_dims = []
    for c in caps:
        occ_dims += [c + 1, c + 1]
    n_occ = int(np.prod(occ_dims)) if occ_dims else 1
    D = N * n_occ * N
    G = np.zeros((D, D), dtype=complex)

    def flat(i, occ, j):
        o = 0
        for v, dim in zip(occ, occ_dims):
            o = o * dim + v
        return (i * n_occ + o) * N + j

    def occ_iter():
        if not occ_dims:
            yield ()
            return
        for o in np.ndindex(*occ_dims):
            yield tuple(int(x) for x in o)

    def add(out_occ, in_occ, left, right, coef):
        # contribution coef * left @ rho_in @ right to rho_out
        for i in range(N):
            for a in range(N):
                if left[i, a] == 0:
                    continue
                for b in range(N):
                    for j in range(N):
                        if right[b, j] == 0:
                            continue
                        G[flat(i, out_occ, j), flat(a, in_occ, b)] += coef * left[i, a] * right[b, j]

    eye = np.eye(N, dtype=complex)
    for occ in occ_iter():
        m = [occ[2 * k] for k in range(K)]
        n = [occ[2 * k + 1] for k in range(K)]
        add(occ, occ, H, eye, -1j)
        add(occ, occ, eye, H, 1j)
        rate = sum(m[k] * z[k] + n[k] * np.conj(z[k]) for k in range(K))
        add(occ, occ, eye, eye, -rate)
        for k in range(K):
            sd = np.sqrt(complex(d[k]))
            sdc = np.conj(sd)
            if m[k] < caps[k]:
                src = list(occ)
                src[2 * k] += 1
                c = -math.sqrt(m[k] + 1) * sd
                add(occ, tuple(src), q, eye, c)
                add(occ, tuple(src), eye, q, -c)
            if n[k] < caps[k]:
                src = list(occ)
                src[2 * k + 1] += 1
                c = math.sqrt(n[k] + 1) * sdc
                add(occ, tuple(src), q, eye, c)
                add(occ, tuple(src), eye, q, -c)
            if m[k] > 0:
                src = list(occ)
                src[2 * k] -= 1
                add(occ, tuple(src), q, eye, math.sqrt(m[k]) * sd)
            if n[k] > 0:
                src = list(occ)
                src[2 * k + 1] -= 1
                add(occ, tuple(src), eye, q, math.sqrt(n[k]) * sdc)
    return G
