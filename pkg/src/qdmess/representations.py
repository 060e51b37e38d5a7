"""Alternative propagators built on the same bath modes.

* Lindblad-type form: system plus one damped boson per mode, propagated as
  an ordinary density matrix on the enlarged space and traced over the
  bosons at the end.  Requires ``Re d_k > 0``.
* Alternative Lindblad form with a non-Hermitian effective Hamiltonian and
  an effective jump rate ``gamma cos(theta) + omega sin(theta)``.
* Conventional HEOM, one index per mode, valid for purely real poles.
* Weak-coupling propagators: tier-1 hierarchy, second-order history
  integral, and the time-local Redfield equation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, sparse

from .fpheom import FPHEOM, SystemSpec, Truncation, build_index_set, default_step, propagate as fp_propagate
from .integrate import IntegratorConfig, TrajectoryRecord, integrate, sample_times
from .modefit import ModeSet

__all__ = [
    "RepresentationError",
    "BosonModel",
    "lindblad_model",
    "alt_lindblad_model",
    "propagate_boson_model",
    "ConventionalHEOM",
    "conventional_heom_propagate",
    "redfield_plus_propagate",
    "conventional_redfield_propagate",
    "convergence_order",
]


class RepresentationError(ValueError):
    """The mode set is outside the domain of the requested representation."""


def _ladder(cap: int) -> sparse.csr_matrix:
    return sparse.diags(np.sqrt(np.arange(1, cap + 1, dtype=float)), 1, format="csr", dtype=complex)


def _embed(ops: Dict[int, sparse.spmatrix], dims: Sequence[int]) -> sparse.csr_matrix:
    out = None
    for f, dim in enumerate(dims):
        X = ops.get(f, sparse.identity(dim, dtype=complex, format="csr"))
        out = X if out is None else sparse.kron(out, X, format="csr")
    return out.tocsr()


@dataclass
class BosonModel:
    """Density-matrix generator on system (x) bosons.

    Attributes
    ----------
    generator : scipy.sparse matrix
        ``d vec(rho)/dt = generator @ vec(rho)`` with row-major ``vec``.
    dims : list of int
        Factor dimensions ``[N, s_1+1, ..., s_K+1]``.
    name : str
    """

    generator: sparse.csr_matrix
    dims: List[int]
    name: str

    @property
    def D(self) -> int:
        return int(np.prod(self.dims))

    def initial(self, rho_s: np.ndarray) -> np.ndarray:
        """System state times the boson vacuum, as a vector."""
        vac = np.zeros(self.D // self.dims[0])
        vac[0] = 1.0
        psi_b = np.outer(vac, vac)
        return np.kron(rho_s, psi_b).reshape(-1)

    def reduce(self, vec: np.ndarray) -> np.ndarray:
        """Trace over all boson factors."""
        N = self.dims[0]
        B = self.D // N
        R = vec.reshape(N, B, N, B)
        return np.einsum("ibjb->ij", R)


def _superops(dims):
    D = int(np.prod(dims))
    I = sparse.identity(D, dtype=complex, format="csr")

    def L(A):  # A rho
        return sparse.kron(A, I, format="csr")

    def R(B):  # rho B
        return sparse.kron(I, B.T, format="csr")

    return L, R


def _check_caps(modes: ModeSet, caps) -> List[int]:
    caps = [int(caps)] * modes.K if np.ndim(caps) == 0 else [int(c) for c in caps]
    if len(caps) != modes.K or min(caps, default=1) < 1:
        raise ValueError("need one cap >= 1 per mode")
    return caps


def lindblad_model(system: SystemSpec, modes: ModeSet, caps) -> BosonModel:
    """Lindblad-type generator.

    ``d rho/dt = -i[H_eff, rho] + sum_k (d''_k / sqrt(d'_k)) ([a_k, rho] q - q [a_k^+, rho])
    + sum_k 2 gamma_k (a_k rho a_k^+ - {a_k^+ a_k, rho} / 2)`` with
    ``H_eff = H_s + sum_k [omega_k a_k^+ a_k - sqrt(d'_k) q (a_k + a_k^+)]``.

    Raises
    ------
    RepresentationError
        If any ``Re d_k <= 0``.
    """
    caps = _check_caps(modes, caps)
    d = modes.d
    if np.any(d.real <= 0):
        raise RepresentationError("Lindblad-type form needs Re d_k > 0 for every mode")
    dims = [system.N] + [c + 1 for c in caps]
    q = _embed({0: sparse.csr_matrix(system.q)}, dims)
    H = _embed({0: sparse.csr_matrix(system.H)}, dims)
    L, R = _superops(dims)
    ops = []
    for k, m in enumerate(modes.modes):
        a = _embed({k + 1: _ladder(caps[k])}, dims)
        ops.append((m, a, a.conj().T.tocsr()))
    Heff = H.copy()
    for m, a, ad in ops:
        Heff = Heff + m.omega * (ad @ a) - math.sqrt(m.d.real) * (q @ (a + ad))
    G = -1j * (L(Heff) - R(Heff))
    for m, a, ad in ops:
        c = m.d.imag / math.sqrt(m.d.real)
        # [a, rho] q - q [a^+, rho] = a rho q - rho (a q) - q a^+ rho + q rho a^+
        G = G + c * (L(a) @ R(q) - R(a @ q) - L(q @ ad) + L(q) @ R(ad))
        num = ad @ a
        G = G + 2 * m.gamma * (L(a) @ R(ad) - 0.5 * L(num) - 0.5 * R(num))
    return BosonModel(G.tocsr(), dims, "lindblad")


def alt_lindblad_model(system: SystemSpec, modes: ModeSet, caps) -> BosonModel:
    """Alternative Lindblad-type generator with non-Hermitian ``H_eff``.

    ``d rho/dt = -i (H_eff rho - rho H_eff^+) + sum_k [2 g_k c rho c^+ - gamma_k {c^+ c, rho}]``
    with ``H_eff = H_s + sum_k [omega_k c^+ c - sqrt(d_k) q (c + c^+)]`` and
    ``g_k = gamma_k cos(theta_k) + omega_k sin(theta_k)``, ``theta_k = arg d_k``.
    The trace is not conserved when ``g_k != gamma_k``.

    Raises
    ------
    RepresentationError
        If any ``d_k = 0``.
    """
    caps = _check_caps(modes, caps)
    if np.any(modes.d == 0):
        raise RepresentationError("alternative Lindblad form needs d_k != 0 (arg d_k undefined)")
    dims = [system.N] + [c + 1 for c in caps]
    q = _embed({0: sparse.csr_matrix(system.q)}, dims)
    H = _embed({0: sparse.csr_matrix(system.H)}, dims)
    L, R = _superops(dims)
    Heff = H.astype(complex)
    diss = None
    for k, m in enumerate(modes.modes):
        c = _embed({k + 1: _ladder(caps[k])}, dims)
        cd = c.conj().T.tocsr()
        theta = float(np.angle(m.d))
        g_eff = m.gamma * math.cos(theta) + m.omega * math.sin(theta)
        Heff = Heff + m.omega * (cd @ c) - np.sqrt(complex(m.d)) * (q @ (c + cd))
        num = cd @ c
        term = 2 * g_eff * (L(c) @ R(cd)) - m.gamma * (L(num) + R(num))
        diss = term if diss is None else diss + term
    Hdag = Heff.conj().T.tocsr()
    G = -1j * (L(Heff) - R(Hdag))
    if diss is not None:
        G = G + diss
    return BosonModel(G.tocsr(), dims, "alt-lindblad")


def propagate_boson_model(model: BosonModel, system: SystemSpec, t_final: float,
                          config: Optional[IntegratorConfig] = None, dt: Optional[float] = None) -> TrajectoryRecord:
    """Integrate a :class:`BosonModel` and record reduced observables."""
    config = config or IntegratorConfig()
    times = sample_times(t_final, config.n_samples)
    obs = {k: [] for k in system.observables}
    trace, full_trace = [], []

    def on_sample(t, v):
        rho = model.reduce(v)
        for k, O in system.observables.items():
            obs[k].append(np.trace(O @ rho))
        trace.append(np.trace(rho))

    G = model.generator
    if dt is None:
        rate = float(np.max(np.abs(G.diagonal()))) if G.shape[0] else 1.0
        dt = min(0.01, 0.1 / max(rate, float(np.linalg.norm(system.H, 2)), 1e-12))
    stats = integrate(lambda t, v: G @ v, model.initial(system.rho0), times, config, on_sample, dt=dt)
    return TrajectoryRecord(times, {k: np.array(v) for k, v in obs.items()}, {"trace": np.array(trace)},
                            meta={"method": model.name, "dims": model.dims, **stats})


class ConventionalHEOM:
    """Single-index hierarchy for modes with purely real ``z_k = gamma_k``.

    ``d rho_n/dt = -i L_s rho_n - sum n_k gamma_k rho_n + sum sqrt(n_k+1) [q, rho_{n+e_k}]
    - sum sqrt(n_k) (d_k q rho_{n-e_k} - d_k* rho_{n-e_k} q)``
    """

    def __init__(self, system: SystemSpec, modes: ModeSet, trunc: Truncation, omega_tol: float = 1e-12):
        bad = [m for m in modes.modes if abs(m.omega) > omega_tol * abs(m.z)]
        if bad:
            raise RepresentationError("conventional HEOM needs real poles (omega_k = 0 for all modes)")
        self.system, self.modes = system, modes
        K = modes.K
        caps = trunc.cap_vector(K)[:K]
        self.indices = build_index_set(K, Truncation(trunc.L, caps + (0,) * K))
        self.indices = [idx[:K] for idx in self.indices]
        n = len(self.indices)
        lookup = {idx: i for i, idx in enumerate(self.indices)}
        arr = np.array(self.indices, dtype=float).reshape(n, K)
        self.decay = arr @ modes.z.real if K else np.zeros(n)
        up_r, up_c, up_v, dn_r, dn_c, dn_v, dnc_v = [], [], [], [], [], [], []
        for i, idx in enumerate(self.indices):
            for k in range(K):
                p = list(idx)
                p[k] += 1
                j = lookup.get(tuple(p))
                if j is not None:
                    up_r.append(i), up_c.append(j), up_v.append(math.sqrt(idx[k] + 1))
                if idx[k] > 0:
                    p = list(idx)
                    p[k] -= 1
                    dn_r.append(i), dn_c.append(lookup[tuple(p)])
                    dn_v.append(math.sqrt(idx[k]) * modes.d[k])
                    dnc_v.append(math.sqrt(idx[k]) * np.conj(modes.d[k]))
        mk = lambda r, c, v: sparse.csr_matrix((np.array(v, dtype=complex), (r, c)), shape=(n, n))
        self.up = mk(up_r, up_c, up_v)
        self.dn = mk(dn_r, dn_c, dn_v)
        self.dnc = mk(dn_r, dn_c, dnc_v)

    def __call__(self, t, blocks):
        H, q = self.system.H, self.system.q
        n, N, _ = blocks.shape
        flat = blocks.reshape(n, N * N)
        out = -1j * (H @ blocks - blocks @ H) - self.decay[:, None, None] * blocks
        if self.modes.K:
            up = (self.up @ flat).reshape(n, N, N)
            out += q @ up - up @ q
            out -= q @ (self.dn @ flat).reshape(n, N, N)
            out += (self.dnc @ flat).reshape(n, N, N) @ q
        return out


def conventional_heom_propagate(system: SystemSpec, modes: ModeSet, trunc: Truncation, t_final: float,
                                config: Optional[IntegratorConfig] = None) -> TrajectoryRecord:
    op = ConventionalHEOM(system, modes, trunc)
    config = config or IntegratorConfig()
    times = sample_times(t_final, config.n_samples)
    y0 = np.zeros((len(op.indices), system.N, system.N), dtype=complex)
    y0[0] = system.rho0
    obs = {k: [] for k in system.observables}
    trace = []

    def on_sample(t, y):
        for k, O in system.observables.items():
            obs[k].append(np.trace(O @ y[0]))
        trace.append(np.trace(y[0]))

    stats = integrate(op, y0, times, config, on_sample, dt=default_step(system, modes))
    return TrajectoryRecord(times, {k: np.array(v) for k, v in obs.items()}, {"trace": np.array(trace)},
                            meta={"method": "conventional-heom", "n_indices": len(op.indices), **stats})


class _Interaction:
    """Interaction-picture coupling operator on a uniform grid."""

    def __init__(self, system: SystemSpec, times: np.ndarray):
        E, V = linalg.eigh(system.H)
        self.E, self.V = E, V
        qe = V.conj().T @ system.q @ V
        phase = np.exp(1j * np.outer(times, E))  # (n, N)
        # q~(t) = U^+ q U in the eigenbasis: q_ab exp(i (E_a - E_b) t)
        self.q_eig = qe[None] * phase[:, :, None] * phase.conj()[:, None, :]
        self.times = times

    def to_schrodinger(self, rho_tilde: np.ndarray, j: int) -> np.ndarray:
        ph = np.exp(-1j * self.E * self.times[j])
        rho_e = ph[:, None] * rho_tilde * ph.conj()[None, :]
        return self.V @ rho_e @ self.V.conj().T


def _history_grid(t_final: float, config: IntegratorConfig, dt: float):
    n_out = config.n_samples
    out_times = sample_times(t_final, n_out)
    h = config.dt or dt
    if n_out > 1:
        per = max(1, int(math.ceil((out_times[1] - out_times[0]) / h - 1e-9)))
        n_steps = per * (n_out - 1)
    else:
        per, n_steps = 1, max(1, int(math.ceil(t_final / h)))
    return np.linspace(0.0, t_final, n_steps + 1), per


def redfield_plus_propagate(system: SystemSpec, modes: ModeSet, t_final: float, variant: str = "tier1",
                            config: Optional[IntegratorConfig] = None, memory_budget: int = 2 * 1024**3) -> TrajectoryRecord:
    """Second-order (weak-coupling) propagation without a Markov approximation.

    Parameters
    ----------
    variant : {"tier1", "history-integral"}
        ``tier1`` truncates the hierarchy after the first tier.  The
        history variant integrates
        ``d rho~/dt = -int_0^t ([q~(t), C(t-s) q~(s) rho~(s)] - [q~(t), C*(t-s) rho~(s) q~(s)]) ds``
        in the interaction picture with Heun steps and a trapezoidal memory
        sum, costing ``O(n_steps^2 N^2)``.
    """
    config = config or IntegratorConfig()
    if variant == "tier1":
        rec, _ = fp_propagate(system, system, modes, t_final, config, Truncation(1))
        rec.meta["method"] = "redfield-plus-tier1"
        return rec
    if variant != "history-integral":
        raise ValueError(f"unknown variant {variant!r}")
    grid, per = _history_grid(t_final, config, default_step(system, modes))
    n = grid.size
    N = system.N
    need = 3 * n * N * N * 16
    if need > memory_budget:
        raise MemoryError(f"history storage {need} bytes exceeds budget {memory_budget}")
    h = grid[1] - grid[0] if n > 1 else 0.0
    ip = _Interaction(system, grid)
    qt = ip.q_eig
    C = modes.correlation(grid)  # C(t_j - t_l) = C[j - l]
    V = ip.V
    rho = np.empty((n, N, N), dtype=complex)
    rho[0] = V.conj().T @ system.rho0 @ V
    A = np.empty_like(rho)  # q~ rho~
    B = np.empty_like(rho)  # rho~ q~

    def deriv(j):
        if j == 0:
            return np.zeros((N, N), dtype=complex)
        w = np.full(j + 1, h)
        w[0] = w[-1] = h / 2
        c = C[j::-1] * w  # weights for l = 0..j
        X = np.tensordot(c, A[: j + 1], axes=(0, 0))
        Y = np.tensordot(c.conj(), B[: j + 1], axes=(0, 0))
        q = qt[j]
        return -(q @ X - X @ q) + (q @ Y - Y @ q)

    A[0], B[0] = qt[0] @ rho[0], rho[0] @ qt[0]
    f_prev = deriv(0)
    obs = {k: [] for k in system.observables}
    out_t, trace = [], []
    O_eig = {k: V.conj().T @ O @ V for k, O in system.observables.items()}

    def sample(j):
        r = rho[j]
        ph = np.exp(-1j * ip.E * grid[j])
        r_s = ph[:, None] * r * ph.conj()[None, :]
        for k, O in O_eig.items():
            obs[k].append(np.trace(O @ r_s))
        trace.append(np.trace(r))
        out_t.append(grid[j])

    sample(0)
    for j in range(n - 1):
        pred = rho[j] + h * f_prev
        rho[j + 1] = pred
        A[j + 1], B[j + 1] = qt[j + 1] @ pred, pred @ qt[j + 1]
        f_pred = deriv(j + 1)
        rho[j + 1] = rho[j] + (h / 2) * (f_prev + f_pred)
        A[j + 1], B[j + 1] = qt[j + 1] @ rho[j + 1], rho[j + 1] @ qt[j + 1]
        f_prev = deriv(j + 1)
        if not np.all(np.isfinite(rho[j + 1])):
            raise FloatingPointError(f"history integration diverged at t={grid[j + 1]:g}")
        if (j + 1) % per == 0:
            sample(j + 1)
    return TrajectoryRecord(np.array(out_t), {k: np.array(v) for k, v in obs.items()},
                            {"trace": np.array(trace)},
                            meta={"method": "redfield-plus-history", "steps": n - 1, "h": h})


def conventional_redfield_propagate(system: SystemSpec, modes: ModeSet, t_final: float,
                                    config: Optional[IntegratorConfig] = None) -> TrajectoryRecord:
    """Time-local second-order equation with ``rho~(s)`` replaced by ``rho~(t)``.

    ``d rho~/dt = -[q~, Lambda rho~] + [q~, rho~ Lambda^+]`` with
    ``Lambda(t) = int_0^t C(t-s) q~(s) ds``, integrated with Heun steps.
    """
    config = config or IntegratorConfig()
    grid, per = _history_grid(t_final, config, default_step(system, modes))
    n, N = grid.size, system.N
    h = grid[1] - grid[0] if n > 1 else 0.0
    ip = _Interaction(system, grid)
    qt = ip.q_eig
    C = modes.correlation(grid)
    Lam = np.zeros((n, N, N), dtype=complex)
    for j in range(1, n):
        w = np.full(j + 1, h)
        w[0] = w[-1] = h / 2
        Lam[j] = np.tensordot(C[j::-1] * w, qt[: j + 1], axes=(0, 0))

    def f(j, r):
        q, Lm = qt[j], Lam[j]
        X = Lm @ r
        Y = r @ Lm.conj().T
        return -(q @ X - X @ q) + (q @ Y - Y @ q)

    V = ip.V
    r = V.conj().T @ system.rho0 @ V
    O_eig = {k: V.conj().T @ O @ V for k, O in system.observables.items()}
    obs = {k: [] for k in system.observables}
    out_t, trace = [], []

    def sample(j, r):
        ph = np.exp(-1j * ip.E * grid[j])
        r_s = ph[:, None] * r * ph.conj()[None, :]
        for k, O in O_eig.items():
            obs[k].append(np.trace(O @ r_s))
        trace.append(np.trace(r))
        out_t.append(grid[j])

    sample(0, r)
    for j in range(n - 1):
        k1 = f(j, r)
        k2 = f(j + 1, r + h * k1)
        r = r + (h / 2) * (k1 + k2)
        if (j + 1) % per == 0:
            sample(j + 1, r)
    return TrajectoryRecord(np.array(out_t), {k: np.array(v) for k, v in obs.items()},
                            {"trace": np.array(trace)}, meta={"method": "redfield", "steps": n - 1})


def convergence_order(errors: Sequence[float], steps: Sequence[float]) -> float:
    """Observed order ``log(e_1/e_2) / log(h_1/h_2)`` from the last two refinements."""
    e1, e2 = errors[-2], errors[-1]
    h1, h2 = steps[-2], steps[-1]
    return math.log(e1 / e2) / math.log(h1 / h2)
