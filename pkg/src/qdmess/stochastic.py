"""Stochastic unravelings: stochastic Liouville-von Neumann (SLN) and HOPS.

SLN propagates one density matrix per noise realization,

    d rho/dt = -i[H, rho] + i xi(t) [q, rho] + i (nu(t)/2) {q, rho},

with Gaussian noises satisfying

    E[xi(t) xi(s)] = Re C(t-s),  E[xi(t) nu(s)] = 2i Theta(t-s) Im C(t-s),  E[nu nu] = 0.

HOPS propagates a hierarchy of pure states driven by a complex Gaussian
noise ``Z`` whose correlation is set by :data:`HOPS_CONVENTIONS`.

Both noises are drawn exactly on a uniform grid by circulant embedding.
Every trajectory owns a generator seeded by ``(seed, trajectory index)``,
so ensembles are reproducible and independent of batching.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .fpheom import SystemSpec, Truncation, build_index_set, default_step
from .integrate import TrajectoryRecord, sample_times
from .modefit import ModeSet

__all__ = [
    "NoiseRealization",
    "SLNNoise",
    "HOPSNoise",
    "HOPS_CONVENTIONS",
    "generate_sln_noise",
    "generate_hops_noise",
    "sln_ensemble",
    "hops_ensemble",
    "hops_propagate",
    "trajectory_rng",
    "EnsembleConfig",
]

# E[Z_t Z*_s] for t >= s:  "conjugate" -> C*(t-s),  "direct" -> C(t-s)
HOPS_CONVENTIONS = ("conjugate", "direct")


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for trajectory ``index`` of an ensemble seeded by ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def _white(rng: np.random.Generator, M: int) -> np.ndarray:
    """Complex white noise with ``E|W|^2 = 1`` and ``E[W^2] = 0``."""
    return (rng.standard_normal(M) + 1j * rng.standard_normal(M)) / math.sqrt(2)


@dataclass
class NoiseRealization:
    """One sampled noise path on a uniform grid.

    ``nu`` is ``None`` for HOPS, where ``xi`` holds the complex noise ``Z``.
    """

    t: np.ndarray
    xi: np.ndarray
    nu: Optional[np.ndarray]
    seed: tuple

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            if self.nu is not None:
                fh.write("t,xi,nu_re,nu_im\n")
                for row in zip(self.t, self.xi.real, self.nu.real, self.nu.imag):
                    fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
            else:
                fh.write("t,z_re,z_im\n")
                for row in zip(self.t, self.xi.real, self.xi.imag):
                    fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


class SLNNoise:
    """Spectral factors for exact SLN noise sampling on ``t_j = j h``, ``j < n``.

    ``xi`` and ``Im nu`` share one complex white sequence so that their
    cross-spectrum equals that of ``2 Theta(t) Im C(t)``; ``Re nu`` is
    independent with the same spectrum as ``Im nu``, which cancels the
    ``nu nu`` correlation.  Negative circulant eigenvalues of ``Re C`` are
    clipped; the discarded spectral weight is kept in ``clip_mass``.
    """

    def __init__(self, modes: ModeSet, h: float, n: int, clip_floor: float = 1e-14):
        if n < 2 or h <= 0:
            raise ValueError("need at least two grid points and h > 0")
        self.h, self.n = h, n
        M = 2 * n
        self.M = M
        lag = np.arange(M)
        tau = np.minimum(lag, M - lag) * h
        C = modes.correlation(tau)
        cR = C.real.copy()
        cg = np.zeros(M)
        cg[: n] = 2 * C[: n].imag
        cg[0] = 0.0
        lamR = np.fft.fft(cR).real
        scale = max(float(np.max(np.abs(lamR))), 1e-300)
        bad = lamR < clip_floor * scale
        self.clip_mass = float(np.sum(np.abs(lamR[bad])) / np.sum(np.abs(lamR)))
        lamR = np.where(bad, 0.0, lamR)
        cg_hat = np.fft.fft(cg)
        self.a = np.sqrt(2 * lamR / M)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.b = np.where(self.a > 0, (2.0 / M) * cg_hat / self.a, 0.0)
        self.cross_clip = float(np.sum(np.abs(cg_hat[bad])) / max(np.sum(np.abs(cg_hat)), 1e-300))

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.n) * self.h

    def sample(self, rngs: Sequence[np.random.Generator]):
        """Draw ``(xi, nu)`` of shape ``(len(rngs), n)``."""
        W = np.stack([_white(r, self.M) for r in rngs]) if len(rngs) else np.zeros((0, self.M))
        W2 = np.stack([_white(r, self.M) for r in rngs]) if len(rngs) else np.zeros((0, self.M))
        xi = np.fft.fft(self.a * W, axis=-1).real[:, : self.n]
        y = np.fft.fft(self.b * W, axis=-1).real[:, : self.n]
        x = np.fft.fft(np.abs(self.b) * W2, axis=-1).real[:, : self.n]
        return xi, x + 1j * y


class HOPSNoise:
    """Spectral factors for complex HOPS noise with ``E[Z Z] = 0``.

    Parameters
    ----------
    convention : {"conjugate", "direct"}
        ``conjugate``: ``E[Z_t Z*_s] = C*(t-s)``; ``direct``: ``= C(t-s)``.
    """

    def __init__(self, modes: ModeSet, h: float, n: int, convention: str = "conjugate", clip_floor: float = 1e-14):
        if convention not in HOPS_CONVENTIONS:
            raise ValueError(f"convention must be one of {HOPS_CONVENTIONS}")
        self.h, self.n, self.convention = h, n, convention
        M = 2 * n
        self.M = M
        lag = np.arange(M)
        pos = np.minimum(lag, M - lag) * h
        C = modes.correlation(pos)
        alpha = C.conj() if convention == "conjugate" else C
        c = np.where(lag <= n, alpha, np.conj(alpha))
        c[n] = c[n].real
        lam = np.fft.fft(c).real
        lam_neg = np.roll(lam[::-1], 1)  # lam[-k]
        scale = max(float(np.max(np.abs(lam))), 1e-300)
        bad = lam_neg < clip_floor * scale
        self.clip_mass = float(np.sum(np.abs(lam_neg[bad])) / np.sum(np.abs(lam_neg)))
        self.s = np.sqrt(np.where(bad, 0.0, lam_neg) / M)

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.n) * self.h

    def sample(self, rngs: Sequence[np.random.Generator]) -> np.ndarray:
        W = np.stack([_white(r, self.M) for r in rngs])
        return np.fft.fft(self.s * W, axis=-1)[:, : self.n]


def generate_sln_noise(modes: ModeSet, t_grid: np.ndarray, seed: int, index: int = 0) -> NoiseRealization:
    """One SLN noise path on a uniform grid starting at 0."""
    t_grid = np.asarray(t_grid, dtype=float)
    h = float(t_grid[1] - t_grid[0])
    if not np.allclose(np.diff(t_grid), h, rtol=1e-9, atol=0):
        raise ValueError("the noise grid must be uniform")
    gen = SLNNoise(modes, h, t_grid.size)
    xi, nu = gen.sample([trajectory_rng(seed, index)])
    return NoiseRealization(t_grid, xi[0], nu[0], (seed, index))


def generate_hops_noise(modes: ModeSet, t_grid: np.ndarray, seed: int, index: int = 0,
                        convention: str = "conjugate") -> NoiseRealization:
    t_grid = np.asarray(t_grid, dtype=float)
    h = float(t_grid[1] - t_grid[0])
    gen = HOPSNoise(modes, h, t_grid.size, convention)
    z = gen.sample([trajectory_rng(seed, index)])
    return NoiseRealization(t_grid, z[0], None, (seed, index))


@dataclass
class EnsembleConfig:
    """Ensemble settings.

    Parameters
    ----------
    n_traj : int
    seed : int
    t_final : float
    n_samples : int
        Output times, equally spaced on ``[0, t_final]``.
    dt : float, optional
        Integration step (defaults to the hierarchy rule).
    chunk : int
        Trajectories propagated together in one vectorized batch.
    threads : int
        Batches run concurrently; results are reduced in batch order.
    """

    n_traj: int = 1000
    seed: int = 0
    t_final: float = 1.0
    n_samples: int = 101
    dt: Optional[float] = None
    chunk: int = 1000
    threads: int = 1


def _grid(cfg: EnsembleConfig, system, modes):
    out = sample_times(cfg.t_final, cfg.n_samples)
    h = cfg.dt or default_step(system, modes)
    per = max(1, int(math.ceil((out[1] - out[0]) / h - 1e-9))) if out.size > 1 else 1
    n_steps = per * (out.size - 1)
    h = cfg.t_final / n_steps if n_steps else h
    return out, per, n_steps, h


def _run_chunks(cfg: EnsembleConfig, run_chunk):
    starts = list(range(0, cfg.n_traj, cfg.chunk))
    jobs = [(s0, min(cfg.n_traj, s0 + cfg.chunk)) for s0 in starts]
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            results = list(ex.map(lambda j: run_chunk(*j), jobs))
    else:
        results = [run_chunk(*j) for j in jobs]
    # reduce in batch order so the result does not depend on scheduling
    tot = None
    for r in results:
        tot = r if tot is None else {k: tot[k] + r[k] for k in tot}
    return tot


def _finish(out_t, sums, n, names, method, extra):
    obs, err = {}, {}
    for k in names:
        mean = sums[k] / n
        var = (sums[k + "^2"] / n - mean.real**2) * n / max(n - 1, 1)
        obs[k] = mean
        err[k] = np.sqrt(np.maximum(var, 0.0) / n)
    trace = sums["trace"] / n
    rho = sums["rho"] / n
    herm = np.max(np.abs(rho - np.conj(np.transpose(rho, (0, 2, 1)))), axis=(1, 2))
    return TrajectoryRecord(out_t, obs, {"trace": trace, "herm_residual": herm}, err, n,
                            meta={"method": method, **extra})


def sln_ensemble(system: SystemSpec, modes: ModeSet, cfg: EnsembleConfig) -> TrajectoryRecord:
    """Ensemble mean and standard error of observables under SLN propagation.

    The noise is sampled at half steps so each classical Runge-Kutta stage
    sees the exact realization.
    """
    out_t, per, n_steps, h = _grid(cfg, system, modes)
    noise = SLNNoise(modes, h / 2, 2 * n_steps + 1)
    H, q = system.H, system.q
    N = system.N
    names = list(system.observables)
    Ostack = np.stack([system.observables[k] for k in names]) if names else np.zeros((0, N, N))

    def f(rho, xi, nu):
        comm = q @ rho - rho @ q
        anti = q @ rho + rho @ q
        return -1j * (H @ rho - rho @ H) + 1j * xi[:, None, None] * comm + 0.5j * nu[:, None, None] * anti

    def run_chunk(i0, i1):
        rngs = [trajectory_rng(cfg.seed, i) for i in range(i0, i1)]
        xi, nu = noise.sample(rngs)
        B = i1 - i0
        rho = np.broadcast_to(system.rho0, (B, N, N)).copy()
        acc = _accumulator(out_t.size, names, N)
        _record(acc, 0, rho, Ostack, names)
        for s in range(n_steps):
            j = 2 * s
            x0, x1, x2 = xi[:, j], xi[:, j + 1], xi[:, j + 2]
            v0, v1, v2 = nu[:, j], nu[:, j + 1], nu[:, j + 2]
            k1 = f(rho, x0, v0)
            k2 = f(rho + (h / 2) * k1, x1, v1)
            k3 = f(rho + (h / 2) * k2, x1, v1)
            k4 = f(rho + h * k3, x2, v2)
            rho = rho + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            if (s + 1) % per == 0:
                _record(acc, (s + 1) // per, rho, Ostack, names)
        return acc

    sums = _run_chunks(cfg, run_chunk)
    return _finish(out_t, sums, cfg.n_traj, names, "sln",
                   {"seed": cfg.seed, "h": h, "clip_mass": noise.clip_mass})


def _accumulator(n_out, names, N):
    acc = {k: np.zeros(n_out, dtype=complex) for k in names}
    acc.update({k + "^2": np.zeros(n_out) for k in names})
    acc["trace"] = np.zeros(n_out, dtype=complex)
    acc["rho"] = np.zeros((n_out, N, N), dtype=complex)
    return acc


def _record(acc, i, rho, Ostack, names):
    vals = np.einsum("oij,bji->ob", Ostack, rho) if names else None
    for o, k in enumerate(names):
        acc[k][i] += vals[o].sum()
        acc[k + "^2"][i] += np.sum(vals[o].real ** 2)
    acc["trace"][i] += np.trace(rho, axis1=1, axis2=2).sum()
    acc["rho"][i] += rho.sum(axis=0)


class _HOPSHierarchy:
    def __init__(self, modes: ModeSet, trunc: Truncation):
        K = modes.K
        caps = trunc.cap_vector(K)[:K]
        idx = build_index_set(K, Truncation(trunc.L, caps + (0,) * K))
        self.indices = [i[:K] for i in idx]
        lookup = {v: i for i, v in enumerate(self.indices)}
        n = len(self.indices)
        arr = np.array(self.indices, dtype=float).reshape(n, K)
        self.decay = arr @ modes.z if K else np.zeros(n, dtype=complex)
        sd = np.sqrt(modes.d.astype(complex))
        up = np.zeros((n, n), dtype=complex)
        dn = np.zeros((n, n), dtype=complex)
        for i, v in enumerate(self.indices):
            for k in range(K):
                p = list(v)
                p[k] += 1
                j = lookup.get(tuple(p))
                if j is not None:
                    up[i, j] = math.sqrt(v[k] + 1) * sd[k]
                if v[k] > 0:
                    p = list(v)
                    p[k] -= 1
                    dn[i, lookup[tuple(p)]] = math.sqrt(v[k]) * sd[k]
        # net hierarchy coupling: + dn (lower tier) - up (higher tier), all multiplied by q
        self.couple = dn - up
        self.size = n


def hops_propagate(system: SystemSpec, modes: ModeSet, trunc: Truncation, noise: np.ndarray, h: float,
                   psi0: np.ndarray) -> np.ndarray:
    """Propagate linear HOPS for one or more noise paths sampled at half steps.

    Parameters
    ----------
    noise : ndarray, shape (B, 2 n_steps + 1)
    h : float
        Integration step (noise spacing is ``h / 2``).
    psi0 : ndarray, shape (N,)

    Returns
    -------
    ndarray, shape (n_steps + 1, B, N)
        ``psi_0`` at every step.
    """
    hier = _HOPSHierarchy(modes, trunc)
    B = noise.shape[0]
    n_steps = (noise.shape[1] - 1) // 2
    N = system.N
    psi = np.zeros((B, hier.size, N), dtype=complex)
    psi[:, 0] = psi0
    out = np.empty((n_steps + 1, B, N), dtype=complex)
    out[0] = psi[:, 0]
    f = _hops_rhs(system, hier)
    for s in range(n_steps):
        z0, z1, z2 = noise[:, 2 * s], noise[:, 2 * s + 1], noise[:, 2 * s + 2]
        k1 = f(psi, z0)
        k2 = f(psi + (h / 2) * k1, z1)
        k3 = f(psi + (h / 2) * k2, z1)
        k4 = f(psi + h * k3, z2)
        psi = psi + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[s + 1] = psi[:, 0]
    return out


def _hops_rhs(system, hier):
    Hm = -1j * system.H
    qT = system.q.T
    couple = hier.couple
    decay = hier.decay

    def f(psi, z):
        # psi: (B, n, N); operators act on the last axis
        qpsi = psi @ qT
        out = psi @ Hm.T + z[:, None, None] * qpsi - decay[None, :, None] * psi
        out += couple @ qpsi
        return out

    return f


def hops_ensemble(system: SystemSpec, modes: ModeSet, trunc: Truncation, cfg: EnsembleConfig,
                  convention: str = "conjugate") -> TrajectoryRecord:
    """Ensemble of linear HOPS trajectories, ``rho = E[psi psi^+]``.

    A mixed initial state is handled by propagating each of its eigenvectors
    with the same noise and summing with the eigenvalue weights.
    """
    out_t, per, n_steps, h = _grid(cfg, system, modes)
    noise = HOPSNoise(modes, h / 2, 2 * n_steps + 1, convention)
    hier = _HOPSHierarchy(modes, trunc)
    N = system.N
    p, U = np.linalg.eigh(system.rho0)
    keep = p > 1e-14
    p, U = p[keep], U[:, keep]
    names = list(system.observables)
    Ostack = np.stack([system.observables[k] for k in names]) if names else np.zeros((0, N, N))
    f = _hops_rhs(system, hier)

    def run_chunk(i0, i1):
        rngs = [trajectory_rng(cfg.seed, i) for i in range(i0, i1)]
        Z = noise.sample(rngs)
        B = i1 - i0
        E = U.shape[1]
        # batch axis runs over (trajectory, eigenvector)
        Zb = np.repeat(Z, E, axis=0)
        psi = np.zeros((B * E, hier.size, N), dtype=complex)
        psi[:, 0] = np.tile(U.T, (B, 1))
        w = np.tile(p, B)
        acc = _accumulator(out_t.size, names, N)

        def rec(i, psi0):
            v = psi0 * np.sqrt(w)[:, None]
            rho = np.einsum("bi,bj->bij", v, v.conj()).reshape(B, E, N, N).sum(axis=1)
            _record(acc, i, rho, Ostack, names)

        rec(0, psi[:, 0])
        for s in range(n_steps):
            z0, z1, z2 = Zb[:, 2 * s], Zb[:, 2 * s + 1], Zb[:, 2 * s + 2]
            k1 = f(psi, z0)
            k2 = f(psi + (h / 2) * k1, z1)
            k3 = f(psi + (h / 2) * k2, z1)
            k4 = f(psi + h * k3, z2)
            psi = psi + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            if (s + 1) % per == 0:
                rec((s + 1) // per, psi[:, 0])
        return acc

    sums = _run_chunks(cfg, run_chunk)
    return _finish(out_t, sums, cfg.n_traj, names, "hops",
                   {"seed": cfg.seed, "h": h, "convention": convention, "clip_mass": noise.clip_mass,
                    "n_indices": hier.size})
