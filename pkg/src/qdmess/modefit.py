"""Rational (AAA) fits of the noise power and their conversion to bath modes.

The noise power ``S(omega)`` is sampled on a symmetric log-spaced grid and
approximated by a barycentric rational function.  Its poles in the lower
half plane become damped oscillating modes

``C(t) = sum_k d_k exp(-z_k t)``,  ``z_k = gamma_k + i omega_k``,  ``gamma_k > 0``,

which is all the propagators downstream need.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np
from scipy import linalg

__all__ = [
    "FrequencyWindow",
    "BarycentricFit",
    "Mode",
    "ModeSet",
    "FitError",
    "ScanRow",
    "sample_grid",
    "aaa_fit",
    "poles_residues",
    "select_modes",
    "refine_weights",
    "decompose",
    "reconstruct_C",
    "mode_count_scan",
    "log_regression",
]


class FitError(RuntimeError):
    """The rational fit did not reach the requested accuracy.

    Attributes
    ----------
    best_residual : float
        Smallest max-norm residual seen before giving up.
    fit : BarycentricFit or None
        The fit at that point.
    """

    def __init__(self, message, best_residual=math.inf, fit=None):
        super().__init__(message)
        self.best_residual = best_residual
        self.fit = fit


@dataclass(frozen=True)
class FrequencyWindow:
    """Positive frequency range ``[omega_eps, omega_D]`` mirrored to negative frequencies."""

    omega_eps: float
    omega_D: float
    points_per_decade: int = 20

    def __post_init__(self):
        if not (0 < self.omega_eps < self.omega_D):
            raise ValueError("need 0 < omega_eps < omega_D")
        if self.points_per_decade < 1:
            raise ValueError("points_per_decade must be >= 1")


def sample_grid(window: FrequencyWindow) -> np.ndarray:
    """Symmetric log-spaced grid covering ``±[omega_eps, omega_D]``.

    Each side holds ``round(decades * points_per_decade) + 1`` points including
    both ends, so the grid is exactly symmetric and sorted ascending.
    """
    decades = math.log10(window.omega_D / window.omega_eps)
    n = max(2, int(round(decades * window.points_per_decade)) + 1)
    pos = np.logspace(math.log10(window.omega_eps), math.log10(window.omega_D), n)
    pos[0], pos[-1] = window.omega_eps, window.omega_D
    return np.concatenate([-pos[::-1], pos])


@dataclass
class BarycentricFit:
    """Barycentric rational ``r(x) = sum w_j f_j/(x-z_j) / sum w_j/(x-z_j)``."""

    support: np.ndarray
    values: np.ndarray
    weights: np.ndarray
    residual: float
    history: List[float] = field(default_factory=list)

    def __call__(self, x):
        x = np.asarray(x, dtype=complex)
        flat = x.ravel()
        with np.errstate(divide="ignore", invalid="ignore"):
            cauchy = 1.0 / (flat[:, None] - self.support[None, :])
            r = (cauchy @ (self.weights * self.values)) / (cauchy @ self.weights)
        # exact hits on support points
        hit_i, hit_j = np.nonzero(flat[:, None] == self.support[None, :])
        r[hit_i] = self.values[hit_j]
        return r.reshape(x.shape)

    @property
    def size(self) -> int:
        return len(self.support)

    def value_at_infinity(self) -> complex:
        return complex(np.sum(self.weights * self.values) / np.sum(self.weights))


def aaa_fit(samples: np.ndarray, values: np.ndarray, delta: float, K_max: int = 100) -> BarycentricFit:
    """Greedy adaptive Antoulas-Anderson rational fit.

    Parameters
    ----------
    samples, values : ndarray
        Sample points and function values.
    delta : float
        Absolute max-norm residual target on the samples.
    K_max : int
        Largest admissible number of support points.

    Returns
    -------
    BarycentricFit
        The first fit whose residual is ``<= delta``.

    Raises
    ------
    FitError
        If the support would have to grow beyond ``K_max``.
    """
    Z = np.asarray(samples, dtype=float).astype(complex)
    F = np.asarray(values, dtype=complex)
    if Z.shape != F.shape or Z.ndim != 1 or Z.size == 0:
        raise ValueError("samples and values must be equal-length 1-d arrays")
    if not np.all(np.isfinite(F)):
        raise ValueError("values must be finite")
    free = np.ones(Z.size, dtype=bool)
    R = np.full(Z.size, np.mean(F))
    idx: List[int] = []
    history: List[float] = []
    best = None
    w = np.ones(0, dtype=complex)
    for _ in range(min(K_max, Z.size)):
        # greedy choice: largest current error among free points, lowest index on ties
        err = np.where(free, np.abs(F - R), -1.0)
        j = int(np.argmax(err))
        idx.append(j)
        free[j] = False
        z, f = Z[idx], F[idx]
        cauchy = 1.0 / (Z[free][:, None] - z[None, :])
        loewner = F[free][:, None] * cauchy - cauchy * f[None, :]
        if loewner.shape[0] == 0:
            w = np.ones(len(idx), dtype=complex)
        else:
            _, _, vh = linalg.svd(loewner, full_matrices=True)
            w = vh[-1].conj()
        N = cauchy @ (w * f)
        D = cauchy @ w
        R = F.copy()
        R[free] = N / D
        res = float(np.max(np.abs(F - R)))
        history.append(res)
        fit = BarycentricFit(z.copy(), f.copy(), w.copy(), res, list(history))
        if best is None or res < best.residual:
            best = fit
        if res <= delta:
            return fit
    raise FitError(
        f"AAA residual {best.residual:.3e} above delta={delta:.3e} with {len(idx)} support points",
        best.residual,
        best,
    )


def poles_residues(fit: BarycentricFit, froissart_tol: float = 1e-13, samples=None, values=None):
    """Poles and residues of a barycentric fit.

    Poles are the finite eigenvalues of the arrowhead pencil.  Residues
    follow from ``N(p) / D'(p)``.  Poles whose residue magnitude is below
    ``froissart_tol * max|values|`` are treated as spurious pole-zero pairs
    and removed.

    Returns
    -------
    poles, residues : ndarray
    constant : complex
        Value of the partial-fraction form at infinity.
    """
    z, f, w = fit.support, fit.values, fit.weights
    m = z.size
    if m == 1:
        return np.zeros(0, complex), np.zeros(0, complex), complex(f[0])
    E = np.zeros((m + 1, m + 1), dtype=complex)
    E[0, 1:] = w
    E[1:, 0] = 1.0
    E[1:, 1:] = np.diag(z)
    B = np.eye(m + 1, dtype=complex)
    B[0, 0] = 0.0
    ev = linalg.eigvals(E, B)
    poles = ev[np.isfinite(ev)]
    # the pencil has exactly m-1 finite eigenvalues; drop numerical extras by magnitude
    if poles.size > m - 1:
        poles = poles[np.argsort(np.abs(poles))][: m - 1]
    # a pole landing on a support point comes from a zero weight and is
    # removable; its residue evaluates to nan and fails the filter below
    with np.errstate(divide="ignore", invalid="ignore"):
        cauchy = 1.0 / (poles[:, None] - z[None, :])
        num = cauchy @ (w * f)
        dden = -(cauchy**2) @ w
        res = num / dden
    scale = np.max(np.abs(values)) if values is not None else np.max(np.abs(f))
    keep = np.abs(res) >= froissart_tol * scale
    poles, res = poles[keep], res[keep]
    constant = fit.value_at_infinity()
    return poles, res, constant


@dataclass(frozen=True)
class Mode:
    """One exponential ``d exp(-(gamma + i omega) t)`` of the correlation function."""

    d: complex
    gamma: float
    omega: float

    @property
    def z(self) -> complex:
        return complex(self.gamma, self.omega)


@dataclass(frozen=True)
class ModeSet:
    """Ordered bath modes plus the provenance of the fit that produced them."""

    modes: tuple
    window: Optional[FrequencyWindow] = None
    delta: float = math.nan
    achieved_error: float = math.nan
    constant: complex = 0.0
    grid_size: int = 0

    def __post_init__(self):
        for m in self.modes:
            if not m.gamma > 0:
                raise ValueError(f"mode with non-positive damping gamma={m.gamma}")

    @classmethod
    def from_arrays(cls, d, z, **kw) -> "ModeSet":
        modes = tuple(Mode(complex(dk), float(np.real(zk)), float(np.imag(zk))) for dk, zk in zip(d, z))
        return cls(modes, **kw)

    @property
    def K(self) -> int:
        return len(self.modes)

    @property
    def d(self) -> np.ndarray:
        return np.array([m.d for m in self.modes], dtype=complex)

    @property
    def z(self) -> np.ndarray:
        return np.array([m.z for m in self.modes], dtype=complex)

    def correlation(self, t):
        return reconstruct_C(self, t)

    def noise_power(self, omega):
        """``S(omega) = 2 Re sum_k d_k / (z_k - i omega)``."""
        w = np.asarray(omega, dtype=float)
        terms = self.d[None, :] / (self.z[None, :] - 1j * w.reshape(-1, 1))
        return (2 * np.real(terms.sum(axis=1))).reshape(w.shape)

    def scaled(self, factor: float) -> "ModeSet":
        """Same modes with every weight multiplied by ``factor``."""
        return ModeSet(tuple(Mode(m.d * factor, m.gamma, m.omega) for m in self.modes), self.window,
                       self.delta, self.achieved_error, self.constant * factor, self.grid_size)

    # text serialization -------------------------------------------------
    def dumps(self) -> str:
        g = lambda x: f"{x:.16e}"
        lines = ["# bath mode set: C(t) = sum d exp(-(gamma + i omega) t)"]
        lines.append(f"delta = {g(self.delta)}")
        if self.window is not None:
            lines.append(f"omega_eps = {g(self.window.omega_eps)}")
            lines.append(f"omega_D = {g(self.window.omega_D)}")
            lines.append(f"points_per_decade = {self.window.points_per_decade}")
        lines.append(f"achieved_error = {g(self.achieved_error)}")
        c = complex(self.constant)
        lines.append(f"constant = {g(c.real)} {g(c.imag)}")
        lines.append(f"grid_size = {self.grid_size}")
        lines.append(f"K = {self.K}")
        lines.append("# re_d im_d gamma omega")
        for m in self.modes:
            lines.append(f"mode {g(m.d.real)} {g(m.d.imag)} {g(m.gamma)} {g(m.omega)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "ModeSet":
        meta, modes = {}, []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("mode "):
                rd, idd, ga, om = (float(x) for x in line.split()[1:5])
                modes.append(Mode(complex(rd, idd), ga, om))
            else:
                key, _, val = line.partition("=")
                meta[key.strip()] = val.strip()
        window = None
        if "omega_eps" in meta:
            window = FrequencyWindow(float(meta["omega_eps"]), float(meta["omega_D"]),
                                     int(meta.get("points_per_decade", 20)))
        c = [float(x) for x in meta.get("constant", "0 0").split()]
        ms = cls(tuple(modes), window, float(meta.get("delta", "nan")),
                 float(meta.get("achieved_error", "nan")), complex(c[0], c[1]),
                 int(meta.get("grid_size", 0)))
        if "K" in meta and int(meta["K"]) != ms.K:
            raise ValueError("mode count does not match header")
        return ms

    @classmethod
    def load(cls, path) -> "ModeSet":
        with open(path) as fh:
            return cls.loads(fh.read())


def select_modes(poles, residues, grid=None, delta: float = 0.0, real_axis_tol: float = 1e-8) -> tuple:
    """Turn lower-half-plane poles ``Omega`` with residues into modes.

    ``z = i Omega`` and ``d = -i res``.  For a real noise power the
    upper-half-plane poles are the conjugate images of the lower ones and
    are dropped; ``2 Re`` in the mode expansion restores them.

    A pole on the real axis has no image.  A pole counts as real when it lies
    within ``real_axis_tol * |Omega|`` of the axis, or within ``1e-3 |Omega|``
    and its own mirror image is closer than that of any other pole.  Such a
    pole enters with half its residue and damping
    ``|Im Omega|``, floored at ``1e-8`` times its distance to the grid.  If
    the resulting mode changes the sampled noise power by less than
    ``delta / 10`` it is a spurious pole-zero pair and is dropped.

    Raises
    ------
    FitError
        If a non-negligible pole sits exactly on the real axis and no grid
        is available to size a regularizing damping.
    """
    poles = np.asarray(poles, dtype=complex)
    residues = np.asarray(residues, dtype=complex)
    z_list, d_list = [], []
    for i, (p, r) in enumerate(zip(poles, residues)):
        near_real = abs(p.imag) <= real_axis_tol * abs(p)
        mirror = np.abs(poles - np.conj(p))
        mirror[i] = np.inf
        if mirror.min() <= 2 * abs(p.imag):
            near_real = False
        elif abs(p.imag) <= 1e-3 * abs(p):
            # its own mirror image is closer than any other pole's: a real
            # pole whose imaginary part is rounding noise, in either half-plane
            near_real = True
        if near_real:
            gamma = abs(p.imag)
            d_half = -0.5j * r
            if grid is not None:
                g = np.asarray(grid)
                dist = np.min(np.abs(g - p))
                # an exactly real pole gets a damping far below its distance
                # to the samples; the change on the grid is O((gamma/dist)^2)
                gamma = max(gamma, 1e-8 * dist)
                # judge by what the mode adds to the sampled noise power, not
                # by |r|: a far real pole is invisible on the grid yet would
                # dominate C(t)
                if gamma > 0 and np.max(np.abs(2 * (d_half / (gamma + 1j * (p.real - g))).real)) < delta / 10:
                    continue
            if gamma == 0:
                raise FitError(f"pole on the real axis at {p.real:.6g}: undamped mode")
            z_list.append(complex(gamma, p.real))
            d_list.append(d_half)
        elif p.imag < 0:
            z_list.append(1j * p)
            d_list.append(-1j * r)
    z = np.array(z_list, dtype=complex)
    d = np.array(d_list, dtype=complex)
    order = np.lexsort((z.imag, z.real)) if z.size else np.zeros(0, int)
    modes = tuple(Mode(complex(d[i]), float(z[i].real), float(z[i].imag)) for i in order)
    for m in modes:
        if not m.gamma > 0:
            raise FitError("retained pole has non-positive damping")
    return modes


def refine_weights(modes: tuple, grid, values, c0: Optional[float] = None):
    """Least-squares weights ``d_k`` and constant for fixed poles.

    Solves the real linear problem ``values ~ c + 2 Re sum d_k / (z_k - i w)``
    on the grid.  The real part of ``d_k`` for a near-real pole, and any
    component whose basis column is negligible on the grid, keep their
    incoming value.

    With ``c0`` given, the sum rule ``sum_k d_k = c0`` (a real ``C(0)``) is
    added as two heavily weighted rows.  It pins the part of ``C(t)`` that
    the samples cannot see, the behaviour of the fit beyond ``omega_D``.

    Returns
    -------
    modes : tuple of Mode
    constant : float
    """
    grid = np.asarray(grid, dtype=float)
    z = np.array([m.z for m in modes], dtype=complex)
    basis = 1.0 / (z[None, :] - 1j * grid[:, None])
    # Re(d * b) = Re d Re b - Im d Im b
    A = np.hstack([np.ones((grid.size, 1)), 2 * basis.real, -2 * basis.imag])
    d0 = np.array([m.d for m in modes], dtype=complex)
    x = np.concatenate([[0.0], d0.real, d0.imag])
    col = np.max(np.abs(A), axis=0)
    # Re d of a near-real pole only enters through its (regularized) damping
    # and is unidentifiable; so is any column that barely touches the grid.
    # Rescaling such a column would blow its weight up, so keep it fixed.
    near_real = np.abs(z.real) <= 1e-3 * np.abs(z)
    free = col > 1e-8 * col.max()
    free[1:z.size + 1] &= ~near_real
    K = z.size
    y = np.asarray(values, dtype=float)
    if c0 is not None:
        w = 100.0
        rows = np.zeros((2, A.shape[1]))
        rows[0, 1:K + 1] = w
        rows[1, K + 1:] = w
        A = np.vstack([A, rows])
        y = np.concatenate([y, [w * float(c0), 0.0]])
    rhs = y - A[:, ~free] @ x[~free]
    x[free] = linalg.lstsq(A[:, free] / col[free], rhs)[0] / col[free]
    d = x[1:K + 1] + 1j * x[K + 1:]
    new = tuple(Mode(complex(dk), m.gamma, m.omega) for dk, m in zip(d, modes))
    return new, float(x[0])


def _noise_callable(source) -> Callable:
    if callable(getattr(source, "noise_power", None)):
        return source.noise_power
    if callable(source):
        return source
    raise TypeError("source must provide noise_power(omega) or be callable")


def decompose(source, window: FrequencyWindow, delta: float, K_max: int = 100,
              froissart_tol: float = 1e-13, c0: Optional[float] = None) -> ModeSet:
    """Sample, fit and convert a noise power into a :class:`ModeSet`.

    ``achieved_error`` is the max-norm deviation of the pole expansion
    ``constant + 2 Re sum d/(z - i omega)`` from the samples, i.e. the fit
    after spurious poles are removed.

    Parameters
    ----------
    c0 : float, optional
        Known ``C(0)``.  The weights are then refined under the sum rule
        ``sum d_k = c0``, which controls ``C(t)`` at short times.  The
        constraint costs accuracy on the grid, so the rational fit is
        tightened in steps (down to ``delta / 100``) until the constrained
        weights meet ``delta`` again.  If no step does, the unconstrained
        fit is returned with a warning.
    """
    S = _noise_callable(source)
    grid = sample_grid(window)
    vals = np.asarray(S(grid), dtype=float)

    def max_err(ms, c):
        return float(np.max(np.abs(ms.noise_power(grid) + c - vals)))

    def fitted(target):
        fit = aaa_fit(grid, vals, target, K_max)
        poles, res, const = poles_residues(fit, froissart_tol, grid, vals)
        return select_modes(poles, res, grid, delta), const.real

    modes, const = fitted(delta)
    best = ModeSet(modes, window, delta, math.nan, const, grid.size)
    err = max_err(best, const)
    if modes:
        ref, c2 = refine_weights(modes, grid, vals)
        cand = ModeSet(ref, window, delta, math.nan, c2, grid.size)
        err2 = max_err(cand, c2)
        if err2 < err:
            best, err = cand, err2
    if c0 is not None:
        for factor in (1.0, 0.3, 0.1, 0.03, 0.01):
            try:
                tight = modes if factor == 1.0 else fitted(delta * factor)[0]
            except FitError:
                break
            if not tight:
                continue
            ref, c2 = refine_weights(tight, grid, vals, c0)
            cand = ModeSet(ref, window, delta, math.nan, c2, grid.size)
            e = max_err(cand, c2)
            if e <= delta:
                return ModeSet(cand.modes, window, delta, e, c2, grid.size)
        warnings.warn("sum rule for C(0) not met within delta; returning the unconstrained fit",
                      RuntimeWarning, stacklevel=2)
    return ModeSet(best.modes, window, delta, err, best.constant, grid.size)


def reconstruct_C(modes: ModeSet, t):
    """``C(t) = sum_k d_k exp(-z_k t)`` for ``t >= 0``."""
    scalar = np.ndim(t) == 0
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(ts < 0):
        raise ValueError("reconstruct_C is defined for t >= 0 only")
    out = np.exp(-np.outer(ts, modes.z)) @ modes.d
    return complex(out[0]) if scalar else out


@dataclass(frozen=True)
class ScanRow:
    omega_eps: float
    K: int
    achieved_error: float
    ok: bool
    message: str = ""


def mode_count_scan(source, eps_values: Iterable[float], omega_D: float, delta: float,
                    points_per_decade: int = 20, K_max: int = 200) -> List[ScanRow]:
    """Number of modes needed as a function of the low-frequency cutoff.

    Failures are recorded in the row rather than raised so a scan always
    yields one row per requested ``omega_eps``.
    """
    rows = []
    for eps in eps_values:
        try:
            ms = decompose(source, FrequencyWindow(float(eps), omega_D, points_per_decade), delta, K_max)
            rows.append(ScanRow(float(eps), ms.K, ms.achieved_error, ms.achieved_error <= delta))
        except (FitError, ValueError) as exc:
            rows.append(ScanRow(float(eps), -1, getattr(exc, "best_residual", math.nan), False, str(exc)))
    return rows


def log_regression(rows: Sequence[ScanRow]):
    """Least-squares line ``K = a + b ln(1/omega_eps)`` over successful rows.

    Returns
    -------
    slope, intercept, r2 : float
    """
    good = [r for r in rows if r.ok]
    if len(good) < 2:
        raise ValueError("need at least two successful scan rows")
    x = np.log(1.0 / np.array([r.omega_eps for r in good]))
    y = np.array([r.K for r in good], dtype=float)
    b, a = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (a + b * x)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(b), float(a), r2
