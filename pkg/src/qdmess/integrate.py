"""Time stepping shared by every propagator, plus the trajectory record."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

__all__ = ["IntegratorConfig", "TrajectoryRecord", "IntegrationError", "integrate", "sample_times"]


class IntegrationError(RuntimeError):
    """Raised when the state blows up or the adaptive step collapses."""


@dataclass
class IntegratorConfig:
    """Settings for :func:`integrate`.

    Parameters
    ----------
    method : {"rk4", "rk45"}
        Fixed-step classical Runge-Kutta or adaptive Dormand-Prince 5(4).
    dt : float, optional
        Step for ``rk4`` (an upper bound; intervals between samples are split
        evenly) and the initial step for ``rk45``.  ``None`` lets the caller
        choose from the problem's fastest rate.
    atol, rtol : float
        Max-norm error targets for ``rk45``.
    n_samples : int
        Number of equally spaced output times on ``[0, t_final]``, both ends included.
    max_steps : int
        Abort after this many steps.
    """

    method: str = "rk4"
    dt: Optional[float] = None
    atol: float = 1e-10
    rtol: float = 1e-8
    n_samples: int = 101
    max_steps: int = 50_000_000


def sample_times(t_final: float, n_samples: int) -> np.ndarray:
    if t_final < 0 or n_samples < 1:
        raise ValueError("need t_final >= 0 and n_samples >= 1")
    return np.linspace(0.0, t_final, n_samples) if n_samples > 1 else np.array([t_final])


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_DP_E = _DP_B - np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def _rk4_step(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + h / 2, y + (h / 2) * k1)
    k3 = f(t + h / 2, y + (h / 2) * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(f: Callable, y0: np.ndarray, times: Sequence[float], config: IntegratorConfig,
              on_sample: Callable[[float, np.ndarray], None], dt: Optional[float] = None,
              error_norm: Optional[Callable[[np.ndarray], float]] = None) -> Dict[str, float]:
    """Integrate ``dy/dt = f(t, y)`` and hand the state to ``on_sample`` at each output time.

    Parameters
    ----------
    f : callable
        Right-hand side ``f(t, y) -> dy/dt`` on arrays of any shape.
    y0 : ndarray
        State at ``times[0]``.
    times : sequence of float
        Increasing output times; the first one is the initial time.
    config : IntegratorConfig
    on_sample : callable
        Called as ``on_sample(t, y)``; ``y`` must not be modified.
    dt : float, optional
        Fallback step if ``config.dt`` is ``None``.
    error_norm : callable, optional
        Max-norm of a scaled error array for ``rk45``; defaults to the plain
        element-wise maximum.

    Returns
    -------
    dict
        Step statistics (``steps``, ``rejected``).
    """
    times = np.asarray(times, dtype=float)
    y = np.array(y0, copy=True)
    h = config.dt if config.dt is not None else dt
    if h is None or not h > 0:
        raise ValueError("a positive step size is required")
    on_sample(float(times[0]), y)
    stats = {"steps": 0, "rejected": 0}
    if config.method == "rk4":
        for t0, t1 in zip(times[:-1], times[1:]):
            n = max(1, int(math.ceil((t1 - t0) / h - 1e-9)))
            hh = (t1 - t0) / n
            for i in range(n):
                y = _rk4_step(f, t0 + i * hh, y, hh)
            stats["steps"] += n
            if not np.all(np.isfinite(y)):
                raise IntegrationError(f"non-finite state at t={t1:g}")
            if stats["steps"] > config.max_steps:
                raise IntegrationError("step budget exhausted")
            on_sample(float(t1), y)
        return stats
    if config.method != "rk45":
        raise ValueError(f"unknown integrator {config.method!r}")
    norm = error_norm or (lambda e: float(np.max(np.abs(e))))
    t = float(times[0])
    k1 = f(t, y)
    for t_out in times[1:]:
        while t < t_out - 1e-14 * max(1.0, abs(t_out)):
            h_try = min(h, t_out - t)
            ks = [k1]
            for i in range(1, 7):
                yi = y + h_try * sum(a * k for a, k in zip(_DP_A[i], ks) if a != 0)
                ks.append(f(t + _DP_C[i] * h_try, yi))
            y_new = y + h_try * sum(b * k for b, k in zip(_DP_B, ks) if b != 0)
            err_vec = h_try * sum(e * k for e, k in zip(_DP_E, ks) if e != 0)
            scale = config.atol + config.rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = norm(np.abs(err_vec) / scale)
            if err <= 1.0 and np.all(np.isfinite(y_new)):
                t += h_try
                y = y_new
                k1 = ks[6]
                stats["steps"] += 1
                fac = 5.0 if err == 0 else min(5.0, 0.9 * err ** -0.2)
            else:
                stats["rejected"] += 1
                fac = 0.2 if not np.isfinite(err) else max(0.2, 0.9 * err ** -0.25)
            h = h_try * fac if h_try < h or fac < 1 else h * fac
            if h < 1e-14 * max(1.0, abs(t)):
                raise IntegrationError(f"step size collapsed at t={t:g}")
            if stats["steps"] + stats["rejected"] > config.max_steps:
                raise IntegrationError("step budget exhausted")
        on_sample(float(t_out), y)
    return stats


@dataclass
class TrajectoryRecord:
    """Sampled observables of one propagation (or an ensemble mean).

    Attributes
    ----------
    t : ndarray
        Sample times.
    observables : dict of str -> complex ndarray
        Expectation values ``tr(O rho_s)``.
    diagnostics : dict of str -> ndarray
        Per-sample checks such as ``trace`` or ``herm_residual``.
    stderr : dict of str -> ndarray
        Standard error of the real part, for ensembles only.
    n_traj : int
        Number of trajectories behind the means (0 for deterministic runs).
    meta : dict
        Free-form run metadata written to the sidecar.
    """

    t: np.ndarray
    observables: Dict[str, np.ndarray]
    diagnostics: Dict[str, np.ndarray] = field(default_factory=dict)
    stderr: Dict[str, np.ndarray] = field(default_factory=dict)
    n_traj: int = 0
    meta: dict = field(default_factory=dict)

    def to_csv(self, path, sidecar: bool = True) -> None:
        """Write the delimited table and a JSON diagnostics sidecar next to it."""
        names = list(self.observables)
        rows = []
        if self.n_traj:
            header = ["t"]
            for n in names:
                header += [f"{n}_mean", f"{n}_mean_im", f"{n}_stderr"]
            header.append("n_traj")
            for i, ti in enumerate(self.t):
                row = [ti]
                for n in names:
                    v = self.observables[n][i]
                    row += [v.real, v.imag, self.stderr.get(n, np.full(len(self.t), np.nan))[i]]
                row.append(self.n_traj)
                rows.append(row)
        else:
            header = ["t"]
            for n in names:
                header += [f"{n}_re", f"{n}_im"]
            diag_cols = [k for k in ("trace", "herm_residual") if k in self.diagnostics]
            if "trace" in diag_cols:
                header += ["trace_re", "trace_im"]
            if "herm_residual" in diag_cols:
                header.append("herm_residual")
            for i, ti in enumerate(self.t):
                row = [ti]
                for n in names:
                    v = self.observables[n][i]
                    row += [v.real, v.imag]
                if "trace" in diag_cols:
                    tr = complex(self.diagnostics["trace"][i])
                    row += [tr.real, tr.imag]
                if "herm_residual" in diag_cols:
                    row.append(float(self.diagnostics["herm_residual"][i]))
                rows.append(row)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([r if isinstance(r, (int, np.integer)) else f"{float(r):.17g}" for r in row])
        if sidecar:
            side = {k: _jsonable(v) for k, v in self.meta.items()}
            side.update(self.summary())
            with open(str(path) + ".json", "w") as fh:
                json.dump(side, fh, indent=2, sort_keys=True)

    def summary(self) -> dict:
        """Worst-case values of the per-sample diagnostics."""
        out = {}
        for k, v in self.diagnostics.items():
            arr = np.asarray(v)
            if k == "trace":
                out["trace_max_abs_dev"] = float(np.max(np.abs(arr - 1)))
            elif k == "min_eig":
                out["min_eig_min"] = float(np.min(np.real(arr)))
            else:
                out[f"{k}_max"] = float(np.max(np.abs(arr)))
        return out

    @classmethod
    def from_csv(cls, path) -> "TrajectoryRecord":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            data = np.array([[float(x) for x in row] for row in reader], dtype=float)
        if data.size == 0:
            data = data.reshape(0, len(header))
        col = {h: data[:, i] for i, h in enumerate(header)}
        obs, err, diag = {}, {}, {}
        n_traj = 0
        for h in header:
            if h.endswith("_re") and h not in ("trace_re",):
                obs[h[:-3]] = col[h] + 1j * col[h[:-3] + "_im"]
            elif h.endswith("_mean"):
                obs[h[:-5]] = col[h] + 1j * col.get(h + "_im", 0 * col[h])
                err[h[:-5]] = col[h[:-5] + "_stderr"]
        if "trace_re" in col:
            diag["trace"] = col["trace_re"] + 1j * col["trace_im"]
        if "herm_residual" in col:
            diag["herm_residual"] = col["herm_residual"]
        if "n_traj" in col and len(col["n_traj"]):
            n_traj = int(col["n_traj"][0])
        return cls(col["t"], obs, diag, err, n_traj)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, complex):
        return [v.real, v.imag]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v
