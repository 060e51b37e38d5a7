"""Static figures written next to the CLI's CSV output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_fit(grid, values, fitted, path, title=None):
    """Noise power samples against the mode expansion, with the pointwise error."""
    with plt.rc_context(STYLE):
        fig, (ax, ax_err) = plt.subplots(2, 1, sharex=True, figsize=(5.0, 4.6))
        pos = grid > 0
        ax.loglog(grid[pos], np.abs(values[pos]), "k.", ms=2, label="samples")
        ax.loglog(grid[pos], np.abs(fitted[pos]), "C0-", lw=1, label="modes")
        ax.set_ylabel(r"$|S(\omega)|$, $\omega>0$")
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        err = np.abs(fitted - values)
        ax_err.loglog(np.abs(grid[pos]), err[pos], "C1-", lw=1, label=r"$\omega>0$")
        ax_err.loglog(np.abs(grid[~pos]), err[~pos], "C2--", lw=1, label=r"$\omega<0$")
        ax_err.set_xlabel(r"$|\omega|$")
        ax_err.set_ylabel("abs. error")
        ax_err.legend(frameon=False)
        _save(fig, path)


def plot_scan(eps, K, ok, path, fit_line=None):
    """Mode count against ``ln(1/omega_eps)``; failed rows drawn hollow."""
    eps = np.asarray(eps, float)
    K = np.asarray(K, float)
    ok = np.asarray(ok, bool)
    x = np.log(1.0 / eps)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(x[ok], K[ok], "o", color="C0", label="converged")
        if np.any(~ok):
            ax.plot(x[~ok], np.where(K[~ok] < 0, np.nan, K[~ok]), "o", mfc="none", color="C3", label="failed")
        if fit_line is not None:
            slope, intercept = fit_line
            xs = np.linspace(x.min(), x.max(), 50)
            ax.plot(xs, intercept + slope * xs, "k-", lw=0.8, label=f"slope {slope:.3g}")
        ax.set_xlabel(r"$\ln(1/\omega_\epsilon)$")
        ax.set_ylabel("K")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_trajectory(record, path, labels=None):
    """Real parts of the observables; ensembles get a one-standard-error band."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, (k, v) in enumerate(record.observables.items()):
            c = f"C{i % 10}"
            ax.plot(record.t, np.real(v), color=c, lw=1, label=k)
            if k in record.stderr:
                e = record.stderr[k]
                ax.fill_between(record.t, np.real(v) - e, np.real(v) + e, color=c, alpha=0.25, lw=0)
        ax.set_xlabel("t")
        ax.set_ylabel("expectation value")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_comparison(t, series, path, ylabel="deviation"):
    """Time-resolved deviations, one line per labelled series."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, (label, y) in enumerate(series.items()):
            ax.plot(t, y, color=f"C{i % 10}", lw=1, label=label)
        ax.set_xlabel("t")
        ax.set_ylabel(ylabel)
        if series:
            ax.legend(frameon=False)
        _save(fig, path)
