"""PNG figures for the command-line reports (Agg backend, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .perturbation import EnergyLedger  # noqa: E402
from .reports import ConvergenceTrace, EstimateReport  # noqa: E402


def _new(title: str):
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    return fig, ax


def contraction_figure(diff_norms):
    """Picard difference norms on a log scale."""
    fig, ax = _new("Picard differences")
    k = np.arange(1, len(diff_norms) + 1)
    ax.semilogy(k, np.maximum(diff_norms, 1e-300), "o-")
    ax.set_xlabel("iterate k")
    ax.set_ylabel(r"$\|v^{(k)}-v^{(k-1)}\|_{5,Q_T}$")
    return fig


def energy_figure(ledger: EnergyLedger):
    """Both sides of the global energy balance and their gap."""
    fig, (ax, ax2) = plt.subplots(2, 1, figsize=(5.5, 6.0), sharex=True)
    t = np.asarray(ledger.t)
    lhs, rhs = ledger.balance()
    ax.plot(t, lhs, label="kinetic + dissipation")
    ax.plot(t, rhs, "--", label="work")
    ax.set_ylabel("energy")
    ax.legend()
    ax.grid(True, alpha=0.3)
    ax2.plot(t, lhs - rhs)
    ax2.set_xlabel("t")
    ax2.set_ylabel("LHS - RHS")
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


def trace_figure(tr: ConvergenceTrace):
    fig, ax = _new(f"{tr.metric} vs {tr.parameter}")
    vals = np.asarray(tr.values, dtype=float)
    m = np.asarray(tr.metrics, dtype=float)
    if np.all(vals > 0) and np.all(m > 0):
        ax.loglog(vals, m, "o-")
    else:
        ax.plot(vals, m, "o-")
    ax.set_xlabel(tr.parameter)
    ax.set_ylabel(tr.metric)
    return fig


def exponent_figure(reports: list[EstimateReport], x_key: str = "T_list", y_key: str = "norms"):
    """Log-log curves of every report that carries ``x_key``/``y_key`` details."""
    fig, ax = _new("small-T behaviour")
    for r in reports:
        x, y = r.details.get(x_key), r.details.get(y_key)
        if x is None or y is None:
            continue
        y = np.asarray(y, dtype=float)
        if y.ndim > 1:
            y = y[0]
        if np.all(y > 0):
            ax.loglog(x, y, "o-", label=f"{r.name} ({r.fitted_exponent:.2f})")
    ax.set_xlabel("T")
    ax.legend(fontsize=8)
    return fig


def norms_figure(times, series: dict[str, np.ndarray], title: str, ylog: bool = True):
    fig, ax = _new(title)
    for name, vals in series.items():
        (ax.semilogy if ylog else ax.plot)(times, np.maximum(vals, 1e-300) if ylog else vals, label=name)
    ax.set_xlabel("t")
    ax.legend(fontsize=8)
    return fig


def kernel_figure(report: EstimateReport, samples):
    """``|K| (|x|^2 + t)^2`` against the parabolic radius."""
    from .oseen import kernel_magnitude, oseen_kernel
    par2 = np.sum(samples.xs ** 2, axis=1) + samples.ts
    vals = kernel_magnitude(oseen_kernel(samples.xs, samples.ts)) * par2 ** 2
    fig, ax = _new("normalised Oseen kernel")
    ax.semilogx(np.sqrt(par2), vals, ".")
    ax.set_xlabel(r"$\sqrt{|x|^2+t}$")
    ax.set_ylabel(r"$|K|\,(|x|^2+t)^2$")
    return fig


def close(fig):
    plt.close(fig)
