"""Linear theory on the torus: heat/Stokes flow of divergence-free data and the
estimates it satisfies.

With zero pressure the Stokes flow of solenoidal data is the componentwise heat
flow, realised here as the exact multiplier ``exp(-|k|^2 t)``.
"""

from __future__ import annotations

import numpy as np

from .reports import EstimateReport, fit_power_law
from .spectral import (
    FieldHistory,
    Grid,
    MixedNormSpec,
    VectorField,
    fwd,
    grad_hat,
    inv,
    lp_norm,
    lp_norm_data,
    mixed_from_slice_norms,
)
from .oseen import (  # noqa: F401  (kernel operations live alongside the heat flow)
    KernelSampleSet,
    OseenKernelSample,
    kernel_bound_samples,
    oseen_kernel,
    oseen_phi,
    verify_kernel_bound,
)

_TAYLOR_Z = 0.1


def phi_functions(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``exp(z)``, ``phi1 = (e^z - 1)/z`` and ``phi2 = (e^z - 1 - z)/z^2``.

    Small ``|z|`` uses the Taylor series (ten terms) to avoid cancellation.
    """
    z = np.asarray(z, dtype=float)
    e = np.exp(z)
    small = np.abs(z) < _TAYLOR_Z
    zs = np.where(small, 1.0, z)
    phi1 = np.where(small, 0.0, np.expm1(zs) / zs)
    phi2 = np.where(small, 0.0, (np.expm1(zs) - zs) / (zs * zs))
    if np.any(small):
        zt = z[small]
        p1 = np.zeros_like(zt)
        p2 = np.zeros_like(zt)
        term = np.ones_like(zt)
        # term = z^n / n!; phi1 = sum z^n/(n+1)!, phi2 = sum z^n/(n+2)!
        for n in range(10):
            p1 += term / (n + 1)
            p2 += term / ((n + 1) * (n + 2))
            term = term * zt / (n + 1)
        phi1[small] = p1
        phi2[small] = p2
    return e, phi1, phi2


class HeatPropagator:
    """Caches heat symbols ``exp(-|k|^2 t)`` per time for one grid."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self._symbols: dict[float, np.ndarray] = {}

    def symbol(self, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError(f"heat propagation needs t >= 0, got {t}")
        t = float(t)
        s = self._symbols.get(t)
        if s is None:
            s = np.exp(-self.grid.k_squared * t)
            if len(self._symbols) < 64:
                self._symbols[t] = s
        return s

    def propagate_hat(self, v0_hat: np.ndarray, t: float) -> np.ndarray:
        if t == 0:
            return v0_hat.copy()
        return v0_hat * self.symbol(t)

    def propagate(self, v0: VectorField, t: float) -> VectorField:
        if t < 0:
            raise ValueError(f"heat propagation needs t >= 0, got {t}")
        if t == 0:
            return v0.with_data(v0.data.copy(), time=v0.time)
        hat = v0.data if v0.is_spectral else fwd(v0.data)
        out = self.propagate_hat(hat, t)
        if v0.is_spectral:
            return VectorField(self.grid, out, v0.representation, v0.time + t)
        return VectorField(self.grid, inv(out, self.grid), v0.representation, v0.time + t)

    def history(self, v0: VectorField, times) -> FieldHistory:
        hat = v0.data if v0.is_spectral else fwd(v0.data)
        slices = []
        for t in times:
            data = inv(self.propagate_hat(hat, t), self.grid) if t > 0 else \
                (v0.data.copy() if not v0.is_spectral else inv(hat, self.grid))
            slices.append(VectorField(self.grid, data, "physical", float(t)))
        return FieldHistory(slices, np.asarray(times, dtype=float))


def heat_propagate(v0: VectorField, t: float) -> VectorField:
    """Stokes flow ``v1(t)`` of solenoidal data ``v0``."""
    return HeatPropagator(v0.grid).propagate(v0, t)


def geometric_times(T: float, n: int, t_min_fraction: float = 1e-6) -> np.ndarray:
    """``0`` followed by ``n-1`` log-spaced times ending at ``T``."""
    return np.concatenate([[0.0], np.geomspace(T * t_min_fraction, T, n - 1)])


def verify_first_stokes_estimate(v0: VectorField, T: float, n_slices: int = 96) -> EstimateReport:
    """Ratio ``(||v1||_{3,inf,Q_T} + ||v1||_{5,Q_T}) / ||v0||_3``.

    Time slices are geometric so that the early-time layer is resolved by the
    trapezoidal rule even for long horizons.  Passing only asserts that the
    ratio is finite; boundedness across a family is the caller's sweep.
    """
    n3 = lp_norm(v0, 3)
    if n3 == 0:
        raise ValueError("first Stokes estimate ratio undefined for zero initial data")
    times = geometric_times(T, n_slices)
    prop = HeatPropagator(v0.grid)
    hat = v0.data if v0.is_spectral else fwd(v0.data)
    norms3 = np.empty(len(times))
    norms5 = np.empty(len(times))
    for i, t in enumerate(times):
        data = inv(prop.propagate_hat(hat, t), v0.grid)
        norms3[i] = lp_norm_data(data, v0.grid, 3)
        norms5[i] = lp_norm_data(data, v0.grid, 5)
    sup3 = float(norms3.max())
    l5 = mixed_from_slice_norms(norms5, times, 5)
    lhs = sup3 + l5
    ratio = lhs / n3
    return EstimateReport(
        name="first_stokes_estimate",
        lhs=lhs, rhs=n3, ratio=ratio, passed=bool(np.isfinite(ratio)),
        details={"T": T, "sup_L3": sup3, "L5_QT": l5, "n_slices": n_slices})


def gradient_decay_exponent(s: float) -> float:
    """Reference exponent ``-(1/r + 1/2)`` with ``1/r = 3/2 (1/3 - 1/s)``."""
    return -(1.5 * (1.0 / 3.0 - 1.0 / s) + 0.5)


def gradient_norms(v0: VectorField, s: float, times) -> np.ndarray:
    prop = HeatPropagator(v0.grid)
    hat = v0.data if v0.is_spectral else fwd(v0.data)
    out = []
    for t in times:
        g = inv(grad_hat(prop.propagate_hat(hat, t), v0.grid), v0.grid)
        out.append(lp_norm_data(g, v0.grid, s))
    return np.array(out)


def verify_gradient_decay(v0: VectorField, s: float, times, slack: float = 0.07) -> EstimateReport:
    """Log-log slope of ``||grad v1(t)||_s``; passes when the decay is at least
    as fast as the reference power (one-sided, within ``slack``)."""
    times = np.asarray(times, dtype=float)
    if s < 3:
        raise ValueError("gradient decay estimate needs s >= 3")
    if len(times) < 3 or np.any(np.diff(times) <= 0) or times[0] <= 0:
        raise ValueError("need at least three positive, increasing times")
    if np.log10(times[-1] / times[0]) < 1.5 - 1e-9:
        raise ValueError("times must span at least 1.5 decades")
    norms = gradient_norms(v0, s, times)
    slope, _ = fit_power_law(times, norms)
    ref = gradient_decay_exponent(s)
    return EstimateReport(
        name=f"gradient_decay_s{s:g}",
        lhs=float(norms[-1]), rhs=float(norms[0]), ratio=float(norms[-1] / norms[0]),
        fitted_exponent=slope, reference_exponent=ref,
        passed=bool(slope <= ref + slack),
        details={"times": times.tolist(), "norms": norms.tolist(), "slack": slack})


def first_stokes_family_check(family, T: float, n_slices: int = 96, spread_tol: float = 0.05,
                              scale: float = 2.0, scale_tol: float = 1e-8) -> EstimateReport:
    """Uniformity of the first Stokes ratio over a family, and its scale invariance.

    Spread is ``(max - min) / mean`` of the member ratios.  Invariance
    compares the ratio of ``scale * v0`` with that of ``v0`` for the first
    member (the estimate is linear, so the ratio must not move).
    """
    family = list(family)
    if not family:
        raise ValueError("empty family")
    ratios = np.array([verify_first_stokes_estimate(v, T, n_slices).ratio for v in family])
    spread = float((ratios.max() - ratios.min()) / ratios.mean())
    base = ratios[0]
    scaled = verify_first_stokes_estimate(family[0] * scale, T, n_slices).ratio
    drift = abs(scaled - base) / base
    return EstimateReport(
        name="first_stokes_family", lhs=spread, rhs=spread_tol, ratio=float(ratios.mean()),
        passed=bool(spread <= spread_tol and drift <= scale_tol and np.all(np.isfinite(ratios))),
        details={"T": T, "ratios": ratios.tolist(), "spread": spread, "scale": scale,
                 "scale_drift": float(drift)})
