"""Mild solutions by Picard iteration on the Duhamel formulation.

The fixed point is ``v = V + G(v (x) v)`` with ``V`` the heat flow of ``v0``
and ``G`` the Duhamel operator of the forced Stokes system,

    w(t) = int_0^t exp((t - s) Laplacian) P(-div F(s)) ds,

``P`` the Leray projection.  ``G`` is applied with an exact integrating
factor per Fourier mode, treating the forcing as linear in time over each
step (an exponential trapezoidal rule, second order in ``dt``).

Only the Duhamel part ``w`` is stored, as spectral coefficients restricted to
the dealiasing band where it lives; ``V`` is regenerated from the heat
symbol on demand.  Picard iterates overwrite the store slot by slot.
"""

from __future__ import annotations

import logging
import time as _time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .reports import EstimateReport
from .spectral import (
    PHYSICAL,
    FieldHistory,
    Grid,
    VectorField,
    div_hat,
    fwd,
    inv,
    lp_norm_data,
    mixed_from_slice_norms,
    project_hat,
)
from .stokes_heat import phi_functions

log = logging.getLogger(__name__)

# Largest observed (||w||_{3,inf} + ||w||_5) / ||F||_{5/2} over the calibration
# sweep (bump family at several horizons plus random tensors, N = 32 and 48).
# Regenerate with calibrate_duhamel_constant.
C_DUHAMEL_EST = 0.2

DEFAULT_STEPS = 256


class IterationBlowUpError(RuntimeError):
    """Picard iterates grew past ``10 kappa``: the horizon is too long."""


class HorizonNotFoundError(RuntimeError):
    """No dyadic horizon in the search range meets the smallness threshold."""


def horizon_threshold(c_est: float | None = None) -> float:
    """``1 / (16 c)`` with the calibrated Duhamel constant."""
    c = C_DUHAMEL_EST if c_est is None else c_est
    if not c > 0:
        raise ValueError("Duhamel constant must be positive")
    return 1.0 / (16.0 * c)


def uniform_times(T: float, n_steps: int) -> np.ndarray:
    if not T > 0:
        raise ValueError(f"horizon must be positive, got {T}")
    if n_steps < 1:
        raise ValueError("need at least one time step")
    return np.linspace(0.0, T, n_steps + 1)


def _check_uniform(times: np.ndarray) -> float:
    d = np.diff(times)
    if len(d) == 0:
        raise ValueError("need at least two time slices")
    if times[0] != 0:
        raise ValueError("Duhamel histories must start at t = 0")
    if np.max(np.abs(d - d.mean())) > 1e-9 * times[-1]:
        raise ValueError("Duhamel operator needs a uniform time grid")
    return float(d.mean())


# ---------------------------------------------------------------------------
# spectral building blocks

_SYM = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


def flux_divergence_hat(v: np.ndarray, grid: Grid) -> np.ndarray:
    """``div D(v (x) v)`` for a physical velocity; ``D`` the 2/3 dealiasing."""
    prods = np.empty((6,) + grid.shape)
    for n, (i, j) in enumerate(_SYM):
        np.multiply(v[i], v[j], out=prods[n])
    ph = fwd(prods)
    ph *= grid.dealias_mask
    kx, ky, kz = grid.wavevector
    # (div F)_i = d_j F_ij with F symmetric
    d = np.empty((3,) + grid.spectral_shape, dtype=complex)
    d[0] = kx * ph[0] + ky * ph[1] + kz * ph[2]
    d[1] = kx * ph[1] + ky * ph[3] + kz * ph[4]
    d[2] = kx * ph[2] + ky * ph[4] + kz * ph[5]
    d *= 1j
    return d


def nonlinear_hat(v: np.ndarray, grid: Grid) -> np.ndarray:
    """``-P div D(v (x) v)``."""
    return -project_hat(flux_divergence_hat(v, grid), grid)


def tensor_forcing_hat(F: np.ndarray, grid: Grid) -> np.ndarray:
    """``-P div D F`` for a general physical 3x3 tensor field."""
    fh = fwd(F)
    fh *= grid.dealias_mask
    return -project_hat(div_hat(fh, grid), grid)


class DuhamelStepper:
    """One step of ``w' = Laplacian w + N(t)`` with ``N`` linear over the step.

    ``w_n = E w_{n-1} + h (phi1 - phi2) N_{n-1} + h phi2 N_n`` with
    ``E = exp(-|k|^2 h)``: exact for piecewise-linear forcing.
    """

    def __init__(self, grid: Grid, dt: float):
        if not dt > 0:
            raise ValueError("time step must be positive")
        self.grid = grid
        self.dt = dt
        e, p1, p2 = phi_functions(-grid.k_squared * dt)
        self.E = e
        self.a = dt * (p1 - p2)
        self.b = dt * p2

    def step(self, w_prev: np.ndarray, n_prev: np.ndarray, n_new: np.ndarray) -> np.ndarray:
        return self.E * w_prev + self.a * n_prev + self.b * n_new


class BandStore:
    """Spectral slots restricted to the dealiasing band."""

    def __init__(self, grid: Grid, n_slots: int, components: int = 3):
        self.grid = grid
        self.mask = grid.dealias_mask
        self.n_band = int(self.mask.sum())
        self.data = np.zeros((n_slots, components, self.n_band), dtype=complex)

    def __len__(self):
        return self.data.shape[0]

    def get(self, n: int) -> np.ndarray:
        out = np.zeros((self.data.shape[1],) + self.grid.spectral_shape, dtype=complex)
        out[:, self.mask] = self.data[n]
        return out

    def put(self, n: int, hat: np.ndarray):
        self.data[n] = hat[:, self.mask]

    @property
    def nbytes(self) -> int:
        return self.data.nbytes


def duhamel_G(F: FieldHistory, T: float | None = None) -> FieldHistory:
    """Duhamel operator on a uniformly sampled history of 3x3 tensor fields.

    Returns the physical history of ``w`` on the same time grid, ``w(0) = 0``.
    """
    if len(F) == 0:
        raise ValueError("Duhamel operator of an empty history")
    if T is not None and abs(F.horizon - T) > 1e-12 * max(T, 1.0):
        raise ValueError(f"forcing history ends at {F.horizon}, not at T = {T}")
    if F[0].components != (3, 3):
        raise ValueError("forcing must be a 3x3 tensor history")
    dt = _check_uniform(F.times)
    grid = F.grid
    stepper = DuhamelStepper(grid, dt)
    w = np.zeros((3,) + grid.spectral_shape, dtype=complex)
    n_prev = tensor_forcing_hat(F[0].physical().data, grid)
    out = [VectorField(grid, np.zeros((3,) + grid.shape), PHYSICAL, 0.0)]
    for n in range(1, len(F)):
        n_new = tensor_forcing_hat(F[n].physical().data, grid)
        w = stepper.step(w, n_prev, n_new)
        n_prev = n_new
        out.append(VectorField(grid, inv(w, grid), PHYSICAL, float(F.times[n])))
    return FieldHistory(out, F.times.copy())


# ---------------------------------------------------------------------------
# smallness parameter and horizon

def _hat(v0: VectorField) -> np.ndarray:
    return v0.data if v0.is_spectral else fwd(v0.data)


def heat_slice_norms(v0: VectorField, times, p: float) -> np.ndarray:
    hat = _hat(v0)
    k2 = v0.grid.k_squared
    return np.array([lp_norm_data(inv(hat * np.exp(-k2 * t), v0.grid), v0.grid, p) for t in times])


def kappa(v0: VectorField, T: float, n_steps: int = DEFAULT_STEPS) -> float:
    """``||V||_{5,Q_T}`` for the heat flow ``V`` of ``v0`` (trapezoid, uniform grid)."""
    if T == 0:
        return 0.0
    times = uniform_times(T, n_steps)
    return mixed_from_slice_norms(heat_slice_norms(v0, times, 5), times, 5)


def select_horizon(v0: VectorField, threshold: float, T_max: float = 1.0, T_min: float = 1e-6,
                   n_steps: int = DEFAULT_STEPS) -> float:
    """Largest dyadic ``T = T_max 2^-j >= T_min`` with ``kappa(T) <= threshold``.

    Bisection over ``j`` (kappa is nondecreasing in ``T``).
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    j_max = int(np.floor(np.log2(T_max / T_min)))

    def ok(j):
        return kappa(v0, T_max * 2.0 ** -j, n_steps) <= threshold

    if ok(0):
        return T_max
    if not ok(j_max):
        raise HorizonNotFoundError(
            f"kappa exceeds {threshold:g} even at T = {T_max * 2.0 ** -j_max:.3g}")
    lo, hi = 0, j_max  # ok(lo) false, ok(hi) true
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return T_max * 2.0 ** -hi


# ---------------------------------------------------------------------------
# Picard iteration

@dataclass
class PicardState:
    """Bookkeeping of one Picard iterate."""

    k: int
    diff_norm_5: float
    kappa: float
    norm_5: float
    current: "MildSolution | None" = None

    def __post_init__(self):
        if not np.isfinite(self.diff_norm_5):
            raise ValueError("Picard difference norm is not finite")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")


@dataclass(eq=False)
class MildSolution:
    """Mild solution on a uniform time grid.

    ``velocity`` and ``pressure`` are materialised on first access; slices
    are available individually through :meth:`velocity_slice`.
    """

    grid: Grid
    times: np.ndarray
    v0_hat: np.ndarray
    w_store: BandStore
    T: float
    converged: bool
    iterations: int
    final_residual: float
    kappa: float
    diff_norms: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def ratios(self) -> list[float]:
        d = self.diff_norms
        return [d[i + 1] / d[i] for i in range(len(d) - 1) if d[i] > 0]

    def heat_hat(self, n: int) -> np.ndarray:
        return self.v0_hat * np.exp(-self.grid.k_squared * self.times[n])

    def velocity_hat(self, n: int) -> np.ndarray:
        return self.heat_hat(n) + self.w_store.get(n)

    def velocity_slice(self, n: int) -> VectorField:
        return VectorField(self.grid, inv(self.velocity_hat(n), self.grid), PHYSICAL, float(self.times[n]))

    def duhamel_slice(self, n: int) -> VectorField:
        return VectorField(self.grid, inv(self.w_store.get(n), self.grid), PHYSICAL, float(self.times[n]))

    def __len__(self):
        return len(self.times)

    @cached_property
    def velocity(self) -> FieldHistory:
        return FieldHistory([self.velocity_slice(n) for n in range(len(self))], self.times.copy())

    @cached_property
    def pressure(self) -> FieldHistory:
        return recover_pressure(self.velocity)

    def slice_norms(self, p: float) -> np.ndarray:
        return np.array([lp_norm_data(inv(self.velocity_hat(n), self.grid), self.grid, p)
                         for n in range(len(self))])

    def metadata(self) -> dict:
        return {"T": self.T, "n_steps": len(self.times) - 1, "converged": self.converged,
                "iterations": self.iterations, "final_residual": self.final_residual,
                "kappa": self.kappa, "diff_norms": list(self.diff_norms),
                "contraction_ratios": self.ratios,
                "box_length": self.grid.box_length, "resolution": self.grid.resolution,
                "wall_time_s": self.wall_time}


def _trap_weights(times: np.ndarray) -> np.ndarray:
    d = np.diff(times)
    w = np.zeros(len(times))
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


def _picard_sweep(grid: Grid, times: np.ndarray, v0_hat: np.ndarray, store: BandStore,
                  stepper: DuhamelStepper, write: bool) -> tuple[float, float]:
    """One application ``v <- V + G(v (x) v)`` over the stored iterate.

    Returns ``(||v_new - v_old||_{5,Q_T}, ||v_new||_{5,Q_T})``.  With
    ``write=False`` the store is left untouched (residual evaluation).
    """
    weights = _trap_weights(times)
    k2 = grid.k_squared
    w_new = np.zeros((3,) + grid.spectral_shape, dtype=complex)
    n_prev = None
    diff5 = 0.0
    norm5 = 0.0
    for n, t in enumerate(times):
        heat = v0_hat * np.exp(-k2 * t)
        w_old = store.get(n)
        v_old = inv(heat + w_old, grid)
        n_new = nonlinear_hat(v_old, grid)
        if n > 0:
            w_new = stepper.step(w_new, n_prev, n_new)
        n_prev = n_new
        dphys = inv(w_new - w_old, grid)
        diff5 += weights[n] * lp_norm_data(dphys, grid, 5) ** 5
        norm5 += weights[n] * lp_norm_data(v_old + dphys, grid, 5) ** 5
        if write:
            store.put(n, w_new)
    return diff5 ** 0.2, norm5 ** 0.2


def picard_solve(v0: VectorField, T: float, tol: float = 1e-8, k_max: int = 30,
                 n_steps: int = DEFAULT_STEPS,
                 on_iterate: Callable[[PicardState], None] | None = None) -> MildSolution:
    """Iterate ``v^(k+1) = V + G(v^(k) (x) v^(k))`` from ``v^(0) = 0``.

    Stops when ``||v^(k+1) - v^(k)||_{5,Q_T} <= tol`` or after ``k_max``
    iterations.  The first iterate is ``V`` exactly.  Raises
    :class:`IterationBlowUpError` when an iterate's (5,5) norm exceeds
    ``10 kappa``.  ``final_residual`` is the (5,5) norm of
    ``v - V - G(v (x) v)`` evaluated by one further, non-writing sweep.
    """
    if v0.components != (3,):
        raise ValueError("initial data must be a 3-vector field")
    if tol <= 0 or k_max < 1:
        raise ValueError("need tol > 0 and k_max >= 1")
    start = _time.perf_counter()
    grid = v0.grid
    times = uniform_times(T, n_steps)
    v0_hat = _hat(v0).copy()
    store = BandStore(grid, len(times))
    stepper = DuhamelStepper(grid, times[1] - times[0])
    kap = mixed_from_slice_norms(heat_slice_norms(v0, times, 5), times, 5)
    diffs: list[float] = []
    converged = False
    # v^(1) = V: the store (w) is zero, and the first difference is ||V||_5 = kappa
    diffs.append(kap)
    k = 1
    if kap <= tol:
        converged = True
    while not converged and k < k_max:
        d, nrm = _picard_sweep(grid, times, v0_hat, store, stepper, write=True)
        k += 1
        diffs.append(d)
        state = PicardState(k, d, kap, nrm)
        log.debug("picard k=%d diff=%.3e ratio=%.3f", k, d, d / diffs[-2] if diffs[-2] else 0.0)
        if on_iterate is not None:
            on_iterate(state)
        if nrm > 10 * kap:
            raise IterationBlowUpError(
                f"||v^({k})||_5 = {nrm:.3e} exceeds 10 kappa = {10 * kap:.3e}; shorten T")
        if d <= tol:
            converged = True
    if kap == 0:
        residual = 0.0
    else:
        residual, _ = _picard_sweep(grid, times, v0_hat, store, stepper, write=False)
    return MildSolution(grid, times, v0_hat, store, float(T), converged, k, float(residual),
                        float(kap), diffs, _time.perf_counter() - start)


def fixed_point_residual(sol: MildSolution) -> float:
    """``||v - V - G(v (x) v)||_{5,Q_T}`` recomputed from the stored solution."""
    stepper = DuhamelStepper(sol.grid, sol.times[1] - sol.times[0])
    r, _ = _picard_sweep(sol.grid, sol.times, sol.v0_hat, sol.w_store, stepper, write=False)
    return r


# ---------------------------------------------------------------------------
# pressure and momentum residual

def pressure_hat(v: np.ndarray, grid: Grid) -> np.ndarray:
    """Zero-mean ``r`` with ``-Laplacian r = div div D(v (x) v)``, spectral."""
    prods = np.empty((6,) + grid.shape)
    for n, (i, j) in enumerate(_SYM):
        np.multiply(v[i], v[j], out=prods[n])
    ph = fwd(prods)
    ph *= grid.dealias_mask
    kx, ky, kz = grid.wavevector
    kk = (kx * kx * ph[0] + ky * ky * ph[3] + kz * kz * ph[5]
          + 2 * (kx * ky * ph[1] + kx * kz * ph[2] + ky * kz * ph[4]))
    return -kk * grid.inverse_kd_squared


def recover_pressure(v: FieldHistory) -> FieldHistory:
    """Per-slice pressure of a divergence-free velocity history."""
    g = v.grid
    out = [VectorField(g, inv(pressure_hat(s.physical().data, g), g), PHYSICAL, s.time) for s in v.slices]
    return FieldHistory(out, v.times.copy())


def momentum_residual_hat(v_prev: np.ndarray, v_next: np.ndarray, v_mid: np.ndarray,
                          q_mid: np.ndarray | None, dt2: float, grid: Grid) -> np.ndarray:
    """Spectral ``dv/dt - Laplacian v + div D(v (x) v) + grad q`` at a slice.

    ``dv/dt`` is the central difference ``(v_next - v_prev) / dt2``.  When
    ``q_mid`` is None the pressure gradient is replaced by the Leray projection.
    """
    vh_mid = fwd(v_mid)
    dvdt = (fwd(v_next) - fwd(v_prev)) / dt2
    adv = -nonlinear_hat(v_mid, grid) if q_mid is None else flux_divergence_hat(v_mid, grid)
    res = dvdt + grid.k_squared * vh_mid + adv
    if q_mid is not None:
        qh = fwd(q_mid)
        kx, ky, kz = grid.wavevector
        res = res + 1j * np.stack([kx * qh, ky * qh, kz * qh])
    return res


def momentum_residual(v: FieldHistory, q: FieldHistory | None = None) -> np.ndarray:
    """L2 norm of the momentum residual at every interior slice.

    Central differences in time, so the history must be uniform.
    """
    if len(v) < 3:
        raise ValueError("momentum residual needs at least three slices")
    g = v.grid
    out = []
    for n in range(1, len(v) - 1):
        dt2 = v.times[n + 1] - v.times[n - 1]
        qm = None if q is None else q[n].physical().data
        rh = momentum_residual_hat(v[n - 1].physical().data, v[n + 1].physical().data,
                                   v[n].physical().data, qm, dt2, g)
        out.append(lp_norm_data(inv(rh, g), g, 2))
    return np.array(out)


# ---------------------------------------------------------------------------
# calibration of the Duhamel constant

def duhamel_ratio(F: FieldHistory) -> float:
    """``(||w||_{3,inf} + ||w||_{5,Q_T}) / ||F||_{5/2,Q_T}`` for ``w = G(F)``."""
    w = duhamel_G(F)
    n3 = w.slice_norms(3)
    n5 = w.slice_norms(5)
    nf = F.slice_norms(2.5)
    den = mixed_from_slice_norms(nf, F.times, 2.5)
    if den == 0:
        raise ValueError("zero forcing")
    return (float(n3.max()) + mixed_from_slice_norms(n5, w.times, 5)) / den


def heat_tensor_history(v0: VectorField, T: float, n_steps: int) -> FieldHistory:
    """``F = V (x) V`` on a uniform grid."""
    g = v0.grid
    times = uniform_times(T, n_steps)
    hat = _hat(v0)
    out = []
    for t in times:
        V = inv(hat * np.exp(-g.k_squared * t), g)
        out.append(VectorField(g, V[:, None] * V[None, :], PHYSICAL, float(t)))
    return FieldHistory(out, times)


def random_tensor_history(grid: Grid, rng: np.random.Generator, T: float, n_steps: int,
                          kmax: int | None = None) -> FieldHistory:
    """Smooth random 3x3 tensor fields with random smooth time modulation."""
    from .spectral import random_smooth_field
    times = uniform_times(T, n_steps)
    A = random_smooth_field(grid, rng, components=(3, 3), kmax=kmax).data
    B = random_smooth_field(grid, rng, components=(3, 3), kmax=kmax).data
    w1, w2 = rng.uniform(0.5, 3.0, 2) * 2 * np.pi / T
    out = [VectorField(grid, np.cos(w1 * t) * A + np.sin(w2 * t) * B, PHYSICAL, float(t)) for t in times]
    return FieldHistory(out, times)


def calibrate_duhamel_constant(family: list[VectorField], horizons=(0.01, 0.1, 1.0),
                               n_random: int = 4, seed: int = 0, n_steps: int = 64) -> EstimateReport:
    """Empirical Duhamel constant: the largest ratio over a sweep.

    The sweep covers ``F = V (x) V`` for every member of ``family`` at each
    horizon, plus ``n_random`` random smooth tensor histories per horizon.
    """
    if not family:
        raise ValueError("calibration needs at least one initial datum")
    rng = np.random.default_rng(seed)
    grid = family[0].grid
    ratios = []
    for T in horizons:
        for v0 in family:
            ratios.append(("heat", T, duhamel_ratio(heat_tensor_history(v0, T, n_steps))))
        for _ in range(n_random):
            ratios.append(("random", T, duhamel_ratio(random_tensor_history(grid, rng, T, n_steps))))
    vals = np.array([r for _, _, r in ratios])
    c = float(vals.max())
    return EstimateReport(
        name="duhamel_constant", lhs=c, rhs=None, ratio=c, passed=bool(np.isfinite(c)),
        details={"ratios": [{"kind": k, "T": T, "ratio": r} for k, T, r in ratios],
                 "threshold": 1.0 / (16 * c), "resolution": grid.resolution})
