"""The energy correction ``v2 = v - v1`` and its audits.

``v1`` is the heat flow of ``v0`` (regenerated exactly from the heat symbol
whenever needed); ``u = v2`` solves

    du/dt - Laplacian u + grad q2 = -div F,    div u = 0,   u(0) = a (default 0),

with the flux ``F = (u + v1) (x) (u + v1)`` or, for a mollification radius
``rho > 0``,

    F = u (x) (u_rho + v1_rho) + v1_rho (x) (u + v1_rho).

The four pieces of ``-div F`` are the forces ``f1 .. f4`` of the split.
Time stepping is second-order exponential Runge-Kutta (ETDRK2): the heat
part is integrated exactly, the flux explicitly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .mild import BandStore, pressure_hat
from .reports import ConvergenceTrace, EstimateReport, fit_power_law, observed_order
from .spectral import (
    PHYSICAL,
    FieldHistory,
    Grid,
    Mollifier,
    VectorField,
    fwd,
    grad_hat,
    inv,
    lp_norm_data,
    mixed_from_slice_norms,
    project_hat,
    random_smooth_field,
    spectral_inner,
    time_integral,
)
from .stokes_heat import phi_functions

log = logging.getLogger(__name__)

DEFAULT_CFL = 0.5


class StepRejectedError(RuntimeError):
    """The explicit flux step violates the CFL bound."""

    def __init__(self, message: str, suggested_dt: float):
        super().__init__(message)
        self.suggested_dt = suggested_dt


def energy_tolerance(resolution: int) -> float:
    """``1e-6`` at ``N = 64``, relaxed by a factor 10 per halving."""
    return 1e-6 * 10.0 ** math.log2(64.0 / resolution)


# ---------------------------------------------------------------------------
# flux and right-hand side

@dataclass
class _Fields:
    """Physical fields at one evaluation of the right-hand side."""

    u: np.ndarray
    v1: np.ndarray        # mollified when rho > 0
    flux_hat: np.ndarray  # dealiased spectral flux, shape (3, 3, ...)


def _flux(u: np.ndarray, v1: np.ndarray, grid: Grid, symbol: np.ndarray | None) -> tuple[np.ndarray, float]:
    """Physical flux and the max speed of the advecting velocity."""
    if symbol is None:
        v = u + v1
        F = v[:, None] * v[None, :]
        vmax = float(np.sqrt(np.max(np.sum(v * v, axis=0))))
        return F, vmax
    u_rho = inv(fwd(u) * symbol, grid)
    b = u_rho + v1          # v1 already mollified
    d = u + v1
    F = u[:, None] * b[None, :] + v1[:, None] * d[None, :]
    vmax = float(np.sqrt(np.max(np.sum(b * b, axis=0))))
    return F, vmax


def _neg_div_hat(flux_hat: np.ndarray, grid: Grid) -> np.ndarray:
    kx, ky, kz = grid.wavevector
    return -1j * (kx * flux_hat[:, 0] + ky * flux_hat[:, 1] + kz * flux_hat[:, 2])


class PerturbationStepper:
    """ETDRK2 for the ``v2`` equation on one grid.

    ``a = E u + h phi1 N(u, t)``, ``u_new = a + h phi2 (N(a, t + h) - N(u, t))``
    with ``N = -P div D F``.
    """

    def __init__(self, grid: Grid, v0_hat: np.ndarray, rho: float = 0.0,
                 mollifier_kind: str = "gaussian", cfl_max: float = DEFAULT_CFL):
        self.grid = grid
        self.v0_hat = v0_hat
        self.rho = float(rho)
        self.cfl_max = cfl_max
        self.mollifier = None
        self.symbol = None
        if rho > 0:
            self.mollifier = Mollifier(rho, mollifier_kind)
            self.symbol = self.mollifier.symbol(grid)
        elif rho < 0:
            raise ValueError("mollification radius must be nonnegative")
        self._coef: dict[float, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def v1_hat(self, t: float, mollified: bool = False) -> np.ndarray:
        h = self.v0_hat * np.exp(-self.grid.k_squared * t)
        if mollified and self.symbol is not None:
            h = h * self.symbol
        return h

    def coefficients(self, dt: float):
        key = float(dt)
        c = self._coef.get(key)
        if c is None:
            e, p1, p2 = phi_functions(-self.grid.k_squared * dt)
            c = (e, dt * p1, dt * p2)
            if len(self._coef) < 32:
                self._coef[key] = c
        return c

    def fields(self, u_hat: np.ndarray, t: float) -> tuple[_Fields, float]:
        g = self.grid
        u = inv(u_hat, g)
        v1 = inv(self.v1_hat(t, mollified=True), g)
        F, vmax = _flux(u, v1, g, self.symbol)
        fh = fwd(F)
        fh *= g.dealias_mask
        return _Fields(u, v1, fh), vmax

    def rhs(self, u_hat: np.ndarray, t: float, dt: float) -> tuple[np.ndarray, _Fields]:
        f, vmax = self.fields(u_hat, t)
        cfl = dt * vmax / self.grid.spacing
        if cfl > self.cfl_max:
            suggested = 0.9 * self.cfl_max * self.grid.spacing / vmax
            raise StepRejectedError(
                f"CFL number {cfl:.3f} exceeds {self.cfl_max} at t = {t:.4g}; try dt <= {suggested:.3e}",
                suggested)
        return project_hat(_neg_div_hat(f.flux_hat, self.grid), self.grid), f

    def step(self, u_hat: np.ndarray, t: float, dt: float,
             n0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, _Fields]:
        """Advance one step; returns ``(u_new, N(u, t), fields at t)``."""
        e, hp1, hp2 = self.coefficients(dt)
        f0 = None
        if n0 is None:
            n0, f0 = self.rhs(u_hat, t, dt)
        a = e * u_hat + hp1 * n0
        n1, _ = self.rhs(a, t + dt, dt)
        return a + hp2 * (n1 - n0), n0, f0


def step_v2(stepper: PerturbationStepper, u_hat: np.ndarray, t: float, dt: float) -> np.ndarray:
    """One ETDRK2 step ``t -> t + dt`` of the correction (spectral in and out)."""
    return stepper.step(u_hat, t, dt)[0]


# ---------------------------------------------------------------------------
# energy ledger

@dataclass
class EnergyLedger:
    """Per-step energy bookkeeping.

    ``kinetic = 1/2 ||v2||_2^2``; ``dissipation`` and ``work`` are the rates
    ``||grad v2||_2^2`` and ``int v1 (x) v : grad v2`` (with mollified ``v1``
    and ``v = v2 + v1_rho`` when ``rho > 0``).
    """

    t: list[float] = field(default_factory=list)
    kinetic: list[float] = field(default_factory=list)
    dissipation: list[float] = field(default_factory=list)
    work: list[float] = field(default_factory=list)

    def append(self, t, kinetic, dissipation, work):
        self.t.append(float(t))
        self.kinetic.append(float(kinetic))
        self.dissipation.append(float(dissipation))
        self.work.append(float(work))

    def cumulative(self, key: str) -> np.ndarray:
        from scipy.integrate import cumulative_trapezoid
        return cumulative_trapezoid(np.asarray(getattr(self, key)), np.asarray(self.t), initial=0.0)

    def balance(self) -> tuple[np.ndarray, np.ndarray]:
        """``LHS(t) = kinetic + int dissipation`` and ``RHS(t) = int work``."""
        lhs = np.asarray(self.kinetic) + self.cumulative("dissipation")
        return lhs, self.cumulative("work")

    def residual(self) -> np.ndarray:
        lhs, rhs = self.balance()
        return lhs - rhs

    def rows(self):
        res = self.residual()
        for i in range(len(self.t)):
            yield (self.t[i], self.kinetic[i], self.dissipation[i], self.work[i], float(res[i]))

    def to_csv(self) -> str:
        lines = ["t,kinetic,dissipation,work,residual"]
        for row in self.rows():
            lines.append(",".join(repr(float(x)) for x in row))
        return "\n".join(lines) + "\n"


def _work_rate(u: np.ndarray, v1: np.ndarray, u_hat: np.ndarray, grid: Grid) -> float:
    """``int (v1 (x) (u + v1)) : grad u``, i.e. ``sum v1_i v_j d_j u_i``."""
    gu = inv(grad_hat(u_hat, grid), grid)   # gu[i, j] = d_j u_i
    v = u + v1
    dens = np.einsum("ixyz,jxyz,ijxyz->xyz", v1, v, gu, optimize=True)
    return float(np.sum(dens) * grid.cell_volume)


def _dissipation_rate(u_hat: np.ndarray, grid: Grid) -> float:
    k2 = grid.k_squared
    s = np.sum(np.abs(u_hat) ** 2 * k2 * grid.hermitian_weight)
    return float(s * grid.volume / grid.resolution ** 6)


def _kinetic(u_hat: np.ndarray, grid: Grid) -> float:
    return 0.5 * spectral_inner(u_hat, u_hat, grid)


# ---------------------------------------------------------------------------
# runs

@dataclass(eq=False)
class PerturbationRun:
    """Outcome of a ``v2`` integration.

    Stored slices of ``v2`` live in a band-limited spectral store; ``v1``,
    ``v2``, ``q2`` histories are materialised on first access.
    """

    grid: Grid
    v0_hat: np.ndarray
    rho: float
    dt: float
    times: np.ndarray
    stored_steps: np.ndarray
    store: BandStore | None
    energy_ledger: EnergyLedger
    mollifier_kind: str = "gaussian"
    steps_taken: int = 0

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def stored_times(self) -> np.ndarray:
        return self.times[self.stored_steps]

    @cached_property
    def _stepper(self) -> PerturbationStepper:
        return PerturbationStepper(self.grid, self.v0_hat, self.rho, self.mollifier_kind)

    def _require_store(self):
        if self.store is None:
            raise ValueError("run was made without stored slices (store_every = 0)")

    def v2_hat(self, i: int) -> np.ndarray:
        self._require_store()
        return self.store.get(i)

    def v1_hat(self, i: int, mollified: bool = False) -> np.ndarray:
        return self._stepper.v1_hat(float(self.stored_times[i]), mollified)

    def v2_slice(self, i: int) -> VectorField:
        return VectorField(self.grid, inv(self.v2_hat(i), self.grid), PHYSICAL, float(self.stored_times[i]))

    def v1_slice(self, i: int, mollified: bool = False) -> VectorField:
        return VectorField(self.grid, inv(self.v1_hat(i, mollified), self.grid), PHYSICAL,
                           float(self.stored_times[i]))

    def total_slice(self, i: int) -> VectorField:
        h = self.v2_hat(i) + self.v1_hat(i)
        return VectorField(self.grid, inv(h, self.grid), PHYSICAL, float(self.stored_times[i]))

    def q2_slice(self, i: int) -> VectorField:
        return recover_q2(self.v1_slice(i, mollified=self.rho > 0), self.v2_slice(i), self.rho,
                          self.mollifier_kind)

    def __len__(self):
        return 0 if self.store is None else len(self.stored_steps)

    def _history(self, fn) -> FieldHistory:
        self._require_store()
        return FieldHistory([fn(i) for i in range(len(self))], self.stored_times.copy())

    @cached_property
    def v1(self) -> FieldHistory:
        return self._history(self.v1_slice)

    @cached_property
    def v2(self) -> FieldHistory:
        return self._history(self.v2_slice)

    @cached_property
    def q2(self) -> FieldHistory:
        return self._history(self.q2_slice)

    def metadata(self) -> dict:
        return {"T": self.T, "dt": self.dt, "rho": self.rho, "steps": self.steps_taken,
                "stored_slices": len(self), "box_length": self.grid.box_length,
                "resolution": self.grid.resolution, "mollifier": self.mollifier_kind}


def _time_grid(T: float | None, dt: float | None, times) -> np.ndarray:
    if times is not None:
        times = np.asarray(times, dtype=float)
        if times[0] != 0 or np.any(np.diff(times) <= 0):
            raise ValueError("times must start at 0 and increase strictly")
        return times
    if T is None or dt is None:
        raise ValueError("give either explicit times or both T and dt")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not T > 0:
        raise ValueError("T must be positive")
    n = max(1, int(round(T / dt)))
    return np.linspace(0.0, T, n + 1)


def run_perturbation(v0: VectorField, T: float | None = None, dt: float | None = None, *,
                     times: Sequence[float] | None = None, rho: float = 0.0,
                     mollifier_kind: str = "gaussian", a: VectorField | None = None,
                     store_every: int = 1, ledger: bool = True, cfl_max: float = DEFAULT_CFL,
                     on_step: Callable[[int, float, np.ndarray, PerturbationStepper], None] | None = None,
                     ) -> PerturbationRun:
    """Integrate ``v2`` over ``[0, T]``.

    Parameters
    ----------
    v0 : VectorField
        Divergence-free initial data of the full problem.
    T, dt : float
        Horizon and (uniform) step; ignored when ``times`` is given.
    times : sequence, optional
        Explicit step times starting at 0 (nonuniform steps allowed).
    rho : float
        Mollification radius; 0 disables mollification.
    a : VectorField, optional
        Initial correction (default zero), projected and truncated to the
        dealiasing band.
    store_every : int
        Keep every ``store_every``-th step (the final step is always kept);
        0 keeps none, which leaves only the ledger and ``on_step`` output.
    on_step : callable, optional
        ``on_step(n, t, u_hat, stepper)`` after each accepted state, ``n = 0``
        included.
    """
    grid = v0.grid
    steps = _time_grid(T, dt, times)
    v0_hat = (v0.data if v0.is_spectral else fwd(v0.data)).copy()
    stepper = PerturbationStepper(grid, v0_hat, rho, mollifier_kind, cfl_max)
    if a is None:
        u_hat = np.zeros((3,) + grid.spectral_shape, dtype=complex)
    else:
        ah = a.data if a.is_spectral else fwd(a.data)
        u_hat = project_hat(ah, grid) * grid.dealias_mask
    if store_every < 0:
        raise ValueError("store_every must be >= 0")
    stored = [] if store_every == 0 else [n for n in range(len(steps))
                                          if n % store_every == 0 or n == len(steps) - 1]
    store = BandStore(grid, len(stored)) if stored else None
    slot = {n: i for i, n in enumerate(stored)}
    led = EnergyLedger()

    def record(n, t, u_hat, fields):
        if ledger:
            led.append(t, _kinetic(u_hat, grid), _dissipation_rate(u_hat, grid),
                       _work_rate(fields.u, fields.v1, u_hat, grid))
        if n in slot:
            store.put(slot[n], u_hat)
        if on_step is not None:
            on_step(n, t, u_hat, stepper)

    for n in range(len(steps) - 1):
        t, h = steps[n], steps[n + 1] - steps[n]
        u_new, _, f0 = stepper.step(u_hat, t, h)
        record(n, t, u_hat, f0)
        u_hat = u_new
    n_last = len(steps) - 1
    f_last, _ = stepper.fields(u_hat, steps[-1])
    record(n_last, steps[-1], u_hat, f_last)
    dts = np.diff(steps)
    return PerturbationRun(grid, v0_hat, float(rho), float(dts.max()), steps, np.array(stored, dtype=int),
                           store, led, mollifier_kind, len(steps) - 1)


def cfl_limited_geometric_times(v0: VectorField, T: float, n: int, t_first: float,
                                cfl: float = 0.4) -> np.ndarray:
    """Geometric step times from ``t_first`` to ``T``, refined where the step
    would exceed ``cfl * dx / max|v0|`` (an upper bound of the heat-flow speed)."""
    vmax = float(np.sqrt(np.max(np.sum(v0.physical().data ** 2, axis=0))))
    cap = cfl * v0.grid.spacing / max(vmax, 1e-300)
    base = np.concatenate([[0.0], np.geomspace(t_first, T, n)])
    out = [0.0]
    for t in base[1:]:
        while t - out[-1] > cap:
            out.append(out[-1] + cap)
        out.append(t)
    return np.unique(np.array(out))


# ---------------------------------------------------------------------------
# pressure and residuals

def recover_q2(v1: VectorField, v2: VectorField, rho: float = 0.0,
               mollifier_kind: str = "gaussian") -> VectorField:
    """Zero-mean pressure of the correction: ``-Laplacian q2 = div div D F``.

    For ``rho = 0`` the flux is ``(v1 + v2) (x) (v1 + v2)``, i.e. the
    right-hand side is ``div(v2.grad v2 + v1.grad v2 + v2.grad v1 + v1.grad v1)``.
    With ``rho > 0``, ``v1`` is expected already mollified.
    """
    g = v1.grid
    if v2.grid != g:
        raise ValueError("v1 and v2 live on different grids")
    u = v2.physical().data
    w = v1.physical().data
    if rho == 0:
        return VectorField(g, inv(pressure_hat(u + w, g), g), PHYSICAL, v2.time)
    sym = Mollifier(rho, mollifier_kind).symbol(g)
    F, _ = _flux(u, w, g, sym)
    fh = fwd(F) * g.dealias_mask
    kx, ky, kz = g.wavevector
    k = (kx, ky, kz)
    kk = sum(k[i] * k[j] * fh[i, j] for i in range(3) for j in range(3))
    return VectorField(g, inv(-kk * g.inverse_kd_squared, g), PHYSICAL, v2.time)


def reconstruct_total(run: PerturbationRun) -> FieldHistory:
    """``v = v1 + v2`` on the stored times."""
    return run._history(run.total_slice)


# ---------------------------------------------------------------------------
# energy audits

def global_energy_audit(run: PerturbationRun, t: float | None = None,
                        eps: float | None = None) -> EstimateReport:
    """``1/2 ||v2(t)||^2 + int ||grad v2||^2 <= int int v1 (x) v : grad v2``.

    Passes when ``LHS - RHS <= eps`` with ``eps`` defaulting to
    ``energy_tolerance(N) * max(LHS, 1)``.  A left side falling short of the
    right by more than ``eps`` is flagged (dissipation under-counted) but not
    failed.
    """
    led = run.energy_ledger
    if not led.t:
        raise ValueError("run has no energy ledger")
    tt = np.asarray(led.t)
    if t is None:
        t = float(tt[-1])
    if t > tt[-1] * (1 + 1e-12):
        raise ValueError(f"t = {t} lies beyond the run horizon {tt[-1]}")
    n = int(np.searchsorted(tt, t * (1 - 1e-12)))
    lhs_all, rhs_all = led.balance()
    lhs, rhs = float(lhs_all[n]), float(rhs_all[n])
    tol = energy_tolerance(run.grid.resolution) * max(lhs, 1.0) if eps is None else eps
    gap = lhs - rhs
    flags = []
    if -gap > tol:
        flags.append("dissipation_undercounted")
    return EstimateReport(
        name="global_energy", lhs=lhs, rhs=rhs, ratio=(lhs / rhs if rhs else None),
        passed=bool(gap <= tol),
        details={"t": float(tt[n]), "lhs_minus_rhs": gap, "abs_gap": abs(gap),
                 "relative_gap": abs(gap) / lhs if lhs else 0.0, "eps": tol, "flags": flags,
                 "work_convention": "v1 (x) v : grad v2, v = v1 + v2"})


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x ** 3 * (10 - 15 * x + 6 * x * x)


def _smoothstep_d(x):
    inside = (x > 0) & (x < 1)
    return np.where(inside, 30 * x * x * (1 - x) ** 2, 0.0)


@dataclass(frozen=True)
class TestFunction:
    """Space-time cut-off ``phi(x, t) = amplitude * psi(x) * chi(t)``.

    ``psi = (1 - |x - c|^2 / R^2)^power`` on the ball (periodic distance), or
    ``psi = 1`` everywhere when ``radius`` is None.  ``chi`` rises from 0 at
    ``t_on`` to 1 at ``t_on + ramp`` by the quintic smoothstep (``chi = 1``
    when ``ramp`` is None).
    """

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float | None = 1.0
    t_on: float = 0.0
    ramp: float | None = None
    amplitude: float = 1.0
    power: int = 8

    __test__ = False  # not a pytest class

    def check(self, grid: Grid):
        if self.radius is not None and not (0 < self.radius < grid.box_length / 2):
            raise ValueError(f"test-function support radius {self.radius} exceeds the box "
                             f"(needs 0 < R < {grid.box_length / 2})")

    def spatial(self, grid: Grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``psi``, ``grad psi`` (3, ...), ``Laplacian psi``."""
        self.check(grid)
        if self.radius is None:
            one = np.full(grid.shape, float(self.amplitude))
            return one, np.zeros((3,) + grid.shape), np.zeros(grid.shape)
        L = grid.box_length
        d = grid.coordinates(centered=True) - np.asarray(self.center, dtype=float)[:, None, None, None]
        d = (d + L / 2) % L - L / 2
        R2 = self.radius ** 2
        s = np.minimum(np.sum(d * d, axis=0) / R2, 1.0)
        m = self.power
        base = 1.0 - s
        g0 = base ** m
        g1 = -m * base ** (m - 1)
        g2 = m * (m - 1) * base ** (m - 2)
        psi = g0
        grad = g1[None] * 2 * d / R2
        lap = g2 * 4 * s / R2 + g1 * 6 / R2
        a = self.amplitude
        return a * psi, a * grad, a * lap

    def window(self, t) -> tuple[np.ndarray, np.ndarray]:
        """``chi(t)`` and ``chi'(t)``."""
        t = np.asarray(t, dtype=float)
        if self.ramp is None:
            return np.ones_like(t), np.zeros_like(t)
        x = (t - self.t_on) / self.ramp
        return _smoothstep(x), _smoothstep_d(x) / self.ramp

    @classmethod
    def random(cls, grid: Grid, rng: np.random.Generator, T: float) -> "TestFunction":
        L = grid.box_length
        center = tuple(rng.uniform(-L / 8, L / 8, 3))
        radius = float(rng.uniform(0.25, 0.4) * L)
        t_on = float(rng.uniform(0.0, 0.3) * T)
        ramp = float(rng.uniform(0.2, 0.5) * T)
        return cls(center, radius, t_on, ramp, 1.0)


def _local_terms(run: PerturbationRun, phis: Sequence[TestFunction], t: float):
    """Per-slice spatial integrals for every test function, up to time ``t``."""
    run._require_store()
    if run.rho != 0:
        raise ValueError("the local audit is defined for unmollified runs (rho = 0)")
    st = run.stored_times
    if t > st[-1] * (1 + 1e-12):
        raise ValueError(f"t = {t} lies beyond the run horizon {st[-1]}")
    n_end = int(np.searchsorted(st, t * (1 - 1e-12))) + 1
    g = run.grid
    dv = g.cell_volume
    spat = [phi.spatial(g) for phi in phis]
    # columns: psi|u|^2, psi|grad u|^2, |u|^2 lap psi, v.grad psi (|u|^2 + 2 q + 2 v1.u), psi v1(x)v:grad u
    terms = np.zeros((len(phis), n_end, 5))
    for i in range(n_end):
        uh = run.v2_hat(i)
        u = inv(uh, g)
        v1 = inv(run.v1_hat(i), g)
        v = u + v1
        q = inv(pressure_hat(v, g), g)
        gu = inv(grad_hat(uh, g), g)
        u2 = np.sum(u * u, axis=0)
        gu2 = np.sum(gu * gu, axis=(0, 1))
        flux_dens = u2 + 2 * q + 2 * np.sum(v1 * u, axis=0)
        work_dens = np.einsum("ixyz,jxyz,ijxyz->xyz", v1, v, gu, optimize=True)
        for k, (psi, gpsi, lpsi) in enumerate(spat):
            vg = np.sum(v * gpsi, axis=0)
            terms[k, i] = (np.sum(psi * u2) * dv, np.sum(psi * gu2) * dv, np.sum(u2 * lpsi) * dv,
                           np.sum(vg * flux_dens) * dv, np.sum(psi * work_dens) * dv)
    return st[:n_end], terms


def _local_report(phi: TestFunction, times: np.ndarray, terms: np.ndarray, scale: float,
                  rel_tol: float) -> EstimateReport:
    chi, dchi = phi.window(times)
    a_u2, a_gu2, a_lap, a_flux, a_work = terms.T
    # a_u2 carries psi; d_t phi = psi chi'
    lhs = chi[-1] * a_u2[-1] + 2 * time_integral(chi * a_gu2, times)
    rhs = (time_integral(dchi * a_u2 + chi * a_lap, times)
           + time_integral(chi * a_flux, times)
           + 2 * time_integral(chi * a_work, times))
    res = lhs - rhs
    tol = rel_tol * scale
    return EstimateReport(
        name="local_energy", lhs=float(lhs), rhs=float(rhs), ratio=(lhs / rhs if rhs else None),
        passed=bool(res <= tol),
        details={"t": float(times[-1]), "residual": float(res), "abs_residual": abs(float(res)),
                 "kinetic_scale": scale, "tolerance": tol,
                 "phi": {"center": list(phi.center), "radius": phi.radius, "t_on": phi.t_on,
                         "ramp": phi.ramp, "amplitude": phi.amplitude, "power": phi.power}})


def kinetic_scale(run: PerturbationRun) -> float:
    """``max_t ||v2(t)||_2^2`` from the ledger."""
    return 2.0 * max(run.energy_ledger.kinetic) if run.energy_ledger.kinetic else 0.0


def local_energy_audits(run: PerturbationRun, phis: Sequence[TestFunction], t: float | None = None,
                        rel_tol: float = 1e-4) -> list[EstimateReport]:
    """Local energy balance for several test functions in one pass."""
    t = run.T if t is None else t
    times, terms = _local_terms(run, phis, t)
    scale = kinetic_scale(run)
    return [_local_report(phi, times, terms[k], scale, rel_tol) for k, phi in enumerate(phis)]


def local_energy_audit(run: PerturbationRun, phi: TestFunction, t: float | None = None,
                       rel_tol: float = 1e-4) -> EstimateReport:
    """Signed residual ``LHS - RHS`` of the localized energy inequality.

    LHS ``= int phi |v2(t)|^2 + 2 int int phi |grad v2|^2``; RHS collects
    ``|v2|^2 (d_t phi + Laplacian phi)``, ``v . grad phi (|v2|^2 + 2 q2 + 2 v1 . v2)``
    and ``2 phi v1 (x) v : grad v2``.  Passes when the residual is at most
    ``rel_tol`` times the kinetic scale ``max_t ||v2||_2^2``.
    """
    return local_energy_audits(run, [phi], t, rel_tol)[0]


# ---------------------------------------------------------------------------
# energy bound and force split

def energy_norm_curve(run: PerturbationRun) -> tuple[np.ndarray, np.ndarray]:
    """``|v2|^2_{2,Q_t} = sup_{s<=t} ||v2(s)||^2 + int_0^t ||grad v2||^2`` on ledger times."""
    led = run.energy_ledger
    sup = np.maximum.accumulate(2.0 * np.asarray(led.kinetic))
    return np.asarray(led.t), sup + led.cumulative("dissipation")


def energy_bound_sweep(v0_family: Sequence[VectorField], T_list: Sequence[float], n_steps: int = 256,
                       slack: float = 0.1, rho: float = 0.0) -> EstimateReport:
    """Small-``T`` exponent of ``|v2|^2_{2,Q_T}`` against the reference ``1/2``.

    One run per datum to ``max(T_list)``; every ``T`` in the list is a step
    time of that run.  Passes when every fitted exponent is at least
    ``0.5 - slack`` and every prefactor ``|v2|^2 / sqrt(T)`` is finite.
    """
    T_list = np.sort(np.asarray(T_list, dtype=float))
    if len(T_list) < 3:
        raise ValueError("energy bound sweep needs at least three horizons")
    if not v0_family:
        raise ValueError("empty initial-data family")
    Tmax = float(T_list[-1])
    times = np.unique(np.concatenate([np.linspace(0.0, Tmax, n_steps + 1), T_list]))
    slopes, prefactors, curves = [], [], []
    for v0 in v0_family:
        run = run_perturbation(v0, times=times, rho=rho, store_every=0)
        tt, e = energy_norm_curve(run)
        vals = np.interp(T_list, tt, e)
        slope, _ = fit_power_law(T_list, vals)
        slopes.append(slope)
        prefactors.append((vals / np.sqrt(T_list)).tolist())
        curves.append(vals.tolist())
    pf = np.array(prefactors)
    ok = bool(min(slopes) >= 0.5 - slack and np.all(np.isfinite(pf)))
    return EstimateReport(
        name="energy_bound", lhs=float(np.max(pf)), rhs=None, ratio=None,
        fitted_exponent=float(min(slopes)), reference_exponent=0.5, passed=ok,
        details={"T_list": T_list.tolist(), "slopes": slopes, "prefactors": prefactors,
                 "energy_norms": curves, "slack": slack})


FORCE_NORMS = {
    # force: (s, l, reference small-T exponent)
    "f1": (9 / 8, 3 / 2, 1 / 2),
    "f2": (4 / 3, 3 / 2, 7 / 24),
    "f3": (6 / 5, 3 / 2, 5 / 12),
    "f4": (3 / 2, 3 / 2, 1 / 6),
}


def _force_fields(run: PerturbationRun, i: int) -> tuple[np.ndarray, ...]:
    """Physical ``f1 .. f4`` and the total forcing ``-div D F`` at stored slice ``i``."""
    g = run.grid
    uh = run.v2_hat(i)
    u = inv(uh, g)
    sym = run._stepper.symbol
    v1 = inv(run.v1_hat(i, mollified=True), g)
    u_rho = u if sym is None else inv(uh * sym, g)

    def neg_div(a, b):
        # -div D(a (x) b) = -(b . grad) a for divergence-free b
        F = a[:, None] * b[None, :]
        return inv(_neg_div_hat(fwd(F) * g.dealias_mask, g), g)

    f1 = neg_div(u, u_rho)
    f2 = neg_div(v1, u)
    f3 = neg_div(u, v1)
    f4 = neg_div(v1, v1)
    F, _ = _flux(u, v1, g, sym)
    total = inv(_neg_div_hat(fwd(F) * g.dealias_mask, g), g)
    return f1, f2, f3, f4, total


@dataclass(eq=False)
class ForceSplit:
    """Forces ``f1 .. f4`` of a run and their mixed-norm reports.

    ``slice_norms[name]`` holds the per-slice spatial norms at the exponent of
    :data:`FORCE_NORMS`; the histories are built on first access.
    """

    run: PerturbationRun
    slice_norms: dict[str, np.ndarray]
    split_error: float
    mixed_norm_reports: list[EstimateReport]

    def _hist(self, k: int) -> FieldHistory:
        g = self.run.grid
        st = self.run.stored_times
        return FieldHistory([VectorField(g, _force_fields(self.run, i)[k], PHYSICAL, float(st[i]))
                             for i in range(len(self.run))], st.copy())

    @cached_property
    def f1(self) -> FieldHistory:
        return self._hist(0)

    @cached_property
    def f2(self) -> FieldHistory:
        return self._hist(1)

    @cached_property
    def f3(self) -> FieldHistory:
        return self._hist(2)

    @cached_property
    def f4(self) -> FieldHistory:
        return self._hist(3)


def force_split(run: PerturbationRun, T_list: Sequence[float] | None = None,
                slack: float = 0.1) -> ForceSplit:
    """Mixed norms of the four forces and their small-``T`` exponents.

    For each horizon ``T`` in ``T_list`` (default: 8 geometric values over
    ``[T/30, T]``, starting no earlier than the fourth stored step) the norm over ``Q_T`` is taken
    from the stored slices with ``t <= T``; the log-log slope is compared
    one-sided with the reference exponent (pass when ``slope >= ref - slack``).
    """
    run._require_store()
    st = run.stored_times
    g = run.grid
    names = list(FORCE_NORMS)
    norms = {k: np.zeros(len(st)) for k in names}
    split_err = 0.0
    for i in range(len(st)):
        f = _force_fields(run, i)
        for k, name in enumerate(names):
            norms[name][i] = lp_norm_data(f[k], g, FORCE_NORMS[name][0])
        scale = max(np.max(np.abs(f[4])), 1e-300)
        split_err = max(split_err, float(np.max(np.abs(f[0] + f[1] + f[2] + f[3] - f[4])) / scale))
    if len(st) < 3:
        raise ValueError("force split needs at least three stored slices")
    if T_list is None:
        T_list = np.geomspace(max(run.T / 30, st[min(4, len(st) - 1)]), run.T, 8)
    T_list = np.asarray(T_list, dtype=float)
    reports = []
    for name in names:
        s, l, ref = FORCE_NORMS[name]
        vals = []
        for T in T_list:
            n = int(np.searchsorted(st, T * (1 + 1e-12), side="right"))
            vals.append(mixed_from_slice_norms(norms[name][:n], st[:n], l))
        vals = np.array(vals)
        if np.all(vals > 0):
            slope, _ = fit_power_law(T_list, vals)
            passed = bool(slope >= ref - slack)
        else:
            slope, passed = float("nan"), bool(np.all(vals == 0))
        reports.append(EstimateReport(
            name=f"force_{name}", lhs=float(vals[-1]), rhs=None, ratio=None,
            fitted_exponent=slope, reference_exponent=ref, passed=passed,
            details={"s": s, "l": l, "T_list": T_list.tolist(), "norms": vals.tolist(), "slack": slack}))
    return ForceSplit(run, norms, split_err, reports)


# ---------------------------------------------------------------------------
# weak form and rho-consistency

def weak_form_residual(run: PerturbationRun, n_tests: int = 10, seed: int = 0, kmax: int = 4) -> EstimateReport:
    """Weak form of the correction equation against ``w(x, t) = a(t) W(x)``.

    ``W`` is a random smooth solenoidal field and ``a(t) = sin^2(pi t / T)``,
    so ``w`` vanishes at both ends and the pressure drops out:

        int int [ -v2 . d_t w - v2 . Laplacian w - (v (x) v) : grad w ] = 0.

    The relative residual divides by the sum of the absolute term sizes.
    """
    run._require_store()
    if run.rho != 0:
        raise ValueError("weak-form residual is defined for unmollified runs")
    g = run.grid
    rng = np.random.default_rng(seed)
    st = run.stored_times
    T = st[-1]
    a = np.sin(np.pi * st / T) ** 2
    da = np.pi / T * np.sin(2 * np.pi * st / T)
    Ws = [random_smooth_field(g, rng, kmax=kmax, solenoidal=True) for _ in range(n_tests)]
    W_hat = [fwd(W.data) for W in Ws]
    lapW = [inv(-g.k_squared * wh, g) for wh in W_hat]
    gradW = [inv(grad_hat(wh, g), g) for wh in W_hat]
    A = np.zeros((n_tests, len(st)))
    B = np.zeros((n_tests, len(st)))
    C = np.zeros((n_tests, len(st)))
    dv = g.cell_volume
    for i in range(len(st)):
        u = inv(run.v2_hat(i), g)
        v = u + inv(run.v1_hat(i), g)
        vv = v[:, None] * v[None, :]
        for k in range(n_tests):
            A[k, i] = np.sum(u * Ws[k].data) * dv
            B[k, i] = np.sum(u * lapW[k]) * dv
            C[k, i] = np.sum(vv * gradW[k]) * dv
    rel = []
    for k in range(n_tests):
        t1 = -time_integral(da * A[k], st)
        t2 = -time_integral(a * B[k], st)
        t3 = -time_integral(a * C[k], st)
        rel.append(abs(t1 + t2 + t3) / (abs(t1) + abs(t2) + abs(t3)))
    worst = float(max(rel))
    return EstimateReport(name="weak_form", lhs=worst, rhs=1e-4, ratio=worst / 1e-4,
                          passed=bool(worst <= 1e-4), details={"relative_residuals": rel})


def rho_sweep(v0: VectorField, T: float, dt: float, rhos=(0.2, 0.1, 0.05),
              mollifier_kind: str = "gaussian") -> ConvergenceTrace:
    """Distance of mollified runs to the unmollified one as ``rho -> 0``.

    Metric: ``||u_rho - u_0||_{L3(K x [0,T])}`` on the central half-box ``K``;
    the extra column holds the global ``L2`` distance at ``T``.
    """
    from .lab import central_subbox_mask
    ref = run_perturbation(v0, T, dt, rho=0.0, ledger=False)
    g = v0.grid
    mask = central_subbox_mask(g)
    dists, l2 = [], []
    for rho in rhos:
        run = run_perturbation(v0, T, dt, rho=rho, mollifier_kind=mollifier_kind, ledger=False)
        norms = []
        for i in range(len(ref)):
            d = inv(run.v2_hat(i) - ref.v2_hat(i), g)
            norms.append(lp_norm_data(d * mask, g, 3))
        dists.append(mixed_from_slice_norms(np.array(norms), ref.stored_times, 3))
        l2.append(lp_norm_data(inv(run.v2_hat(len(ref) - 1) - ref.v2_hat(len(ref) - 1), g), g, 2))
    rate = observed_order(dists, list(rhos)) if len(rhos) >= 2 and min(dists) > 0 else None
    mono = all(l2[i + 1] < l2[i] for i in range(len(l2) - 1))
    return ConvergenceTrace("rho", list(map(float, rhos)), "L3_local_distance", dists, rate,
                            {"L2_distance_T": l2}, passed=bool(rate is not None and rate >= 1 and mono))
