"""Cross-cutting experiments: parabolic scaling, embedding chain, agreement
of the two solvers, weak convergence of data and the modulus of continuity
at ``t = 0``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .mild import (
    HorizonNotFoundError,
    IterationBlowUpError,
    MildSolution,
    horizon_threshold,
    momentum_residual,
    picard_solve,
    recover_pressure,
    select_horizon,
)
from .perturbation import StepRejectedError, run_perturbation
from .presets import preset_initial_data
from .reports import ConvergenceTrace, EstimateReport, observed_order
from .spectral import (
    FieldHistory,
    Grid,
    VectorField,
    inv,
    lp_norm_data,
    mixed_from_slice_norms,
)

log = logging.getLogger(__name__)


class ExperimentIncompleteError(RuntimeError):
    """One of the solvers of an experiment failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"experiment stopped at stage {stage!r}: {cause}")
        self.stage = stage
        self.cause = cause


class MisconfiguredFamilyError(ValueError):
    """The data family converges strongly, so it cannot probe weak convergence."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Inputs shared by the lab experiments and the command line."""

    preset: str = "bump"
    resolution: int = 32
    box_length: float = 2 * math.pi
    T: float | None = None
    dt: float | None = None
    n_steps: int = 256
    rho: float = 0.0
    seed: int = 0
    target_L3_norm: float = 1.0
    tolerances: dict = field(default_factory=dict)

    @property
    def grid(self) -> Grid:
        return Grid(self.box_length, self.resolution)

    def initial_data(self) -> VectorField:
        return preset_initial_data(self.preset, self.grid, self.target_L3_norm, seed=self.seed)

    def tol(self, key: str, default: float) -> float:
        return float(self.tolerances.get(key, default))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def central_subbox_mask(grid: Grid) -> np.ndarray:
    """Indicator of the compact set ``K``: the centred sub-box of half the edge."""
    x = (np.arange(grid.resolution) * grid.spacing) - grid.box_length / 2
    m = np.abs(x) < grid.box_length / 4
    return m[:, None, None] & m[None, :, None] & m[None, None, :]


# ---------------------------------------------------------------------------
# scaling

def _check_lambda(lam: float):
    if not lam > 0:
        raise ValueError("scale factor must be positive")
    k = math.log2(lam)
    if abs(k - round(k)) > 1e-12:
        raise ValueError(f"scale factor {lam} is not a power of two")


def rescale_history(h: FieldHistory, lam: float, power: int = 1) -> FieldHistory:
    """``lam^power u(lam x, lam^2 t)`` realised on the box shrunk by ``lam``.

    Sample values are multiplied by ``lam^power``; the grid and time stamps
    shrink, so every sample lands on a grid point exactly.
    """
    _check_lambda(lam)
    g = h.grid.rescaled(lam)
    f = lam ** power
    t = h.times / lam ** 2
    return FieldHistory([VectorField(g, s.physical().data * f, "physical", float(t[i]))
                         for i, s in enumerate(h.slices)], t)


def critical_norms(v: FieldHistory) -> tuple[float, float]:
    """``||v(., 0)||_3`` and ``||v||_{5,Q_T}``."""
    g = v.grid
    n5 = np.array([lp_norm_data(s.physical().data, g, 5) for s in v.slices])
    return lp_norm_data(v[0].physical().data, g, 3), mixed_from_slice_norms(n5, v.times, 5)


def scaling_check(v: FieldHistory, q: FieldHistory | None, lam: float, tol: float = 1e-8) -> EstimateReport:
    """Critical-norm invariance and residual covariance under ``v -> v_lam``.

    Passes when both critical norms agree to ``tol`` (relative) and the
    momentum residual of ``(v_lam, q_lam)`` stays below ``lam^3`` times that
    of ``(v, q)`` plus ``tol``.  For the L2 residual the exact factor is
    ``lam^(3/2)``, recorded in the details.
    """
    _check_lambda(lam)
    vl = rescale_history(v, lam, 1)
    ql = None if q is None else rescale_history(q, lam, 2)
    a3, a5 = critical_norms(v)
    b3, b5 = critical_norms(vl)
    rel3 = abs(b3 - a3) / max(a3, 1e-300) if a3 else abs(b3)
    rel5 = abs(b5 - a5) / max(a5, 1e-300) if a5 else abs(b5)
    details = {"lambda": lam, "L3_t0": [a3, b3], "L5_QT": [a5, b5],
               "rel_L3": rel3, "rel_L5": rel5}
    res_ok = True
    if len(v) >= 3:
        r = momentum_residual(v, q)
        rl = momentum_residual(vl, ql)
        res_ok = bool(np.all(rl <= lam ** 3 * r + tol))
        ratio = float(np.max(rl) / np.max(r)) if np.max(r) > 0 else float("nan")
        details.update(residual_max=float(np.max(r)), rescaled_residual_max=float(np.max(rl)),
                       residual_ratio=ratio, expected_L2_ratio=lam ** 1.5)
    passed = bool(rel3 <= tol and rel5 <= tol and res_ok)
    return EstimateReport(name="scaling", lhs=max(rel3, rel5), rhs=tol,
                          ratio=max(rel3, rel5) / tol, passed=passed, details=details)


def solver_scaling_check(v0: VectorField, T: float, lam: float = 2.0, n_steps: int = 32,
                         tol: float = 1e-8) -> EstimateReport:
    """Solve from ``v0`` and from ``(v0)_lam``; compare the critical norms of the outputs.

    Besides :func:`scaling_check` on the first solution, the second solve
    (on the shrunk box, horizon ``T / lam^2``) must reproduce both critical
    norms to ``tol``.
    """
    _check_lambda(lam)
    sol = picard_solve(v0, T, n_steps=n_steps)
    g2 = v0.grid.rescaled(lam)
    v0l = VectorField(g2, v0.physical().data * lam, "physical", 0.0)
    sol2 = picard_solve(v0l, T / lam ** 2, n_steps=n_steps)
    v = sol.velocity
    rep = scaling_check(v, recover_pressure(v), lam, tol)
    a3, a5 = critical_norms(v)
    c3, c5 = critical_norms(sol2.velocity)
    rel = max(abs(c3 - a3) / a3, abs(c5 - a5) / a5) if a3 else max(c3, c5)
    rep.details["solver_rel"] = rel
    rep.details["solver_L5_QT"] = [a5, c5]
    rep.lhs = max(rep.lhs, rel)
    rep.ratio = rep.lhs / tol
    rep.passed = bool(rep.passed and rel <= tol)
    rep.name = "solver_scaling"
    return rep


# ---------------------------------------------------------------------------
# embedding chain

EMBED_THETA = 3 / 8  # 1/2 = theta 2/3 + (1 - theta) 2/5 and 1/4 = (1 - theta) 2/5


def embedding_chain_check(v1: FieldHistory) -> EstimateReport:
    """Mixed norms of ``F = v1 (x) v1`` and the interpolation bound for the ``(2, 4)`` norm.

    ``||F||_{2,4} <= ||F||_{3/2,inf}^theta ||F||_{5/2,5/2}^(1-theta)`` with
    ``theta = 3/8`` (Hoelder in space, then in time).  Both steps hold
    exactly for positive-weight quadratures, so the discrete check is sharp.
    """
    g = v1.grid
    n32, n52, n2 = [], [], []
    for s in v1.slices:
        u = s.physical().data
        F = u[:, None] * u[None, :]
        n32.append(lp_norm_data(F, g, 1.5))
        n52.append(lp_norm_data(F, g, 2.5))
        n2.append(lp_norm_data(F, g, 2))
    t = v1.times
    a = mixed_from_slice_norms(np.array(n32), t, math.inf)
    b = mixed_from_slice_norms(np.array(n52), t, 2.5)
    c = mixed_from_slice_norms(np.array(n2), t, 4)
    d = mixed_from_slice_norms(np.array(n2), t, 2)
    bound = a ** EMBED_THETA * b ** (1 - EMBED_THETA)
    finite = all(np.isfinite([a, b, c, d]))
    passed = bool(finite and c <= bound * (1 + 1e-12))
    return EstimateReport(
        name="embedding_chain", lhs=c, rhs=bound, ratio=(c / bound if bound else None), passed=passed,
        details={"norm_3/2_inf": a, "norm_5/2_5/2": b, "norm_2_4": c, "norm_2_2": d, "theta": EMBED_THETA})


# ---------------------------------------------------------------------------
# agreement of the mild and perturbation solvers

def _diff_norms(sol: MildSolution, run) -> tuple[float, float]:
    """``(5,5)`` and ``(3,inf)`` norms of ``v_mild - v_pert`` on the common grid."""
    g = sol.grid
    n5, n3 = [], []
    for i in range(len(sol.times)):
        d = inv(sol.w_store.get(i) - run.v2_hat(i), g)
        n5.append(lp_norm_data(d, g, 5))
        n3.append(lp_norm_data(d, g, 3))
    return mixed_from_slice_norms(np.array(n5), sol.times, 5), float(max(n3))


def parabolic_steps(resolution: int) -> int:
    """Step count ``N^2 / 32`` (at least 16), keeping ``dt k_max^2`` fixed under refinement.

    Both solvers share the spatial truncation, so their disagreement is pure
    time discretisation whose constant grows with the resolved band; a time
    step tied to ``1/N`` alone does not shrink it.
    """
    return max(16, resolution * resolution // 32)


def uniqueness_experiment(v0: VectorField, T0: float | None = None, n_steps: int | None = None,
                          tol: float = 1e-3, picard_tol: float = 1e-13) -> EstimateReport:
    """Mild solution against ``v1 + v2`` from the same data on ``[0, T0]``.

    ``T0`` defaults to the dyadic horizon for the calibrated threshold and
    the step count to :func:`parabolic_steps`.  The perturbation run steps on
    exactly the mild time grid, so both histories share slices.  The Picard
    tolerance sits well below the expected disagreement so that the
    comparison measures the time integrators, not the iteration cut-off.
    """
    g = v0.grid
    n_steps = parabolic_steps(g.resolution) if n_steps is None else n_steps
    try:
        if T0 is None:
            T0 = select_horizon(v0, horizon_threshold())
    except HorizonNotFoundError as e:
        raise ExperimentIncompleteError("select_horizon", e) from e
    try:
        sol = picard_solve(v0, T0, tol=picard_tol, n_steps=n_steps)
    except IterationBlowUpError as e:
        raise ExperimentIncompleteError("mild", e) from e
    try:
        run = run_perturbation(v0, times=sol.times, ledger=False)
    except StepRejectedError as e:
        raise ExperimentIncompleteError("perturbation", e) from e
    d5, d3 = _diff_norms(sol, run)
    return EstimateReport(
        name="uniqueness", lhs=d5, rhs=tol, ratio=d5 / tol, passed=bool(d5 <= tol and d3 <= tol),
        details={"T0": T0, "n_steps": n_steps, "resolution": g.resolution,
                 "diff_5_5": d5, "diff_3_inf": d3, "mild_iterations": sol.iterations,
                 "mild_converged": sol.converged, "picard_tol": picard_tol})


def uniqueness_refinement(preset: str = "bump", resolutions: Sequence[int] = (32, 48, 64),
                          box_length: float = 2 * math.pi, T0: float | None = None,
                          tol: float = 1e-3) -> ConvergenceTrace:
    """Disagreement of the two solvers under joint space-time refinement.

    ``T0`` is selected once, on the coarsest grid, and shared; steps follow
    :func:`parabolic_steps`.  The observed order is measured against the
    time step over the last two resolutions.
    """
    reports = []
    for n in resolutions:
        g = Grid(box_length, n)
        v0 = preset_initial_data(preset, g)
        if T0 is None:
            T0 = select_horizon(v0, horizon_threshold())
        reports.append(uniqueness_experiment(v0, T0, parabolic_steps(n), tol))
    d5 = [r.details["diff_5_5"] for r in reports]
    d3 = [r.details["diff_3_inf"] for r in reports]
    dts = [T0 / parabolic_steps(n) for n in resolutions]
    rate = observed_order(d5, dts) if min(d5) > 0 else None
    mono = all(d5[i + 1] < d5[i] for i in range(len(d5) - 1))
    passed = bool(all(r.passed for r in reports) and mono and rate is not None and rate >= 1)
    return ConvergenceTrace("resolution", [float(n) for n in resolutions], "diff_5_5", d5, rate,
                            {"diff_3_inf": d3, "dt": dts, "T0": [T0] * len(d5)}, passed)


# ---------------------------------------------------------------------------
# weak convergence of data

def oscillation_family(grid: Grid, ms: Sequence[int] = (8, 16, 32), amplitude: float = 1.0,
                       base: str = "bump") -> tuple[VectorField, list[VectorField]]:
    """``v0 + osc_m`` with ``||osc_m||_3 = amplitude`` and wavelength ``L / m``."""
    v0 = preset_initial_data(base, grid)
    fam = [v0 + preset_initial_data(f"oscillatory({m})", grid, amplitude) for m in ms]
    return v0, fam


def translation_family(grid: Grid, ms: Sequence[int] = (1, 2, 3), amplitude: float = 1.0,
                       base: str = "bump") -> tuple[VectorField, list[VectorField]]:
    """``v0 + (bump shifted by L/4 + m L/16)``, a bump leaving the window ``K``."""
    v0 = preset_initial_data(base, grid)
    fam = [v0 + preset_initial_data(f"translated({m})", grid, amplitude) for m in ms]
    return v0, fam


def _total_hats(v0: VectorField, times: np.ndarray):
    run = run_perturbation(v0, times=times, ledger=False)
    return run, [run.v2_hat(i) + run.v1_hat(i) for i in range(len(run))]


def weak_convergence_harness(family: Iterable[VectorField], v0_limit: VectorField, T: float,
                             n_steps: int = 16, parameters: Sequence[float] | None = None,
                             parameter: str = "m") -> ConvergenceTrace:
    """Local ``L3(K x [0, T])`` and global ``L2(Q_T)`` distances to the limit solution.

    Passes when the local distance decreases strictly along the family
    while the data distance ``||v0^(m) - v0||_3`` stays at least half its
    first value.  A family whose data distance collapses raises
    :class:`MisconfiguredFamilyError`.
    """
    family = list(family)
    if not family:
        raise ValueError("empty family")
    params = list(range(1, len(family) + 1)) if parameters is None else list(parameters)
    g = v0_limit.grid
    base = v0_limit.physical().data
    data_dist = [lp_norm_data(f.physical().data - base, g, 3) for f in family]
    if data_dist[0] > 0 and data_dist[-1] < 0.5 * data_dist[0]:
        raise MisconfiguredFamilyError(
            f"data distance falls from {data_dist[0]:.3g} to {data_dist[-1]:.3g}: the family converges strongly")
    times = np.linspace(0.0, T, n_steps + 1)
    _, ref = _total_hats(v0_limit, times)
    mask = central_subbox_mask(g)
    local, glob = [], []
    for f in family:
        _, hats = _total_hats(f, times)
        n3, n2 = [], []
        for i, h in enumerate(hats):
            d = inv(h - ref[i], g)
            n3.append(lp_norm_data(d * mask, g, 3))
            n2.append(lp_norm_data(d, g, 2))
        local.append(mixed_from_slice_norms(np.array(n3), times, 3))
        glob.append(mixed_from_slice_norms(np.array(n2), times, 2))
    if max(data_dist) == 0:
        passed = bool(max(local) == 0)  # constant family
    else:
        dec = all(local[i + 1] < local[i] for i in range(len(local) - 1))
        passed = bool(dec and data_dist[-1] >= 0.5 * data_dist[0])
    rate = observed_order(local, params) if len(local) >= 2 and min(local) > 0 else None
    return ConvergenceTrace(parameter, [float(p) for p in params], "L3_local_distance", local, rate,
                            {"L2_global_distance": glob, "data_L3_distance": data_dist}, passed)


# ---------------------------------------------------------------------------
# continuity at t = 0

def modulus_of_continuity(v0: VectorField, t_list: Sequence[float], n_steps: int = 16,
                          floor: float = 1e-12) -> ConvergenceTrace:
    """``||v(., t) - v0||_3`` for the mild solution as ``t`` decreases.

    Every ``t`` gets its own mild solve on ``[0, t]``.  The extra column
    holds ``sup_{s<=t} ||v(s) - v0||_3``, the quantity that enters the
    smallness condition near ``t = 0`` (a diagnostic, no threshold).
    """
    t_list = [float(t) for t in t_list]
    if any(t_list[i + 1] >= t_list[i] for i in range(len(t_list) - 1)):
        raise ValueError("t_list must decrease toward 0")
    g = v0.grid
    base = v0.physical().data
    scale = max(lp_norm_data(base, g, 3), 1.0)
    vals, sups = [], []
    for t in t_list:
        if not base.any():
            vals.append(0.0)
            sups.append(0.0)
            continue
        sol = picard_solve(v0, t, n_steps=n_steps)
        d = [lp_norm_data(inv(sol.velocity_hat(n), g) - base, g, 3) for n in range(len(sol.times))]
        vals.append(d[-1])
        sups.append(max(d))
    ok = all(vals[i + 1] <= vals[i] or vals[i + 1] <= floor * scale for i in range(len(vals) - 1))
    return ConvergenceTrace("t", t_list, "L3_distance_to_data", vals, None, {"sup_distance": sups}, ok)


# ---------------------------------------------------------------------------
# dispatcher for the command line

EXPERIMENTS = ("scaling", "embedding", "uniqueness", "weak_oscillation", "weak_translation", "modulus")


def run_experiment(name: str, cfg: ExperimentConfig) -> tuple[list[EstimateReport], list[ConvergenceTrace]]:
    """Run a named experiment from a config; returns reports and traces."""
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    g = cfg.grid
    if name == "weak_oscillation":
        v0, fam = oscillation_family(g, (8, 16, 32))
        T = cfg.T or 0.01
        return [], [weak_convergence_harness(fam, v0, T, cfg.n_steps, (8, 16, 32))]
    if name == "weak_translation":
        v0, fam = translation_family(g, (1, 2, 3))
        T = cfg.T or 0.01
        return [], [weak_convergence_harness(fam, v0, T, cfg.n_steps, (1, 2, 3))]
    v0 = cfg.initial_data()
    if name == "modulus":
        t_max = cfg.T or 1e-3
        return [], [modulus_of_continuity(v0, list(np.geomspace(t_max, t_max * 1e-3, 4)))]
    T = cfg.T if cfg.T is not None else select_horizon(v0, horizon_threshold())
    if name == "scaling":
        return [solver_scaling_check(v0, T, 2.0, min(cfg.n_steps, 64), cfg.tol("scaling", 1e-8))], []
    if name == "embedding":
        from .stokes_heat import HeatPropagator
        times = np.linspace(0.0, T, cfg.n_steps + 1)
        return [embedding_chain_check(HeatPropagator(g).history(v0, times))], []
    steps = None if cfg.dt is None else max(1, int(round(T / cfg.dt)))
    rep = uniqueness_experiment(v0, T, steps, cfg.tol("uniqueness", 1e-3))
    return [rep], []
