"""Acceptance suite: one PASS/FAIL line per criterion, thresholds pinned below.

The lines are echoed in the pytest terminal summary.  Runs are sized for a
single core; the whole module takes roughly ten minutes.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from critl3.cli import main as cli_main
from critl3.lab import oscillation_family, solver_scaling_check, uniqueness_refinement, weak_convergence_harness
from critl3.mild import horizon_threshold, picard_solve, select_horizon
from critl3.oseen import kernel_bound_samples, verify_kernel_bound
from critl3.perturbation import (
    TestFunction,
    energy_bound_sweep,
    force_split,
    global_energy_audit,
    kinetic_scale,
    local_energy_audits,
    run_perturbation,
)
from critl3.presets import bump_family, preset_initial_data
from critl3.spectral import Grid
from critl3.stokes_heat import first_stokes_family_check, verify_gradient_decay

pytestmark = pytest.mark.slow

TWO_PI = 2 * math.pi

# pinned thresholds
GRAD_S3_MAX_SLOPE = -0.43
GRAD_S4_MAX_SLOPE = -0.55
GRAD_RUNTIME_S = 30.0
FAMILY_SPREAD = 0.05
SCALE_DRIFT = 1e-8
CONTRACTION = 0.5
PICARD_TOL = 1e-8
PICARD_MAX_ITERS = 30
PICARD_RUNTIME_S = 120.0
FIXED_POINT_RESIDUAL = 1e-7
AGREEMENT_TOL = 1e-3
AGREEMENT_ORDER = 1.0
GLOBAL_REL_GAP = 1e-5
LOCAL_REL = 1e-4
ENERGY_EXPONENT = 0.4
FORCE_SLACK = 0.1
FORCE_REFS = {"f2": 7 / 24, "f3": 5 / 12, "f4": 1 / 6}
KERNEL_GROWTH = 1.1
SCALING_TOL = 1e-8
DATA_DISTANCE_KEEP = 0.5

# Energy criteria run on the box of edge 8 pi: the parabolic rescaling of
# T in [0.01, 0.3] to the 2 pi box is [6e-4, 0.019], which is small against
# the bump's diffusive time.
ENERGY_BOX = 8 * math.pi
ENERGY_T = 0.3


@pytest.fixture(scope="module")
def energy_run():
    """Resolved perturbation run shared by the energy and force criteria."""
    g = Grid(ENERGY_BOX, 64)
    v0 = preset_initial_data("bump", g)
    return run_perturbation(v0, ENERGY_T, ENERGY_T / 1024, store_every=4)


@pytest.fixture(scope="module")
def mild48():
    g = Grid(TWO_PI, 48)
    v0 = preset_initial_data("bump", g)
    start = time.perf_counter()
    T = select_horizon(v0, horizon_threshold())
    sol = picard_solve(v0, T, tol=PICARD_TOL, k_max=PICARD_MAX_ITERS)
    return sol, time.perf_counter() - start


@pytest.fixture(scope="module")
def bump64():
    return preset_initial_data("bump", Grid(TWO_PI, 64))


def test_01_gradient_decay_s3(record_criterion, bump64):
    start = time.perf_counter()
    rep = verify_gradient_decay(bump64, 3, np.geomspace(0.02, 1.0, 12))
    wall = time.perf_counter() - start
    ok = rep.fitted_exponent <= GRAD_S3_MAX_SLOPE and wall <= GRAD_RUNTIME_S
    assert record_criterion(1, "gradient decay s=3",
                            ok, f"slope {rep.fitted_exponent:.4f} <= {GRAD_S3_MAX_SLOPE}, {wall:.1f} s")


def test_02_gradient_decay_s4(record_criterion, bump64):
    start = time.perf_counter()
    rep = verify_gradient_decay(bump64, 4, np.geomspace(0.02, 1.0, 12))
    wall = time.perf_counter() - start
    ok = rep.fitted_exponent <= GRAD_S4_MAX_SLOPE and wall <= GRAD_RUNTIME_S
    assert record_criterion(2, "gradient decay s=4",
                            ok, f"slope {rep.fitted_exponent:.4f} <= {GRAD_S4_MAX_SLOPE}, {wall:.1f} s")


def test_03_linear_estimate_ratio(record_criterion):
    fam = bump_family(Grid(TWO_PI, 32), 10, seed=0)
    rep = first_stokes_family_check(fam, 1.0, spread_tol=FAMILY_SPREAD, scale=2.0, scale_tol=SCALE_DRIFT)
    d = rep.details
    ok = d["spread"] <= FAMILY_SPREAD and d["scale_drift"] <= SCALE_DRIFT
    assert record_criterion(3, "linear estimate ratio", ok,
                            f"spread {d['spread']:.4f} <= {FAMILY_SPREAD}, scale drift {d['scale_drift']:.1e}")


def test_04_picard_contraction(record_criterion, mild48):
    sol, wall = mild48
    worst = max(sol.ratios) if sol.ratios else 0.0
    ok = sol.converged and sol.iterations <= PICARD_MAX_ITERS and worst <= CONTRACTION and wall <= PICARD_RUNTIME_S
    assert record_criterion(4, "Picard contraction", ok,
                            f"T={sol.T:g}, max ratio {worst:.4f}, {sol.iterations} iterations, {wall:.1f} s")


def test_05_fixed_point_residual(record_criterion, mild48):
    sol, _ = mild48
    ok = sol.final_residual <= FIXED_POINT_RESIDUAL
    assert record_criterion(5, "fixed-point residual", ok,
                            f"{sol.final_residual:.2e} <= {FIXED_POINT_RESIDUAL}")


def test_06_solver_agreement(record_criterion):
    tr = uniqueness_refinement("bump", (32, 48, 64), tol=AGREEMENT_TOL)
    d48 = tr.metrics[1]
    ok = d48 <= AGREEMENT_TOL and tr.metrics[2] < d48 and tr.fitted_rate is not None \
        and tr.fitted_rate >= AGREEMENT_ORDER
    diffs = ", ".join(f"{m:.2e}" for m in tr.metrics)
    assert record_criterion(6, "solver agreement", ok,
                            f"(5,5) diff at N=32/48/64: {diffs}; order in dt {tr.fitted_rate:.2f}")


def test_07_global_energy(record_criterion, energy_run):
    d = global_energy_audit(energy_run).details
    lhs = global_energy_audit(energy_run).lhs
    gap = d["lhs_minus_rhs"]
    ok = gap >= 0 and abs(gap) <= GLOBAL_REL_GAP * lhs
    assert record_criterion(7, "global energy audit", ok,
                            f"LHS-RHS = {gap:.2e}, relative {abs(gap) / lhs:.2e} <= {GLOBAL_REL_GAP}")


def test_08_local_energy(record_criterion, energy_run):
    rng = np.random.default_rng(2024)
    phis = [TestFunction.random(energy_run.grid, rng, energy_run.T) for _ in range(5)]
    reps = local_energy_audits(energy_run, phis, rel_tol=LOCAL_REL)
    scale = kinetic_scale(energy_run)
    rel = [abs(r.details["residual"]) / scale for r in reps]
    ok = max(rel) <= LOCAL_REL
    assert record_criterion(8, "local energy audit", ok,
                            f"max |residual|/scale {max(rel):.2e} <= {LOCAL_REL} over 5 test functions")


def test_09_energy_bound_exponent(record_criterion):
    fam = bump_family(Grid(ENERGY_BOX, 32), 3, seed=0)
    rep = energy_bound_sweep(fam, np.geomspace(0.01, ENERGY_T, 6), n_steps=256, slack=0.5 - ENERGY_EXPONENT)
    ok = rep.fitted_exponent >= ENERGY_EXPONENT
    assert record_criterion(9, "energy-bound exponent", ok,
                            f"min exponent {rep.fitted_exponent:.3f} >= {ENERGY_EXPONENT}")


def test_10_force_split(record_criterion, energy_run):
    fs = force_split(energy_run, np.geomspace(0.01, ENERGY_T, 8), slack=FORCE_SLACK)
    got = {r.name.removeprefix("force_"): r.fitted_exponent for r in fs.mixed_norm_reports}
    ok = all(got[k] >= ref - FORCE_SLACK for k, ref in FORCE_REFS.items())
    detail = ", ".join(f"{k} {got[k]:.3f} (ref {ref:.3f})" for k, ref in FORCE_REFS.items())
    assert record_criterion(10, "force-split exponents", ok, detail)


def test_11_kernel_bound(record_criterion):
    rep = verify_kernel_bound(kernel_bound_samples(200, seed=0), growth_factor=KERNEL_GROWTH)
    d = rep.details
    ok = d["outer_shell_sup"] <= KERNEL_GROWTH * d["inner_shell_sup"] and d["n_samples"] == 200
    assert record_criterion(11, "kernel bound", ok,
                            f"outer/inner shell sup {d['outer_shell_sup'] / d['inner_shell_sup']:.4f} "
                            f"<= {KERNEL_GROWTH}")


def test_12_scaling_symmetry(record_criterion):
    v0 = preset_initial_data("bump", Grid(TWO_PI, 32))
    rep = solver_scaling_check(v0, 2.0 ** -10, 2.0, n_steps=32, tol=SCALING_TOL)
    ok = rep.lhs <= SCALING_TOL
    assert record_criterion(12, "scaling symmetry", ok, f"relative norm change {rep.lhs:.1e} <= {SCALING_TOL}")


def test_13_weak_convergence(record_criterion):
    g = Grid(TWO_PI, 128)
    v0, fam = oscillation_family(g, (8, 16, 32))
    tr = weak_convergence_harness(fam, v0, 0.01, n_steps=8, parameters=(8, 16, 32))
    local, data = tr.metrics, tr.extra["data_L3_distance"]
    ok = all(local[i + 1] < local[i] for i in range(2)) and min(data) >= DATA_DISTANCE_KEEP * data[0]
    assert record_criterion(13, "weak-convergence harness", ok,
                            "local L3 " + ", ".join(f"{x:.4f}" for x in local)
                            + f"; data distance min/first {min(data) / data[0]:.3f}")


def _run_cli_twice(tmp_path, args):
    dirs = []
    for k in range(2):
        out = tmp_path / f"{args[0]}_{k}"
        code = cli_main(args + ["--out", str(out)])
        assert code in (0, 1)
        dirs.append(out)
    return dirs


def test_14_determinism(record_criterion, tmp_path):
    cases = [["perturb", "--grid", "16", "--T", "0.02", "--dt", "0.002", "--seed", "7"],
             ["mild", "--grid", "16", "--T", "0.001", "--n-steps", "16"],
             ["lab", "embedding", "--grid", "16", "--T", "0.001", "--n-steps", "16"]]
    mismatched, compared = [], 0
    for args in cases:
        a, b = _run_cli_twice(tmp_path, args)
        names = sorted(p.name for p in a.iterdir() if p.suffix in (".csv", ".json") and p.name != "manifest.json")
        for name in names:
            compared += 1
            if (a / name).read_bytes() != (b / name).read_bytes():
                mismatched.append(f"{a.name}/{name}")
        fa = json.loads(Path(a, "manifest.json").read_text())["files"]
        fb = json.loads(Path(b, "manifest.json").read_text())["files"]
        if fa != fb:
            mismatched.append(f"{a.name}/manifest checksums")
    ok = not mismatched and compared > 0
    assert record_criterion(14, "determinism", ok,
                            f"{compared} CSV/JSON files compared, mismatches: {mismatched or 'none'}")
