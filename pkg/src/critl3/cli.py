"""``critl3`` command line: runs a solver or experiment, writes JSON reports,
CSV traces, PNG figures and a checksummed manifest; exits 0 iff every
report passes."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from . import __version__
from .config import ConfigError, load_config_with_sources
from .io import OutputDir, RunManifest, load_snapshot
from .lab import EXPERIMENTS, ExperimentConfig, run_experiment
from .mild import HorizonNotFoundError, IterationBlowUpError, horizon_threshold, picard_solve, select_horizon
from .perturbation import (
    StepRejectedError,
    TestFunction,
    force_split,
    global_energy_audit,
    local_energy_audits,
    run_perturbation,
)
from .presets import PRESETS, bump_family
from .reports import ConvergenceTrace, EstimateReport

log = logging.getLogger("critl3")


class UsageError(RuntimeError):
    pass


def _initial_data(init: str, cfg: ExperimentConfig):
    p = Path(init)
    if p.with_name(p.name + ".json").is_file():
        v0 = load_snapshot(p)
        if v0.grid.resolution != cfg.resolution or v0.grid.box_length != cfg.box_length:
            log.info("snapshot grid overrides --grid/--box")
        return v0
    return ExperimentConfig(**{**cfg.__dict__, "preset": init}).initial_data()


def _add_global(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file; flags override its values")
    p.add_argument("--grid", type=int, dest="resolution", help="points per axis")
    p.add_argument("--box", type=float, dest="box_length", help="box edge length")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="critl3_out", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="FFT worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="critl3", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mild", help="Picard iteration for the mild solution")
    _add_global(m)
    m.add_argument("--init", default="bump", help="preset name or snapshot stem")
    m.add_argument("--T", default="auto", help="horizon or 'auto' (calibrated threshold)")
    m.add_argument("--tol", type=float, default=1e-8)
    m.add_argument("--kmax", type=int, default=30)
    m.add_argument("--n-steps", type=int, dest="n_steps")

    pt = sub.add_parser("perturb", help="energy correction v2 with audits")
    _add_global(pt)
    pt.add_argument("--init", default="bump")
    pt.add_argument("--T", type=float)
    pt.add_argument("--dt", type=float)
    pt.add_argument("--rho", type=float)
    pt.add_argument("--audit", default="global,local", help="comma list from {global, local}")
    pt.add_argument("--n-local", type=int, default=5, help="random test functions for the local audit")
    pt.add_argument("--store-every", type=int, default=1)

    lb = sub.add_parser("lab", help="scaling, embedding, uniqueness and convergence experiments")
    _add_global(lb)
    lb.add_argument("experiment", nargs="?", choices=EXPERIMENTS)
    lb.add_argument("--preset")
    lb.add_argument("--T", type=float)
    lb.add_argument("--n-steps", type=int, dest="n_steps")
    lb.add_argument("--list", action="store_true", help="list presets and experiments")

    vl = sub.add_parser("verify-linear", help="Stokes-flow estimates")
    _add_global(vl)
    vl.add_argument("--init", default="bump")
    vl.add_argument("--T", type=float, default=1.0)
    vl.add_argument("--family", type=int, default=10)

    k = sub.add_parser("kernel", help="Oseen kernel bound sampling")
    _add_global(k)
    k.add_argument("--samples", type=int, default=200)
    return parser


# ---------------------------------------------------------------------------
# commands; each returns (reports, traces)

def _cmd_mild(args, cfg, out: OutputDir):
    from .plotting import close, contraction_figure
    v0 = _initial_data(args.init, cfg)
    n_steps = args.n_steps or cfg.n_steps
    if args.T == "auto":
        T = select_horizon(v0, horizon_threshold(), n_steps=n_steps)
    else:
        T = float(args.T)
    sol = picard_solve(v0, T, tol=args.tol, k_max=args.kmax, n_steps=n_steps)
    meta = sol.metadata()
    meta.pop("wall_time_s")  # timing lives in the manifest only
    out.json("mild_solution.json", meta)
    lines = ["k,diff_norm_5,ratio"]
    for i, d in enumerate(sol.diff_norms):
        r = sol.diff_norms[i] / sol.diff_norms[i - 1] if i and sol.diff_norms[i - 1] else float("nan")
        lines.append(f"{i + 1},{d!r},{r!r}")
    out.text("contraction.csv", "\n".join(lines) + "\n")
    out.csv_schema("contraction")
    out.snapshot("v_T", sol.velocity_slice(len(sol) - 1))
    fig = contraction_figure(sol.diff_norms)
    out.figure("contraction.png", fig)
    close(fig)
    worst = max(sol.ratios) if sol.ratios else 0.0
    reports = [
        EstimateReport("picard_contraction", lhs=worst, rhs=0.5, ratio=worst / 0.5,
                       passed=bool(sol.converged and worst <= 0.5),
                       details={"iterations": sol.iterations, "T": T}),
        EstimateReport("fixed_point_residual", lhs=sol.final_residual, rhs=1e-7,
                       ratio=sol.final_residual / 1e-7, passed=bool(sol.final_residual <= 1e-7)),
    ]
    return reports, []


def _cmd_perturb(args, cfg, out: OutputDir):
    from .plotting import close, energy_figure, exponent_figure
    v0 = _initial_data(args.init, cfg)
    T = cfg.T if cfg.T is not None else 0.1
    dt = cfg.dt if cfg.dt is not None else T / cfg.n_steps
    audits = {a.strip() for a in args.audit.split(",") if a.strip()}
    unknown = audits - {"global", "local"}
    if unknown:
        raise UsageError(f"unknown audit(s) {sorted(unknown)}; choose from global, local")
    run = run_perturbation(v0, T, dt, rho=cfg.rho, store_every=args.store_every)
    out.text("energy_ledger.csv", run.energy_ledger.to_csv())
    out.csv_schema("energy_ledger")
    out.json("perturbation_run.json", run.metadata())
    fig = energy_figure(run.energy_ledger)
    out.figure("energy.png", fig)
    close(fig)
    reports = []
    if "global" in audits:
        reports.append(global_energy_audit(run))
    if "local" in audits and cfg.rho == 0 and args.store_every > 0:
        rng = np.random.default_rng(cfg.seed)
        phis = [TestFunction.random(run.grid, rng, run.T) for _ in range(args.n_local)]
        for i, r in enumerate(local_energy_audits(run, phis)):
            r.name = f"local_energy_{i}"
            reports.append(r)
    if args.store_every > 0:
        fs = force_split(run)
        out.json("force_split.json", {"split_error": fs.split_error,
                                      "reports": [r.to_dict() for r in fs.mixed_norm_reports]})
        fig = exponent_figure(fs.mixed_norm_reports)
        out.figure("force_split.png", fig)
        close(fig)
        split = EstimateReport("force_split_sum", lhs=fs.split_error, rhs=1e-10,
                               ratio=fs.split_error / 1e-10, passed=bool(fs.split_error <= 1e-10))
        reports.append(split)
    return reports, []


def _cmd_lab(args, cfg, out: OutputDir):
    from .plotting import close, trace_figure
    reports, traces = run_experiment(args.experiment, cfg)
    named = []
    for i, tr in enumerate(traces):
        name = f"{args.experiment}_trace" if len(traces) == 1 else f"{args.experiment}_trace{i}"
        out.trace(name, tr)
        fig = trace_figure(tr)
        out.figure(f"{name}.png", fig)
        close(fig)
        named.append((name, tr))
    return reports, named


def _cmd_verify_linear(args, cfg, out: OutputDir):
    from .plotting import close, norms_figure
    from .stokes_heat import first_stokes_family_check, gradient_norms, verify_gradient_decay
    v0 = _initial_data(args.init, cfg)
    times = np.geomspace(0.02, 1.0, 12)
    reports = [verify_gradient_decay(v0, s, times) for s in (3, 4)]
    fam = bump_family(cfg.grid, args.family, cfg.seed)
    reports.append(first_stokes_family_check(fam, args.T))
    fig = norms_figure(times, {f"s={s}": gradient_norms(v0, s, times) for s in (3, 4)},
                       "gradient norms of the heat flow")
    fig.axes[0].set_xscale("log")
    out.figure("gradient_decay.png", fig)
    close(fig)
    return reports, []


def _cmd_kernel(args, cfg, out: OutputDir):
    from .oseen import kernel_bound_samples, verify_kernel_bound
    from .plotting import close, kernel_figure
    samples = kernel_bound_samples(args.samples, seed=cfg.seed)
    rep = verify_kernel_bound(samples)
    fig = kernel_figure(rep, samples)
    out.figure("kernel_bound.png", fig)
    close(fig)
    return [rep], []


COMMANDS = {"mild": _cmd_mild, "perturb": _cmd_perturb, "lab": _cmd_lab,
            "verify-linear": _cmd_verify_linear, "kernel": _cmd_kernel}


def _overrides(args) -> dict:
    keys = ("resolution", "box_length", "seed", "preset", "dt", "rho", "n_steps")
    ov = {k: getattr(args, k, None) for k in keys}
    T = getattr(args, "T", None)
    if T is not None and T != "auto":
        ov["T"] = float(T)
    return ov


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "lab" and args.list:
        print("presets:", ", ".join(PRESETS))
        print("experiments:", ", ".join(EXPERIMENTS))
        return 0
    if args.command == "lab" and args.experiment is None:
        print("error: lab needs an experiment (see --list)", file=sys.stderr)
        return 2
    start = time.perf_counter()
    try:
        cfg, sources = load_config_with_sources(args.config, _overrides(args))
        out = OutputDir(args.out)
        with sfft.set_workers(max(1, args.threads)):
            reports, traces = COMMANDS[args.command](args, cfg, out)
    except (ConfigError, UsageError, OSError, HorizonNotFoundError, IterationBlowUpError,
            StepRejectedError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    for r in reports:
        out.report(r)
    summary = {r.name: r.passed for r in reports}
    summary.update({name: tr.passed for name, tr in traces})
    out.json("summary.json", summary)
    cfg_snapshot = {k: v for k, v in cfg.__dict__.items()}
    out.manifest(RunManifest(command=["critl3"] + list(argv if argv is not None else sys.argv[1:]),
                             config={"values": cfg_snapshot, "sources": sources},
                             version=__version__, wall_clock_s=time.perf_counter() - start))
    failed = [name for name, ok in summary.items() if not ok]
    for r in reports:
        print(r.line())
    for name, tr in traces:
        print(f"[{'PASS' if tr.passed else 'FAIL'}] {name} rate={tr.fitted_rate}")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
