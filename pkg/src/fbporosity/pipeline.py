"""End-to-end run: validate, solve, extract, barrier constants, porosity, dimension."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import export
from .barrier import (BarrierConstants, barrier_bounds, clearance_radius, comparison_test, default_sweep,
                      ExtendedCoefficients, gradient_trace_bound, lipschitz_constant, solve_barrier,
                      supersolution_flux_check)
from .config import RunConfig
from .domain import (CoefficientField, DomainSpec, ValidationReport, make_function, matrix_function,
                     transform_coefficients, validate_assumptions)
from .free_boundary import check_structure, extract_profile, fb_cells
from .porosity import box_dimension, porosity_sweep
from .solver import BoundaryData, Solution, SolverParams, residual_report, solve_vi

log = logging.getLogger(__name__)


class ValidationFailed(RuntimeError):
    def __init__(self, report: ValidationReport):
        names = ", ".join(c.name for c in report.failures())
        super().__init__(f"assumption check failed: {names}")
        self.report = report


@dataclass
class Problem:
    spec: DomainSpec
    cf: CoefficientField
    bc: BoundaryData
    params: SolverParams


@dataclass
class RunState:
    cfg: RunConfig
    out: Path
    problem: Problem | None = None
    validation: ValidationReport | None = None
    solution: Solution | None = None
    report: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    @contextmanager
    def timed(self, stage: str):
        t = time.perf_counter()
        yield
        self.timings[stage] = time.perf_counter() - t


def _field(text: str, base: Path):
    """Expression string, or ``csv:<path>`` for stored node values."""
    text = text.strip()
    if text.startswith("csv:"):
        path = Path(text[4:].strip())
        return export.csv_function(path if path.is_absolute() else base / path)
    return text


def build_problem(cfg: RunConfig) -> Problem:
    n = cfg.n
    kwargs = {"center": cfg.center} if cfg.center else {}
    if n > 1 and cfg.gamma.strip() not in ("", "0"):
        kwargs["gamma"] = make_function(cfg.gamma, n - 1)
    spec = DomainSpec(cfg.rho, cfg.l, n, cfg.grid_shape, **kwargs)
    base = Path(cfg.source).parent if cfg.source else Path(".")
    a_fn = matrix_function([[_field(e, base) for e in row] for row in cfg.a], n)
    h_fn = make_function(_field(cfg.h, base), n)
    g_fn = make_function(cfg.g, n)
    if "gamma" in kwargs:
        cf = transform_coefficients(spec, a_fn, h_fn, **cfg.bounds)
        gam = kwargs["gamma"]

        def g_flat(*ys):
            return g_fn(*ys[:-1], ys[-1] + gam(*ys[:-1]))
        bc = BoundaryData.for_cylinder(spec, g_flat)
    else:
        cf = CoefficientField.from_functions(spec.grid(), a_fn, h_fn, **cfg.bounds)
        bc = BoundaryData.for_cylinder(spec, g_fn)
    return Problem(spec, cf, bc, SolverParams(**cfg.solver))


def stage_validate(st: RunState, force: bool) -> None:
    with st.timed("validate"):
        st.problem = build_problem(st.cfg)
        st.validation = validate_assumptions(st.problem.cf)
    st.report["validation"] = st.validation.as_dict()
    if not st.validation.passed and not force:
        raise ValidationFailed(st.validation)


def stage_solve(st: RunState) -> None:
    pb = st.problem
    with st.timed("solve"):
        sol = solve_vi(pb.cf, pb.bc, pb.params)
    st.solution = sol
    export.write_solution(st.path("solution.csv"), sol)
    summary = sol.summary()
    summary["residual_report"] = residual_report(sol, pb.cf, pb.bc)
    summary["h_grid"] = sol.grid.h
    summary["shape"] = list(sol.grid.shape)
    if st.cfg.analytic_u:
        exact = make_function(st.cfg.analytic_u, st.cfg.n)(*sol.grid.mesh())
        summary["analytic_sup_error"] = float(np.max(np.abs(sol.u.values - exact)))
    st.report["solver"] = summary


def stage_structure(st: RunState):
    sol = st.solution
    with st.timed("structure"):
        profile = extract_profile(sol)
        fb = fb_cells(profile)
        rep = check_structure(sol)
    export.write_profile(st.path("phi.csv"), profile)
    export.write_cells(st.path("fb_cells.csv"), fb)
    st.report["structure"] = {**rep.as_dict(), "fb_cells": len(fb),
                              "phi_min": float(np.min(profile.phi)), "phi_max": float(np.max(profile.phi))}
    return profile, fb


def _auto_x0(cfg: RunConfig, grid) -> np.ndarray:
    mid = [0.5 * (lo + hi) for lo, hi in zip(grid.origin[:-1], grid.upper[:-1])]
    return np.array(mid + [0.7 * cfg.l])


def _tag(v: float) -> str:
    return ("%.6e" % v).replace("+", "")


def stage_barrier(st: RunState, executor=None) -> BarrierConstants:
    cfg, cf, sol = st.cfg, st.problem.cf, st.solution
    x0 = np.asarray(cfg.x0, dtype=float) if cfg.x0 else _auto_x0(cfg, cf.grid)
    with st.timed("barrier"):
        coeffs = ExtendedCoefficients(cf)
        r0 = clearance_radius(cf.grid, x0)
        C1 = lipschitz_constant(sol, x0, r0)
        samples = default_sweep(cfg.epsilons, cfg.r_fractions, r0)
        expo = 1.0 - cf.n / cf.p

        def trace(sample):
            eps, r = sample
            b = solve_barrier(cf, x0, r, eps, cfg.cells_per_r, r0=r0, coefficients=coeffs)
            return {"epsilon": eps, "r": r, "trace_bound": gradient_trace_bound(b),
                    "scaled": gradient_trace_bound(b) / eps ** expo, **barrier_bounds(b)}

        sweep = list(executor.map(trace, samples)) if executor else [trace(s) for s in samples]
        C2 = max(s["scaled"] for s in sweep)
        consts = BarrierConstants.build(C1, C2, cf, r0, x0)
        checks = []
        for frac in cfg.r1_fractions:
            r = frac * consts.r1
            b = solve_barrier(cf, x0, r, consts.epsilon0, cfg.cells_per_r, r0=r0, coefficients=coeffs)
            flux = supersolution_flux_check(b, cf, 1e-6 * cf.h_upper, consts, coefficients=coeffs)
            comp = comparison_test(sol, b, sol.params.threshold)
            export.write_field(st.path(f"barrier_{_tag(b.epsilon)}_{_tag(r)}.csv"), b.v)
            checks.append({**flux, "trace_bound": gradient_trace_bound(b), "bounds": barrier_bounds(b),
                           "comparison": comp})
    st.report["barrier"] = {"constants": consts.as_dict(), "sweep": sweep, "checks": checks,
                            "flux_passed": all(c["passed"] for c in checks)}
    return consts


def _subsample(points: np.ndarray, limit: int) -> np.ndarray:
    if limit <= 0 or len(points) <= limit:
        return points
    idx = np.unique(np.linspace(0, len(points) - 1, limit).astype(int))
    return points[idx]


def stage_porosity(st: RunState, fb, consts: BarrierConstants, executor=None) -> None:
    cfg, sol = st.cfg, st.solution
    h = sol.grid.h
    pts = _subsample(fb.centers(), cfg.max_points)
    out = {}
    with st.timed("porosity"):
        rep = porosity_sweep(fb, sol, [f * consts.r1 for f in cfg.r1_fractions], consts, points=pts,
                             constructive_samples=cfg.constructive_samples, executor=executor)
        radii = [m * h for m in cfg.grid_radii if m * h < 0.5 * min(np.subtract(sol.grid.upper, sol.grid.origin))]
        resolved = porosity_sweep(fb, sol, radii, consts, points=pts,
                                  constructive_samples=cfg.constructive_samples, executor=executor)
        scales = [s for s in cfg.dimension_scales if s >= h * (1 - 1e-9)]
        dim = box_dimension(fb, scales) if len(scales) >= 3 and len(fb) else None
    rep.dimension = dim
    full = {"r1_radii": rep.as_dict(), "grid_radii": resolved.as_dict()}
    export.write_json(st.path("porosity.json"), full)
    header, rows = rep.table()
    _, rows2 = resolved.table()
    export.write_csv(st.path("porosity.csv"), header, rows + rows2)

    def brief(r):
        d = r.as_dict()
        return {k: d[k] for k in ("constants", "delta0", "slack", "min_delta_hat", "passed",
                                  "witnesses_verified", "constructive_summary")} | {"queries": len(r.entries)}

    out["r1_radii"] = brief(rep)
    out["grid_radii"] = brief(resolved)
    st.report["porosity"] = out
    st.report["dimension"] = dim if dim is not None else {"skipped": "fewer than three usable scales"}


def run_pipeline(cfg: RunConfig, force: bool = False, threads: int = 1, out_dir: Path | None = None,
                 stop_after: str | None = None) -> dict:
    """Run every stage and write the artifacts; returns the run report.

    ``stop_after`` in {"validate", "solve", "structure", "barrier"} ends early.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    st = RunState(cfg, out)
    st.report["config"] = {"source": Path(cfg.source).name if cfg.source else "", "n": cfg.n,
                           "grid_shape": list(cfg.grid_shape), "force": bool(force)}
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        stage_validate(st, force)
        if stop_after != "validate":
            stage_solve(st)
        if stop_after not in ("validate", "solve"):
            _, fb = stage_structure(st)
            if cfg.n >= 2 and stop_after != "structure":
                consts = stage_barrier(st, executor)
                if stop_after != "barrier":
                    stage_porosity(st, fb, consts, executor)
            elif cfg.n < 2:
                st.report["barrier"] = {"skipped": "the barrier construction needs n >= 2"}
    finally:
        if executor is not None:
            executor.shutdown()
        st.files += ["run_report.json", "timings.json"]
        st.report["manifest"] = sorted(st.files)
        export.write_json(out / "run_report.json", st.report)
        export.write_json(out / "timings.json", st.timings)
    return st.report
