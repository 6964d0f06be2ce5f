"""Command line entry point.

Exit codes: 0 success, 2 assumption check failed, 3 solver did not
converge, 4 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import export
from .barrier import (barrier_bounds, comparison_test, gradient_trace_bound, solve_barrier,
                      supersolution_flux_check)
from .config import ConfigError, load_config
from .domain import DomainError, ParameterError, validate_assumptions
from .pipeline import (RunState, ValidationFailed, build_problem, run_pipeline, stage_solve, stage_structure,
                       stage_validate)
from .porosity import box_dimension
from .solver import SolverError

EXIT_OK, EXIT_VALIDATION, EXIT_NONCONVERGED, EXIT_USAGE = 0, 2, 3, 4

log = logging.getLogger("fbporosity")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", type=Path, default=None, help="output directory (default: from config)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for sweeps")
    common.add_argument("--force", action="store_true", help="continue after failed assumption checks")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="fbporosity", description="Dam-problem solver with free-boundary porosity diagnostics.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (("validate", "check the coefficient assumptions"),
                       ("solve", "solve and extract the free boundary"),
                       ("porosity", "full run including barrier constants and porosity"),
                       ("dimension", "box-counting dimension of the free boundary")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("config", type=Path)
    sp = sub.add_parser("barrier", parents=[common], help="solve one barrier problem")
    sp.add_argument("config", type=Path)
    sp.add_argument("--x0", type=_floats, required=True, help="centre point, comma separated")
    sp.add_argument("--r", type=float, required=True)
    sp.add_argument("--eps", type=float, required=True)
    sp.add_argument("--cells-per-r", type=int, default=None)
    sp = sub.add_parser("report", parents=[common], help="summarise a run directory and draw figures")
    sp.add_argument("run_dir", type=Path)
    return p


def _out_dir(args, cfg) -> Path:
    out = args.out if args.out is not None else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    rep = validate_assumptions(build_problem(cfg).cf)
    for c in rep.checks:
        print(f"{c.name:18s} {'ok' if c.passed else 'FAIL'}  {c.detail}")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        export.write_json(args.out / "validation.json", rep.as_dict())
    return EXIT_OK if rep.passed else EXIT_VALIDATION


def _converged_code(report: dict) -> int:
    return EXIT_OK if report.get("solver", {}).get("converged", True) else EXIT_NONCONVERGED


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    rep = run_pipeline(cfg, force=args.force, threads=args.threads, out_dir=_out_dir(args, cfg),
                       stop_after="structure")
    _print_solver(rep)
    return _converged_code(rep)


def cmd_porosity(args) -> int:
    cfg = load_config(args.config)
    rep = run_pipeline(cfg, force=args.force, threads=args.threads, out_dir=_out_dir(args, cfg))
    _print_solver(rep)
    por = rep.get("porosity", {})
    for key in ("r1_radii", "grid_radii"):
        if key in por:
            d = por[key]
            print(f"porosity[{key}]: min={d['min_delta_hat']} delta0={d['delta0']} passed={d['passed']}")
    return _converged_code(rep)


def cmd_dimension(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    st = RunState(cfg, out)
    stage_validate(st, args.force)
    stage_solve(st)
    _, fb = stage_structure(st)
    h = st.solution.grid.h
    scales = [s for s in cfg.dimension_scales if s >= h * (1 - 1e-9)]
    dim = box_dimension(fb, scales)
    export.write_json(st.path("dimension.json"), dim)
    print(f"box dimension {dim['slope']:.6f} (residual {dim['residual']:.3g}) over {len(scales)} scales")
    return EXIT_OK if st.solution.converged else EXIT_NONCONVERGED


def cmd_barrier(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    st = RunState(cfg, out)
    stage_validate(st, args.force)
    stage_solve(st)
    cf = st.problem.cf
    cells = args.cells_per_r or cfg.cells_per_r
    b = solve_barrier(cf, np.asarray(args.x0), args.r, args.eps, cells_per_r=cells)
    export.write_field(st.path(f"barrier_{args.eps:.6e}_{args.r:.6e}.csv".replace("+", "")), b.v)
    res = {"epsilon": b.epsilon, "r": b.r, "trace_bound": gradient_trace_bound(b), "bounds": barrier_bounds(b),
           "flux": supersolution_flux_check(b, cf, 1e-6 * cf.h_upper),
           "comparison": comparison_test(st.solution, b, st.solution.params.threshold)}
    export.write_json(st.path("barrier.json"), [res])
    print(f"trace bound {res['trace_bound']:.6g}; flux min {res['flux']['flux_min']:.6g}; "
          f"comparison {res['comparison']['status']}")
    return EXIT_OK


def _print_solver(rep: dict) -> None:
    s = rep.get("solver")
    if s:
        print(f"solver: converged={s['converged']} iterations={s['iterations']} "
              f"complementarity={s['residuals']['complementarity']:.3g}")


def _section(title: str, items: dict) -> list[str]:
    lines = [f"== {title} =="]
    for k, v in items.items():
        if isinstance(v, (dict, list)):
            continue
        lines.append(f"{k}: {v}")
    return lines


def cmd_report(args) -> int:
    run_dir = args.run_dir
    path = run_dir / "run_report.json"
    if not path.exists():
        raise UsageError(f"no run_report.json in {run_dir}")
    rep = json.loads(path.read_text())
    lines = []
    if "validation" in rep:
        lines += _section("validation", {c["name"]: "ok" if c["passed"] else f"FAIL ({c['detail']})"
                                         for c in rep["validation"]["checks"]})
    if "solver" in rep:
        s = rep["solver"]
        items = {k: s[k] for k in ("converged", "iterations", "h_grid") if k in s}
        items.update(s["residuals"])
        if "analytic_sup_error" in s:
            items["analytic_sup_error"] = s["analytic_sup_error"]
        lines += _section("solver", items)
    if "structure" in rep:
        lines += _section("structure", rep["structure"])
    if "barrier" in rep:
        b = rep["barrier"]
        lines += _section("barrier", b.get("constants", b))
        if "flux_passed" in b:
            lines.append(f"flux_passed: {b['flux_passed']}")
    for key, d in rep.get("porosity", {}).items():
        lines += _section(f"porosity {key.replace('_', ' ')}", d)
    if "dimension" in rep:
        lines += _section("dimension", rep["dimension"])
    lines.append("== files ==")
    lines += rep.get("manifest", [])
    print("\n".join(lines))

    from .plotting import render_all
    fig_dir = args.out or run_dir
    fig_dir.mkdir(parents=True, exist_ok=True)
    made = render_all(run_dir, rep) if fig_dir == run_dir else _render_elsewhere(run_dir, fig_dir, rep)
    for p in made:
        print(f"figure: {p}")
    return EXIT_OK


def _render_elsewhere(run_dir: Path, fig_dir: Path, rep: dict):
    from .plotting import plot_dimension, plot_porosity, plot_solution
    made = [plot_solution(run_dir, fig_dir / "solution.png"), plot_porosity(run_dir, fig_dir / "porosity.png"),
            plot_dimension(rep, fig_dir / "dimension.png")]
    return [p for p in made if p is not None]


COMMANDS = {"validate": cmd_validate, "solve": cmd_solve, "porosity": cmd_porosity,
            "dimension": cmd_dimension, "barrier": cmd_barrier, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return COMMANDS[args.command](args)
    except ValidationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        for c in exc.report.failures():
            print(f"  {c.name}: {c.detail} witness={c.witness}", file=sys.stderr)
        return EXIT_VALIDATION
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (ConfigError, UsageError, ParameterError, DomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
