"""Run configuration: INI sections of flat ``key = value`` pairs."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .domain import ParameterError


class ConfigError(ValueError):
    pass


# section -> {key: default}; None marks a required key
SCHEMA: dict[str, dict[str, object]] = {
    "domain": {"n": None, "rho": None, "l": None, "grid_shape": None, "gamma": "0", "center": ""},
    "coefficients": {"a": "identity", "h": "1", "lambda": None, "Lambda": None,
                     "h_lower": None, "h_upper": None, "p": None, "alpha": None},
    "boundary": {"g": None},
    "solver": {"tol_u": "1e-10", "tol_chi": "1e-10", "tol_comp": "1e-9", "tol_lin": "1e-9",
               "omega": "1", "u_threshold": "", "heaviside_width": "", "max_iterations": "50000",
               "sor": "", "check_every": "10"},
    "barrier": {"x0": "auto", "epsilons": "0.25, 0.125, 0.0625, 0.03125, 0.015625",
                "r_fractions": "0.5, 0.25", "cells_per_r": "32"},
    "porosity": {"r1_fractions": "0.5, 0.25, 0.125", "grid_radii": "4, 8, 16",
                 "constructive_samples": "8", "max_points": "0",
                 "dimension_scales": "0.0625, 0.03125, 0.015625"},
    "analytic": {"u": ""},
    "output": {"dir": "out", "plots": "yes"},
}


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _opt_float(text: str):
    text = text.strip()
    return float(text) if text else None


def parse_matrix(text: str, n: int):
    """``identity`` or rows separated by ``;`` with comma-separated entries."""
    text = text.strip()
    if text.lower() == "identity":
        return [["1" if i == j else "0" for j in range(n)] for i in range(n)]
    rows = [r.strip() for r in text.split(";")]
    entries = [[e.strip() for e in r.split(",")] for r in rows]
    if len(entries) != n or any(len(r) != n for r in entries):
        raise ConfigError(f"coefficient matrix must be {n}x{n}")
    return entries


@dataclass(frozen=True)
class RunConfig:
    n: int
    rho: float
    l: float
    grid_shape: tuple[int, ...]
    gamma: str
    center: tuple[float, ...]
    a: list
    h: str
    bounds: dict
    g: str
    solver: dict
    x0: tuple[float, ...] | None
    epsilons: tuple[float, ...]
    r_fractions: tuple[float, ...]
    cells_per_r: int
    r1_fractions: tuple[float, ...]
    grid_radii: tuple[float, ...]
    constructive_samples: int
    max_points: int
    dimension_scales: tuple[float, ...]
    analytic_u: str
    out_dir: Path
    plots: bool = True
    source: str = field(default="", compare=False)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base=path.parent, source=str(path))


def parse_config(text: str, base: Path | None = None, source: str = "") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = [s for s in cp.sections() if s not in SCHEMA]
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    vals: dict[str, dict[str, str]] = {}
    for sec, keys in SCHEMA.items():
        given = dict(cp[sec]) if cp.has_section(sec) else {}
        extra = sorted(set(given) - set(keys))
        if extra:
            raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(extra)}")
        out = {}
        for key, default in keys.items():
            if key in given:
                out[key] = given[key]
            elif default is None:
                raise ConfigError(f"missing required key [{sec}] {key}")
            else:
                out[key] = str(default)
        vals[sec] = out

    try:
        d, c = vals["domain"], vals["coefficients"]
        n = int(d["n"])
        shape = tuple(int(v) for v in _floats(d["grid_shape"]))
        if len(shape) != n:
            raise ConfigError(f"grid_shape needs {n} entries")
        bounds = {"lam": float(c["lambda"]), "Lam": float(c["Lambda"]), "h_lower": float(c["h_lower"]),
                  "h_upper": float(c["h_upper"]), "p": float(c["p"]), "alpha": float(c["alpha"])}
        if bounds["p"] <= n:
            raise ConfigError(f"need p > n (p={bounds['p']}, n={n})")
        s = vals["solver"]
        solver = {
            "tol_u": float(s["tol_u"]), "tol_chi": float(s["tol_chi"]), "tol_comp": float(s["tol_comp"]),
            "tol_lin": float(s["tol_lin"]), "omega": float(s["omega"]),
            "u_threshold": _opt_float(s["u_threshold"]), "heaviside_width": _opt_float(s["heaviside_width"]),
            "max_iterations": int(s["max_iterations"]), "sor": _opt_float(s["sor"]),
            "check_every": int(s["check_every"]),
        }
        b, p = vals["barrier"], vals["porosity"]
        x0 = None if b["x0"].strip().lower() == "auto" else _floats(b["x0"])
        if x0 is not None and len(x0) != n:
            raise ConfigError(f"x0 needs {n} coordinates")
        out_dir = Path(vals["output"]["dir"])
        if base is not None and not out_dir.is_absolute():
            out_dir = base / out_dir
        return RunConfig(
            n=n, rho=float(d["rho"]), l=float(d["l"]), grid_shape=shape, gamma=d["gamma"],
            center=_floats(d["center"]), a=parse_matrix(c["a"], n), h=c["h"], bounds=bounds,
            g=vals["boundary"]["g"], solver=solver, x0=x0, epsilons=_floats(b["epsilons"]),
            r_fractions=_floats(b["r_fractions"]), cells_per_r=int(b["cells_per_r"]),
            r1_fractions=_floats(p["r1_fractions"]), grid_radii=_floats(p["grid_radii"]),
            constructive_samples=int(p["constructive_samples"]), max_points=int(p["max_points"]),
            dimension_scales=_floats(p["dimension_scales"]), analytic_u=vals["analytic"]["u"].strip(),
            out_dir=out_dir, plots=vals["output"]["plots"].strip().lower() in ("1", "yes", "true", "on"),
            source=source,
        )
    except (ValueError, ParameterError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
