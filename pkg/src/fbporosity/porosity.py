"""Porosity measurements on free-boundary cell covers, and box counting."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

from .barrier import BarrierConstants
from .domain import ParameterError
from .free_boundary import FreeBoundarySet
from .solver import Solution


def predicted_constants(C1: float, epsilon0: float) -> tuple[float, float, float]:
    """``(C0, delta, delta0)`` with ``C0 = eps0/3``, ``delta = min(1, C0/(2 C1))``."""
    if not C1 > 0:
        raise ParameterError("C1 must be positive")
    if not 0 < epsilon0 < 1:
        raise ParameterError("epsilon0 must lie in (0, 1)")
    C0 = epsilon0 / 3.0
    delta = min(1.0, C0 / (2.0 * C1))
    return C0, delta, delta / 2.0


@dataclass(frozen=True)
class PorosityQuery:
    x0: tuple
    r: float
    resolution: float | None = None

    def __post_init__(self):
        if not self.r > 0:
            raise ParameterError("query radius must be positive")
        if self.resolution is not None and not self.resolution > 0:
            raise ParameterError("search resolution must be positive")


def _ball_lattice(x0: np.ndarray, r: float, step: float, lower, upper) -> np.ndarray:
    """Lattice points (spacing ``step``, anchored at ``x0``) inside ``B_r(x0)`` and the box."""
    m = int(math.floor(r / step))
    offs = np.arange(-m, m + 1) * step
    pts = np.stack(np.meshgrid(*([offs] * len(x0)), indexing="ij"), axis=-1).reshape(-1, len(x0)) + x0
    keep = np.linalg.norm(pts - x0, axis=1) < r
    keep &= np.all(pts >= np.asarray(lower) - 1e-12, axis=1) & np.all(pts <= np.asarray(upper) + 1e-12, axis=1)
    return pts[keep]


class _CellIndex:
    def __init__(self, fb: FreeBoundarySet):
        self.fb = fb
        self.centers = fb.centers()
        self.tree = cKDTree(self.centers) if len(self.centers) else None
        self.inflation = fb.grid.h

    def distance(self, pts: np.ndarray) -> np.ndarray:
        if self.tree is None:
            return np.full(len(pts), np.inf)
        d, _ = self.tree.query(pts)
        return d - self.inflation


def empirical_porosity(fb: FreeBoundarySet, q: PorosityQuery, _index: _CellIndex | None = None) -> dict:
    """Largest ``delta`` with a ball ``B_{delta r}(y)`` inside ``B_r(x0)`` that avoids the cells.

    Candidate centres lie on a lattice through ``x0``; the default spacing is
    ``min(h_grid, r/8)``.  Distances to the set use cell centres minus one
    ``h_grid`` so the answer never overstates the porosity.
    """
    index = _index or _CellIndex(fb)
    grid = fb.grid
    x0 = np.asarray(q.x0, dtype=float)
    h = grid.h
    step = q.resolution or min(h, q.r / 8.0)
    near = index.tree.query_ball_point(x0, q.r + h) if index.tree is not None else []
    if not near:
        return {"delta_hat": max(0.0, 1.0 - h / q.r), "witness": x0.tolist(), "degenerate": True}
    pts = _ball_lattice(x0, q.r, step, grid.origin, grid.upper)
    if len(pts) == 0:
        return {"delta_hat": 0.0, "witness": x0.tolist(), "degenerate": True}
    room = q.r - np.linalg.norm(pts - x0, axis=1)
    score = np.minimum(index.distance(pts), room) / q.r
    best = int(np.argmax(score))
    dhat = float(np.clip(score[best], 0.0, 1.0))
    return {"delta_hat": dhat, "witness": pts[best].tolist(), "degenerate": False}


def verify_witness(fb: FreeBoundarySet, x0, r: float, delta_hat: float, witness) -> bool:
    """No cell centre within ``delta_hat r`` of the witness; ball inside ``B_r(x0)`` up to one cell."""
    c = fb.centers()
    w = np.asarray(witness, dtype=float)
    rad = delta_hat * r
    if len(c) and np.min(np.linalg.norm(c - w, axis=1)) < rad:
        return False
    return bool(np.linalg.norm(w - np.asarray(x0, dtype=float)) + rad <= r + fb.grid.h)


def _u_sampler(sol: Solution):
    grid = sol.grid
    return RegularGridInterpolator(grid.axes(), sol.u.values, method="linear",
                                   bounds_error=False, fill_value=0.0)


def constructive_center(sol: Solution, x0, r: float, consts: BarrierConstants,
                        resolution: float | None = None, u_threshold: float | None = None) -> dict:
    """Build ``x2`` from the maximiser ``x1`` of ``u`` over the closed top box around ``x0``.

    The box is ``{|x' - x0'| <= r, l - 2r <= x_n <= l}``, sampled on a
    lattice of spacing ``min(h_grid, r/8)`` with multilinear ``u``.
    ``x2 = (x1', x0n)``; the ball of radius ``delta0 r`` about it is checked
    to lie in ``{u > u_threshold}`` (hence off the free boundary).
    """
    grid = sol.grid
    n = grid.ndim
    thr = sol.params.threshold if u_threshold is None else float(u_threshold)
    x0 = np.asarray(x0, dtype=float)
    l = grid.upper[-1]
    C0, delta, delta0 = predicted_constants(consts.C1, consts.epsilon0)
    step = resolution or min(grid.h, r / 8.0)
    m = int(math.floor(r / step))
    axes = [x0[k] + np.arange(-m, m + 1) * step for k in range(n - 1)]
    mz = int(math.floor(2 * r / step))
    axes.append(l - np.arange(0, mz + 1) * step)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    if n > 1:
        pts = pts[np.linalg.norm(pts[:, :-1] - x0[:-1], axis=1) <= r + 1e-12]
    lo, hi = np.asarray(grid.origin), np.asarray(grid.upper)
    pts = pts[np.all((pts >= lo - 1e-12) & (pts <= hi + 1e-12), axis=1)]
    sample = _u_sampler(sol)
    vals = sample(pts)
    out = {"x0": x0.tolist(), "r": float(r), "C0r": C0 * r, "delta0": delta0}
    if vals.size == 0 or float(vals.max()) <= thr:
        out.update(contradiction=True, x1=None, x2=None, u_x1=0.0, above_C0r=False, ball_clear=None)
        return out
    k = int(np.argmax(vals))
    x1 = pts[k]
    x2 = x1.copy()
    x2[-1] = x0[-1]
    rad = delta0 * r
    probe = _ball_probe(x2, rad, step)
    clear = bool(np.all(sample(probe) > thr))
    out.update(contradiction=False, x1=x1.tolist(), x2=x2.tolist(), u_x1=float(vals[k]),
               above_C0r=bool(vals[k] > C0 * r), ball_clear=clear)
    return out


def _ball_probe(center: np.ndarray, rad: float, step: float) -> np.ndarray:
    n = len(center)
    m = max(1, int(math.ceil(rad / max(step, 1e-300))))
    m = min(m, 16)
    offs = np.linspace(-rad, rad, 2 * m + 1)
    pts = np.stack(np.meshgrid(*([offs] * n), indexing="ij"), axis=-1).reshape(-1, n)
    pts = pts[np.linalg.norm(pts, axis=1) <= rad * (1 + 1e-12)]
    return pts + center


@dataclass
class PorosityReport:
    entries: list = field(default_factory=list)
    delta0: float | None = None
    constants: dict = field(default_factory=dict)
    slack: float | None = None
    constructive: list = field(default_factory=list)
    dimension: dict | None = None

    @property
    def min_delta_hat(self) -> float | None:
        vals = [e["delta_hat"] for e in self.entries if not e["degenerate"]]
        return min(vals) if vals else None

    @property
    def witnesses_verified(self) -> bool:
        return all(e["verified"] for e in self.entries)

    @property
    def passed(self) -> bool | None:
        if not self.entries or self.delta0 is None:
            return None
        mn = self.min_delta_hat
        ok = mn is None or mn >= self.delta0 - self.slack
        return bool(ok and self.witnesses_verified)

    @property
    def constructive_summary(self) -> dict:
        done = [c for c in self.constructive if not c["contradiction"]]
        return {
            "queries": len(self.constructive),
            "contradictions": len(self.constructive) - len(done),
            "above_C0r": sum(1 for c in done if c["above_C0r"]),
            "ball_clear": sum(1 for c in done if c["ball_clear"]),
            "all_clear": all(c["ball_clear"] for c in done),
        }

    def as_dict(self) -> dict:
        return {
            "constants": self.constants,
            "delta0": self.delta0,
            "slack": self.slack,
            "min_delta_hat": self.min_delta_hat,
            "passed": self.passed,
            "witnesses_verified": self.witnesses_verified,
            "entries": self.entries,
            "constructive": self.constructive,
            "constructive_summary": self.constructive_summary,
            "dimension": self.dimension,
        }

    def table(self) -> tuple[list[str], list[list]]:
        if not self.entries:
            return ["r", "delta_hat"], []
        n = len(self.entries[0]["x0"])
        header = [f"x{k + 1}" for k in range(n)] + ["r", "delta_hat"] + [f"w{k + 1}" for k in range(n)]
        rows = [list(e["x0"]) + [e["r"], e["delta_hat"]] + list(e["witness"]) for e in self.entries]
        return header, rows


def porosity_sweep(fb: FreeBoundarySet, sol: Solution, radii: Sequence[float], consts: BarrierConstants,
                   points: np.ndarray | None = None, constructive_samples: int = 8,
                   resolution: float | None = None, executor=None) -> PorosityReport:
    """Empirical porosity at every FB cell centre (or ``points``) for every radius."""
    C0, delta, delta0 = predicted_constants(consts.C1, consts.epsilon0)
    constants = {"C0": C0, "delta": delta, "delta0": delta0, **consts.as_dict()}
    radii = [float(r) for r in radii]
    if not radii:
        return PorosityReport(constants=constants)
    pts = fb.centers() if points is None else np.asarray(points, dtype=float)
    index = _CellIndex(fb)
    queries = [(tuple(float(v) for v in p), r) for r in radii for p in pts]

    def one(item):
        x0, r = item
        res = empirical_porosity(fb, PorosityQuery(x0, r, resolution), index)
        res["verified"] = res["degenerate"] or verify_witness(fb, x0, r, res["delta_hat"], res["witness"])
        return {"x0": list(x0), "r": r, **res}

    entries = list(executor.map(one, queries)) if executor else [one(q) for q in queries]
    slack = 2.0 * fb.grid.h / min(radii)
    constructive = []
    if constructive_samples and len(pts):
        picks = np.unique(np.linspace(0, len(pts) - 1, min(constructive_samples, len(pts))).astype(int))
        for r in radii:
            for i in picks:
                constructive.append(constructive_center(sol, pts[i], r, consts, resolution))
    return PorosityReport(entries, delta0, constants, slack, constructive)


def box_dimension(fb: FreeBoundarySet, scales: Sequence[float]) -> dict:
    """Least-squares slope of ``log N(s)`` against ``log(1/s)``.

    ``N(s)`` counts axis-aligned boxes of side ``s`` (anchored at the grid
    origin) whose interior meets a cell of the cover.
    """
    scales = [float(s) for s in scales]
    if len(scales) < 3:
        raise ParameterError("box counting needs at least three scales")
    h = fb.grid.h
    if min(scales) < h * (1 - 1e-9):
        raise ParameterError(f"box sizes must be at least the grid spacing {h:.6g}")
    o = np.asarray(fb.grid.origin)
    d = np.asarray(fb.grid.spacing)
    lo = o + fb.cells * d
    hi = lo + d
    counts = []
    for s in scales:
        boxes = set()
        a = np.floor((lo - o) / s + 1e-9).astype(int)
        b = np.ceil((hi - o) / s - 1e-9).astype(int) - 1
        for ai, bi in zip(a, b):
            ranges = [range(x, max(x, y) + 1) for x, y in zip(ai, bi)]
            boxes.update(itertools.product(*ranges))
        counts.append(len(boxes))
    if min(counts) == 0:
        return {"slope": 0.0, "intercept": 0.0, "residual": 0.0, "scales": scales, "counts": counts}
    x = np.log(1.0 / np.asarray(scales))
    y = np.log(np.asarray(counts, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return {"slope": float(slope), "intercept": float(intercept), "residual": resid,
            "scales": scales, "counts": counts}
