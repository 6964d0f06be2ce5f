"""Barrier super-solution over a bump-shaped region next to the top face.

The bump ``f_r(x') = l + r theta(|x' - x0'|^2 / r^2)`` bounds the region
``D_r``; ``v`` solves ``div(a~ grad v + h~ e_n) = 0`` there with
``v = eps/3 (f_r - x_n)`` on the boundary, where ``a~, h~`` are the even
reflections of the coefficients across ``x_n = l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator

from .domain import CoefficientField, ParameterError
from .grid import Grid, GridField
from .solver import FluxOperator, Solution, SolverError

EPS_CLAMP = 1e-9


class PreconditionError(ValueError):
    """Geometry or parameter outside the admissible range of the construction."""


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10 - 15 * s + 6 * s ** 2)


def _smoothstep_prime(s):
    inside = (s > 0) & (s < 1)
    return np.where(inside, 30 * s ** 2 * (1 - s) ** 2, 0.0)


@dataclass(frozen=True)
class CutoffProfile:
    """C^2 cutoff: -1 on ``t <= 1/4``, 1 on ``t >= 1``, quintic in between."""

    lower: float = 0.25
    upper: float = 1.0

    def evaluate(self, t):
        s = (np.asarray(t, dtype=float) - self.lower) / (self.upper - self.lower)
        return -1.0 + 2.0 * _smoothstep(s)

    def derivative(self, t):
        width = self.upper - self.lower
        s = (np.asarray(t, dtype=float) - self.lower) / width
        return 2.0 * _smoothstep_prime(s) / width

    @property
    def theta0(self) -> float:
        # max of S' is 15/8 at s = 1/2
        return 2.0 * 2.0 * (15.0 / 8.0) / (self.upper - self.lower)

    def __call__(self, t):
        return self.evaluate(t)


def make_cutoff() -> CutoffProfile:
    return CutoffProfile()


def bump_height(profile: CutoffProfile, x_prime, x0_prime, r: float, l: float):
    """``f_r(x')``; ``x_prime`` has the cross-section coordinates on its last axis."""
    x = np.asarray(x_prime, dtype=float)
    x0 = np.asarray(x0_prime, dtype=float)
    dist2 = np.sum((x - x0) ** 2, axis=-1) if x.ndim and x.shape[-1:] == x0.shape[-1:] else (x - x0) ** 2
    return l + r * profile.evaluate(dist2 / r ** 2)


def bump_slope(profile: CutoffProfile, x_prime, x0_prime, r: float):
    """Gradient of ``f_r`` with respect to ``x'`` (last axis = component)."""
    x = np.atleast_1d(np.asarray(x_prime, dtype=float))
    x0 = np.asarray(x0_prime, dtype=float)
    diff = x - x0
    t = np.sum(diff ** 2, axis=-1) / r ** 2
    return (profile.derivative(t) * 2.0 / r)[..., None] * diff


def mirror_extend(spec, f: GridField) -> GridField:
    """Even reflection across the top face: ``f(x', 2l - x_n)`` for ``x_n > l``.

    ``spec`` (a DomainSpec or None) is only used to check the top height.
    """
    grid = f.grid
    l = None if spec is None else spec.l
    top = grid.upper[-1]
    if l is not None and abs(top - l) > 1e-9 * max(1.0, abs(l)):
        raise ParameterError("field grid must end at the mirror plane x_n = l")
    vals = np.asarray(f.values)
    nz = grid.shape[-1]
    nd = grid.ndim
    upper = np.take(vals, np.arange(nz - 2, -1, -1), axis=nd - 1)
    ext = np.concatenate([vals, upper], axis=nd - 1)
    egrid = Grid(grid.origin, grid.spacing, grid.shape[:-1] + (2 * nz - 1,))
    return GridField(egrid, ext)


class ExtendedCoefficients:
    """Linear interpolation of the mirror-extended ``a`` and ``h``."""

    def __init__(self, cf: CoefficientField):
        self.cf = cf
        n = cf.n
        l = cf.grid.upper[-1]
        self.l = l
        h_ext = mirror_extend(None, GridField(cf.grid, cf.h))
        axes = h_ext.grid.axes()
        self._h = RegularGridInterpolator(axes, h_ext.values, method="linear")
        self._a = [[None] * n for _ in range(n)]
        for i in range(n):
            for j in range(n):
                ext = mirror_extend(None, GridField(cf.grid, cf.a[..., i, j]))
                self._a[i][j] = RegularGridInterpolator(axes, ext.values, method="linear")

    def sample(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(points, dtype=float)
        shape = pts.shape[:-1]
        flat = pts.reshape(-1, pts.shape[-1])
        n = self.cf.n
        a = np.empty((flat.shape[0], n, n))
        for i in range(n):
            for j in range(n):
                a[:, i, j] = self._a[i][j](flat)
        return a.reshape(shape + (n, n)), self._h(flat).reshape(shape)


def clearance_radius(grid: Grid, x0: Sequence[float], center=None) -> float:
    """Largest ``r0`` with the closed ball of radius ``2 r0`` about ``x0`` inside
    the open cylinder (the cross-section is the inscribed ball of the box)."""
    x0 = np.asarray(x0, dtype=float)
    lo, hi = np.asarray(grid.origin), np.asarray(grid.upper)
    vert = min(x0[-1] - lo[-1], hi[-1] - x0[-1])
    if grid.ndim == 1:
        lateral = math.inf
    elif grid.ndim == 2:
        lateral = min(x0[0] - lo[0], hi[0] - x0[0])
    else:
        mid = 0.5 * (lo[:-1] + hi[:-1]) if center is None else np.asarray(center)
        rad = 0.5 * float(np.min(hi[:-1] - lo[:-1]))
        lateral = rad - float(np.linalg.norm(x0[:-1] - mid))
    dist = min(vert, lateral)
    return float(max(0.0, 0.5 * dist * (1 - 1e-9)))


@dataclass(frozen=True)
class BarrierInstance:
    x0: np.ndarray
    x0_bar: np.ndarray
    r: float
    epsilon: float
    v: GridField
    interior: np.ndarray
    graph_nodes: np.ndarray
    gradient_trace: np.ndarray
    l: float
    profile: CutoffProfile = field(default_factory=CutoffProfile)

    @property
    def grid(self) -> Grid:
        return self.v.grid

    def f_r(self, x_prime):
        return bump_height(self.profile, x_prime, self.x0[:-1], self.r, self.l)

    def f_star(self, x_prime):
        return np.minimum(self.l, self.f_r(x_prime))

    def xprime_points(self) -> np.ndarray:
        mesh = self.grid.mesh()
        return np.stack(mesh[:-1], axis=-1)

    def to_rows(self) -> tuple[list[str], np.ndarray]:
        pts = self.grid.points()
        header = [f"x{i + 1}" for i in range(self.grid.ndim)] + ["v"]
        return header, np.column_stack([pts, self.v.values.ravel()])


def _one_sided_gradient(v: np.ndarray, d: Sequence[float], nodes: np.ndarray, interior: np.ndarray,
                        signed: bool) -> np.ndarray:
    """Gradient at boundary nodes from first-order differences toward the interior."""
    shape = v.shape
    nd = v.ndim
    out = np.zeros((len(nodes), nd))
    for k in range(nd):
        for i, node in enumerate(nodes):
            best, val = -1.0, 0.0
            for step in (1, -1):
                nb = list(node)
                nb[k] += step
                if not 0 <= nb[k] < shape[k]:
                    continue
                diff = (v[tuple(nb)] - v[tuple(node)]) / d[k] * step
                score = v[tuple(nb)] if signed else abs(diff)
                if score > best:
                    best, val = score, diff
            out[i, k] = val
    return out


def solve_barrier(cf: CoefficientField, x0: Sequence[float], r: float, epsilon: float,
                  cells_per_r: int = 16, r0: float | None = None,
                  profile: CutoffProfile | None = None,
                  coefficients: ExtendedCoefficients | None = None) -> BarrierInstance:
    """Solve the barrier Dirichlet problem on a local grid of spacing ``r / cells_per_r``.

    ``D_r`` is discretised with nearest-node snapping: nodes inside take part
    in the solve; all others carry ``eps/3 (f_r - x_n)^+``, which is the exact
    boundary value on the lateral wall and the bottom and 0 on or above the
    graph.
    """
    profile = profile or make_cutoff()
    x0 = np.asarray(x0, dtype=float)
    n = cf.n
    if n < 2:
        raise PreconditionError("the barrier needs at least one cross-section direction")
    if not 0 < epsilon < 1:
        raise PreconditionError("epsilon must lie in (0, 1)")
    if r <= 0:
        raise PreconditionError("r must be positive")
    max_r0 = clearance_radius(cf.grid, x0)
    r0 = max_r0 if r0 is None else r0
    if r0 > max_r0 * (1 + 1e-12) or r >= r0:
        raise PreconditionError(
            f"need r < r0 <= {max_r0:.6g} (closed 2 r0 ball inside the domain); got r={r:.6g}, r0={r0:.6g}")
    l = cf.grid.upper[-1]
    coefficients = coefficients or ExtendedCoefficients(cf)

    m = int(cells_per_r)
    d = r / m
    origin = tuple(x0[:-1] - 2 * r) + (l - 2 * r,)
    shape = (4 * m + 1,) * (n - 1) + (3 * m + 1,)
    grid = Grid(origin, (d,) * n, shape)
    mesh = grid.mesh()
    xprime = np.stack(mesh[:-1], axis=-1)
    z = mesh[-1]
    fr = bump_height(profile, xprime, x0[:-1], r, l)
    dist = np.sqrt(np.sum((xprime - x0[:-1]) ** 2, axis=-1))
    tiny = 1e-9 * d
    interior = (dist < 2 * r - tiny) & (z > l - 2 * r + tiny) & (z < fr - tiny)

    # f_r - x_n <= 3r holds exactly on D_r; the clamp removes coordinate roundoff
    # clamp after scaling so the top of the data is exactly eps*r
    bval = np.minimum((epsilon / 3.0) * np.clip(fr - z, 0.0, 3.0 * r), epsilon * r)
    bval = np.where(interior | (z >= fr - tiny), 0.0, bval)
    a_loc, h_loc = coefficients.sample(np.stack(mesh, axis=-1))
    op = FluxOperator(grid, a_loc, h_loc)
    ones = np.ones(shape)
    free = interior.ravel()
    rhs = -op.residual(bval, ones).ravel()[free]
    A = op.matrix().tocsr()[free][:, free].tocsc()
    sol = spla.spsolve(A, rhs)
    res = float(np.linalg.norm(A @ sol - rhs))
    if not np.all(np.isfinite(sol)) or res > 1e-8 * max(1.0, float(np.linalg.norm(rhs))):
        raise SolverError("barrier solve failed", {"residual": res})
    v = bval.ravel().copy()
    v[free] = sol
    v = v.reshape(shape)

    graph = _graph_nodes(interior, z, fr, dist, r, tiny)
    grads = _one_sided_gradient(v, grid.spacing, graph, interior, signed=False)
    trace = np.sqrt(np.sum(grads ** 2, axis=1)) if len(graph) else np.zeros(0)
    x0_bar = x0.copy()
    x0_bar[-1] = l
    return BarrierInstance(x0, x0_bar, float(r), float(epsilon), GridField(grid, v), interior,
                           graph, trace, l, profile)


def _graph_nodes(interior, z, fr, dist, r, tiny) -> np.ndarray:
    """Snapped nodes of ``G_r``: first node on or above the graph over an interior node."""
    above = ~interior & (z >= fr - tiny)
    below_interior = np.zeros_like(interior)
    below_interior[..., 1:] = interior[..., :-1]
    sel = above & below_interior & (dist <= r + tiny)
    return np.argwhere(sel)


def gradient_trace_bound(b: BarrierInstance) -> float:
    """Largest sampled ``|grad v|`` on ``G_r``."""
    return float(np.max(b.gradient_trace)) if b.gradient_trace.size else 0.0


def barrier_bounds(b: BarrierInstance) -> dict:
    """Discrete max-principle bounds ``0 <= v <= eps r`` and ``v = 0`` on the graph."""
    v = b.v.values
    graph_vals = v[tuple(b.graph_nodes.T)] if len(b.graph_nodes) else np.zeros(0)
    above = ~b.interior & (b.grid.mesh()[-1] >= b.f_r(b.xprime_points()) - 1e-9 * b.grid.h)
    return {
        "min_v": float(v.min()),
        "max_v": float(v.max()),
        "eps_r": b.epsilon * b.r,
        "within_bounds": bool(v.min() >= 0.0 and v.max() <= b.epsilon * b.r),
        "graph_zero": bool(np.all(graph_vals == 0.0) and np.all(v[above] == 0.0)),
    }


def default_sweep(epsilons: Sequence[float], r_fractions: Sequence[float], r0: float) -> list[tuple[float, float]]:
    """(eps, r) pairs with ``r = fraction * min(r0, eps)``."""
    return [(float(e), float(f) * min(r0, float(e))) for e in epsilons for f in r_fractions]


def estimate_C2(cf: CoefficientField, x0: Sequence[float], samples: Sequence[tuple[float, float]],
                cells_per_r: int = 16, r0: float | None = None, executor=None) -> float:
    """``max trace / eps^(1 - n/p)`` over the sweep."""
    if not samples:
        raise ParameterError("empty parameter sweep")
    coeffs = ExtendedCoefficients(cf)
    expo = 1.0 - cf.n / cf.p

    def one(sample):
        eps, r = sample
        b = solve_barrier(cf, x0, r, eps, cells_per_r=cells_per_r, r0=r0, coefficients=coeffs)
        return gradient_trace_bound(b) / eps ** expo

    values = list(executor.map(one, samples)) if executor else [one(s) for s in samples]
    return float(max(values))


def epsilon0(C2: float, Lam: float, h_lower: float, theta0: float, p: float, n: int) -> float:
    """``min(1 - 1e-9, (h_lower / (C2 Lam sqrt(1 + theta0^2)))^(p / (p - n)))``."""
    if p <= n:
        raise ParameterError(f"need p > n (got p={p}, n={n})")
    if C2 <= 0 or Lam <= 0 or h_lower <= 0:
        raise ParameterError("C2, Lambda and h_lower must be positive")
    base = h_lower / (C2 * Lam * math.sqrt(1.0 + theta0 ** 2))
    return float(min(1.0 - EPS_CLAMP, base ** (p / (p - n))))


@dataclass(frozen=True)
class BarrierConstants:
    C1: float
    C2: float
    theta0: float
    epsilon0: float
    r0: float
    r1: float
    C3: float
    x0: tuple = ()

    def __post_init__(self):
        for name in ("C1", "C2", "theta0", "epsilon0", "r0", "r1", "C3"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if self.r1 > self.r0 or self.epsilon0 >= 1:
            raise ParameterError("inconsistent barrier constants")

    @classmethod
    def build(cls, C1: float, C2: float, cf: CoefficientField, r0: float, x0=(),
              profile: CutoffProfile | None = None) -> "BarrierConstants":
        theta0 = (profile or make_cutoff()).theta0
        eps0 = epsilon0(C2, cf.Lam, cf.h_lower, theta0, cf.p, cf.n)
        return cls(C1, C2, theta0, eps0, r0, min(r0, eps0), cf.Lam * C1 + cf.h_upper,
                   tuple(float(v) for v in x0))

    @property
    def r2(self) -> float:
        return self.r1

    def as_dict(self) -> dict:
        return {"C1": self.C1, "C2": self.C2, "C3": self.C3, "theta0": self.theta0,
                "epsilon0": self.epsilon0, "r0": self.r0, "r1": self.r1, "r2": self.r2,
                "x0": list(self.x0)}


def lipschitz_constant(sol: Solution, x0: Sequence[float], r0: float) -> float:
    """Max discrete ``|grad u|`` over ``K0 = closed B'_r0(x0') x [x0n - r0, l]``."""
    grid = sol.grid
    u = sol.u.values
    grads = np.gradient(u, *grid.spacing) if grid.ndim > 1 else [np.gradient(u, grid.spacing[0])]
    mag = np.sqrt(sum(g ** 2 for g in grads))
    mesh = grid.mesh()
    x0 = np.asarray(x0, dtype=float)
    tiny = 1e-9 * grid.h
    mask = mesh[-1] >= x0[-1] - r0 - tiny
    if grid.ndim > 1:
        dist = np.sqrt(sum((mesh[k] - x0[k]) ** 2 for k in range(grid.ndim - 1)))
        mask &= dist <= r0 + tiny
    return float(mag[mask].max()) if mask.any() else 0.0


def supersolution_flux_check(b: BarrierInstance, cf: CoefficientField, tol: float,
                             consts: BarrierConstants | None = None,
                             coefficients: ExtendedCoefficients | None = None) -> dict:
    """Evaluate ``a grad v . nu + h nu_n`` on the top and graph parts of ``C_r``.

    Top part: nodes on ``x_n = l`` with ``|x' - x0'| < r`` and ``f_r >= l``
    (``nu = e_n``, centred gradient).  Graph part: snapped graph nodes with
    ``|x' - x0'| < r`` and ``f_r < l``, one-sided gradient toward ``D_r``.
    """
    if consts is not None and b.r >= consts.r1:
        raise PreconditionError(f"r={b.r:.6g} must be below r1={consts.r1:.6g}")
    coefficients = coefficients or ExtendedCoefficients(cf)
    grid = b.grid
    v = b.v.values
    mesh = grid.mesh()
    xprime = np.stack(mesh[:-1], axis=-1)
    dist = np.sqrt(np.sum((xprime - b.x0[:-1]) ** 2, axis=-1))
    fr = b.f_r(xprime)
    tiny = 1e-9 * grid.h
    m = int(round(b.r / grid.spacing[-1]))
    j_top = 2 * m
    values = []
    parts = {"top": [], "graph": []}

    top_nodes = np.argwhere((dist < b.r - tiny) & (fr >= b.l - tiny) &
                            (np.arange(grid.shape[-1]) == j_top)[(None,) * (grid.ndim - 1)])
    if len(top_nodes):
        gr = np.gradient(v, *grid.spacing)
        pts = np.array([grid.node(nd) for nd in top_nodes])
        pts[:, -1] = b.l
        a_s, h_s = coefficients.sample(pts)
        for i, nd in enumerate(top_nodes):
            gv = np.array([g[tuple(nd)] for g in gr])
            val = float((a_s[i] @ gv)[-1] + h_s[i])
            parts["top"].append(val)

    graph = b.graph_nodes
    if len(graph):
        sel = np.array([dist[tuple(nd)] < b.r - tiny and fr[tuple(nd)] < b.l - tiny for nd in graph])
        graph = graph[sel] if sel.size else graph
    if len(graph):
        grads = _one_sided_gradient(v, grid.spacing, graph, b.interior, signed=True)
        pts = np.array([grid.node(nd) for nd in graph])
        slope = bump_slope(b.profile, pts[:, :-1], b.x0[:-1], b.r)
        nu = np.concatenate([-slope, np.ones((len(pts), 1))], axis=1)
        nu /= np.linalg.norm(nu, axis=1, keepdims=True)
        pts_on = pts.copy()
        pts_on[:, -1] = b.f_r(pts[:, :-1])
        a_s, h_s = coefficients.sample(pts_on)
        for i in range(len(pts)):
            val = float((a_s[i] @ grads[i]) @ nu[i] + h_s[i] * nu[i, -1])
            parts["graph"].append(val)

    values = parts["top"] + parts["graph"]
    fmin = float(min(values)) if values else math.inf
    return {
        "epsilon": b.epsilon,
        "r": b.r,
        "flux_min": fmin,
        "flux_min_top": float(min(parts["top"])) if parts["top"] else None,
        "flux_min_graph": float(min(parts["graph"])) if parts["graph"] else None,
        "points": len(values),
        "passed": bool(fmin >= -tol),
    }


def comparison_test(sol: Solution, b: BarrierInstance, tol: float) -> dict:
    """Check the comparison hypothesis ``u <= v`` on ``dOmega_r`` and its conclusion.

    ``u`` is interpolated (multilinearly) onto the barrier grid.  Status is
    ``not-applicable`` when the hypothesis fails, ``pass`` when ``u <= tol``
    on ``C_{r/2} x [l - r, l]``, ``violation`` otherwise.
    """
    ug = sol.grid
    bg = b.grid
    if ug.ndim != bg.ndim:
        raise ValueError("solution and barrier live in different dimensions")
    x0 = b.x0
    lo_need = np.concatenate([x0[:-1] - b.r, [b.l - 2 * b.r]])
    hi_need = np.concatenate([x0[:-1] + b.r, [b.l]])
    if np.any(lo_need < np.asarray(ug.origin) - 1e-12) or np.any(hi_need > np.asarray(ug.upper) + 1e-12):
        raise ValueError("barrier region is not covered by the solution grid")
    if abs(ug.upper[-1] - b.l) > 1e-9:
        raise ValueError("solution and barrier disagree on the top height")

    mesh = bg.mesh()
    xprime = np.stack(mesh[:-1], axis=-1)
    z = mesh[-1]
    dist = np.sqrt(np.sum((xprime - x0[:-1]) ** 2, axis=-1))
    tiny = 1e-9 * bg.h
    inside = (dist < b.r - tiny) & (z > b.l - 2 * b.r + tiny) & (z < b.l - tiny)
    neighbour = np.zeros_like(inside)
    for k in range(bg.ndim):
        for step in (1, -1):
            neighbour |= np.roll(inside, step, axis=k)
    boundary = neighbour & ~inside & (z < b.l - tiny) & (z > b.l - 2 * b.r - tiny) & (dist < b.r + bg.h)

    interp = RegularGridInterpolator(ug.axes(), sol.u.values, method="linear",
                                     bounds_error=False, fill_value=None)
    pts = np.stack(mesh, axis=-1)
    u_loc = interp(pts.reshape(-1, bg.ndim)).reshape(bg.shape)
    v = b.v.values
    gap = u_loc[boundary] - v[boundary]
    hyp = bool(np.all(gap <= tol)) if gap.size else True
    cyl = (dist < 0.5 * b.r - tiny) & (z >= b.l - b.r - tiny) & (z <= b.l + tiny)
    max_u_cyl = float(u_loc[cyl].max()) if cyl.any() else 0.0
    concl = max_u_cyl <= tol
    status = "not-applicable" if not hyp else ("pass" if concl else "violation")
    return {
        "hypothesis": hyp,
        "conclusion": concl if hyp else None,
        "status": status,
        "max_gap_boundary": float(gap.max()) if gap.size else 0.0,
        "max_u_boundary": float(u_loc[boundary].max()) if boundary.any() else 0.0,
        "max_u_cylinder": max_u_cyl,
        "eps_r": b.epsilon * b.r,
    }
