"""Discretisation and solution of the free-boundary problem on a node grid.

Unknowns are the pressure-like field ``u >= 0`` and the saturation ``chi`` in
[0, 1] with ``u (1 - chi) = 0``.  The flux through a face is
``a grad u + h chi e_n``; the gravity part of a vertical face takes ``chi``
from the upper node, which lets a dry node carry a fractional ``chi`` that
balances the flux coming from the wet region below it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import CoefficientField, DomainSpec, ParameterError, make_function
from .grid import Grid, GridField, checkerboard_colors

log = logging.getLogger(__name__)

FREE, DIRICHLET, TOP, DEAD = 0, 1, 2, 3


class SolverError(RuntimeError):
    """Linear solve failed or the iteration diverged; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def _sl(ndim: int, axis: int, s: slice) -> tuple:
    out = [slice(None)] * ndim
    out[axis] = s
    return tuple(out)


class FluxOperator:
    """Conservative flux-form operator ``R(u, chi) = -div(a grad u + h chi e_n)``.

    Off-diagonal entries of ``a`` use face averages of centred derivatives,
    giving the usual 3**n-point stencil.
    """

    def __init__(self, grid: Grid, a: np.ndarray, h: np.ndarray):
        self.grid = grid
        self.n = n = grid.ndim
        self.d = grid.spacing
        self.cross = []
        self.akk = []
        for k in range(n):
            lo, hi = _sl(n, k, slice(None, -1)), _sl(n, k, slice(1, None))
            self.akk.append(0.5 * (a[..., k, k][lo] + a[..., k, k][hi]))
            row = {}
            for m in range(n):
                if m != k and np.any(a[..., k, m] != 0):
                    row[m] = 0.5 * (a[..., k, m][lo] + a[..., k, m][hi])
            self.cross.append(row)
        lo, hi = _sl(n, n - 1, slice(None, -1)), _sl(n, n - 1, slice(1, None))
        self.hf = 0.5 * (h[lo] + h[hi])
        self.has_cross = any(self.cross)
        self.interior = tuple(slice(1, -1) for _ in range(n))

        diag = np.zeros(grid.shape)
        for k in range(n):
            lo_k, hi_k = _sl(n, k, slice(None, -1)), _sl(n, k, slice(1, None))
            diag[hi_k] += self.akk[k] / self.d[k] ** 2
            diag[lo_k] += self.akk[k] / self.d[k] ** 2
        self.diag = diag
        hc = np.zeros(grid.shape)
        hc[hi] = self.hf / self.d[-1]
        self.hc = hc

    def fluxes(self, u: np.ndarray, chi: np.ndarray | None) -> list[np.ndarray]:
        n, d = self.n, self.d
        grads = None
        if self.has_cross:
            grads = [np.gradient(u, d[m], axis=m) for m in range(n)]
        out = []
        for k in range(n):
            lo, hi = _sl(n, k, slice(None, -1)), _sl(n, k, slice(1, None))
            F = self.akk[k] * (u[hi] - u[lo]) / d[k]
            for m, coef in self.cross[k].items():
                F = F + coef * 0.5 * (grads[m][lo] + grads[m][hi])
            if k == n - 1 and chi is not None:
                F = F + self.hf * chi[hi]
            out.append(F)
        return out

    def divergence(self, fluxes: list[np.ndarray]) -> np.ndarray:
        n = self.n
        div = np.zeros(self.grid.shape)
        acc = 0.0
        for k, F in enumerate(fluxes):
            term = (F[_sl(n, k, slice(1, None))] - F[_sl(n, k, slice(None, -1))]) / self.d[k]
            idx = tuple(slice(None) if m == k else slice(1, -1) for m in range(n))
            acc = acc + term[idx]
        div[self.interior] = acc
        return div

    def residual(self, u: np.ndarray, chi: np.ndarray | None) -> np.ndarray:
        return -self.divergence(self.fluxes(u, chi))

    def matrix(self) -> sp.csr_matrix:
        """Sparse matrix of ``u -> R(u, 0)`` assembled by stencil probing."""
        shape, n = self.grid.shape, self.n
        idx = np.indices(shape)
        N = int(np.prod(shape))
        flat = np.arange(N).reshape(shape)
        rows, cols, vals = [], [], []
        for cls in np.ndindex(*(3,) * n):
            probe = np.ones(shape, dtype=bool)
            for k in range(n):
                probe &= idx[k] % 3 == cls[k]
            R = self.residual(probe.astype(float), None)
            off = [((cls[k] - idx[k]) % 3) for k in range(n)]
            off = [np.where(o == 2, -1, o) for o in off]
            j = [idx[k] + off[k] for k in range(n)]
            ok = R != 0
            for k in range(n):
                ok &= (j[k] >= 0) & (j[k] < shape[k])
            rows.append(flat[ok])
            cols.append(np.ravel_multi_index([jk[ok] for jk in j], shape))
            vals.append(R[ok])
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
        )


@dataclass(frozen=True)
class BoundaryData:
    """Node classification and Dirichlet values.

    ``kind`` marks FREE, DIRICHLET (``u = g``), TOP (the flattened Gamma,
    ``u = 0`` with a one-sided flux condition) and DEAD (outside the domain).
    """

    kind: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        kind = np.array(self.kind, dtype=np.int8)
        g = np.array(self.g, dtype=float)
        if kind.shape != g.shape:
            raise ParameterError("kind and g must share a shape")
        if np.any(g[kind == DIRICHLET] < 0):
            raise ParameterError("boundary data must be nonnegative")
        g = np.where((kind == TOP) | (kind == DEAD) | (kind == FREE), 0.0, g)
        kind.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "g", g)

    @classmethod
    def for_cylinder(cls, spec: DomainSpec, g) -> "BoundaryData":
        """Lateral wall and bottom carry ``g``; the top face is Gamma."""
        grid = spec.grid()
        g_fn = make_function(g, spec.n)
        kind = np.full(grid.shape, FREE, dtype=np.int8)
        kind[..., -1] = TOP
        kind[..., 0] = DIRICHLET
        kind[spec.lateral_mask(grid)] = DIRICHLET
        values = np.where(kind == DIRICHLET, g_fn(*grid.mesh()), 0.0)
        return cls(kind, values)

    @property
    def free(self) -> np.ndarray:
        return self.kind == FREE


@dataclass(frozen=True)
class SolverParams:
    tol_u: float = 1e-10
    tol_chi: float = 1e-10
    tol_comp: float = 1e-9
    tol_lin: float = 1e-9
    omega: float = 1.0
    u_threshold: float | None = None
    heaviside_width: float | None = None
    max_iterations: int = 50000
    sor: float | None = None
    check_every: int = 10

    def __post_init__(self):
        for name in ("tol_u", "tol_chi", "tol_comp", "tol_lin"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if not 0 < self.omega <= 1:
            raise ParameterError("omega must lie in (0, 1]")
        if self.sor is not None and not 0 < self.sor < 2:
            raise ParameterError("SOR factor must lie in (0, 2)")
        if self.max_iterations < 1:
            raise ParameterError("max_iterations must be positive")

    @property
    def threshold(self) -> float:
        return self.u_threshold if self.u_threshold is not None else 10 * self.tol_u

    def width(self, grid: Grid) -> float:
        return self.heaviside_width if self.heaviside_width is not None else 2 * grid.h


@dataclass(frozen=True)
class Solution:
    u: GridField
    chi: GridField
    kind: np.ndarray
    iterations: int
    converged: bool
    residuals: dict
    history: list = field(default_factory=list, compare=False)
    params: SolverParams = field(default_factory=SolverParams, compare=False)

    @property
    def grid(self) -> Grid:
        return self.u.grid

    @property
    def non_converged(self) -> bool:
        return not self.converged

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "residuals": {k: float(v) for k, v in self.residuals.items()},
            "history": self.history,
        }


def _monotone_envelope(chi: np.ndarray) -> np.ndarray:
    """Smallest field above ``chi`` that is nonincreasing along the last axis."""
    return np.flip(np.maximum.accumulate(np.flip(chi, axis=-1), axis=-1), axis=-1)


def solve_linear_stage(cf: CoefficientField, chi: GridField | np.ndarray, bc: BoundaryData,
                       tol_lin: float = 1e-9) -> GridField:
    """Solve ``div(a grad u) = -(h chi)_{x_n}`` with ``u`` fixed on non-free nodes."""
    chi_v = np.asarray(getattr(chi, "values", chi), dtype=float)
    if chi_v.shape != cf.grid.shape:
        raise ParameterError("chi does not match the coefficient grid")
    if np.any(chi_v < -1e-14) or np.any(chi_v > 1 + 1e-14):
        raise ParameterError("chi must lie in [0, 1]")
    op = FluxOperator(cf.grid, cf.a, cf.h)
    free = bc.free.ravel()
    u0 = bc.g.astype(float).copy()
    rhs = -op.residual(u0, chi_v).ravel()[free]
    A = op.matrix().tocsr()[free][:, free].tocsc()
    u = u0.ravel()
    if rhs.size:
        sol = spla.spsolve(A, rhs)
        res = float(np.linalg.norm(A @ sol - rhs))
        scale = float(np.linalg.norm(rhs))
        if not np.all(np.isfinite(sol)) or res > tol_lin * max(scale, 1.0):
            raise SolverError("linear stage did not reach tolerance",
                              {"residual": res, "rhs_norm": scale})
        u[free] = sol
    return GridField(cf.grid, u.reshape(cf.grid.shape))


def heaviside(u: np.ndarray, width: float) -> np.ndarray:
    return np.clip(u / width, 0.0, 1.0)


def update_chi(u: GridField | np.ndarray, chi_prev: GridField | np.ndarray,
               params: SolverParams, grid: Grid | None = None) -> GridField:
    """Relaxed Heaviside update, saturation where ``u`` is positive, then the
    column-wise monotone envelope."""
    grid = grid or getattr(u, "grid", None) or getattr(chi_prev, "grid")
    u_v = np.asarray(getattr(u, "values", u), dtype=float)
    c_v = np.asarray(getattr(chi_prev, "values", chi_prev), dtype=float)
    target = heaviside(u_v, params.width(grid))
    chi = np.clip(c_v + params.omega * (target - c_v), 0.0, 1.0)
    chi[u_v > params.threshold] = 1.0
    return GridField(grid, _monotone_envelope(chi))


def default_sor(grid: Grid, kind: np.ndarray) -> float:
    """Optimal SOR factor for the Dirichlet Laplacian on the bounding box."""
    rho_j = np.mean([math.cos(math.pi / (m - 1)) for m in grid.shape])
    return float(min(1.97, 2.0 / (1.0 + math.sqrt(max(1e-12, 1.0 - rho_j ** 2)))))


def _fixed_chi(bc: BoundaryData) -> np.ndarray:
    chi = np.where((bc.kind == DIRICHLET) & (bc.g > 0), 1.0, 0.0)
    return chi


def _local_update(u, chi, R, diag, hc, omega):
    """Exact node-wise balance for ``(u_i, chi_i)`` with ``chi_i`` in H(u_i)."""
    rest = R - diag * u - hc * chi
    r_wet = rest + hc
    target = np.where(r_wet < 0, -r_wet / diag, 0.0)
    u_new = np.maximum(0.0, u + omega * (target - u))
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.clip(-rest / hc, 0.0, 1.0)
    chi_new = np.where(u_new > 0, 1.0, frac)
    return u_new, chi_new


def _top_update(op: FluxOperator, u, chi, top_idx, below_idx):
    """On Gamma pick the largest chi in [0, 1] keeping the face flux <= 0."""
    if top_idx is None:
        return
    Fn = op.fluxes(u, chi)[-1]
    hf = op.hf[below_idx]
    flux = Fn[below_idx] - hf * chi[top_idx]
    chi[top_idx] = np.clip(-flux / hf, 0.0, 1.0)


def _top_indices(kind: np.ndarray):
    where = np.nonzero(kind == TOP)
    if where[0].size == 0:
        return None, None
    if np.any(where[-1] == 0):
        raise ParameterError("a TOP node needs a node below it")
    below = where[:-1] + (where[-1] - 1,)
    return where, below


def vi_residuals(cf: CoefficientField, bc: BoundaryData, u: np.ndarray, chi: np.ndarray) -> dict:
    op = FluxOperator(cf.grid, cf.a, cf.h)
    R = op.residual(u, chi)
    free = bc.free
    scale = float(np.max(op.diag[free])) if free.any() else 1.0
    top_idx, below = _top_indices(bc.kind)
    top_flux = 0.0
    if top_idx is not None:
        top_flux = float(np.max(op.fluxes(u, chi)[-1][below]))
    return {
        "complementarity": float(np.max(np.abs(u * (1 - chi)))) if u.size else 0.0,
        "pde": float(np.max(np.abs(R[free]))) / scale if free.any() else 0.0,
        "pde_raw": float(np.max(np.abs(R[free]))) if free.any() else 0.0,
        "top_flux_max": top_flux,
        "min_u": float(u.min()),
        "chi_min": float(chi.min()) + 0.0,
        "chi_max": float(chi.max()),
    }


def solve_vi(cf: CoefficientField, bc: BoundaryData, params: SolverParams | None = None,
             initial: tuple[np.ndarray, np.ndarray] | None = None) -> Solution:
    """Projected nonlinear SOR over the coupled node balances.

    Each sweep visits the colour classes in turn, solving every node's flux
    balance for ``u_i`` (wet) or ``chi_i`` (dry); the top face then receives
    the largest admissible ``chi``.  Convergence is declared when the sup-norm
    change of ``u`` and the mean change of ``chi`` fall below their
    tolerances.  Non-convergence is reported, not raised; growth of both the
    scaled VI residual and the update over three consecutive checks raises
    ``SolverError``.
    """
    params = params or SolverParams()
    grid = cf.grid
    op = FluxOperator(grid, cf.a, cf.h)
    kind = bc.kind
    free = kind == FREE
    colors = [c & free for c in checkerboard_colors(grid.shape, full=op.has_cross)]
    colors = [c for c in colors if c.any()]
    top_idx, below_idx = _top_indices(kind)
    omega = params.sor if params.sor is not None else default_sor(grid, kind)
    diag, hc = op.diag, op.hc

    if initial is not None:
        u = np.array(initial[0], dtype=float)
        chi = np.array(initial[1], dtype=float)
    else:
        u = np.maximum(solve_linear_stage(cf, np.ones(grid.shape), bc, params.tol_lin).values, 0.0)
        chi = np.where(u > 0, 1.0, 0.0)
    u[~free] = np.where(kind[~free] == DIRICHLET, bc.g[~free], 0.0)
    fixed = _fixed_chi(bc)
    chi[(kind == DIRICHLET) | (kind == DEAD)] = fixed[(kind == DIRICHLET) | (kind == DEAD)]
    _top_update(op, u, chi, top_idx, below_idx)

    history = []
    converged = False
    it = 0
    N = max(int(free.sum()), 1)
    growth = 0
    for it in range(1, params.max_iterations + 1):
        check = it % params.check_every == 0 or it == params.max_iterations
        if check:
            u_old, chi_old = u.copy(), chi.copy()
        for mask in colors:
            R = op.residual(u, chi)
            un, cn = _local_update(u[mask], chi[mask], R[mask], diag[mask], hc[mask], omega)
            u[mask] = un
            chi[mask] = cn
        _top_update(op, u, chi, top_idx, below_idx)
        if check:
            du = float(np.max(np.abs(u - u_old)))
            dchi = float(np.abs(chi - chi_old).sum()) / N
            res_it = vi_residuals(cf, bc, u, chi)["pde"]
            history.append({"iteration": it, "du": du, "dchi": dchi, "residual": res_it})
            prev = history[-2] if len(history) > 1 else None
            # divergence: the residual and the update grow together
            growth = growth + 1 if prev and res_it > prev["residual"] and du > prev["du"] else 0
            if not (np.isfinite(du) and np.isfinite(dchi)) or growth >= 3:
                raise SolverError(f"solve_vi diverged at iteration {it}", {"history": history[-4:]})
            if du < params.tol_u and dchi < params.tol_chi:
                converged = True
                break

    chi_env = _monotone_envelope(chi)
    envelope_change = float(np.max(np.abs(chi_env - chi))) if chi.size else 0.0
    res = vi_residuals(cf, bc, u, chi_env)
    res["envelope_change"] = envelope_change
    res["sor"] = omega
    if converged and res["complementarity"] > params.tol_comp:
        converged = False
    if not converged:
        log.warning("solve_vi stopped after %d iterations without convergence", it)
    return Solution(GridField(grid, u), GridField(grid, chi_env), kind.copy(), it, converged,
                    res, history, params)


def residual_report(sol: Solution, cf: CoefficientField, bc: BoundaryData | None = None) -> dict:
    """Complementarity, discrete VI residual and a flux conservation check.

    The VI residual is the largest violation over the nodal hat functions:
    ``|R_i|`` at free nodes, and the positive part of the face flux on the
    top boundary (test functions there may be positive).  Conservation
    compares the flux leaving through Gamma with the net flux entering
    through the remaining boundary.
    """
    u, chi = sol.u.values, sol.chi.values
    kind = sol.kind
    if bc is None:
        bc = BoundaryData(kind, np.where(kind == DIRICHLET, u, 0.0))
    op = FluxOperator(cf.grid, cf.a, cf.h)
    R = op.residual(u, chi)
    free = kind == FREE
    pde = float(np.max(np.abs(R[free]))) if free.any() else 0.0
    top_idx, below = _top_indices(kind)
    Fn = op.fluxes(u, chi)[-1]
    vi_top = float(max(0.0, np.max(Fn[below]))) if top_idx is not None else 0.0
    cell = float(np.prod(cf.grid.spacing))
    total_interior = float(R[free].sum() * cell)
    out_top = float(Fn[below].sum() * cell / cf.grid.spacing[-1]) if top_idx is not None else 0.0
    return {
        "complementarity": float(np.max(np.abs(u * (1 - chi)))),
        "pde": pde,
        "vi_top_violation": vi_top,
        "flux_out_top": out_top,
        "interior_imbalance": total_interior,
    }


def embed_physical_domain(spec: DomainSpec, a_fn, h_fn, g, shape: tuple[int, ...] | None = None,
                          **bounds) -> tuple[CoefficientField, BoundaryData]:
    """Discretise the curved-bottom domain directly on a bounding-box grid.

    Nodes at or below ``gamma`` are Dirichlet; in each column the first node
    at or above ``gamma + l`` is the top (Gamma) node and the ones above are
    dead.  Boundary positions are snapped to nodes (first order).
    """
    shape = shape or spec.grid_shape
    flat = spec.grid()
    xprime_axes = flat.axes()[:-1]
    xp = np.meshgrid(*xprime_axes, indexing="ij") if spec.n > 1 else []
    gam = spec.gamma_values(xp) if spec.n > 1 else np.zeros(())
    lo, hi = float(np.min(gam)), float(np.max(gam)) + spec.l
    dz = flat.spacing[-1]
    nz = int(math.ceil((hi - lo) / dz - 1e-9)) + 1
    grid = Grid(flat.origin[:-1] + (lo,), flat.spacing[:-1] + (dz,), flat.shape[:-1] + (nz,))
    mesh = grid.mesh()
    gam_full = np.broadcast_to(np.asarray(gam)[..., None], grid.shape)
    z = mesh[-1]
    kind = np.full(grid.shape, FREE, dtype=np.int8)
    below = z <= gam_full + 1e-12
    kind[below] = DIRICHLET
    above = z >= gam_full + spec.l - 1e-12
    first_above = above & ~np.concatenate([np.zeros(grid.shape[:-1] + (1,), bool), above[..., :-1]], -1)
    kind[above] = DEAD
    kind[first_above] = TOP
    lateral = spec.lateral_mask(grid)
    kind[lateral & ~above] = DIRICHLET
    kind[lateral & above] = DEAD
    # keep one Dirichlet layer under the free nodes; deeper ones are inert
    g_fn = make_function(g, spec.n)
    gv = np.where(kind == DIRICHLET, g_fn(*mesh), 0.0)
    a = np.asarray(a_fn(*mesh), dtype=float)
    if a.shape == (spec.n, spec.n):
        a = np.broadcast_to(a, grid.shape + a.shape)
    hv = np.broadcast_to(np.asarray(h_fn(*mesh), dtype=float), grid.shape)
    return CoefficientField(grid, a, hv, **bounds), BoundaryData(kind, gv)
