"""Free-boundary extraction and discrete checks of the solution structure."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import Grid
from .solver import DEAD, FREE, TOP, Solution


@dataclass(frozen=True)
class FreeBoundaryProfile:
    """Height ``phi`` of the wet region over every node column."""

    grid: Grid
    phi: np.ndarray
    u_threshold: float
    converged: bool = True

    @property
    def l(self) -> float:
        return self.grid.upper[-1]


@dataclass(frozen=True)
class FreeBoundarySet:
    """Grid cells covering the graph of ``phi``; ``cells`` holds lower-corner indices."""

    grid: Grid
    cells: np.ndarray

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def cell_size(self) -> tuple[float, ...]:
        return self.grid.spacing

    def centers(self) -> np.ndarray:
        if len(self.cells) == 0:
            return np.zeros((0, self.grid.ndim))
        o = np.asarray(self.grid.origin)
        d = np.asarray(self.grid.spacing)
        return o + (self.cells + 0.5) * d

    def bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        if len(self.cells) == 0:
            return None
        c = self.centers()
        half = 0.5 * np.asarray(self.grid.spacing)
        return c.min(axis=0) - half, c.max(axis=0) + half


def extract_profile(sol: Solution, u_threshold: float | None = None) -> FreeBoundaryProfile:
    """``phi`` = last node with ``u > u_threshold`` plus half a cell, or 0."""
    thr = sol.params.threshold if u_threshold is None else float(u_threshold)
    if not sol.converged:
        warnings.warn("extracting a profile from a non-converged solution", RuntimeWarning)
    grid = sol.grid
    u = sol.u.values
    wet = (u > thr) & (sol.kind != DEAD)
    nz = grid.shape[-1]
    z = grid.axes()[-1]
    any_wet = wet.any(axis=-1)
    last = nz - 1 - np.argmax(wet[..., ::-1], axis=-1)
    phi = np.where(any_wet, z[np.clip(last, 0, nz - 1)] - grid.origin[-1] + 0.5 * grid.spacing[-1], 0.0)
    phi = np.clip(phi, 0.0, grid.upper[-1] - grid.origin[-1])
    return FreeBoundaryProfile(grid, phi, thr, sol.converged)


def profile_from_function(grid: Grid, psi) -> FreeBoundaryProfile:
    """Profile with prescribed heights ``psi(*x')`` (for synthetic sets)."""
    xp = np.meshgrid(*grid.axes()[:-1], indexing="ij") if grid.ndim > 1 else []
    phi = np.broadcast_to(np.asarray(psi(*xp), dtype=float), grid.shape[:-1]).copy()
    return FreeBoundaryProfile(grid, phi, 0.0)


def fb_cells(profile: FreeBoundaryProfile) -> FreeBoundarySet:
    """Cells covering the graph of ``phi``, one column of cells per cross-section cell.

    A column gets the cell holding the mean corner value of ``phi``; where
    the corner values are two or more cells apart (steep graph) it gets the
    whole vertical run between them so the cover stays connected.  Columns
    where ``phi`` vanishes at every corner contribute nothing.
    """
    grid = profile.grid
    dz = grid.spacing[-1]
    nz_cells = grid.shape[-1] - 1
    phi = np.asarray(profile.phi, dtype=float)
    if grid.ndim == 1:
        if phi <= 0:
            return FreeBoundarySet(grid, np.zeros((0, 1), dtype=int))
        j = min(int(np.floor(float(phi) / dz + 1e-9)), nz_cells - 1)
        return FreeBoundarySet(grid, np.array([[j]]))
    corner_views = []
    for offs in itertools.product((0, 1), repeat=grid.ndim - 1):
        sl = tuple(slice(o, o + m - 1) for o, m in zip(offs, phi.shape))
        corner_views.append(phi[sl])
    stack = np.stack(corner_views)
    lo, hi, mean = stack.min(axis=0), stack.max(axis=0), stack.mean(axis=0)
    active = hi > 0
    if grid.ndim > 2:
        # cross-section cells must sit inside the inscribed disc
        centers = np.meshgrid(*[a[:-1] + 0.5 * d for a, d in zip(grid.axes()[:-1], grid.spacing[:-1])],
                              indexing="ij")
        mid = [0.5 * (o + u) for o, u in zip(grid.origin[:-1], grid.upper[:-1])]
        radius = 0.5 * min(u - o for o, u in zip(grid.origin[:-1], grid.upper[:-1]))
        r = np.sqrt(sum((c - m) ** 2 for c, m in zip(centers, mid)))
        active &= r < radius
    j_lo = np.clip(np.floor(lo / dz + 1e-9).astype(int), 0, nz_cells - 1)
    j_hi = np.clip(np.floor(hi / dz + 1e-9).astype(int), 0, nz_cells - 1)
    j_mid = np.clip(np.floor(mean / dz + 1e-9).astype(int), 0, nz_cells - 1)
    steep = j_hi - j_lo >= 2
    j_lo = np.where(steep, j_lo, j_mid)
    j_hi = np.where(steep, j_hi, j_mid)
    cells = []
    for idx in zip(*np.nonzero(active)):
        for j in range(j_lo[idx], j_hi[idx] + 1):
            cells.append(idx + (j,))
    arr = np.array(cells, dtype=int).reshape(-1, grid.ndim)
    return FreeBoundarySet(grid, arr)


@dataclass
class StructureReport:
    down_closed_violations: int
    monotone_violations: int
    zero_ball_violations: int
    zero_balls: int
    indicator_mismatch_fraction: float
    indicator_bound: float

    @property
    def down_closed(self) -> bool:
        return self.down_closed_violations == 0

    @property
    def chi_monotone(self) -> bool:
        return self.monotone_violations == 0

    @property
    def zero_ball_ok(self) -> bool:
        return self.zero_ball_violations == 0

    @property
    def indicator_ok(self) -> bool:
        return self.indicator_mismatch_fraction <= self.indicator_bound

    @property
    def passed(self) -> bool:
        return self.down_closed and self.chi_monotone and self.zero_ball_ok and self.indicator_ok

    def as_dict(self) -> dict:
        return {
            "down_closed_violations": self.down_closed_violations,
            "monotone_violations": self.monotone_violations,
            "zero_ball_violations": self.zero_ball_violations,
            "zero_balls": self.zero_balls,
            "indicator_mismatch_fraction": self.indicator_mismatch_fraction,
            "indicator_bound": self.indicator_bound,
            "passed": self.passed,
        }


def _disc(radius_cells: np.ndarray, strict: bool) -> np.ndarray:
    ext = [int(np.ceil(r)) for r in radius_cells]
    grids = np.meshgrid(*[np.arange(-e, e + 1) for e in ext], indexing="ij")
    dist2 = sum((g / r) ** 2 for g, r in zip(grids, radius_cells))
    return dist2 < 1 - 1e-12 if strict else dist2 <= 1 + 1e-12


def check_structure(sol: Solution, tol: float | None = None, ball_cells: float = 2.0) -> StructureReport:
    """Discrete versions of the monotonicity and support properties.

    (a) ``{u > tol}`` is down-closed in each column; (b) ``chi`` does not
    increase upward; (c) inside and above any ball where ``u`` vanishes
    (with a one-cell margin) ``chi <= tol``; (d) the share of free nodes
    where ``chi`` differs from the indicator of ``{u > tol}``.
    """
    tol = sol.params.threshold if tol is None else float(tol)
    grid = sol.grid
    u, chi, kind = sol.u.values, sol.chi.values, sol.kind
    free = kind == FREE
    live = (kind != DEAD) & (kind != TOP)
    wet = u > tol

    # (a): a wet node with any live dry node below it in its column
    dry_below = np.cumsum((~wet & live), axis=-1) > 0
    dry_strictly_below = np.concatenate(
        [np.zeros(grid.shape[:-1] + (1,), bool), dry_below[..., :-1]], axis=-1)
    column_is_wall = ~(free.any(axis=-1, keepdims=True))
    down_viol = int(np.sum(wet & live & dry_strictly_below & ~column_is_wall))

    # (b)
    up = chi[..., 1:] - chi[..., :-1]
    pair_live = live[..., 1:] & live[..., :-1]
    mono_viol = int(np.sum((up > tol) & pair_live))

    # (c)
    d = np.asarray(grid.spacing)
    radius = ball_cells * grid.h
    zero = (~wet) & free
    margin_elem = _disc((radius + grid.h) / d, strict=False)
    centers = ndimage.binary_erosion(zero, structure=margin_elem, border_value=0)
    n_balls = int(centers.sum())
    region = ndimage.binary_dilation(centers, structure=_disc(radius / d, strict=True))
    if grid.ndim > 1:
        horiz = _disc(radius / d[:-1], strict=True)[..., None]
        strip_seed = ndimage.binary_dilation(centers, structure=horiz)
    else:
        strip_seed = centers
    above = np.cumsum(strip_seed, axis=-1) > 0
    above = np.concatenate([np.zeros(grid.shape[:-1] + (1,), bool), above[..., :-1]], axis=-1)
    region |= above
    ball_viol = int(np.sum(region & free & (chi > tol)))

    # (d)
    mismatch = np.abs(chi - wet.astype(float)) > tol
    frac = float(mismatch[free].mean()) if free.any() else 0.0
    return StructureReport(down_viol, mono_viol, ball_viol, n_balls, frac, 4 * grid.h)
