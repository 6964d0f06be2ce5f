"""Uniform tensor-product node grids and fields living on them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Node-centred uniform grid. The last axis is the vertical one (x_n)."""

    origin: tuple[float, ...]
    spacing: tuple[float, ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.origin) == len(self.spacing) == len(self.shape)):
            raise ValueError("origin, spacing and shape must have equal length")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("grid spacing must be positive")
        if any(m < 2 for m in self.shape):
            raise ValueError("every axis needs at least two nodes")

    @classmethod
    def from_bounds(cls, lower: Sequence[float], upper: Sequence[float], shape: Sequence[int]) -> "Grid":
        shape = tuple(int(m) for m in shape)
        spacing = tuple((hi - lo) / (m - 1) for lo, hi, m in zip(lower, upper, shape))
        return cls(tuple(float(v) for v in lower), spacing, shape)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def h(self) -> float:
        """Smallest axis spacing."""
        return min(self.spacing)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def upper(self) -> tuple[float, ...]:
        return tuple(o + d * (m - 1) for o, d, m in zip(self.origin, self.spacing, self.shape))

    def axes(self) -> list[np.ndarray]:
        return [o + d * np.arange(m) for o, d, m in zip(self.origin, self.spacing, self.shape)]

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def points(self) -> np.ndarray:
        """All node coordinates, shape ``(size, ndim)`` in C order."""
        return np.stack([c.ravel() for c in self.mesh()], axis=-1)

    def index_of(self, x: Sequence[float]) -> tuple[int, ...]:
        """Nearest node index to ``x`` (clipped into the grid)."""
        idx = []
        for xi, o, d, m in zip(x, self.origin, self.spacing, self.shape):
            idx.append(int(np.clip(np.rint((xi - o) / d), 0, m - 1)))
        return tuple(idx)

    def node(self, index: Sequence[int]) -> np.ndarray:
        return np.array([o + d * i for o, d, i in zip(self.origin, self.spacing, index)])


@dataclass(frozen=True)
class GridField:
    """Scalar (or matrix) values attached to every node of a grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape[: self.grid.ndim] != self.grid.shape:
            raise ValueError(f"field shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field contains non-finite values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.grid.shape

    @property
    def spacing(self) -> tuple[float, ...]:
        return self.grid.spacing


def checkerboard_colors(shape: Sequence[int], full: bool) -> list[np.ndarray]:
    """Boolean masks partitioning the nodes into independent sweep colours.

    ``full=False`` gives the red-black pair (enough for 2n+1 point stencils);
    ``full=True`` gives the 2**n parity classes that decouple stencils with
    diagonal neighbours.
    """
    idx = np.indices(shape)
    if not full:
        parity = idx.sum(axis=0) % 2
        return [parity == 0, parity == 1]
    code = np.zeros(shape, dtype=int)
    for k in range(len(shape)):
        code += (idx[k] % 2) << k
    return [code == c for c in range(2 ** len(shape))]
