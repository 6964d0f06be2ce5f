"""CSV and JSON writers with byte-stable float formatting."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .free_boundary import FreeBoundaryProfile, FreeBoundarySet
from .grid import Grid, GridField
from .solver import Solution

FLOAT_FMT = "%.17g"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FLOAT_FMT % float(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def write_array_csv(path: Path, header: Sequence[str], data: np.ndarray) -> Path:
    path = Path(path)
    data = np.asarray(data, dtype=float).reshape(len(data), -1)
    with path.open("w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, data, fmt=FLOAT_FMT, delimiter=",")
    return path


def _coord_names(n: int) -> list[str]:
    return [f"x{k + 1}" for k in range(n)]


def write_solution(path: Path, sol: Solution) -> Path:
    grid = sol.grid
    data = np.column_stack([grid.points(), sol.u.values.ravel(), sol.chi.values.ravel()])
    return write_array_csv(path, _coord_names(grid.ndim) + ["u", "chi"], data)


def write_field(path: Path, f: GridField, name: str = "v") -> Path:
    data = np.column_stack([f.grid.points(), f.values.ravel()])
    return write_array_csv(path, _coord_names(f.grid.ndim) + [name], data)


def write_profile(path: Path, profile: FreeBoundaryProfile) -> Path:
    grid = profile.grid
    if grid.ndim == 1:
        return write_array_csv(path, ["phi"], np.atleast_2d(profile.phi))
    xp = np.stack([c.ravel() for c in np.meshgrid(*grid.axes()[:-1], indexing="ij")], axis=-1)
    data = np.column_stack([xp, np.ravel(profile.phi)])
    return write_array_csv(path, _coord_names(grid.ndim - 1) + ["phi"], data)


def write_cells(path: Path, fb: FreeBoundarySet) -> Path:
    return write_array_csv(path, _coord_names(fb.grid.ndim), fb.centers())


def read_node_csv(path: Path) -> tuple[list[str], np.ndarray]:
    """Read a CSV written by the writers above (single header row)."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def grid_from_points(points: np.ndarray) -> Grid:
    """Recover the uniform grid from node coordinates in C order."""
    axes = [np.unique(points[:, k]) for k in range(points.shape[1])]
    shape = tuple(len(a) for a in axes)
    if int(np.prod(shape)) != len(points):
        raise ValueError("node coordinates do not form a full tensor grid")
    return Grid.from_bounds([a[0] for a in axes], [a[-1] for a in axes], shape)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if v != v or v in (float("inf"), float("-inf")):
            return None
        return v
    return obj


def write_json(path: Path, obj) -> Path:
    path = Path(path)
    # repr of a Python float is the shortest string that round-trips exactly
    text = json.dumps(to_jsonable(obj), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n")
    return path


def write_grid_csv(path: Path, values: np.ndarray) -> Path:
    """Node values in C order under a ``# shape=`` header line."""
    path = Path(path)
    values = np.asarray(values, dtype=float)
    with path.open("w", newline="\n") as fh:
        fh.write("# shape=" + ",".join(str(m) for m in values.shape) + "\n")
        np.savetxt(fh, values.reshape(values.shape[0], -1), fmt=FLOAT_FMT, delimiter=",")
    return path


def load_grid_csv(path: Path) -> np.ndarray:
    path = Path(path)
    with path.open() as fh:
        first = fh.readline().strip()
    if not first.startswith("# shape="):
        raise ValueError(f"{path}: first line must be '# shape=n1,n2,...'")
    shape = tuple(int(v) for v in first[len("# shape="):].split(","))
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=1).ravel()
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: {data.size} values for shape {shape}")
    return data.reshape(shape)


def csv_function(path: Path):
    """Callable returning the stored node values; the caller's grid must match."""
    values = load_grid_csv(path)

    def fn(*xs):
        shape = np.broadcast_shapes(*[np.shape(x) for x in xs]) if xs else ()
        if shape != values.shape:
            raise ValueError(f"grid CSV {Path(path).name} has shape {values.shape}, grid is {shape}")
        return values.copy()

    return fn
