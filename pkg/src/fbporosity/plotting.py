"""Figures for a finished run directory (headless Agg backend)."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .export import grid_from_points, read_node_csv  # noqa: E402


def plot_solution(run_dir: Path, out: Path) -> Path | None:
    sol_path = run_dir / "solution.csv"
    if not sol_path.exists():
        return None
    header, data = read_node_csv(sol_path)
    n = header.index("u")
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    if n == 1:
        order = np.argsort(data[:, 0])
        ax.plot(data[order, 0], data[order, 1], label="u")
        ax.plot(data[order, 0], data[order, 2], "--", label="chi")
        ax.set_xlabel("x1")
        ax.legend()
    elif n == 2:
        grid = grid_from_points(data[:, :2])
        u = data[:, 2].reshape(grid.shape)
        ext = [grid.origin[0], grid.upper[0], grid.origin[1], grid.upper[1]]
        im = ax.imshow(u.T, origin="lower", extent=ext, aspect="auto", cmap="viridis")
        fig.colorbar(im, ax=ax, label="u")
        phi_path = run_dir / "phi.csv"
        if phi_path.exists():
            _, phi = read_node_csv(phi_path)
            ax.plot(phi[:, 0], phi[:, 1], "w-", lw=1.2, label="free boundary")
            ax.legend(loc="upper right")
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
    else:
        plt.close(fig)
        return None
    ax.set_title("pressure")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_porosity(run_dir: Path, out: Path) -> Path | None:
    path = run_dir / "porosity.json"
    if not path.exists():
        return None
    rep = json.loads(path.read_text())
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for key, marker in (("r1_radii", "o"), ("grid_radii", "s")):
        entries = rep.get(key, {}).get("entries", [])
        if not entries:
            continue
        r = np.array([e["r"] for e in entries])
        d = np.array([e["delta_hat"] for e in entries])
        ax.scatter(r, d, s=8, marker=marker, alpha=0.5, label=key.replace("_", " "))
    d0 = rep.get("r1_radii", {}).get("delta0")
    if d0 is not None:
        ax.axhline(d0, color="k", ls=":", label="delta0")
    ax.set_xscale("log")
    ax.set_xlabel("r")
    ax.set_ylabel("empirical porosity")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_dimension(report: dict, out: Path) -> Path | None:
    dim = report.get("dimension") or {}
    if "counts" not in dim:
        return None
    s = np.asarray(dim["scales"])
    N = np.asarray(dim["counts"], dtype=float)
    x = np.log(1 / s)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.plot(x, np.log(N), "o", label="box counts")
    ax.plot(x, dim["slope"] * x + dim["intercept"], "-", label=f"slope {dim['slope']:.3f}")
    ax.set_xlabel("log(1/s)")
    ax.set_ylabel("log N(s)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_all(run_dir: Path, report: dict) -> list[Path]:
    run_dir = Path(run_dir)
    made = [plot_solution(run_dir, run_dir / "solution.png"),
            plot_porosity(run_dir, run_dir / "porosity.png"),
            plot_dimension(report, run_dir / "dimension.png")]
    return [p for p in made if p is not None]
