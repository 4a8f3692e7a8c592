"""Static figures: an SVG heatmap of V and matplotlib PNG panels.

The SVG is written by hand so that its bytes depend only on the data: one
``rect`` per box, followed by one outline ``path`` per Morse set.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .cubgrid import CubicalSet

SVG_MAX_DEPTH = 64
CELL = 8  # pixels per box


class RenderError(ValueError):
    pass


def _colormap(name: str = "viridis"):
    from matplotlib import colormaps

    return colormaps[name]


def _hex(rgba) -> str:
    r, g, b = (int(round(255 * c)) for c in rgba[:3])
    return f"#{r:02x}{g:02x}{b:02x}"


def _outline_segments(s: CubicalSet) -> list[tuple[int, int, int, int]]:
    """Grid-unit edges between boxes of ``s`` and boxes outside it."""
    arr = np.pad(s.as_array(), 1, constant_values=False)
    segs = []
    nx, ny = s.grid.shape
    for i in range(nx):
        for j in range(ny):
            if not arr[i + 1, j + 1]:
                continue
            if not arr[i, j + 1]:
                segs.append((i, j, i, j + 1))
            if not arr[i + 2, j + 1]:
                segs.append((i + 1, j, i + 1, j + 1))
            if not arr[i + 1, j]:
                segs.append((i, j, i + 1, j))
            if not arr[i + 1, j + 2]:
                segs.append((i, j + 1, i + 1, j + 1))
    return segs


def svg_heatmap(values: np.ndarray, morse_sets: Sequence[CubicalSet], vmax: float | None = None) -> str:
    if not morse_sets:
        raise RenderError("need the Morse sets to draw overlays")
    grid = morse_sets[0].grid
    if grid.dim != 2:
        raise RenderError("SVG heatmaps are drawn for planar grids only")
    if max(grid.shape) > SVG_MAX_DEPTH:
        raise RenderError(f"SVG output is limited to depth {SVG_MAX_DEPTH} per axis")
    nx, ny = grid.shape
    vals = np.asarray(values, dtype=float)
    top = float(vmax if vmax is not None else max(np.nanmax(vals), 1e-12))
    cmap = _colormap()
    width, height = nx * CELL, ny * CELL
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
    ]
    for b in range(grid.size):
        i, j = divmod(b, ny)
        y = (ny - 1 - j) * CELL
        color = _hex(cmap(min(max(vals[b] / top, 0.0), 1.0)))
        out.append(f'<rect x="{i * CELL}" y="{y}" width="{CELL}" height="{CELL}" fill="{color}"/>')
    for k, comp in enumerate(morse_sets, 1):
        d = " ".join(
            f"M{x0 * CELL} {(ny - y0) * CELL}L{x1 * CELL} {(ny - y1) * CELL}"
            for x0, y0, x1, y1 in _outline_segments(comp)
        )
        out.append(f'<path id="M{k}" d="{d}" fill="none" stroke="#d62728" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _label_anchor(comp: CubicalSet) -> np.ndarray:
    """A box center on the component, as close as possible to its centroid."""
    pts = comp.grid.centers(comp.boxes())
    d = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
    return pts[int(np.argmin(d))]


def _extent(grid):
    return (grid.lower[0], grid.upper[0], grid.lower[1], grid.upper[1])


def _save(fig, path) -> None:
    fig.savefig(path, dpi=120, metadata={"Software": None})


def plot_lyapunov(values: np.ndarray, morse_sets: Sequence[CubicalSet], path: str | Path, title: str = "") -> None:
    """Heatmap of V over the grid with the Morse sets outlined."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    grid = morse_sets[0].grid
    if grid.dim != 2:
        raise RenderError("figures are drawn for planar grids only")
    img = np.asarray(values, dtype=float).reshape(grid.shape).T
    fig, ax = plt.subplots(figsize=(5.5, 4.6))
    im = ax.imshow(img, origin="lower", extent=_extent(grid), cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, label="V")
    xs = np.linspace(grid.lower[0], grid.upper[0], grid.shape[0] + 1)
    ys = np.linspace(grid.lower[1], grid.upper[1], grid.shape[1] + 1)
    for k, comp in enumerate(morse_sets, 1):
        ax.contour(
            0.5 * (xs[1:] + xs[:-1]), 0.5 * (ys[1:] + ys[:-1]), comp.as_array().T.astype(float),
            levels=[0.5], colors="tab:red", linewidths=1.0,
        )
        ax.annotate(f"M{k}", _label_anchor(comp), color="white", fontsize=8, ha="center", va="center")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_filtration(neighborhoods: Sequence[CubicalSet], morse_sets: Sequence[CubicalSet], path: str | Path,
                    title: str = "") -> None:
    """Each box coloured by the first ``W_k`` containing it; Morse sets on top."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import ListedColormap

    grid = neighborhoods[0].grid
    if grid.dim != 2:
        raise RenderError("figures are drawn for planar grids only")
    level = np.full(grid.size, len(neighborhoods) + 1, dtype=float)
    for k in range(len(neighborhoods), 0, -1):
        level[neighborhoods[k - 1].mask] = k
    morse = np.zeros(grid.size)
    for k, comp in enumerate(morse_sets, 1):
        morse[comp.mask] = k
    l = len(neighborhoods)
    cmap = ListedColormap(_colormap("Pastel1")(np.arange(l + 1) % 9))
    fig, ax = plt.subplots(figsize=(5.0, 4.6))
    ax.imshow(level.reshape(grid.shape).T, origin="lower", extent=_extent(grid), cmap=cmap,
              vmin=0.5, vmax=l + 1.5, interpolation="nearest")
    shown = np.ma.masked_equal(morse.reshape(grid.shape).T, 0)
    ax.imshow(shown, origin="lower", extent=_extent(grid), cmap="Dark2", vmin=1, vmax=max(l, 2),
              interpolation="nearest")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(title or "first neighbourhood W_k per box, Morse sets dark")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
