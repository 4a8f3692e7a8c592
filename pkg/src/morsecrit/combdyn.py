"""Combinatorial outer approximation of the time-tau flow map.

Every box is seeded with a ``samples_per_axis ** m`` lattice of points
(corners included).  The lattice is pushed forward by the RK4 flow map, the
boxes that are hit are collected and the result is grown by ``bloat_rings``
Moore rings.  This is a sampled, non-rigorous enclosure: the bloat is the knob
for checking that the resulting Morse structure is stable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .cubgrid import CubicalGrid, CubicalSet, moore_offsets
from .flowsim import IntegrationBlowup, VectorFieldSpec, flow_points

HEADER = "outer-map v1"


class MapParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


class BoxBlowup(RuntimeError):
    def __init__(self, box: int, step: int):
        self.box = box
        super().__init__(f"integration blew up in box {box} (step {step})")


@dataclass(frozen=True, eq=False)
class OuterMap:
    """Multivalued map on boxes stored in CSR form.

    ``indices[indptr[b]:indptr[b + 1]]`` is the sorted, duplicate-free image of
    box ``b``; ``out_flags[b]`` marks boxes with a sample image outside the
    domain (or, after :func:`restrict`, outside the restricting set).
    """

    grid: CubicalGrid
    tau: float
    indptr: np.ndarray
    indices: np.ndarray
    out_flags: np.ndarray
    h: float = 1e-3
    samples_per_axis: int = 3
    bloat_rings: int = 1

    def image(self, box: int) -> np.ndarray:
        return self.indices[self.indptr[box]:self.indptr[box + 1]]

    def image_of(self, s: CubicalSet) -> CubicalSet:
        mask = np.zeros(self.grid.size, dtype=bool)
        rows = s.boxes()
        if rows.size:
            starts, stops = self.indptr[rows], self.indptr[rows + 1]
            take = np.concatenate([self.indices[a:b] for a, b in zip(starts, stops)] or [np.empty(0, np.int64)])
            mask[take] = True
        return CubicalSet(self.grid, mask)

    def is_forward_invariant(self, s: CubicalSet) -> bool:
        return self.violations(s).size == 0

    def violations(self, s: CubicalSet) -> np.ndarray:
        """Boxes of ``s`` whose image leaves ``s`` (or whose samples left the domain)."""
        src = np.repeat(np.arange(self.grid.size), np.diff(self.indptr))
        leaving = s.mask[src] & ~s.mask[self.indices]
        bad = np.zeros(self.grid.size, dtype=bool)
        bad[src[leaving]] = True
        bad |= s.mask & self.out_flags
        return np.flatnonzero(bad)

    def matrix(self) -> sparse.csr_matrix:
        n = self.grid.size
        data = np.ones(self.indices.size, dtype=np.int8)
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(n, n))

    def edge_count(self) -> int:
        return int(self.indices.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OuterMap):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.tau == other.tau
            and self.h == other.h
            and self.samples_per_axis == other.samples_per_axis
            and self.bloat_rings == other.bloat_rings
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.out_flags, other.out_flags)
        )

    __hash__ = None


def sample_lattice(grid: CubicalGrid, samples_per_axis: int) -> np.ndarray:
    """``(size, s**m, m)`` array of lattice points in every box, corners included."""
    s = samples_per_axis
    frac = np.linspace(0.0, 1.0, s)
    unit = np.array(list(itertools.product(frac, repeat=grid.dim)))
    lo = grid.lower_corners(np.arange(grid.size))
    return lo[:, None, :] + unit[None, :, :] * np.asarray(grid.box_widths)


def _csr_from_rows(grid: CubicalGrid, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Build CSR from a padded ``(n, k)`` table where -1 marks empty slots."""
    n = rows.shape[0]
    big = np.iinfo(np.int64).max
    keyed = np.where(rows < 0, big, rows)
    keyed.sort(axis=1)
    keep = keyed != big
    keep[:, 1:] &= keyed[:, 1:] != keyed[:, :-1]
    counts = keep.sum(axis=1)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, keyed[keep].astype(np.int64)


def build_outer_map(
    grid: CubicalGrid,
    spec: VectorFieldSpec,
    tau: float,
    samples_per_axis: int = 3,
    bloat_rings: int = 1,
    h: float = 1e-3,
) -> OuterMap:
    if not tau > 0:
        raise ValueError("tau must be positive")
    if samples_per_axis < 2:
        raise ValueError("samples_per_axis must be at least 2")
    if bloat_rings < 0:
        raise ValueError("bloat_rings must be nonnegative")
    lattice = sample_lattice(grid, samples_per_axis)
    n, k, m = lattice.shape
    try:
        images = flow_points(spec, lattice.reshape(-1, m), tau, h)
    except IntegrationBlowup as err:
        raise BoxBlowup(int(err.rows[0] // k), err.step) from None
    hits = grid.boxes_of_points(images).reshape(n, k)
    # a lattice point on the closed source box (corners, fixed points) stays in it
    lo = grid.lower_corners(np.arange(n))[:, None, :]
    hi = lo + np.asarray(grid.box_widths)
    pts = images.reshape(n, k, m)
    own = np.all((pts >= lo) & (pts <= hi), axis=-1)
    hits = np.where(own, np.arange(n)[:, None], hits)
    out_flags = (hits < 0).any(axis=1)
    return _assemble(grid, hits, out_flags, tau, h, samples_per_axis, bloat_rings)


def _assemble(grid, hits, out_flags, tau, h, samples_per_axis, bloat_rings) -> OuterMap:
    n = grid.size
    shape = np.asarray(grid.shape)
    offsets = moore_offsets(grid.dim, bloat_rings)
    safe = np.where(hits < 0, 0, hits)
    coords = np.stack(np.unravel_index(safe, grid.shape), axis=-1)  # (n, k, m)
    grown = coords[:, :, None, :] + offsets[None, None, :, :]
    valid = (hits >= 0)[:, :, None] & np.all((grown >= 0) & (grown < shape), axis=-1)
    grown = np.clip(grown, 0, shape - 1)
    flat = np.ravel_multi_index(tuple(np.moveaxis(grown, -1, 0)), grid.shape)
    flat = np.where(valid, flat, -1).reshape(n, -1)
    indptr, indices = _csr_from_rows(grid, flat)
    out_flags = np.asarray(out_flags, dtype=bool)
    for arr in (indptr, indices, out_flags):
        arr.setflags(write=False)
    return OuterMap(grid, float(tau), indptr, indices, out_flags, float(h), int(samples_per_axis), int(bloat_rings))


def restrict(f: OuterMap, s: CubicalSet) -> OuterMap:
    """Restrict ``f`` to ``s``: boxes outside ``s`` get empty images and image
    boxes outside ``s`` are dropped and counted as exits."""
    if s.grid != f.grid:
        raise ValueError("set and map live on different grids")
    src = np.repeat(np.arange(f.grid.size), np.diff(f.indptr))
    keep = s.mask[src] & s.mask[f.indices]
    exits = np.zeros(f.grid.size, dtype=bool)
    exits[src[s.mask[src] & ~s.mask[f.indices]]] = True
    counts = np.bincount(src[keep], minlength=f.grid.size)
    indptr = np.zeros(f.grid.size + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    indices = f.indices[keep].copy()
    flags = s.mask & (f.out_flags | exits)
    for arr in (indptr, indices, flags):
        arr.setflags(write=False)
    return OuterMap(f.grid, f.tau, indptr, indices, flags, f.h, f.samples_per_axis, f.bloat_rings)


def save_map(f: OuterMap, path: str | Path) -> None:
    lines = [
        f"{HEADER} {f.grid.describe()} tau={f.tau!r} h={f.h!r} "
        f"samples={f.samples_per_axis} bloat={f.bloat_rings}",
        "out: " + " ".join(str(b) for b in np.flatnonzero(f.out_flags)),
    ]
    for b in range(f.grid.size):
        img = f.image(b)
        lines.append(f"{b}: " + " ".join(map(str, img.tolist())) if img.size else f"{b}:")
    Path(path).write_text("\n".join(lines) + "\n")


def load_map(path: str | Path) -> OuterMap:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith(HEADER):
        raise MapParseError(1, f"missing '{HEADER}' header")
    try:
        fields = dict(part.split("=", 1) for part in lines[0][len(HEADER):].split())
        grid = CubicalGrid.parse(" ".join(f"{k}={fields[k]}" for k in ("lower", "upper", "subdivisions")))
        tau, h = float(fields["tau"]), float(fields["h"])
        samples, bloat = int(fields["samples"]), int(fields["bloat"])
    except (KeyError, ValueError) as exc:
        raise MapParseError(1, f"bad header: {exc}") from None
    n = grid.size
    if len(lines) < 2 or not lines[1].startswith("out:"):
        raise MapParseError(2, "missing 'out:' line")
    try:
        flagged = [int(v) for v in lines[1][4:].split()]
    except ValueError:
        raise MapParseError(2, "non-integer box in 'out:' line") from None
    out_flags = np.zeros(n, dtype=bool)
    out_flags[flagged] = True
    if len(lines) - 2 < n:
        raise MapParseError(len(lines) + 1, f"expected {n} box lines, file ends after {len(lines) - 2}")
    counts = np.zeros(n, dtype=np.int64)
    chunks = []
    for b in range(n):
        lineno = b + 3
        src, sep, rest = lines[b + 2].partition(":")
        if not sep or src.strip() != str(b):
            raise MapParseError(lineno, f"expected line for box {b}")
        try:
            img = np.array([int(v) for v in rest.split()], dtype=np.int64)
        except ValueError:
            raise MapParseError(lineno, "non-integer image box") from None
        if img.size and (np.any(np.diff(img) <= 0) or img[0] < 0 or img[-1] >= n):
            raise MapParseError(lineno, "image list must be sorted, unique and inside the grid")
        counts[b] = img.size
        chunks.append(img)
    if any(ln.strip() for ln in lines[n + 2:]):
        raise MapParseError(n + 3, "trailing content after box lines")
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    indices = np.concatenate(chunks) if chunks else np.empty(0, np.int64)
    for arr in (indptr, indices, out_flags):
        arr.setflags(write=False)
    return OuterMap(grid, tau, indptr, indices, out_flags, h, samples, bloat)
