"""Uniform cubical grids over rectangles and sets of their boxes.

A :class:`CubicalGrid` splits ``[lower, upper]`` into ``prod(subdivisions)``
congruent boxes.  Boxes are addressed either by an index tuple (one entry per
axis) or by a flat C-order index.  A :class:`CubicalSet` is a boolean mask
over the flat indices of one grid.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage


class GridError(ValueError):
    """Raised for malformed grids or mismatched sets."""


@dataclass(frozen=True)
class CubicalGrid:
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    subdivisions: tuple[int, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        sub = tuple(int(v) for v in self.subdivisions)
        if not (len(lo) == len(hi) == len(sub)) or not lo:
            raise GridError("lower, upper and subdivisions must have equal nonzero length")
        for axis, (a, b) in enumerate(zip(lo, hi)):
            if not a < b:
                raise GridError(f"degenerate domain on axis {axis}: lower={a} >= upper={b}")
        for axis, n in enumerate(sub):
            if n < 1:
                raise GridError(f"subdivisions on axis {axis} must be >= 1, got {n}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "subdivisions", sub)

    @property
    def dim(self) -> int:
        return len(self.subdivisions)

    @property
    def size(self) -> int:
        return math.prod(self.subdivisions)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.subdivisions

    @property
    def box_widths(self) -> tuple[float, ...]:
        return tuple((b - a) / n for a, b, n in zip(self.lower, self.upper, self.subdivisions))

    @property
    def max_width(self) -> float:
        return max(self.box_widths)

    @property
    def diagonal(self) -> float:
        return math.sqrt(sum(w * w for w in self.box_widths))

    def coords(self, box: int) -> tuple[int, ...]:
        if not 0 <= box < self.size:
            raise IndexError(f"box {box} outside grid of {self.size} boxes")
        return tuple(int(i) for i in np.unravel_index(box, self.shape))

    def flat(self, coords: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(coords), self.shape))

    def box_bounds(self, box: int) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(self.coords(box), dtype=float)
        w = np.asarray(self.box_widths)
        lo = np.asarray(self.lower) + idx * w
        return lo, lo + w

    def box_center(self, box: int) -> np.ndarray:
        lo, hi = self.box_bounds(box)
        return 0.5 * (lo + hi)

    def centers(self, boxes: Iterable[int] | np.ndarray | None = None) -> np.ndarray:
        """Centers of the given boxes (all boxes by default) as an ``(n, m)`` array."""
        if boxes is None:
            boxes = np.arange(self.size)
        boxes = np.asarray(boxes, dtype=np.int64)
        idx = np.stack(np.unravel_index(boxes, self.shape), axis=-1).astype(float)
        return np.asarray(self.lower) + (idx + 0.5) * np.asarray(self.box_widths)

    def lower_corners(self, boxes: np.ndarray) -> np.ndarray:
        idx = np.stack(np.unravel_index(np.asarray(boxes, dtype=np.int64), self.shape), axis=-1)
        return np.asarray(self.lower) + idx * np.asarray(self.box_widths)

    def box_of_point(self, p: Sequence[float]) -> int | None:
        """Flat index of the box containing ``p``, or ``None`` outside the domain.

        Boxes are half-open ``[low, high)`` except on the top face of the domain,
        which belongs to the last box along that axis.
        """
        b = int(self.boxes_of_points(np.asarray(p, dtype=float)[None, :])[0])
        return None if b < 0 else b

    def boxes_of_points(self, pts: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`box_of_point`; returns -1 for out-of-domain points."""
        pts = np.asarray(pts, dtype=float)
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        n = np.asarray(self.subdivisions)
        with np.errstate(invalid="ignore"):
            inside = np.all((pts >= lo) & (pts <= hi), axis=-1)
            idx = np.floor((pts - lo) / np.asarray(self.box_widths))
        idx = np.where(np.isfinite(idx), idx, 0).astype(np.int64)
        idx = np.clip(idx, 0, n - 1)
        flat = np.ravel_multi_index(tuple(np.moveaxis(idx, -1, 0)), self.shape)
        return np.where(inside, flat, -1)

    def describe(self) -> str:
        fmt = lambda vals: ",".join(repr(v) for v in vals)  # noqa: E731
        return f"lower={fmt(self.lower)} upper={fmt(self.upper)} subdivisions={fmt(self.subdivisions)}"

    @classmethod
    def parse(cls, text: str) -> "CubicalGrid":
        fields = dict(part.split("=", 1) for part in text.split())
        try:
            return cls(
                tuple(float(v) for v in fields["lower"].split(",")),
                tuple(float(v) for v in fields["upper"].split(",")),
                tuple(int(v) for v in fields["subdivisions"].split(",")),
            )
        except KeyError as exc:
            raise GridError(f"grid description missing {exc.args[0]!r}") from None


def build_grid(lower: Sequence[float], upper: Sequence[float], depth: Sequence[int] | int) -> CubicalGrid:
    if isinstance(depth, (int, np.integer)):
        depth = (int(depth),) * len(lower)
    if len(depth) != len(lower):
        raise GridError("depth must give one subdivision count per axis")
    return CubicalGrid(tuple(lower), tuple(upper), tuple(depth))


class CubicalSet:
    """An immutable set of boxes of a :class:`CubicalGrid`."""

    __slots__ = ("grid", "mask")

    def __init__(self, grid: CubicalGrid, mask: np.ndarray):
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        if mask.shape[0] != grid.size:
            raise GridError(f"mask has {mask.shape[0]} entries, grid has {grid.size} boxes")
        mask = mask.copy()
        mask.setflags(write=False)
        self.grid = grid
        self.mask = mask

    @classmethod
    def empty(cls, grid: CubicalGrid) -> "CubicalSet":
        return cls(grid, np.zeros(grid.size, dtype=bool))

    @classmethod
    def full(cls, grid: CubicalGrid) -> "CubicalSet":
        return cls(grid, np.ones(grid.size, dtype=bool))

    @classmethod
    def from_boxes(cls, grid: CubicalGrid, boxes: Iterable[int]) -> "CubicalSet":
        mask = np.zeros(grid.size, dtype=bool)
        mask[np.fromiter(boxes, dtype=np.int64)] = True
        return cls(grid, mask)

    @classmethod
    def from_coords(cls, grid: CubicalGrid, coords: Iterable[Sequence[int]]) -> "CubicalSet":
        return cls.from_boxes(grid, (grid.flat(c) for c in coords))

    def boxes(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def as_array(self) -> np.ndarray:
        """Mask reshaped to the grid's index shape."""
        return self.mask.reshape(self.grid.shape)

    def __len__(self) -> int:
        return int(self.mask.sum())

    def __bool__(self) -> bool:
        return bool(self.mask.any())

    def __contains__(self, box: int) -> bool:
        return bool(self.mask[box])

    def __iter__(self):
        return iter(int(b) for b in self.boxes())

    def _check(self, other: "CubicalSet") -> None:
        if other.grid != self.grid:
            raise GridError("cubical sets live on different grids")

    def __or__(self, other: "CubicalSet") -> "CubicalSet":
        self._check(other)
        return CubicalSet(self.grid, self.mask | other.mask)

    def __and__(self, other: "CubicalSet") -> "CubicalSet":
        self._check(other)
        return CubicalSet(self.grid, self.mask & other.mask)

    def __sub__(self, other: "CubicalSet") -> "CubicalSet":
        self._check(other)
        return CubicalSet(self.grid, self.mask & ~other.mask)

    def __invert__(self) -> "CubicalSet":
        return CubicalSet(self.grid, ~self.mask)

    def complement(self) -> "CubicalSet":
        return ~self

    def issubset(self, other: "CubicalSet") -> bool:
        self._check(other)
        return not bool((self.mask & ~other.mask).any())

    def isdisjoint(self, other: "CubicalSet") -> bool:
        self._check(other)
        return not bool((self.mask & other.mask).any())

    __le__ = issubset

    def __lt__(self, other: "CubicalSet") -> bool:
        return self.issubset(other) and len(self) < len(other)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CubicalSet):
            return NotImplemented
        return self.grid == other.grid and bool(np.array_equal(self.mask, other.mask))

    def __hash__(self) -> int:
        return hash((self.grid, self.mask.tobytes()))

    def __repr__(self) -> str:
        return f"CubicalSet({len(self)} of {self.grid.size} boxes)"

    def dumps(self) -> str:
        """Text form: a grid line and a run-length line starting with the first bit."""
        bits = self.mask.astype(np.int8)
        change = np.flatnonzero(np.diff(bits)) + 1
        edges = np.concatenate(([0], change, [bits.size]))
        runs = np.diff(edges)
        return f"grid: {self.grid.describe()}\nruns: {int(bits[0])} {' '.join(map(str, runs))}\n"

    @classmethod
    def loads(cls, text: str) -> "CubicalSet":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) != 2 or not lines[0].startswith("grid:") or not lines[1].startswith("runs:"):
            raise GridError("expected a 'grid:' line followed by a 'runs:' line")
        grid = CubicalGrid.parse(lines[0][len("grid:"):])
        first, *runs = (int(v) for v in lines[1][len("runs:"):].split())
        if first not in (0, 1) or sum(runs) != grid.size or any(r <= 0 for r in runs):
            raise GridError("run lengths do not cover the grid")
        values = (np.arange(len(runs)) + first) % 2
        return cls(grid, np.repeat(values.astype(bool), runs))


def collar(s: CubicalSet, rings: int) -> CubicalSet:
    """Grow ``s`` by ``rings`` layers of face-or-corner neighbours, clipped to the grid."""
    if rings < 0:
        raise ValueError("rings must be nonnegative")
    if rings == 0 or not s:
        return s
    grid = s.grid
    arr = s.as_array()
    out = ndimage.binary_dilation(
        arr, structure=np.ones((3,) * grid.dim, dtype=bool), iterations=rings
    )
    return CubicalSet(grid, out)


def connected_components(s: CubicalSet) -> list[CubicalSet]:
    """Face-adjacency components of ``s``, ordered by their smallest flat index."""
    if not s:
        return []
    structure = ndimage.generate_binary_structure(s.grid.dim, 1)
    labels, n = ndimage.label(s.as_array(), structure=structure)
    flat = labels.reshape(-1)
    parts = [CubicalSet(s.grid, flat == k) for k in range(1, n + 1)]
    parts.sort(key=lambda c: int(c.boxes()[0]))
    return parts


def moore_offsets(dim: int, radius: int) -> np.ndarray:
    """All integer offsets with Chebyshev norm at most ``radius``."""
    rng = range(-radius, radius + 1)
    return np.array(list(itertools.product(rng, repeat=dim)), dtype=np.int64).reshape(-1, dim)


def boundary_boxes(s: CubicalSet) -> CubicalSet:
    """Boxes of ``s`` that touch (face or corner) a box outside ``s`` or the domain edge."""
    arr = s.as_array()
    padded = np.pad(arr, 1, constant_values=False)
    eroded = ndimage.binary_erosion(padded, structure=np.ones((3,) * s.grid.dim, dtype=bool))
    inner = eroded[tuple(slice(1, -1) for _ in range(s.grid.dim))]
    return CubicalSet(s.grid, arr & ~inner)
