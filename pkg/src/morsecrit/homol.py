"""Cubical homology over a field, critical groups and Morse inequalities.

Cells of the cubical complex of a grid are encoded in doubled coordinates:
a box with index ``i`` along an axis occupies the open interval ``2i + 1``
and its two end faces sit at ``2i`` and ``2i + 2``.  A cell is thus an
integer vector whose odd entries mark its nondegenerate axes; it is stored as
a flat index into the doubled grid of shape ``2 n + 1``.

Relative homology ``H(X, A)`` is computed from the chain complex of cells of
``X`` not in ``A``.  Collapsing subcomplexes ``N_1, N_2, ...`` to separate
points (the quotient space ``X / ~``) is handled by dropping their cells and
adding one vertex per collapsed set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .combdyn import OuterMap
from .cubgrid import CubicalGrid, CubicalSet, collar, connected_components, moore_offsets
from .morsegraph import FiltrationError, MorseFiltration, invariant_part, shrink

FIELDS = ("Z2", "Q")


class HomologyError(ValueError):
    pass


@dataclass(frozen=True)
class BettiVector:
    ranks: tuple[int, ...]
    field: str = "Z2"

    def __getitem__(self, q: int) -> int:
        return self.ranks[q] if 0 <= q < len(self.ranks) else 0

    def __iter__(self):
        return iter(self.ranks)

    def __len__(self) -> int:
        return len(self.ranks)

    def euler(self) -> int:
        return sum((-1) ** q * r for q, r in enumerate(self.ranks))

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(self.ranks)


# ---------------------------------------------------------------- cells


def cell_shape(grid: CubicalGrid) -> tuple[int, ...]:
    return tuple(2 * n + 1 for n in grid.shape)


def box_cells(s: CubicalSet) -> np.ndarray:
    """Sorted flat ids of every cell (all dimensions) of the boxes of ``s``."""
    grid = s.grid
    boxes = s.boxes()
    if boxes.size == 0:
        return np.empty(0, dtype=np.int64)
    idx = np.stack(np.unravel_index(boxes, grid.shape), axis=-1)
    doubled = 2 * idx + 1
    faces = doubled[:, None, :] + moore_offsets(grid.dim, 1)[None, :, :]
    flat = np.ravel_multi_index(tuple(np.moveaxis(faces, -1, 0)), cell_shape(grid))
    return np.unique(flat.reshape(-1))


def cell_dims(grid: CubicalGrid, cells: np.ndarray) -> np.ndarray:
    coords = np.stack(np.unravel_index(cells, cell_shape(grid)), axis=-1)
    return (coords % 2).sum(axis=1)


def boundary_faces(grid: CubicalGrid, cells: np.ndarray):
    """Faces of each cell with their orientation signs.

    Returns ``(owner, face, sign)`` arrays: ``face`` is a facet of
    ``cells[owner]`` appearing with coefficient ``sign`` in its boundary.
    """
    shape = cell_shape(grid)
    coords = np.stack(np.unravel_index(cells, shape), axis=-1)
    odd = coords % 2 == 1
    before = np.cumsum(odd, axis=1) - odd  # number of odd axes preceding each axis
    owners, faces, signs = [], [], []
    for j in range(grid.dim):
        rows = np.flatnonzero(odd[:, j])
        if rows.size == 0:
            continue
        base = (-1) ** before[rows, j]
        for delta, sgn in ((1, 1), (-1, -1)):
            c = coords[rows].copy()
            c[:, j] += delta
            owners.append(rows)
            faces.append(np.ravel_multi_index(tuple(c.T), shape))
            signs.append(sgn * base)
    if not owners:
        return (np.empty(0, np.int64),) * 3
    return np.concatenate(owners), np.concatenate(faces), np.concatenate(signs)


# ---------------------------------------------------------------- chain complexes


@dataclass
class ChainComplex:
    """Relative/quotient cellular chain complex ready for rank computations.

    ``boundaries[q]`` is the sparse integer matrix of the boundary map from
    q-chains to (q-1)-chains (``boundaries[0]`` is empty).
    """

    counts: list[int]
    boundaries: list[sparse.csr_matrix]
    field: str = "Z2"
    dim: int = 0

    def check_dd(self) -> bool:
        for q in range(2, len(self.boundaries)):
            prod = (self.boundaries[q - 1] @ self.boundaries[q]).tocoo()
            vals = prod.data % 2 if self.field == "Z2" else prod.data
            if np.any(vals != 0):
                return False
        return True

    def cell_euler(self) -> int:
        return sum((-1) ** q * n for q, n in enumerate(self.counts))


def chain_complex(
    grid: CubicalGrid,
    x_cells: np.ndarray,
    a_cells: np.ndarray | None = None,
    collapse: Sequence[np.ndarray] = (),
    field: str = "Z2",
) -> ChainComplex:
    """Chain complex of ``(X / N_1 / N_2 ..., A)``.

    ``x_cells`` must be closed under taking faces; ``a_cells`` and every
    collapsed cell set must be subcomplexes of it, and pairwise cell-disjoint.
    """
    if field not in FIELDS:
        raise HomologyError(f"unknown coefficient field {field!r}; use one of {FIELDS}")
    x_cells = np.unique(np.asarray(x_cells, dtype=np.int64))
    a_cells = np.unique(np.asarray(a_cells if a_cells is not None else [], dtype=np.int64))
    if not np.isin(a_cells, x_cells).all():
        raise HomologyError("A is not a subcomplex of X")
    drop = a_cells
    point_of = {}
    for p, n_cells in enumerate(collapse):
        n_cells = np.unique(np.asarray(n_cells, dtype=np.int64))
        if not np.isin(n_cells, x_cells).all():
            raise HomologyError("collapsed set is not inside X")
        if np.intersect1d(n_cells, drop).size:
            raise HomologyError("collapsed sets must be cell-disjoint from A and from each other")
        drop = np.union1d(drop, n_cells)
        for c in n_cells.tolist():
            point_of[c] = p
    rel = np.setdiff1d(x_cells, drop, assume_unique=True)
    dims = cell_dims(grid, rel)
    m = grid.dim
    n_points = len(collapse)
    by_dim = [rel[dims == q] for q in range(m + 1)]
    counts = [len(c) for c in by_dim]
    counts[0] += n_points
    boundaries = [sparse.csr_matrix((0, counts[0]), dtype=np.int64)]
    x_set = x_cells
    for q in range(1, m + 1):
        cols = by_dim[q]
        owner, face, sign = boundary_faces(grid, cols)
        if face.size and not np.isin(face, x_set).all():
            raise HomologyError("X is not closed under faces")
        rows_src = by_dim[q - 1]
        pos = np.searchsorted(rows_src, face)
        pos_c = np.clip(pos, 0, max(len(rows_src) - 1, 0))
        hit = (rows_src.size > 0) & (rows_src[pos_c] == face) if rows_src.size else np.zeros(face.shape, bool)
        r = [pos_c[hit]]
        c = [owner[hit]]
        v = [sign[hit]]
        if q == 1 and point_of:
            coll = np.array([point_of.get(int(f), -1) for f in face[~hit]], dtype=np.int64)
            sel = coll >= 0
            r.append(len(rows_src) + coll[sel])
            c.append(owner[~hit][sel])
            v.append(sign[~hit][sel])
        data = np.concatenate(v).astype(np.int64)
        mat = sparse.coo_matrix(
            (data, (np.concatenate(r), np.concatenate(c))), shape=(counts[q - 1], counts[q])
        ).tocsr()
        mat.sum_duplicates()
        if field == "Z2":
            mat.data %= 2
            mat.eliminate_zeros()
        boundaries.append(mat)
    return ChainComplex(counts, boundaries, field, m)


def rank_z2(mat: sparse.csr_matrix) -> int:
    """Rank over Z/2 by column reduction on bit-packed columns."""
    csc = mat.tocsc()
    csc.data %= 2
    csc.eliminate_zeros()
    pivots: dict[int, int] = {}
    rank = 0
    indptr, indices = csc.indptr, csc.indices
    for j in range(csc.shape[1]):
        col = 0
        for i in indices[indptr[j]:indptr[j + 1]].tolist():
            col ^= 1 << i
        while col:
            low = col.bit_length() - 1
            other = pivots.get(low)
            if other is None:
                pivots[low] = col
                rank += 1
                break
            col ^= other
    return rank


def rank_q(mat: sparse.csr_matrix) -> int:
    """Exact rank over the rationals (sparse fraction elimination)."""
    csc = mat.tocsc()
    pivots: dict[int, dict[int, Fraction]] = {}
    rank = 0
    for j in range(csc.shape[1]):
        lo, hi = csc.indptr[j], csc.indptr[j + 1]
        col = {int(i): Fraction(int(v)) for i, v in zip(csc.indices[lo:hi], csc.data[lo:hi]) if v}
        while col:
            low = max(col)
            piv = pivots.get(low)
            if piv is None:
                pivots[low] = col
                rank += 1
                break
            factor = col[low] / piv[low]
            for i, v in piv.items():
                nv = col.get(i, 0) - factor * v
                if nv:
                    col[i] = nv
                else:
                    col.pop(i, None)
    return rank


def complex_betti(cx: ChainComplex) -> BettiVector:
    rank = rank_z2 if cx.field == "Z2" else rank_q
    ranks = [0] + [rank(cx.boundaries[q]) for q in range(1, cx.dim + 1)] + [0]
    betti = tuple(cx.counts[q] - ranks[q] - ranks[q + 1] for q in range(cx.dim + 1))
    return BettiVector(betti, cx.field)


def betti_cells(grid, x_cells, a_cells=None, collapse=(), field="Z2", check=True) -> BettiVector:
    cx = chain_complex(grid, x_cells, a_cells, collapse, field)
    bv = complex_betti(cx)
    if check:
        if not cx.check_dd():
            raise HomologyError("boundary of boundary is nonzero")
        if bv.euler() != cx.cell_euler():
            raise HomologyError("Euler-Poincare identity failed")
    return bv


def betti(X: CubicalSet, A: CubicalSet | None = None, field: str = "Z2",
          collapse: Iterable[CubicalSet] = ()) -> BettiVector:
    """Betti numbers of ``H(X / N_1 / ..., A)`` over ``field``."""
    if A is None:
        A = CubicalSet.empty(X.grid)
    if not A.issubset(X):
        raise HomologyError("A must be a subset of X")
    coll = [box_cells(n) for n in collapse]
    return betti_cells(X.grid, box_cells(X), box_cells(A), coll, field)


def euler(X: CubicalSet, A: CubicalSet | None = None, field: str = "Z2") -> int:
    return betti(X, A, field).euler()


def frontier_cells(X: CubicalSet, A: CubicalSet) -> tuple[np.ndarray, np.ndarray]:
    """Cells of ``A`` interior relative to ``X`` and cells on its frontier.

    A cell of ``A`` is on the frontier when it is a face of a box of ``X \\ A``.
    """
    a_cells = box_cells(A)
    outside = box_cells(X - A)
    front = np.intersect1d(a_cells, outside, assume_unique=True)
    return np.setdiff1d(a_cells, front, assume_unique=True), front


def phi(bv: BettiVector, q: int) -> int:
    """Alternating partial sum ``sum_{j<=q} (-1)^(q-j) R_j``."""
    return sum((-1) ** (q - j) * bv[j] for j in range(q + 1))


# ---------------------------------------------------------------- Morse theory


def _check_invariant(f: OuterMap, s: CubicalSet, name: str) -> None:
    bad = f.violations(s)
    if bad.size:
        raise HomologyError(f"{name} is not forward-invariant: box {int(bad[0])} leaves it")


def critical_groups(filt: MorseFiltration, k: int, f: OuterMap, field: str = "Z2",
                    lower: CubicalSet | None = None, upper: CubicalSet | None = None) -> BettiVector:
    """``C(M_k) = H(W_k, W_{k-1})`` for forward-invariant neighbourhoods."""
    upper = filt.neighborhood(k) if upper is None else upper
    lower = filt.neighborhood(k - 1) if lower is None else lower
    _check_invariant(f, upper, f"W_{k}")
    _check_invariant(f, lower, f"W_{k - 1}")
    if not lower.issubset(upper):
        raise HomologyError(f"W_{k - 1} is not contained in W_{k}")
    return betti(upper, lower, field)


def collapse_set(filt: MorseFiltration, k: int) -> CubicalSet:
    """``N(M_k)``: one Moore ring around the Morse set, kept inside ``W_k``."""
    return collar(filt.morse_set(k), 1) & filt.neighborhood(k)


def separated_lower(filt: MorseFiltration, k: int, f: OuterMap) -> CubicalSet:
    """Forward-invariant part of ``W_{k-1}`` kept two rings away from ``M_k``.

    Its boxes share no cell with ``N(M_k)``.
    """
    if k == 1:
        return CubicalSet.empty(filt.grid)
    w = invariant_part(f, filt.neighborhood(k - 1) - collar(filt.morse_set(k), 2))
    if not filt.attractor(k - 1).issubset(w):
        raise HomologyError(
            f"collar of M_{k} collides with the neighbourhood of A_{k - 1}; use a deeper grid"
        )
    return w


def quotient_critical_groups(filt: MorseFiltration, k: int, f: OuterMap, field: str = "Z2") -> BettiVector:
    """Homology of ``(W_k / N(M_k), W'_{k-1})`` with ``M_k`` collapsed to a point."""
    upper = filt.neighborhood(k)
    lower = separated_lower(filt, k, f)
    return betti(upper, lower, field, collapse=[collapse_set(filt, k)])


def basin_betti(filt: MorseFiltration, field: str = "Z2") -> BettiVector:
    return betti(filt.neighborhood(filt.size), None, field)


def quotient_basin_betti(filt: MorseFiltration, field: str = "Z2") -> BettiVector:
    """Betti numbers of the basin with every Morse set collapsed to its own point."""
    sets = [collapse_set(filt, k) for k in range(1, filt.size + 1)]
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            if not collar(sets[i], 1).isdisjoint(sets[j]):
                raise HomologyError(f"collars of M_{i + 1} and M_{j + 1} touch; use a deeper grid")
    return betti(filt.neighborhood(filt.size), None, field, collapse=sets)


@dataclass
class CriticalGroupTable:
    field: str
    groups: list[BettiVector]
    quotient: list[BettiVector]
    uppers: list[CubicalSet] = field(default_factory=list, repr=False)
    lowers: list[CubicalSet] = field(default_factory=list, repr=False)
    collapsed: list[CubicalSet] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.groups)


def critical_group_table(filt: MorseFiltration, f: OuterMap, field: str = "Z2") -> CriticalGroupTable:
    groups, quotient, uppers, lowers, coll = [], [], [], [], []
    for k in range(1, filt.size + 1):
        groups.append(critical_groups(filt, k, f, field))
        quotient.append(quotient_critical_groups(filt, k, f, field))
        uppers.append(filt.neighborhood(k))
        lowers.append(filt.neighborhood(k - 1))
        coll.append(collapse_set(filt, k))
    return CriticalGroupTable(field, groups, quotient, uppers, lowers, coll)


def morse_numbers(groups: Sequence[BettiVector], dim: int | None = None) -> tuple[int, ...]:
    if dim is None:
        dim = max((len(g) for g in groups), default=1) - 1
    return tuple(sum(g[q] for g in groups) for q in range(dim + 1))


@dataclass
class MorseReport:
    morse_numbers: tuple[int, ...]
    betti_numbers: tuple[int, ...]
    inequality_lhs: tuple[int, ...]
    inequality_rhs: tuple[int, ...]
    inequalities: tuple[bool, ...]
    equation: bool
    gamma: tuple[int, ...]
    gamma_nonnegative: bool
    gamma_consistent: bool
    euler: int
    morse_sum: int

    @property
    def ok(self) -> bool:
        return all(self.inequalities) and self.equation and self.gamma_nonnegative and self.gamma_consistent

    def as_dict(self) -> dict:
        return {
            "morse_numbers": list(self.morse_numbers),
            "betti_numbers": list(self.betti_numbers),
            "inequalities": [
                {"q": q, "lhs": l, "rhs": r, "holds": ok}
                for q, (l, r, ok) in enumerate(zip(self.inequality_lhs, self.inequality_rhs, self.inequalities))
            ],
            "equation": {"morse_sum": self.morse_sum, "euler": self.euler, "holds": self.equation},
            "gamma": list(self.gamma),
            "gamma_nonnegative": self.gamma_nonnegative,
            "gamma_consistent": self.gamma_consistent,
            "euler": self.euler,
        }


def verify_inequalities(m: Sequence[int], beta: Sequence[int]) -> MorseReport:
    """Check the Morse inequalities, the Morse equation and the factorisation
    ``M(t) - P(t) = (1 + t) Q(t)`` with nonnegative ``Q``."""
    n = max(len(m), len(beta))
    m = list(m) + [0] * (n - len(m))
    beta = list(beta) + [0] * (n - len(beta))
    lhs = tuple(sum((-1) ** (q - j) * m[j] for j in range(q + 1)) for q in range(n))
    rhs = tuple(sum((-1) ** (q - j) * beta[j] for j in range(q + 1)) for q in range(n))
    gamma = tuple(l - r for l, r in zip(lhs, rhs))
    chi_m = sum((-1) ** q * v for q, v in enumerate(m))
    chi_b = sum((-1) ** q * v for q, v in enumerate(beta))
    # (1 + t) Q(t) must reproduce M - P exactly, so the top coefficient of Q vanishes
    recon = [gamma[q] + (gamma[q - 1] if q else 0) for q in range(n)]
    consistent = recon == [a - b for a, b in zip(m, beta)] and (gamma[-1] == 0 if n else True)
    return MorseReport(
        tuple(m), tuple(beta), lhs, rhs, tuple(l >= r for l, r in zip(lhs, rhs)),
        chi_m == chi_b, gamma, all(g >= 0 for g in gamma), consistent, chi_b, chi_m,
    )


def equilibrium_critical_groups(V_c: CubicalSet, morse: CubicalSet, level: CubicalSet | None = None,
                                field: str = "Z2") -> BettiVector:
    """Cross-check ``H(V_c, V_c \\ M_k)`` for a single-equilibrium Morse set, on covers.

    ``level`` is the cover of the critical level ``{V = c}``; the components of
    it that meet ``M_k`` form the flat plateau standing in for the equilibrium
    and are deleted together with ``M_k``.
    """
    plateau = morse
    if level is not None:
        for comp in connected_components(level | morse):
            if not comp.isdisjoint(morse):
                plateau = plateau | comp
    plateau = plateau & V_c
    return betti(V_c, V_c - plateau, field)


def neighborhood_variants(filt: MorseFiltration, f: OuterMap) -> list[CubicalSet]:
    """The 1-ring forward-invariant shrink of every ``W_k``."""
    return [shrink(f, filt.neighborhood(k), filt.attractor(k)) for k in range(1, filt.size + 1)]


def homology_summary(table: CriticalGroupTable, report: MorseReport, qreport: MorseReport) -> dict:
    return {
        "field": table.field,
        "critical_groups": [list(g) for g in table.groups],
        "morse_numbers": list(report.morse_numbers),
        "betti_numbers": list(report.betti_numbers),
        "gamma": list(report.gamma),
        "euler": report.euler,
        "verdicts": report.as_dict(),
        "quotient": {
            "note": "derived identity: Morse sets collapsed to points in a cubical quotient complex",
            "critical_groups": [list(g) for g in table.quotient],
            "morse_numbers": list(qreport.morse_numbers),
            "betti_numbers": list(qreport.betti_numbers),
            "verdicts": qreport.as_dict(),
        },
    }


def dumps_summary(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"
