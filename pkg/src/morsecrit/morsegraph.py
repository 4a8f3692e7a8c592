"""Recurrent components, their order, and the attractor filtration.

The recurrent components of an :class:`~morsecrit.combdyn.OuterMap` are its
strongly connected components that carry at least one internal edge (a
self-loop counts).  They are numbered ``M_1, ..., M_l`` so that every
connection runs from a higher index to a lower one.  Prefix unions are then
closed under the map to give the nested attractors ``A_1 ⊊ ... ⊊ A_l``.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csgraph

from .combdyn import OuterMap
from .cubgrid import CubicalSet, boundary_boxes, collar


class AttractorEscapesDomain(RuntimeError):
    pass


class FiltrationError(RuntimeError):
    """The computed sets contradict the Morse order or invariance."""


@dataclass(frozen=True, eq=False)
class MorseGraph:
    """Recurrent components ``M_1..M_l`` with their connecting orbits.

    ``edges`` holds ``(j, i)`` (0-based) when ``M_{j+1}`` reaches ``M_{i+1}``.
    ``reach[b]`` is a bitmask of the components reachable from box ``b`` and
    ``escapes[b]`` marks boxes that can reach an out-of-domain flag.
    """

    components: list[CubicalSet]
    transient: CubicalSet
    edges: frozenset[tuple[int, int]]
    scc_labels: np.ndarray = field(repr=False)
    reach: list[int] = field(repr=False)
    escapes: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.components)

    def morse_sets(self) -> CubicalSet:
        out = CubicalSet.empty(self.transient.grid)
        for c in self.components:
            out = out | c
        return out

    def hasse_edges(self) -> list[tuple[int, int]]:
        """Transitive reduction of :attr:`edges`."""
        succ = {j: {i for (a, i) in self.edges if a == j} for j in range(self.size)}
        out = []
        for j, i in sorted(self.edges):
            if not any(i in succ[k] for k in succ[j] if k != i):
                out.append((j, i))
        return out


def _condensation(f: OuterMap):
    n = f.grid.size
    n_scc, labels = csgraph.connected_components(f.matrix(), directed=True, connection="strong")
    src = np.repeat(np.arange(n), np.diff(f.indptr))
    dst = f.indices
    a, b = labels[src], labels[dst]
    internal = np.zeros(n_scc, dtype=bool)
    internal[a[a == b]] = True
    cross = np.unique(np.stack([a[a != b], b[a != b]], axis=1), axis=0) if (a != b).any() else np.empty((0, 2), np.int64)
    return n_scc, labels, internal, cross


def _topo_order(n_scc: int, cross: np.ndarray) -> list[int]:
    """SCC ids ordered sinks first (every successor precedes its predecessors)."""
    out_deg = np.zeros(n_scc, dtype=np.int64)
    preds: list[list[int]] = [[] for _ in range(n_scc)]
    for u, v in cross:
        out_deg[u] += 1
        preds[v].append(int(u))
    stack = [int(s) for s in np.flatnonzero(out_deg == 0)]
    order = []
    while stack:
        s = stack.pop()
        order.append(s)
        for p in preds[s]:
            out_deg[p] -= 1
            if out_deg[p] == 0:
                stack.append(p)
    if len(order) != n_scc:
        raise FiltrationError("condensation is not acyclic")
    return order


def condense(f: OuterMap) -> MorseGraph:
    grid = f.grid
    n_scc, labels, internal, cross = _condensation(f)
    recurrent_ids = [int(s) for s in np.flatnonzero(internal)]
    first_box = np.full(n_scc, grid.size, dtype=np.int64)
    np.minimum.at(first_box, labels, np.arange(grid.size))

    succ: list[list[int]] = [[] for _ in range(n_scc)]
    for u, v in cross:
        succ[u].append(int(v))
    topo = _topo_order(n_scc, cross)

    # recurrent-reachability through transient nodes, as bitmasks over recurrent ids
    pos = {s: i for i, s in enumerate(recurrent_ids)}
    reach_scc = [0] * n_scc
    esc_scc = np.zeros(n_scc, dtype=bool)
    flagged = np.zeros(n_scc, dtype=bool)
    flagged[labels[f.out_flags]] = True
    for s in topo:
        r = 1 << pos[s] if s in pos else 0
        e = bool(flagged[s])
        for t in succ[s]:
            r |= reach_scc[t]
            e = e or bool(esc_scc[t])
        reach_scc[s] = r
        esc_scc[s] = e

    # order: components whose successors are all placed, smallest box id first
    strict_succ = {}
    for s in recurrent_ids:
        mask = 0
        for t in succ[s]:
            mask |= reach_scc[t]
        strict_succ[s] = mask & ~(1 << pos[s])
    placed = 0
    order = []
    remaining = set(recurrent_ids)
    heap = [(int(first_box[s]), s) for s in recurrent_ids if strict_succ[s] == 0]
    heapq.heapify(heap)
    while heap:
        _, s = heapq.heappop(heap)
        order.append(s)
        remaining.discard(s)
        placed |= 1 << pos[s]
        for t in list(remaining):
            if strict_succ[t] & ~placed == 0 and all(t != x for _, x in heap):
                heapq.heappush(heap, (int(first_box[t]), t))
    if remaining:
        raise FiltrationError("recurrent components are cyclically ordered")

    new_index = {s: k for k, s in enumerate(order)}
    components = [CubicalSet(grid, labels == s) for s in order]
    edges = set()
    for s in order:
        for t in recurrent_ids:
            if strict_succ[s] >> pos[t] & 1:
                edges.add((new_index[s], new_index[t]))
    remap = lambda r: sum(1 << new_index[s] for s in recurrent_ids if r >> pos[s] & 1)  # noqa: E731
    reach_box = [remap(reach_scc[labels[b]]) for b in range(grid.size)]
    rec_mask = np.isin(labels, recurrent_ids)
    escapes = esc_scc[labels]
    labels.setflags(write=False)
    escapes.setflags(write=False)
    return MorseGraph(components, CubicalSet(grid, ~rec_mask), frozenset(edges), labels, reach_box, escapes)


def combinatorial_attractor(f: OuterMap, seed: CubicalSet) -> CubicalSet:
    """Smallest forward-invariant set containing ``seed``."""
    if not seed:
        raise ValueError("seed must be nonempty")
    mask = seed.mask.copy()
    frontier = seed.boxes()
    while frontier.size:
        if f.out_flags[frontier].any():
            bad = int(frontier[f.out_flags[frontier]][0])
            raise AttractorEscapesDomain(f"attractor escapes domain through box {bad}")
        nxt = np.concatenate([f.image(int(b)) for b in frontier])
        nxt = np.unique(nxt[~mask[nxt]])
        mask[nxt] = True
        frontier = nxt
    return CubicalSet(f.grid, mask)


def invariant_part(f: OuterMap, s: CubicalSet) -> CubicalSet:
    """Largest forward-invariant subset of ``s``, by trimming boxes whose image leaves it."""
    current = s
    while True:
        bad = f.violations(current)
        if bad.size == 0:
            return current
        mask = current.mask.copy()
        mask[bad] = False
        current = CubicalSet(f.grid, mask)


@dataclass(frozen=True)
class MorseFiltration:
    graph: MorseGraph
    attractors: list[CubicalSet]
    basins: list[CubicalSet]
    repellers: list[CubicalSet]
    neighborhoods: list[CubicalSet]

    @property
    def size(self) -> int:
        return len(self.attractors)

    @property
    def grid(self):
        return self.graph.transient.grid

    def attractor(self, k: int) -> CubicalSet:
        """``A_k`` with ``A_0`` the empty set."""
        return self.attractors[k - 1] if k > 0 else CubicalSet.empty(self.grid)

    def neighborhood(self, k: int) -> CubicalSet:
        return self.neighborhoods[k - 1] if k > 0 else CubicalSet.empty(self.grid)

    def basin(self, k: int) -> CubicalSet:
        return self.basins[k - 1] if k > 0 else CubicalSet.empty(self.grid)

    def morse_set(self, k: int) -> CubicalSet:
        return self.graph.components[k - 1]


def basin(g: MorseGraph, k: int) -> CubicalSet:
    """Boxes all of whose reachable components lie among ``M_1..M_k`` and that
    cannot reach an out-of-domain flag."""
    allowed = (1 << k) - 1
    ok = np.fromiter(((r & ~allowed) == 0 for r in g.reach), dtype=bool, count=len(g.reach))
    return CubicalSet(g.transient.grid, ok & ~g.escapes)


def filtration(g: MorseGraph, f: OuterMap) -> MorseFiltration:
    grid = f.grid
    l = g.size
    attractors, basins, neighborhoods = [], [], []
    seed = CubicalSet.empty(grid)
    for k in range(1, l + 1):
        seed = seed | g.components[k - 1]
        a = combinatorial_attractor(f, seed)
        om = basin(g, k)
        w = invariant_part(f, om)
        if attractors and not attractors[-1] < a:
            raise FiltrationError(f"A_{k - 1} is not strictly contained in A_{k}")
        if not a.issubset(w):
            raise FiltrationError(f"A_{k} is not contained in its basin; the map reaches outside it")
        if not collar(a, 1).issubset(w):
            raise FiltrationError(f"basin of A_{k} is not a neighbourhood of A_{k}; use a deeper grid")
        attractors.append(a)
        basins.append(om)
        neighborhoods.append(w)
    for k in range(2, l + 1):
        if not basins[k - 2].issubset(basins[k - 1]) or not neighborhoods[k - 2].issubset(neighborhoods[k - 1]):
            raise FiltrationError(f"basins of A_{k - 1} and A_{k} are not nested")
    top = attractors[-1] if attractors else CubicalSet.empty(grid)
    repellers = [top - om for om in basins]
    return MorseFiltration(g, attractors, basins, repellers, neighborhoods)


def dual_repeller(filt: MorseFiltration, k: int) -> CubicalSet:
    """``A*_k = A_l minus the basin of A_k``; ``A*_0 = A_l`` and ``A*_l`` is empty."""
    l = filt.size
    if not 0 <= k <= l:
        raise IndexError(f"repeller index {k} outside 0..{l}")
    if k == 0:
        return filt.attractors[-1]
    return filt.repellers[k - 1]


def shrink(f: OuterMap, w: CubicalSet, keep: CubicalSet, rings: int = 1) -> CubicalSet:
    """Forward-invariant shrink of ``w``: drop ``rings`` layers next to its
    complement (the domain edge counts as complement), then trim to
    invariance.  Raises if ``keep`` is lost."""
    out = w
    for _ in range(rings):
        out = out - boundary_boxes(out)
    out = invariant_part(f, out)
    if not keep.issubset(out):
        raise FiltrationError("shrinking the neighbourhood lost part of the attractor; use a deeper grid")
    return out


def to_dot(g: MorseGraph, name: str = "morse") -> str:
    lines = [f"digraph {name} {{"]
    for k, comp in enumerate(g.components, 1):
        lines.append(f'  M{k} [label="M{k} ({len(comp)} boxes)"];')
    for j, i in sorted(g.edges):
        lines.append(f"  M{j + 1} -> M{i + 1};")
    lines.append("}")
    return "\n".join(lines) + "\n"
