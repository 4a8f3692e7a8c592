"""Lyapunov functions built from trajectories.

For an attractor cover ``K`` with basin cover ``Omega`` the weight

    alpha(x) = d(x, K) * (1 + 1 / d(x, X minus Omega))

vanishes on ``K`` and blows up at the edge of the basin.  Along the sampled
trajectory of ``x`` up to its first entry into ``K``

    phi(x) = max alpha,        psi(x) = integral of e^{lambda t} alpha,

and ``V = 1 - exp(-(phi + psi))``.  The trajectory counts as having reached
``K`` once it stays inside ``K`` for a whole settling window (the map time
``tau``), since a cover can be left briefly between map steps; excursions before
that are part of the integrals.  A point whose trajectory leaves ``Omega``
before settling (or that starts outside ``Omega``) has ``V = 1``.

Sums over the attractor filtration give a strict Morse-Lyapunov function that
equals ``k - 1`` on the Morse set ``M_k``.  All quantities are evaluated on the
RK4 sample grid with step ``h``, so values at later samples of one trajectory
are exactly the values at the corresponding flowed points.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .cubgrid import CubicalGrid, CubicalSet, boundary_boxes, collar, connected_components
from .combdyn import OuterMap, sample_lattice
from .flowsim import VectorFieldSpec, rk4_step, step_sizes
from .morsegraph import MorseFiltration

EPS = 1e-12
BATCH = 256
CHUNK = 64


class LyapunovError(RuntimeError):
    pass


class TruncationError(LyapunovError):
    """A trajectory did not settle before the integration horizon."""

    def __init__(self, point, t_max: float):
        self.point = np.asarray(point)
        super().__init__(
            f"trajectory from {np.round(self.point, 6).tolist()} did not reach the attractor "
            f"or leave its basin within T_max={t_max}"
        )


def alpha_formula(d_attractor, d_complement, eps: float = EPS):
    """The weight from the two distances."""
    d_attractor = np.asarray(d_attractor, dtype=float)
    d_complement = np.asarray(d_complement, dtype=float)
    return d_attractor * (1.0 + 1.0 / np.maximum(d_complement, eps))


class BoxUnionDistance:
    """Exact Euclidean distance from points to a union of grid boxes."""

    def __init__(self, grid: CubicalGrid, s: CubicalSet, neighbours: int = 16):
        self.grid = grid
        self.mask = s.mask
        self.half = 0.5 * np.asarray(grid.box_widths)
        self.halfdiag = 0.5 * grid.diagonal
        self.centers = grid.centers(s.boxes())
        self.tree = cKDTree(self.centers) if len(self.centers) else None
        self.k = min(neighbours, len(self.centers))

    def _box_dist(self, pts, centers):
        gap = np.maximum(np.abs(pts - centers) - self.half, 0.0)
        return np.sqrt((gap * gap).sum(axis=-1))

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.tree is None:
            return np.full(len(pts), np.inf)
        dc, idx = self.tree.query(pts, k=self.k)
        dc = dc.reshape(len(pts), -1)
        idx = idx.reshape(len(pts), -1)
        d = self._box_dist(pts[:, None, :], self.centers[idx]).min(axis=1)
        # any unseen box has center distance >= the k-th, hence box distance >= that minus halfdiag
        unsure = (self.k < len(self.centers)) & (dc[:, -1] - self.halfdiag < d)
        for i in np.flatnonzero(unsure):
            near = self.tree.query_ball_point(pts[i], d[i] + self.halfdiag)
            if near:
                d[i] = min(d[i], self._box_dist(pts[i], self.centers[near]).min())
        return d


def _edge_distance(grid: CubicalGrid, pts: np.ndarray) -> np.ndarray:
    """Distance to the exterior of the domain (0 outside)."""
    lo, hi = np.asarray(grid.lower), np.asarray(grid.upper)
    inner = np.minimum(pts - lo, hi - pts).min(axis=-1)
    return np.maximum(inner, 0.0)


class AlphaFunction:
    """``alpha`` for the attractor cover ``K`` inside the basin cover ``omega``."""

    def __init__(self, K: CubicalSet, omega: CubicalSet, scale: float = 1.0, eps: float = EPS):
        self.grid = K.grid
        self.K = K
        self.omega = omega
        self.scale = float(scale)
        self.eps = eps
        self._dK = BoxUnionDistance(self.grid, K)
        self._dC = BoxUnionDistance(self.grid, ~omega)

    def distances(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(pts)
        return self._dK(pts), np.minimum(self._dC(pts), _edge_distance(self.grid, pts))

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        dK, dC = self.distances(pts)
        return self.scale * alpha_formula(dK, dC, self.eps)


def make_alpha(K: CubicalSet, omega: CubicalSet, scale: float = 1.0) -> AlphaFunction:
    """Validate ``K`` inside ``omega`` with a two-box gap, then build ``alpha``."""
    if not K:
        raise LyapunovError("attractor cover is empty")
    if not K.issubset(omega):
        raise LyapunovError("attractor cover is not inside its basin cover")
    ring = collar(K, 2)
    near_edge = collar(boundary_boxes(CubicalSet.full(K.grid)), 1)
    if not ring.issubset(omega) or not K.isdisjoint(near_edge):
        raise LyapunovError("attractor cover is within two boxes of the basin edge; use a deeper grid")
    return AlphaFunction(K, omega, scale)


def flow_hull(spec: VectorFieldSpec, s: CubicalSet, tau: float, samples_per_axis: int = 3,
              h: float = 0.01) -> CubicalSet:
    """``s`` together with every box visited by its sample lattice over ``[0, tau]``.

    A combinatorial attractor of the time-``tau`` map may skip boxes that its
    continuous orbits pass through; the hull fills them in.
    """
    grid = s.grid
    pts = sample_lattice(grid, samples_per_axis)[s.boxes()].reshape(-1, grid.dim)
    mask = s.mask.copy()
    f = spec.__call__
    for dt in step_sizes(min(h, tau), tau):
        pts = rk4_step(f, pts, dt)
        b = grid.boxes_of_points(pts)
        mask[b[b >= 0]] = True
    return CubicalSet(grid, mask)


# ---------------------------------------------------------------- trajectory engine


@dataclass
class Evaluation:
    """Values at the requested samples: arrays of shape ``(n_at, n_points, l)``.

    ``L = phi + psi`` is ``inf`` where ``V_k = 1``.
    """

    at: np.ndarray
    lam: float
    L: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    alpha: np.ndarray
    positions: np.ndarray
    truncated: np.ndarray

    @property
    def Vk(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return -np.expm1(-self.L)

    @property
    def V(self) -> np.ndarray:
        return self.Vk.sum(axis=-1)

    @property
    def active(self) -> np.ndarray:
        """Components whose ``V_k`` is not pinned at 0 or 1."""
        return np.isfinite(self.L) & (self.L > 0)

    @property
    def log_v_terms(self) -> np.ndarray:
        """``log`` of each ``v_k = e^{-L}(lambda psi + alpha)`` (``-inf`` when inactive)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            out = -self.L + np.log(self.lam * self.psi + self.alpha)
        return np.where(self.active, out, -np.inf)

    @property
    def v(self) -> np.ndarray:
        with np.errstate(under="ignore"):
            return np.exp(self.log_v_terms).sum(axis=-1)


def _settled(inside: np.ndarray, window: int) -> np.ndarray:
    """Samples that start a run of at least ``window`` samples inside the set."""
    run = np.zeros(inside.shape, dtype=np.int64)
    acc = np.zeros(inside.shape[1:], dtype=np.int64)
    for j in range(inside.shape[0] - 1, -1, -1):
        acc = np.where(inside[j], acc + 1, 0)
        run[j] = acc
    return run >= window


def _segment_values(a, ev, in_omega, req, h, lam):
    """phi, psi and L at sample indices ``req`` for one trajectory and one attractor."""
    n = len(ev)
    idx = np.where(ev, np.arange(n), n)
    nxt = np.minimum.accumulate(idx[::-1])[::-1]
    out_phi = np.zeros(len(req))
    out_psi = np.zeros(len(req))
    out_L = np.full(len(req), np.inf)
    req = np.asarray(req)
    es = nxt[req]
    for e in np.unique(es):
        sel = np.flatnonzero(es == e)
        if e >= n or not in_omega[e]:
            continue  # escaped (or unresolved): V = 1
        rows = req[sel]
        start = int(rows.min())
        seg = a[start:e + 1]
        w = np.exp(lam * h * (np.arange(start, e + 1) - e))
        g = seg * w
        p = 0.5 * h * (g[:-1] + g[1:])
        Q = np.concatenate((np.cumsum(p[::-1])[::-1], [0.0]))
        M = np.maximum.accumulate(seg[::-1])[::-1]
        off = rows - start
        with np.errstate(over="ignore"):
            psi = np.exp(lam * h * (e - rows)) * Q[off]
        ph = M[off]
        good = in_omega[rows]
        out_phi[sel] = np.where(good, ph, 0.0)
        out_psi[sel] = np.where(good, psi, 0.0)
        out_L[sel] = np.where(good, ph + psi, np.inf)
    return out_phi, out_psi, out_L


class Tracer:
    """Shared integration engine for a family of attractor/basin pairs."""

    def __init__(self, spec: VectorFieldSpec, alphas: Sequence[AlphaFunction], lam: float = 1.0,
                 h: float = 0.01, t_max: float = 100.0, settle: float = 2.0):
        if not alphas:
            raise LyapunovError("need at least one attractor")
        if not lam > 0:
            raise LyapunovError("lambda must be positive")
        self.spec = spec
        self.alphas = list(alphas)
        self.grid = alphas[0].grid
        self.lam = float(lam)
        self.h = float(h)
        self.t_max = float(t_max)
        self.n_max = int(math.ceil(self.t_max / self.h - 1e-9))
        self.window = max(1, int(round(settle / self.h)))
        pad = lambda m: np.append(m, False)  # noqa: E731 - index -1 means outside the domain
        self._omega = [pad(al.omega.mask) for al in self.alphas]
        self._K = [pad(al.K.mask) for al in self.alphas]

    def _boxes(self, pts):
        b = self.grid.boxes_of_points(pts)
        return np.where(b < 0, self.grid.size, b)

    def _integrate(self, X: np.ndarray, horizon: int):
        B, m = X.shape
        f = self.spec.__call__
        cap = max(horizon + 1, CHUNK + 1)
        pos = np.full((cap, B, m), np.nan)
        pos[0] = X
        boxes = np.full((cap, B), self.grid.size, dtype=np.int64)
        boxes[0] = self._boxes(X)
        l = len(self.alphas)
        w = self.window
        run = np.zeros((l, B), dtype=np.int64)  # current run of samples inside K
        last_event = np.full((l, B), -1)
        end = np.zeros(B, dtype=np.int64)

        def update(i, rows):
            bx = boxes[i, rows]
            for k in range(l):
                om, K = self._omega[k][bx], self._K[k][bx]
                run[k, rows] = np.where(K, run[k, rows] + 1, 0)
                settled = run[k, rows] >= w
                last_event[k, rows[settled]] = i - w + 1
                last_event[k, rows[~om]] = i

        def pending(i):
            return (min(i, horizon) > last_event).any(axis=0)

        update(0, np.arange(B))
        x = X.copy()
        i = 0
        while True:
            active = pending(i) | (i < horizon)
            if not active.any() or i >= self.n_max:
                break
            rows = np.flatnonzero(active)
            if i + 1 >= pos.shape[0]:
                grow = pos.shape[0]
                pos = np.concatenate([pos, np.full((grow, B, m), np.nan)])
                boxes = np.concatenate([boxes, np.full((grow, B), self.grid.size, dtype=np.int64)])
            with np.errstate(over="ignore", invalid="ignore"):
                x[rows] = rk4_step(f, x[rows], self.h)
            i += 1
            fin = np.all(np.isfinite(x[rows]), axis=1)
            pos[i, rows] = np.where(fin[:, None], x[rows], np.nan)
            boxes[i, rows] = np.where(fin, self._boxes(np.where(fin[:, None], x[rows], 0.0)), self.grid.size)
            end[rows] = i
            update(i, rows)
        truncated = pending(i)
        return pos, boxes, end, truncated

    def evaluate(self, X: np.ndarray, at: Sequence[int] = (0,), strict: bool = True) -> Evaluation:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        at = np.asarray(at, dtype=np.int64)
        parts = [self._evaluate_batch(X[s:s + BATCH], at, strict) for s in range(0, len(X), BATCH)]
        cat = lambda name, axis: np.concatenate([getattr(p, name) for p in parts], axis=axis)  # noqa: E731
        return Evaluation(at, self.lam, cat("L", 1), cat("phi", 1), cat("psi", 1), cat("alpha", 1),
                          cat("positions", 1), cat("truncated", 0))

    def _evaluate_batch(self, X, at, strict) -> Evaluation:
        B = len(X)
        l = len(self.alphas)
        horizon = int(at.max()) if at.size else 0
        if horizon > self.n_max:
            raise LyapunovError("requested sample beyond T_max")
        pos, boxes, end, truncated = self._integrate(X, horizon)
        if strict and truncated.any():
            raise TruncationError(X[np.flatnonzero(truncated)[0]], self.t_max)
        shape = (len(at), B, l)
        L = np.full(shape, np.inf)
        PHI = np.zeros(shape)
        PSI = np.zeros(shape)
        AL = np.zeros(shape)
        valid = np.arange(pos.shape[0])[:, None] <= end[None, :]
        for k, alpha in enumerate(self.alphas):
            om = self._omega[k][boxes]
            K = self._K[k][boxes] & valid
            ev = _settled(K, self.window) | ~om
            need = valid & om & ~K
            a = np.zeros(boxes.shape)
            if need.any():
                a[need] = alpha(pos[need])
            for b in range(B):
                n = end[b] + 1
                ph, ps, Lb = _segment_values(a[:n, b], ev[:n, b], om[:n, b], at, self.h, self.lam)
                if truncated[b]:
                    Lb = np.where(np.isfinite(Lb), Lb, np.nan)
                PHI[:, b, k], PSI[:, b, k], L[:, b, k] = ph, ps, Lb
                AL[:, b, k] = a[at, b]
        return Evaluation(at, self.lam, L, PHI, PSI, AL, pos[at], truncated)


# ---------------------------------------------------------------- the functions


class AttractorFunction:
    """``V`` (and ``phi``, ``psi``) for a single attractor."""

    def __init__(self, spec, K: CubicalSet, omega: CubicalSet, lam: float = 1.0, scale: float = 1.0,
                 h: float = 0.01, t_max: float = 100.0, settle: float = 2.0):
        self.alpha = make_alpha(K, omega, scale)
        self.tracer = Tracer(spec, [self.alpha], lam, h, t_max, settle)

    def evaluate(self, x, at=(0,)) -> Evaluation:
        return self.tracer.evaluate(x, at)

    def phi(self, x) -> np.ndarray:
        return self.evaluate(x).phi[0, :, 0]

    def psi(self, x) -> np.ndarray:
        return self.evaluate(x).psi[0, :, 0]

    def V(self, x) -> np.ndarray:
        return self.evaluate(x).Vk[0, :, 0]

    def L(self, x) -> np.ndarray:
        """The radially unbounded form ``eta(V) = phi + psi`` (``inf`` off the basin)."""
        return self.evaluate(x).L[0, :, 0]


def eval_phi(fn: AttractorFunction, x) -> np.ndarray:
    return fn.phi(x)


def eval_psi(fn: AttractorFunction, x) -> np.ndarray:
    return fn.psi(x)


def attractor_V(fn: AttractorFunction, x) -> np.ndarray:
    return fn.V(x)


class OutsideBasin(LyapunovError):
    pass


def radially_unbounded_L(fn: AttractorFunction, x) -> np.ndarray:
    """``eta(V) = -ln(1 - V)``; undefined where ``V = 1``."""
    L = fn.L(x)
    if not np.all(np.isfinite(L)):
        raise OutsideBasin("point lies outside the basin (V = 1)")
    return L


def eta(v):
    """Inverse of ``mu(s) = 1 - e^{-s}``."""
    v = np.asarray(v, dtype=float)
    if np.any(v >= 1.0):
        raise OutsideBasin("V = 1 has no finite preimage")
    return -np.log1p(-v)


def mu(s):
    return -np.expm1(-np.asarray(s, dtype=float))


class MorseLyapunov:
    """Strict Morse-Lyapunov function ``V = sum_k V_k`` over the filtration.

    ``V_k`` uses the flow hull of ``A_k`` as attractor cover and ``W_k`` as
    basin cover; the settling window is the map time of ``f``.
    """

    def __init__(self, spec: VectorFieldSpec, filt: MorseFiltration, f: OuterMap, lam: float = 1.0,
                 scale: float = 1.0, h: float = 0.01, t_max: float | None = None):
        self.spec = spec
        self.filt = filt
        self.grid = filt.grid
        self.covers = [flow_hull(spec, filt.attractor(k), f.tau, f.samples_per_axis, h)
                       for k in range(1, filt.size + 1)]
        alphas = [make_alpha(K, filt.neighborhood(k), scale) for k, K in enumerate(self.covers, 1)]
        self.lam = float(lam)
        self.scale = float(scale)
        self.h = float(h)
        self.t_max = float(t_max if t_max is not None else 50.0 * f.tau)
        self.tracer = Tracer(spec, alphas, lam, h, self.t_max, f.tau)

    @property
    def size(self) -> int:
        return self.filt.size

    def evaluate(self, x, at=(0,), strict: bool = True) -> Evaluation:
        return self.tracer.evaluate(x, at, strict)

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(x).V[0]

    def profile(self, x, steps: int) -> Evaluation:
        """Values along each trajectory at samples ``0..steps``."""
        return self.evaluate(x, np.arange(steps + 1))

    def critical_values(self) -> list[tuple[float, float]]:
        """Range of ``V`` over the box centers of each Morse set."""
        out = []
        for k in range(1, self.size + 1):
            vals = self(self.grid.centers(self.filt.morse_set(k).boxes()))
            out.append((float(vals.min()), float(vals.max())))
        return out


def strict_ml(spec, filt, f: OuterMap, lam: float = 1.0, scale: float = 1.0, h: float = 0.01,
              t_max: float | None = None) -> MorseLyapunov:
    return MorseLyapunov(spec, filt, f, lam, scale, h, t_max)


@dataclass
class LyapunovField:
    """Per-box values of the strict Morse-Lyapunov function at box centers."""

    grid: CubicalGrid
    centers: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    Vk: np.ndarray
    V: np.ndarray
    v: np.ndarray
    truncated: np.ndarray
    lam: float

    def sublevel(self, c: float) -> CubicalSet:
        return CubicalSet(self.grid, self.V <= c)

    def write_csv(self, path) -> None:
        m = self.centers.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["box_index"] + [f"center_{i}" for i in range(m)] + ["phi", "psi", "V", "v"])
            for b in range(len(self.V)):
                w.writerow([b] + [repr(float(c)) for c in self.centers[b]]
                           + [repr(float(self.phi[b])), repr(float(self.psi[b])),
                              repr(float(self.V[b])), repr(float(self.v[b]))])


def read_csv_values(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = list(zip(*body)) if body else [[] for _ in header]
    return {name: np.array(col, dtype=float) for name, col in zip(header, cols)}


def box_table(ml: MorseLyapunov) -> LyapunovField:
    """Evaluate at every box center; ``phi`` and ``psi`` are summed over the filtration."""
    centers = ml.grid.centers()
    ev = ml.evaluate(centers, strict=False)
    return LyapunovField(ml.grid, centers, ev.phi[0].sum(axis=1), ev.psi[0].sum(axis=1), ev.Vk[0],
                         ev.V[0], ev.v[0], ev.truncated, ml.lam)


# ---------------------------------------------------------------- certificates


@dataclass
class DiniResult:
    n_points: int
    n_failed: int
    worst_margin: float
    worst_point: np.ndarray | None
    h: float
    offending: np.ndarray

    @property
    def ok(self) -> bool:
        return self.n_failed == 0


def dini_exclusion(filt: MorseFiltration, rings: int = 2) -> CubicalSet:
    """Boxes near a Morse set or near the edge of a basin."""
    grid = filt.grid
    out = collar(filt.graph.morse_sets(), rings)
    for k in range(1, filt.size + 1):
        om = filt.neighborhood(k)
        edge = boundary_boxes(om) | (boundary_boxes(~om) if (~om) else CubicalSet.empty(grid))
        out = out | collar(edge, rings)
    return out


def sample_points(grid: CubicalGrid, allowed: CubicalSet, n: int, rng: np.random.Generator) -> np.ndarray:
    boxes = allowed.boxes()
    if boxes.size == 0:
        raise LyapunovError("no boxes to sample from")
    pick = rng.choice(boxes, size=n)
    return grid.lower_corners(pick) + rng.random((n, grid.dim)) * np.asarray(grid.box_widths)


def dini_certificate(ml: MorseLyapunov, points: np.ndarray, steps: int = 1) -> DiniResult:
    """Check ``(V(S(h')x) - V(x)) / h' <= -v(x) / 2`` with ``h' = steps * h``.

    The comparison is done in log form: both sides are sums of terms
    ``e^{-L_k} * (...)`` which underflow individually far from the attractors.
    Points whose trajectories never settle count as failures.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    h2 = steps * ml.h
    ev = ml.evaluate(points, at=(0, steps), strict=False)
    L0, L1 = ev.L[0], ev.L[1]
    act = ev.active[0]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        D = L0 - L1
        # V_k(later) - V_k(now) = -e^{-L0} expm1(D)
        log_drop = np.where(act & (D > 0), -L0 + np.log(np.expm1(D)), -np.inf)
        log_need = ev.log_v_terms[0] - math.log(2.0) + math.log(h2)
        rising = act & ~(D >= 0)
        drop = np.logaddexp.reduce(log_drop, axis=1)
        need = np.logaddexp.reduce(log_need, axis=1)
        bad = rising.any(axis=1) | ~np.isfinite(need) | ev.truncated
        margin = np.where(bad, -np.inf, drop - need)
    failed = ~(margin >= 0)
    worst = int(np.argmin(margin)) if len(margin) else 0
    return DiniResult(len(points), int(failed.sum()), float(margin.min()) if len(margin) else math.inf,
                      points[worst] if len(points) else None, h2, points[failed])


@dataclass
class ContractionResult:
    n_points: int
    worst_ratio: float

    @property
    def ok(self) -> bool:
        return self.worst_ratio <= 1.0 + 1e-6


def psi_contraction(ml: MorseLyapunov, points: np.ndarray, tau: float) -> ContractionResult:
    """``psi_k(S(tau) x) <= e^{-lambda tau} psi_k(x)`` on the shared sample grid."""
    s = int(round(tau / ml.h))
    ev = ml.evaluate(points, at=(0, s))
    before, after = ev.psi[0], ev.psi[1]
    fin = np.isfinite(ev.L[0]) & np.isfinite(ev.L[1]) & (before > 0)
    ratio = np.where(fin, after / np.where(fin, before * math.exp(-ml.lam * s * ml.h), 1.0), 0.0)
    return ContractionResult(len(points), float(ratio.max()) if ratio.size else 0.0)


# ---------------------------------------------------------------- flow retraction


class RetractionError(LyapunovError):
    pass


@dataclass
class ExitTimes:
    times: np.ndarray
    points: np.ndarray
    values: np.ndarray


def _check_window(ml: MorseLyapunov, a: float, b: float) -> None:
    if not a < b:
        raise RetractionError("need a < b")
    for k, (lo, hi) in enumerate(ml.critical_values(), 1):
        if a <= hi and lo <= b:
            raise RetractionError(f"critical value of M_{k} lies in [{a}, {b}]")


def _exit(ml: MorseLyapunov, x: np.ndarray, a: float, b: float) -> ExitTimes:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    tol = 1e-6 * (b - a)
    v0 = ml(x)
    if np.any(v0 > b + tol):
        raise RetractionError("point lies above the level b")
    times = np.zeros(len(x))
    pts = x.copy()
    vals = v0.copy()
    todo = np.flatnonzero(v0 > a)
    steps = max(1, int(round(2.0 / ml.h)))
    f = ml.spec.__call__
    while todo.size:
        if steps > ml.tracer.n_max:
            raise TruncationError(x[todo[0]], ml.t_max)
        prof = ml.profile(x[todo], steps)
        V = prof.V  # (steps+1, n)
        below = V <= a
        hit = below.any(axis=0)
        first = np.argmax(below, axis=0)
        done = todo[hit]
        if done.size:
            n = first[hit]
            start = prof.positions[n - 1, np.flatnonzero(hit)]
            lo = np.zeros(done.size)
            hi = np.full(done.size, ml.h)
            hi_pts = prof.positions[n, np.flatnonzero(hit)]
            hi_val = V[n, np.flatnonzero(hit)]
            for _ in range(60):
                open_ = hi_val < a - tol
                if not open_.any():
                    break
                mid = 0.5 * (lo + hi)
                y = rk4_step(f, start[open_], mid[open_][:, None])
                vy = ml(y)
                sel = np.flatnonzero(open_)
                up = vy > a
                lo[sel[up]] = mid[sel[up]]
                hi[sel[~up]] = mid[sel[~up]]
                hi_pts[sel[~up]] = y[~up]
                hi_val[sel[~up]] = vy[~up]
            times[done] = (n - 1) * ml.h + hi
            pts[done] = hi_pts
            vals[done] = hi_val
        todo = todo[~hit]
        steps *= 2
    return ExitTimes(times, pts, vals)


def exit_time(ml: MorseLyapunov, x, a: float, b: float) -> np.ndarray:
    """First time the trajectory reaches ``{V <= a}`` (0 for points already there)."""
    _check_window(ml, a, b)
    return _exit(ml, x, a, b).times


def exit_time_lipschitz(ml: MorseLyapunov, x, x2, a: float, b: float) -> float:
    """Largest observed ``|t(x) - t(x')| / |x - x'|`` over paired points."""
    t1, t2 = exit_time(ml, x, a, b), exit_time(ml, x2, a, b)
    gap = np.linalg.norm(np.asarray(x, float) - np.asarray(x2, float), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(gap > 0, np.abs(t1 - t2) / gap, 0.0)
    return float(ratio.max()) if ratio.size else 0.0


def retract(ml: MorseLyapunov, sigma: float, x, a: float, b: float) -> np.ndarray:
    """Flow deformation of ``{V <= b}`` onto ``{V <= a}`` at parameter ``sigma``."""
    if not 0.0 <= sigma <= 1.0:
        raise RetractionError("sigma must lie in [0, 1]")
    _check_window(ml, a, b)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if sigma == 0.0:
        return x.copy()
    ex = _exit(ml, x, a, b)
    if sigma == 1.0:
        return ex.points
    out = x.copy()
    f = ml.spec.__call__
    for i in np.flatnonzero(ex.times > 0):
        t = sigma * ex.times[i]
        y = x[i]
        n = int(math.floor(t / ml.h + 1e-9))
        for _ in range(n):
            y = rk4_step(f, y, ml.h)
        rest = t - n * ml.h
        if rest > 0:
            y = rk4_step(f, y, rest)
        out[i] = y
    return out


def certified_equilibrium(spec: VectorFieldSpec, component: CubicalSet, tol: float = 1e-8):
    """Newton search for a zero of the field inside ``component``; ``None`` if absent."""
    grid = component.grid
    x = grid.centers(component.boxes()).mean(axis=0)
    for _ in range(50):
        fx = spec(x)
        if np.linalg.norm(fx) < tol:
            break
        J = np.empty((grid.dim, grid.dim))
        for j in range(grid.dim):
            d = np.zeros(grid.dim)
            d[j] = 1e-7
            J[:, j] = (spec(x + d) - spec(x - d)) / 2e-7
        try:
            x = x - np.linalg.solve(J, fx)
        except np.linalg.LinAlgError:
            return None
    if np.linalg.norm(spec(x)) >= tol:
        return None
    b = grid.box_of_point(x)
    if b is None or b not in collar(component, 1):
        return None
    return x


def _set_distance(s: CubicalSet, p: np.ndarray) -> float:
    return float(BoxUnionDistance(s.grid, s)(p[None, :])[0])


def equilibrium_limit(ml: MorseLyapunov, x, c: float, tol: float = 1e-6) -> np.ndarray:
    """Follow ``x`` down to the critical level ``c`` of a single-equilibrium Morse set."""
    x = np.asarray(x, dtype=float)
    ranges = ml.critical_values()
    k = min(range(len(ranges)), key=lambda i: min(abs(c - ranges[i][0]), abs(c - ranges[i][1]))) + 1
    comp = ml.filt.morse_set(k)
    if len(connected_components(comp)) != 1 or certified_equilibrium(ml.spec, comp) is None:
        raise RetractionError(f"M_{k} is not a certified single equilibrium")
    steps = max(1, int(round(1.0 / ml.h)))
    y = x.copy()
    t = 0.0
    while t < ml.t_max:
        prof = ml.profile(y, steps)
        V = prof.V[:, 0]
        hit = np.flatnonzero(V <= c + tol)
        if hit.size:
            y = prof.positions[hit[0], 0]
            break
        nxt = prof.positions[-1, 0]
        if np.linalg.norm(nxt - y) < tol:
            y = nxt
            break
        y = nxt
        t += steps * ml.h
    else:
        raise TruncationError(x, ml.t_max)
    width = ml.grid.max_width
    in_level = ml(y[None, :])[0] <= c + tol
    if not (in_level or _set_distance(comp, y) <= 2 * width):
        raise RetractionError("limit point is neither in the level set nor near the equilibrium")
    return y
