"""Vector fields, fixed-step RK4 trajectories and time-tau flow maps.

All field evaluations accept arrays of shape ``(..., m)`` so whole batches of
points are advanced together.  Integration uses classical RK4 with a uniform
step ``h``; when ``T`` is not a multiple of ``h`` the final step is shortened
so that the last sample sits exactly at ``T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

BUILTINS = ("circle-attractor", "double-well", "linear-sink", "zero-field")


class IntegrationBlowup(RuntimeError):
    """A trajectory produced a non-finite state."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite state at integration step {step}")


@dataclass(frozen=True)
class VectorFieldSpec:
    """A builtin field selected by name, or a polynomial field.

    ``terms[i]`` lists ``(coefficient, exponents)`` pairs for component ``i``.
    """

    kind: str
    dim: int = 2
    terms: tuple[tuple[tuple[float, tuple[int, ...]], ...], ...] = field(default=())

    def __post_init__(self):
        if self.kind == "polynomial":
            if len(self.terms) != self.dim:
                raise ValueError(f"polynomial field needs {self.dim} components, got {len(self.terms)}")
            for comp in self.terms:
                for _, exps in comp:
                    if len(exps) != self.dim or any(int(e) != e or e < 0 for e in exps):
                        raise ValueError(f"bad exponent tuple {exps!r}")
        elif self.kind not in BUILTINS:
            raise ValueError(f"unknown builtin system {self.kind!r}; choose from {', '.join(BUILTINS)}")

    @property
    def name(self) -> str:
        return self.kind

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return evaluate_field(self, x)


def builtin(name: str, dim: int = 2) -> VectorFieldSpec:
    if name in ("circle-attractor", "double-well") and dim != 2:
        raise ValueError(f"{name} is a planar system")
    return VectorFieldSpec(name, dim)


def parse_polynomial(text: str) -> VectorFieldSpec:
    """Parse the polynomial text format.

    Each component is a block of ``coef e1 ... em`` lines; blocks are separated
    by a line holding ``---``.  ``#`` starts a comment.  An empty block is the
    zero component.
    """
    blocks: list[list[tuple[float, tuple[int, ...]]]] = [[]]
    dim = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "---":
            blocks.append([])
            continue
        parts = line.split()
        try:
            coef = float(parts[0])
            exps = tuple(int(p) for p in parts[1:])
        except (ValueError, IndexError):
            raise ValueError(f"line {lineno}: expected 'coef e1 ... em', got {raw!r}") from None
        if dim is None:
            dim = len(exps)
        if len(exps) != dim or dim == 0:
            raise ValueError(f"line {lineno}: expected {dim} exponents")
        if any(e < 0 for e in exps):
            raise ValueError(f"line {lineno}: exponents must be nonnegative")
        blocks[-1].append((coef, exps))
    dim = dim if dim is not None else len(blocks)
    return VectorFieldSpec("polynomial", dim, tuple(tuple(b) for b in blocks))


def load_field(system: str, dim: int = 2) -> VectorFieldSpec:
    """Builtin by name, otherwise a polynomial field read from the path ``system``."""
    if system in BUILTINS:
        return builtin(system, dim)
    path = Path(system)
    if not path.exists():
        raise FileNotFoundError(f"no builtin system or polynomial file named {system!r}")
    return parse_polynomial(path.read_text())


def evaluate_field(spec: VectorFieldSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    kind = spec.kind
    if kind == "zero-field":
        return np.zeros_like(x)
    if kind == "linear-sink":
        return -x
    if kind == "double-well":
        px, py = x[..., 0], x[..., 1]
        return np.stack([px - px * px * px, -py], axis=-1)
    if kind == "circle-attractor":
        # polar form: r' = -r (r - 1)^2, theta' = 1
        px, py = x[..., 0], x[..., 1]
        d = np.sqrt(px * px + py * py) - 1.0
        g = d * d
        return np.stack([-g * px - py, -g * py + px], axis=-1)
    out = np.zeros_like(x)
    for i, comp in enumerate(spec.terms):
        for coef, exps in comp:
            term = np.full(x.shape[:-1], coef)
            for j, e in enumerate(exps):
                for _ in range(e):
                    term = term * x[..., j]
            out[..., i] += term
    return out


def rk4_step(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_sizes(h: float, T: float) -> list[float]:
    """Uniform steps of size ``h`` covering ``[0, T]``; the last may be shorter."""
    if not h > 0:
        raise ValueError("step h must be positive")
    if not T > 0:
        raise ValueError("horizon T must be positive")
    n = max(1, math.ceil(T / h - 1e-9))
    last = T - (n - 1) * h
    return [h] * (n - 1) + [last]


@dataclass(frozen=True)
class Trajectory:
    x0: np.ndarray
    h: float
    times: np.ndarray
    samples: np.ndarray

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def final(self) -> np.ndarray:
        return self.samples[-1]


def integrate(spec: VectorFieldSpec, x0, h: float, T: float) -> Trajectory:
    if h > T:
        raise ValueError(f"step h={h} exceeds horizon T={T}")
    x = np.asarray(x0, dtype=float).copy()
    steps = step_sizes(h, T)
    samples = np.empty((len(steps) + 1, x.shape[-1]))
    samples[0] = x
    f = spec.__call__
    for i, dt in enumerate(steps, 1):
        x = rk4_step(f, x, dt)
        if not np.all(np.isfinite(x)):
            raise IntegrationBlowup(i)
        samples[i] = x
    times = np.concatenate(([0.0], np.cumsum(steps)))
    times[-1] = T
    return Trajectory(np.asarray(x0, dtype=float), h, times, samples)


def flow_points(spec: VectorFieldSpec, pts: np.ndarray, tau: float, h: float) -> np.ndarray:
    """Advance every row of ``pts`` by time ``tau``.

    Raises :class:`IntegrationBlowup` whose ``rows`` attribute lists the
    offending points.
    """
    x = np.array(pts, dtype=float)
    f = spec.__call__
    for i, dt in enumerate(step_sizes(min(h, tau), tau), 1):
        with np.errstate(over="ignore", invalid="ignore"):
            x = rk4_step(f, x, dt)
        bad = ~np.all(np.isfinite(x), axis=-1)
        if bad.any():
            err = IntegrationBlowup(i)
            err.rows = np.flatnonzero(bad)
            raise err
    return x


def flow_map(spec: VectorFieldSpec, x, tau: float, h: float) -> np.ndarray:
    """``S(tau) x``: the final sample of :func:`integrate`."""
    return integrate(spec, x, min(h, tau), tau).final
