from __future__ import annotations

import pytest

from morsecrit import lyap
from morsecrit.combdyn import build_outer_map
from morsecrit.cubgrid import build_grid
from morsecrit.flowsim import builtin
from morsecrit.morsegraph import condense, filtration

TAU = 2.0
H = 0.01


class System:
    def __init__(self, name: str, depth: int = 64):
        self.name = name
        self.spec = builtin(name)
        self.grid = build_grid([-2.0, -2.0], [2.0, 2.0], depth)
        self.map = build_outer_map(self.grid, self.spec, TAU, 3, 1, H)
        self.graph = condense(self.map)
        self.filt = filtration(self.graph, self.map)
        self._ml = {}
        self._tables = {}

    def ml(self, lam: float = 1.0, scale: float = 1.0):
        key = (lam, scale)
        if key not in self._ml:
            self._ml[key] = lyap.strict_ml(self.spec, self.filt, self.map, lam=lam, scale=scale, h=H)
        return self._ml[key]

    def table(self, lam: float = 1.0, scale: float = 1.0):
        key = (lam, scale)
        if key not in self._tables:
            self._tables[key] = lyap.box_table(self.ml(lam, scale))
        return self._tables[key]


_CACHE: dict[str, System] = {}


def system(name: str) -> System:
    if name not in _CACHE:
        _CACHE[name] = System(name)
    return _CACHE[name]


@pytest.fixture(scope="session")
def circle() -> System:
    return system("circle-attractor")


@pytest.fixture(scope="session")
def double_well() -> System:
    return system("double-well")


RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
