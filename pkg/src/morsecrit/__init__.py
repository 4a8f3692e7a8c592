"""Morse decompositions, Lyapunov functions and critical groups of attractors
computed on cubical grids."""

from .cubgrid import CubicalGrid, CubicalSet, build_grid
from .flowsim import VectorFieldSpec, builtin, flow_map, integrate
from .combdyn import OuterMap, build_outer_map
from .morsegraph import MorseFiltration, MorseGraph, condense, filtration

__all__ = [
    "CubicalGrid",
    "CubicalSet",
    "MorseFiltration",
    "MorseGraph",
    "OuterMap",
    "VectorFieldSpec",
    "build_grid",
    "build_outer_map",
    "builtin",
    "condense",
    "filtration",
    "flow_map",
    "integrate",
]
__version__ = "0.1.0"
