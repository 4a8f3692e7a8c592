import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morsecrit.cubgrid import (
    CubicalGrid,
    CubicalSet,
    GridError,
    boundary_boxes,
    build_grid,
    collar,
    connected_components,
    moore_offsets,
)


def test_grid_64():
    g = build_grid([-2, -2], [2, 2], [64, 64])
    assert g.size == 4096
    assert g.box_widths == (0.0625, 0.0625)


def test_single_box_grid():
    g = build_grid([0, 0], [1, 1], [1, 1])
    assert g.size == 1
    assert g.box_of_point([0.3, 0.9]) == 0


def test_grid_128():
    assert build_grid([-2, -2], [2, 2], 128).size == 16384


@pytest.mark.parametrize("lower,upper,axis", [([0, 1], [1, 1], 1), ([2, 0], [1, 1], 0)])
def test_degenerate_domain_names_axis(lower, upper, axis):
    with pytest.raises(GridError, match=f"axis {axis}"):
        build_grid(lower, upper, 4)


def test_bad_subdivisions():
    with pytest.raises(GridError):
        build_grid([0, 0], [1, 1], [0, 2])


def test_box_of_point():
    g = build_grid([0, 0], [1, 1], 2)
    assert g.coords(g.box_of_point([0.25, 0.75])) == (0, 1)
    assert g.coords(g.box_of_point([1.0, 1.0])) == (1, 1)
    assert g.box_of_point([1.5, 0.5]) is None
    assert g.box_of_point([0.5, 0.5]) == g.flat((1, 1))


def test_boxes_of_points_nonfinite():
    g = build_grid([0, 0], [1, 1], 2)
    out = g.boxes_of_points(np.array([[np.nan, 0.5], [np.inf, 0.1], [0.1, 0.1]]))
    assert list(out) == [-1, -1, 0]


@given(st.integers(1, 12), st.integers(1, 12), st.data())
def test_center_round_trip(nx, ny, data):
    g = build_grid([-1.5, 0.0], [2.0, 3.0], [nx, ny])
    b = data.draw(st.integers(0, g.size - 1))
    assert g.box_of_point(g.box_center(b)) == b
    lo, hi = g.box_bounds(b)
    assert np.all(lo < g.box_center(b)) and np.all(g.box_center(b) < hi)


def test_collar_examples():
    g = build_grid([0, 0], [1, 1], 8)
    inner = CubicalSet.from_coords(g, [(4, 4)])
    assert len(collar(inner, 1)) == 9
    assert collar(inner, 0) == inner
    corner = CubicalSet.from_coords(g, [(0, 0)])
    assert len(collar(corner, 1)) == 4
    g3 = build_grid([0, 0, 0], [1, 1, 1], 5)
    assert len(collar(CubicalSet.from_coords(g3, [(2, 2, 2)]), 1)) == 27


def test_components_examples():
    g = build_grid([0, 0], [1, 1], 6)
    assert connected_components(CubicalSet.empty(g)) == []
    diag = CubicalSet.from_coords(g, [(1, 1), (2, 2)])
    assert len(connected_components(diag)) == 2
    ring = CubicalSet.from_coords(g, [(i, j) for i in range(1, 4) for j in range(1, 4) if (i, j) != (2, 2)])
    assert len(ring) == 8
    assert len(connected_components(ring)) == 1


masks = st.integers(2, 7).flatmap(
    lambda n: st.lists(st.booleans(), min_size=n * n, max_size=n * n).map(lambda bits: (n, bits))
)


def _set(n, bits):
    return CubicalSet(build_grid([0, 0], [1, 1], n), np.array(bits, dtype=bool))


@given(masks, st.integers(0, 3))
def test_collar_properties(nb, r):
    s = _set(*nb)
    c = collar(s, r)
    assert s.issubset(c)
    assert collar(c, 1) == collar(s, r + 1)
    # brute force: within Chebyshev distance r of some box of s
    g = s.grid
    want = set()
    for b in s.boxes():
        i, j = g.coords(int(b))
        for di, dj in moore_offsets(2, r):
            if 0 <= i + di < g.shape[0] and 0 <= j + dj < g.shape[1]:
                want.add(g.flat((i + di, j + dj)))
    assert set(c.boxes().tolist()) == want


@given(masks)
def test_components_partition(nb):
    s = _set(*nb)
    parts = connected_components(s)
    total = CubicalSet.empty(s.grid)
    for p in parts:
        assert p.isdisjoint(total)
        total = total | p
    assert total == s
    firsts = [int(p.boxes()[0]) for p in parts]
    assert firsts == sorted(firsts)


@given(masks, masks)
def test_set_algebra(a, b):
    s = _set(*a)
    if b[0] != a[0]:
        return
    t = _set(*b)
    assert (s | t) - t == s - t
    assert (s & t).issubset(s)
    assert ~(s | t) == (~s) & (~t)
    assert s.isdisjoint(t) == (len(s & t) == 0)
    assert (s < t) == (s.issubset(t) and s != t)


@given(masks)
def test_boundary_boxes(nb):
    s = _set(*nb)
    bd = boundary_boxes(s)
    assert bd.issubset(s)
    g = s.grid
    for b in s.boxes():
        i, j = g.coords(int(b))
        touches = False
        for di, dj in moore_offsets(2, 1):
            ii, jj = i + di, j + dj
            if not (0 <= ii < g.shape[0] and 0 <= jj < g.shape[1]) or not s.mask[g.flat((ii, jj))]:
                touches = True
        assert (int(b) in bd) == touches


@given(masks)
@settings(max_examples=50)
def test_dumps_round_trip(nb):
    s = _set(*nb)
    assert CubicalSet.loads(s.dumps()) == s


def test_loads_rejects_bad_runs():
    s = _set(2, [True, False, False, True])
    text = s.dumps().replace("runs: 1 1 2 1", "runs: 1 1 2")
    with pytest.raises(GridError):
        CubicalSet.loads(text)
    with pytest.raises(GridError):
        CubicalSet.loads("runs: 1 4\n")


def test_grid_describe_parse():
    g = CubicalGrid((-2.0, -1.0), (2.0, 0.5), (64, 3))
    assert CubicalGrid.parse(g.describe()) == g


def test_mismatched_grids():
    a = CubicalSet.empty(build_grid([0, 0], [1, 1], 2))
    b = CubicalSet.empty(build_grid([0, 0], [1, 1], 3))
    with pytest.raises(GridError):
        a | b
