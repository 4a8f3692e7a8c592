import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morsecrit.combdyn import OuterMap, build_outer_map
from morsecrit.cubgrid import CubicalSet, build_grid, collar
from morsecrit.flowsim import builtin, parse_polynomial
from morsecrit.morsegraph import (
    AttractorEscapesDomain,
    basin,
    combinatorial_attractor,
    condense,
    dual_repeller,
    invariant_part,
    shrink,
    to_dot,
)

from oracles import (
    box_distance_to_origin,
    box_distance_to_unit_circle,
    forward_closure,
    map_graph,
    recurrent_sccs,
)


def raw_map(grid, images, flags=None):
    indptr = np.zeros(grid.size + 1, dtype=np.int64)
    np.cumsum([len(i) for i in images], out=indptr[1:])
    indices = np.array([b for img in images for b in sorted(set(img))], dtype=np.int64)
    indptr = np.zeros(grid.size + 1, dtype=np.int64)
    np.cumsum([len(set(i)) for i in images], out=indptr[1:])
    out = np.zeros(grid.size, dtype=bool) if flags is None else np.asarray(flags, dtype=bool)
    return OuterMap(grid, 1.0, indptr, indices, out)


random_maps = st.integers(2, 5).flatmap(
    lambda n: st.lists(
        st.lists(st.integers(0, n * n - 1), max_size=3), min_size=n * n, max_size=n * n
    ).map(lambda imgs: (n, imgs))
)


@settings(max_examples=150, deadline=None)
@given(random_maps)
def test_scc_oracle_random(data):
    n, imgs = data
    f = raw_map(build_grid([0, 0], [1, 1], n), imgs)
    g = condense(f)
    want = sorted(sorted(c) for c in recurrent_sccs(f))
    got = sorted(sorted(c.boxes().tolist()) for c in g.components)
    assert got == want
    G = map_graph(f)
    for j, comp_j in enumerate(g.components):
        reach = set()
        for b in comp_j.boxes():
            reach |= nx.descendants(G, int(b))
        for i, comp_i in enumerate(g.components):
            if i != j and reach & set(comp_i.boxes().tolist()):
                assert j > i and (j, i) in g.edges
            elif i != j:
                assert (j, i) not in g.edges


@settings(max_examples=60, deadline=None)
@given(random_maps)
def test_basin_oracle_random(data):
    n, imgs = data
    grid = build_grid([0, 0], [1, 1], n)
    flags = [len(img) == 1 and img[0] == 0 for img in imgs]
    f = raw_map(grid, imgs, flags)
    g = condense(f)
    G = map_graph(f)
    owner = {int(b): k for k, c in enumerate(g.components, 1) for b in c.boxes()}
    for k in range(1, g.size + 1):
        om = basin(g, k)
        for b in range(grid.size):
            down = nx.descendants(G, b) | {b}
            ok = all(owner.get(d, 0) <= k for d in down) and not any(f.out_flags[d] for d in down)
            assert (b in om) == ok


def test_zero_field_components():
    grid = build_grid([0, 0], [1, 1], 4)
    f = build_outer_map(grid, builtin("zero-field"), 1.0, 3, 0, 0.1)
    g = condense(f)
    assert g.size == grid.size
    assert [c.boxes().tolist() for c in g.components] == [[b] for b in range(grid.size)]
    assert not g.edges
    prefix = CubicalSet.empty(grid)
    for k in range(1, g.size + 1):
        prefix = prefix | g.components[k - 1]
        assert combinatorial_attractor(f, prefix) == prefix
        assert basin(g, k) == prefix


def test_combinatorial_attractor_oracle(circle, double_well):
    m1 = circle.graph.components[0]
    assert combinatorial_attractor(circle.map, m1) == m1
    assert forward_closure(circle.map, m1.boxes().tolist()) == set(m1.boxes().tolist())
    saddle = double_well.graph.components[2]
    hull = combinatorial_attractor(double_well.map, saddle)
    assert set(hull.boxes().tolist()) == forward_closure(double_well.map, saddle.boxes().tolist())
    assert double_well.graph.components[0].issubset(hull)
    assert double_well.graph.components[1].issubset(hull)


def test_attractor_escapes():
    grid = build_grid([-1, -1], [1, 1], 8)
    f = build_outer_map(grid, parse_polynomial("1 1 0\n---\n0 0 0\n"), 1.0, 3, 0, 0.01)
    with pytest.raises(AttractorEscapesDomain, match="escapes domain"):
        combinatorial_attractor(f, CubicalSet.from_coords(grid, [(5, 4)]))


def test_circle_structure(circle):
    g, grid = circle.graph, circle.grid
    assert g.size == 2
    assert g.edges == {(1, 0)}
    w = grid.max_width
    m1, m2 = g.components
    assert grid.box_of_point([0.0, 0.0]) in m1
    assert np.all(box_distance_to_origin(grid, m1.boxes()) <= 2 * w)
    # every point of the unit circle is within two box widths of M2
    th = np.linspace(0, 2 * np.pi, 720, endpoint=False)
    near = collar(m2, 2)
    assert all(b in near for b in grid.boxes_of_points(np.stack([np.cos(th), np.sin(th)], axis=1)))
    assert m2.isdisjoint(collar(m1, 2))
    # the band is thick: the radial rate vanishes to second order on the circle
    lo = box_distance_to_origin(grid, m2.boxes()).min()
    assert 0.5 < lo < 1


def test_circle_filtration(circle):
    filt, grid, m2 = circle.filt, circle.grid, circle.graph.components[1]
    r = lambda s: np.linalg.norm(grid.centers(s.boxes()), axis=1)  # noqa: E731
    w = grid.max_width
    assert r(filt.attractor(2)).max() <= r(m2).max() + 2 * w
    assert grid.box_of_point([0.0, 0.0]) in filt.attractor(2)
    assert np.all(r(filt.basin(1)) < 1)
    assert filt.neighborhood(1).isdisjoint(m2)
    assert filt.neighborhood(2) == circle.filt.basin(2)


def test_double_well_structure(double_well):
    g, grid = double_well.graph, double_well.grid
    assert g.size == 3
    assert g.edges == {(2, 0), (2, 1)}
    w = grid.max_width
    sinks = [grid.centers(c.boxes()).mean(axis=0) for c in g.components[:2]]
    assert sorted(round(s[0]) for s in sinks) == [-1, 1]
    assert np.allclose(np.abs([s[1] for s in sinks]), 0, atol=2 * w)
    assert np.all(box_distance_to_origin(grid, g.components[2].boxes()) <= 2 * w)
    filt = double_well.filt
    assert filt.attractor(1) == combinatorial_attractor(double_well.map, g.components[0])
    assert filt.attractor(2) == g.components[0] | g.components[1]
    # saddle stable set (y axis) is outside the basin of the two sinks
    axis = [grid.box_of_point([0.0, y]) for y in np.linspace(-1.5, 1.5, 7)]
    assert not any(b in filt.basin(2) for b in axis)


@pytest.mark.parametrize("name", ["circle", "double_well"])
def test_filtration_invariants(name, request):
    sys_ = request.getfixturevalue(name)
    filt, f = sys_.filt, sys_.map
    l = filt.size
    for k in range(1, l + 1):
        a, w, om = filt.attractor(k), filt.neighborhood(k), filt.basin(k)
        assert f.is_forward_invariant(a)
        assert f.is_forward_invariant(w)
        assert a.issubset(w) and w.issubset(om)
        assert collar(a, 1).issubset(w)
        assert filt.attractor(k - 1) < a
        assert filt.neighborhood(k - 1).issubset(w)
        assert filt.basin(k - 1).issubset(om)
        assert filt.morse_set(k) == a & dual_repeller(filt, k - 1)
    assert not dual_repeller(filt, l)
    assert dual_repeller(filt, 0) == filt.attractor(l)


@pytest.mark.parametrize("name", ["circle", "double_well"])
def test_order_consistency(name, request):
    sys_ = request.getfixturevalue(name)
    g, f = sys_.graph, sys_.map
    for j, comp in enumerate(g.components):
        for b in comp.boxes():
            for t in f.image(int(b)):
                reached = g.reach[int(t)]
                assert reached >> (j + 1) == 0  # never reaches a higher index


def test_repeller_examples(circle, double_well):
    f = circle.filt
    assert f.attractor(2) & dual_repeller(f, 1) == f.morse_set(2)
    d = double_well.filt
    assert d.attractor(3) & dual_repeller(d, 2) == d.morse_set(3)
    with pytest.raises(IndexError):
        dual_repeller(d, 4)


def test_scc_oracle_builtins(circle, double_well):
    for s in (circle, double_well):
        want = sorted(sorted(c) for c in recurrent_sccs(s.map))
        assert sorted(sorted(c.boxes().tolist()) for c in s.graph.components) == want


def test_shrink(circle):
    f, filt = circle.map, circle.filt
    for k in (1, 2):
        w = filt.neighborhood(k)
        s = shrink(f, w, filt.attractor(k))
        assert s < w
        assert f.is_forward_invariant(s)
        assert filt.attractor(k).issubset(s)
    assert invariant_part(f, filt.neighborhood(2)) == filt.neighborhood(2)


def test_dot(circle):
    text = to_dot(circle.graph)
    assert text.splitlines() == [
        "digraph morse {",
        f'  M1 [label="M1 ({len(circle.graph.components[0])} boxes)"];',
        f'  M2 [label="M2 ({len(circle.graph.components[1])} boxes)"];',
        "  M2 -> M1;",
        "}",
    ]
    assert to_dot(circle.graph) == text


def test_hasse(double_well):
    assert double_well.graph.hasse_edges() == [(2, 0), (2, 1)]
