import math

import numpy as np
import pytest

from morsecrit.combdyn import BoxBlowup, MapParseError, build_outer_map, load_map, restrict, save_map
from morsecrit.cubgrid import CubicalSet, build_grid, collar
from morsecrit.flowsim import builtin, flow_points, parse_polynomial

GRID64 = build_grid([-2, -2], [2, 2], 64)


@pytest.fixture(scope="module")
def circle_map():
    return build_outer_map(GRID64, builtin("circle-attractor"), 0.5, 3, 1, 0.01)


def test_zero_field_identity():
    g = build_grid([0, 0], [1, 1], 7)
    f = build_outer_map(g, builtin("zero-field"), 1.0, 3, 0, 0.1)
    for b in range(g.size):
        assert f.image(b).tolist() == [b]
    assert not f.out_flags.any()


def test_linear_sink_halving():
    eps = 1e-3
    f = build_outer_map(GRID64, builtin("linear-sink"), math.log(2), 3, 0, 0.01)
    src = GRID64.box_of_point([2 - eps, 2 - eps])
    dst = GRID64.box_of_point([1 - eps / 2, 1 - eps / 2])
    assert dst in f.image(src).tolist()


def test_circle_boxes_map_onto_circle(circle_map):
    th = np.linspace(0, 2 * np.pi, 4000, endpoint=False)
    on = np.unique(GRID64.boxes_of_points(np.stack([np.cos(th), np.sin(th)], axis=1)))
    cover = CubicalSet.from_boxes(GRID64, on)
    for b in on:
        assert cover.mask[circle_map.image(int(b))].any()


def test_images_sorted_unique(circle_map):
    for b in range(0, GRID64.size, 37):
        img = circle_map.image(b)
        assert np.all(np.diff(img) > 0)


def test_bloat_monotone():
    spec = builtin("double-well")
    g = build_grid([-2, -2], [2, 2], 32)
    maps = [build_outer_map(g, spec, 1.0, 3, r, 0.01) for r in range(3)]
    for lo, hi in zip(maps, maps[1:]):
        for b in range(g.size):
            assert set(lo.image(b).tolist()) <= set(hi.image(b).tolist())


def test_bloat_is_collar_of_hits():
    spec = builtin("double-well")
    g = build_grid([-2, -2], [2, 2], 16)
    f0 = build_outer_map(g, spec, 0.7, 3, 0, 0.01)
    f2 = build_outer_map(g, spec, 0.7, 3, 2, 0.01)
    for b in range(g.size):
        assert CubicalSet.from_boxes(g, f2.image(b)) == collar(CubicalSet.from_boxes(g, f0.image(b)), 2)


def test_determinism(circle_map):
    again = build_outer_map(GRID64, builtin("circle-attractor"), 0.5, 3, 1, 0.01)
    assert again == circle_map


def test_over_approximation_spot_check(circle_map):
    rng = np.random.default_rng(3)
    pts = rng.uniform(-2, 2, size=(1000, 2))
    w = GRID64.max_width
    pts = pts[np.all(np.abs(pts) < 2 - w, axis=1)]
    img = flow_points(builtin("circle-attractor"), pts, 0.5, 0.01)
    src, dst = GRID64.boxes_of_points(pts), GRID64.boxes_of_points(img)
    ok = [d in circle_map.image(int(s)).tolist() for s, d in zip(src, dst) if d >= 0]
    assert all(ok)


def test_out_flags_near_edge():
    f = build_outer_map(build_grid([-1, -1], [1, 1], 8), builtin("double-well"), 1.0, 3, 1, 0.01)
    g = f.grid
    # x' = x - x^3 pushes points with |x| < 1 outward toward +-1; nothing leaves [-1, 1]
    assert not f.out_flags.any()
    f = build_outer_map(g, parse_polynomial("1 0 0\n---\n0 0 0\n"), 1.0, 3, 1, 0.01)
    right = [g.flat((7, j)) for j in range(8)]
    assert f.out_flags[right].all()
    assert not f.out_flags[g.flat((0, 0))]


def test_restrict():
    g = build_grid([0, 0], [1, 1], 6)
    f = build_outer_map(g, builtin("zero-field"), 1.0, 3, 1, 0.1)
    assert restrict(f, CubicalSet.full(g)) == f
    empty = restrict(f, CubicalSet.empty(g))
    assert empty.edge_count() == 0 and not empty.out_flags.any()
    s = CubicalSet.from_coords(g, [(1, 1), (4, 4)])
    ident = restrict(build_outer_map(g, builtin("zero-field"), 1.0, 3, 0, 0.1), s)
    assert [ident.image(b).tolist() for b in s.boxes()] == [[int(b)] for b in s.boxes()]
    r = restrict(f, s)
    assert r.out_flags[s.boxes()].all()  # bloat ring leaves s


def test_round_trip(tmp_path, circle_map):
    g = build_grid([0, 0], [1, 1], 5)
    zero = build_outer_map(g, builtin("zero-field"), 1.0, 3, 0, 0.1)
    for f, name in ((zero, "zero.txt"), (circle_map, "circle.txt")):
        p = tmp_path / name
        save_map(f, p)
        assert load_map(p) == f
        save_map(load_map(p), tmp_path / "again.txt")
        assert (tmp_path / "again.txt").read_bytes() == p.read_bytes()


def test_truncated_file(tmp_path, circle_map):
    p = tmp_path / "m.txt"
    save_map(circle_map, p)
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines[:100]) + "\n")
    with pytest.raises(MapParseError, match="line"):
        load_map(p)


@pytest.mark.parametrize("bad,lineno", [("garbage header", 1), (None, 5)])
def test_malformed_file(tmp_path, bad, lineno):
    g = build_grid([0, 0], [1, 1], 2)
    p = tmp_path / "m.txt"
    save_map(build_outer_map(g, builtin("zero-field"), 1.0, 3, 0, 0.1), p)
    lines = p.read_text().splitlines()
    if bad is not None:
        lines[0] = bad
    else:
        lines[lineno - 1] = "2: 0 x"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(MapParseError) as err:
        load_map(p)
    assert err.value.lineno == lineno


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blowup_names_box():
    g = build_grid([0, 0], [10, 1], [2, 1])
    with pytest.raises(BoxBlowup) as err:
        build_outer_map(g, parse_polynomial("1 2 0\n---\n0 0 0\n"), 5.0, 2, 0, 0.05)
    assert err.value.box in (0, 1)


def test_parameter_checks():
    g = build_grid([0, 0], [1, 1], 2)
    with pytest.raises(ValueError):
        build_outer_map(g, builtin("zero-field"), 0.0)
    with pytest.raises(ValueError):
        build_outer_map(g, builtin("zero-field"), 1.0, samples_per_axis=1)
