import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morsecrit.flowsim import (
    IntegrationBlowup,
    builtin,
    flow_map,
    flow_points,
    integrate,
    load_field,
    parse_polynomial,
    step_sizes,
)

from oracles import double_well_x, linear_sink


def test_field_values():
    np.testing.assert_allclose(builtin("double-well")([0.5, 0.2]), [0.375, -0.2])
    np.testing.assert_array_equal(builtin("zero-field")([1.3, -4.0]), [0.0, 0.0])
    np.testing.assert_allclose(builtin("circle-attractor")([1.0, 0.0]), [0.0, 1.0])
    np.testing.assert_allclose(builtin("linear-sink", 3)([1.0, -2.0, 3.0]), [-1.0, 2.0, -3.0])


def test_unknown_builtin():
    with pytest.raises(ValueError, match="unknown builtin"):
        builtin("lorenz")


def test_double_well_closed_form():
    tr = integrate(builtin("double-well"), [0.5, 0.0], 1e-3, 1.0)
    assert abs(tr.final[0] - double_well_x(0.5, 1.0)) <= 1e-6
    assert round(tr.final[0], 5) == 0.84335
    assert tr.times[-1] == 1.0


def test_linear_sink_closed_form():
    tr = integrate(builtin("linear-sink"), [1.0, 1.0], 1e-3, math.log(2))
    np.testing.assert_allclose(tr.final, [0.5, 0.5], atol=1e-8)


def test_zero_field_constant():
    tr = integrate(builtin("zero-field"), [0.3, -0.7], 0.1, 2.0)
    assert np.all(tr.samples == np.array([0.3, -0.7]))


def test_flow_map_examples():
    np.testing.assert_allclose(flow_map(builtin("circle-attractor"), [1.0, 0.0], math.pi / 2, 1e-3), [0.0, 1.0], atol=1e-5)
    np.testing.assert_allclose(flow_map(builtin("linear-sink"), [2.0, 0.0], math.log(4), 1e-3), [0.5, 0.0], atol=1e-9)


def test_final_step_shortened():
    steps = step_sizes(0.3, 1.0)
    assert len(steps) == 4
    assert math.isclose(sum(steps), 1.0)
    assert math.isclose(steps[-1], 0.1)
    assert step_sizes(0.25, 1.0) == [0.25] * 4


def test_flow_map_is_last_sample():
    spec = builtin("double-well")
    x = np.array([0.2, 0.9])
    assert np.array_equal(flow_map(spec, x, 0.73, 0.01), integrate(spec, x, 0.01, 0.73).final)


def test_flow_points_matches_scalar():
    spec = builtin("circle-attractor")
    pts = np.array([[0.1, 0.2], [1.5, -0.3], [-0.7, 0.7]])
    batch = flow_points(spec, pts, 0.5, 0.01)
    for p, q in zip(pts, batch):
        np.testing.assert_allclose(flow_map(spec, p, 0.5, 0.01), q, rtol=0, atol=1e-14)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blowup_reports_step():
    spec = parse_polynomial("1 2 0\n---\n0 0 0\n")  # x' = x^2
    with pytest.raises(IntegrationBlowup) as err:
        integrate(spec, [10.0, 0.0], 0.05, 5.0)
    assert err.value.step > 1
    with pytest.raises(IntegrationBlowup) as err:
        flow_points(spec, np.array([[0.0, 0.0], [10.0, 0.0]]), 5.0, 0.05)
    assert list(err.value.rows) == [1]


def test_h_larger_than_horizon():
    with pytest.raises(ValueError):
        integrate(builtin("linear-sink"), [1.0, 0.0], 1.0, 0.5)


def _order_ratio(spec, x0, exact, T, h):
    e1 = abs(integrate(spec, x0, h, T).final[0] - exact)
    e2 = abs(integrate(spec, x0, h / 2, T).final[0] - exact)
    return e1 / e2


@pytest.mark.parametrize("h", [0.2, 0.1])
def test_rk4_order(h):
    r = _order_ratio(builtin("double-well"), [0.5, 0.0], double_well_x(0.5, 2.0), 2.0, h)
    assert 12 <= r <= 20
    r = _order_ratio(builtin("linear-sink"), [1.0, 1.0], linear_sink([1.0], 2.0)[0], 2.0, h)
    assert 12 <= r <= 20


@settings(max_examples=100, deadline=None)
@given(
    st.floats(-1.9, 1.9), st.floats(-1.9, 1.9), st.floats(0.05, 1.0), st.floats(0.05, 1.0),
    st.sampled_from(["circle-attractor", "double-well", "linear-sink"]),
)
def test_semigroup(x, y, t1, t2, name):
    spec = builtin(name)
    h = 0.01
    a = flow_map(spec, flow_map(spec, [x, y], t1, h), t2, h)
    b = flow_map(spec, [x, y], t1 + t2, h)
    assert np.max(np.abs(a - b)) <= 1e-7


@pytest.mark.parametrize("r0", [0.05, 0.3, 0.8, 1.2, 1.6, 2.0])
def test_circle_radius_monotone(r0):
    # r' = -r (r - 1)^2: inside the circle r decays to 0, outside it decays to 1
    th = 0.7
    tr = integrate(builtin("circle-attractor"), [r0 * math.cos(th), r0 * math.sin(th)], 0.01, 20.0)
    r = np.hypot(tr.samples[:, 0], tr.samples[:, 1])
    assert np.all(np.diff(r) <= 1e-12)
    if r0 < 1:
        assert np.all(r < 1) and r[-1] < r0
    else:
        assert np.all(r > 1) and r[-1] < r0


def test_circle_origin_fixed():
    tr = integrate(builtin("circle-attractor"), [0.0, 0.0], 0.01, 5.0)
    assert np.all(tr.samples == 0.0)


def test_parse_polynomial(tmp_path):
    text = "# van der Pol-like\n1 0 1\n---\n-1 1 0\n0.5 0 1\n"
    spec = parse_polynomial(text)
    np.testing.assert_allclose(spec([2.0, 3.0]), [3.0, -2.0 + 1.5])
    p = tmp_path / "f.txt"
    p.write_text(text)
    assert load_field(str(p)) == spec
    with pytest.raises(ValueError, match="line 2"):
        parse_polynomial("1 0 1\n1 x 0\n")
    with pytest.raises(FileNotFoundError):
        load_field(str(tmp_path / "missing.txt"))
