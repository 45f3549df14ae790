import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pacrit.field import (
    DomainBox,
    ExpressionError,
    FieldError,
    Grid,
    SPDError,
    exhaustion_from_extents,
    gradient,
    identity_matrix_text,
    integrate,
    interval,
    make_exhaustion,
    parse_field_expr,
    square,
    write_grid_csv,
)


# ---------------------------------------------------------------- domains and grids


def test_domain_rejects_degenerate_box():
    with pytest.raises(FieldError):
        DomainBox((0.0,), (0.0,))
    with pytest.raises(FieldError):
        DomainBox((0.0, 1.0), (1.0, 0.5))
    with pytest.raises(FieldError):
        DomainBox((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


def test_grid_boundary_mask_is_exactly_the_box_boundary():
    g = Grid(square(1.0), (5, 7))
    lo, hi = np.array(g.domain.lower), np.array(g.domain.upper)
    on_edge = np.any(np.isclose(g.nodes, lo) | np.isclose(g.nodes, hi), axis=1)
    assert np.array_equal(g.boundary, on_edge)
    assert g.cell_volume > 0
    assert g.ncells == 4 * 6


def test_grid_needs_three_nodes_per_axis():
    with pytest.raises(FieldError):
        Grid(interval(0, 1), (2,))


def test_with_spacing_requires_commensurate_extent():
    assert Grid.with_spacing(interval(0, 1), 0.25).shape == (5,)
    with pytest.raises(FieldError):
        Grid.with_spacing(interval(0, 1), 0.3)


def test_outside_mask_marks_fixed_nodes():
    g = Grid(square(1.0), (9, 9)).without_ball((0, 0), 0.6)
    r = np.linalg.norm(g.nodes, axis=1)
    assert np.all(g.fixed[r >= 0.6])
    assert not np.any(g.fixed[(r < 0.6) & ~g.boundary])


def test_restrict_from_samples_the_same_nodes():
    small = Grid.with_spacing(square(1.0), 0.25)
    big = Grid.with_spacing(square(2.0), 0.25)
    vals = big.nodes[:, 0] + 10 * big.nodes[:, 1]
    got = small.restrict_from(big, vals)
    assert np.allclose(got, small.nodes[:, 0] + 10 * small.nodes[:, 1])


# ---------------------------------------------------------------- gradient and quadrature


def test_gradient_of_identity_is_one():
    g = Grid(interval(0, 1), (11,))
    assert np.allclose(gradient(g.nodes[:, 0], g), 1.0)


def test_gradient_of_constant_is_zero():
    g = Grid(square(1.0), (6, 6))
    assert np.allclose(gradient(np.full(g.size, 3.7), g), 0.0)


def test_gradient_of_linear_field_in_2d():
    g = Grid(square(1.0), (7, 5))
    u = g.nodes[:, 0] + 2 * g.nodes[:, 1]
    assert np.allclose(gradient(u, g), [1.0, 2.0])


def test_integrate_constants():
    g = Grid(interval(0, 1), (9,))
    assert integrate(np.ones(g.ncells), g) == pytest.approx(1.0, rel=1e-14)
    g2 = Grid(DomainBox((0, 0), (2, 2)), (5, 9))
    assert integrate(np.full(g2.ncells, 2.5), g2) == pytest.approx(10.0, rel=1e-14)


def test_integrate_identity_map_second_order():
    errs = []
    for n in (9, 17, 33):
        g = Grid(interval(0, 1), (n,))
        errs.append(abs(integrate(g.cell_centers[:, 0], g) - 0.5))
    # midpoint rule is exact on linear integrands
    assert max(errs) < 1e-14


def test_quadrature_of_gradient_integrand_converges():
    # int_0^1 (d/dx x^3)^2 = 9/5
    errs = []
    for n in (17, 33, 65):
        g = Grid(interval(0, 1), (n,))
        gx = gradient(g.nodes[:, 0] ** 3, g)[:, 0]
        errs.append(abs(integrate(gx**2, g) - 9 / 5))
    assert errs[1] < errs[0] / 1.9 and errs[2] < errs[1] / 1.9


def test_integrate_rejects_wrong_shape():
    g = Grid(interval(0, 1), (5,))
    with pytest.raises(FieldError):
        integrate(np.ones(g.size), g)


def test_write_grid_csv(tmp_path):
    g = Grid(interval(0, 1), (3,))
    path = tmp_path / "f.csv"
    write_grid_csv(path, g, u=np.array([0.0, 0.5, 1.0]))
    lines = path.read_text().splitlines()
    assert lines[0] == "x,u"
    assert lines[2] == "0.5,0.5"


# ---------------------------------------------------------------- exhaustions


def test_margin_exhaustion_of_unit_interval():
    ex = make_exhaustion(interval(0, 1), 3, 1 / 64)
    got = [(m.domain.lower[0], m.domain.upper[0]) for m in ex.members]
    assert got == [(0.25, 0.75), (0.125, 0.875), (0.0, 1.0)]


def test_concentric_boxes_are_nested():
    ex = make_exhaustion(square(4.0), 4, 0.25)
    for a, b in zip(ex.members, ex.members[1:]):
        assert np.all(b.domain.contains(a.nodes, strict=True))
    assert ex.members[-1].domain == square(4.0)
    assert np.allclose(ex.anchor, [0.0, 0.0])


def test_geometric_scheme_and_extents_constructor():
    ex = make_exhaustion(square(8.0), 4, 0.5, scheme="geometric")
    widths = [m.domain.extent[0] for m in ex.members]
    assert widths == [2.0, 4.0, 8.0, 16.0]
    ex2 = exhaustion_from_extents((0.0,), [1, 2, 4], 0.125)
    assert [m.domain.upper[0] for m in ex2.members] == [1.0, 2.0, 4.0]


def test_nesting_violation_is_an_error():
    with pytest.raises(FieldError):
        make_exhaustion(interval(0, 1), 6, 0.25)
    with pytest.raises(FieldError):
        exhaustion_from_extents((0.0,), [2, 2, 4], 0.25)


def test_anchor_must_be_in_first_member():
    with pytest.raises(FieldError):
        make_exhaustion(interval(0, 1), 3, 1 / 16, anchor=(0.9,))


# ---------------------------------------------------------------- expressions


def test_constant_and_polynomial():
    assert np.allclose(parse_field_expr("1").evaluate(np.zeros((4, 1))), 1.0)
    assert parse_field_expr("x*(1-x)").evaluate([[0.5]])[0] == pytest.approx(0.25)


def test_radial_variable_and_functions():
    f = parse_field_expr("max(0, 1 - r^2)^2 + exp(log(2)) - abs(-1) + min(x, y, 3)")
    pts = np.array([[0.6, 0.8], [0.0, 0.0]])
    expected = [0.0 + 2 - 1 + 0.6, 1.0 + 2 - 1 + 0.0]
    assert np.allclose(f.evaluate(pts), expected)


def test_precedence_and_associativity():
    ev = lambda s: float(parse_field_expr(s).evaluate([[0.0]])[0])
    assert ev("2^3^2") == 2.0**9
    assert ev("-2^2") == -4.0
    assert ev("2-3-4") == -5.0
    assert ev("8/4/2") == 1.0
    assert ev("2*pi") == pytest.approx(2 * math.pi)
    assert ev("1e-3 + .5") == pytest.approx(0.501)


def test_matrix_field_bounds():
    f = parse_field_expr("[[2,0],[0,1]]", "matrix")
    pts = np.random.default_rng(0).normal(size=(10, 2))
    vals = f.evaluate(pts)
    assert np.allclose(vals, np.diag([2.0, 1.0]))
    assert f.spd_bounds(pts) == (1.0, 2.0)


def test_matrix_is_symmetrized():
    f = parse_field_expr("[[2, x], [0, 1]]", "matrix")
    m = f.evaluate([[0.4, 0.0]])[0]
    assert np.allclose(m, [[2, 0.2], [0.2, 1]])


def test_identity_matrix_text():
    assert np.allclose(parse_field_expr(identity_matrix_text(2), "matrix").evaluate([[1.0, 2.0]])[0], np.eye(2))


@pytest.mark.parametrize(
    "text, position",
    [("1 +", 3), ("x * * 2", 4), ("foo(x)", 0), ("(1 + 2", 6), ("1 $ 2", 2), ("max(1)", 0), ("exp(1, 2)", 0)],
)
def test_parse_errors_report_position(text, position):
    with pytest.raises(ExpressionError) as err:
        parse_field_expr(text)
    assert err.value.position == position


def test_matrix_must_be_square():
    with pytest.raises(ExpressionError):
        parse_field_expr("[[1, 0]]", "matrix")


def test_spd_violation_reports_point():
    f = parse_field_expr("[[x, 0], [0, 1]]", "matrix")
    pts = np.array([[1.0, 0.0], [-0.5, 0.3]])
    with pytest.raises(SPDError) as err:
        f.spd_bounds(pts)
    assert np.allclose(err.value.point, [-0.5, 0.3])


def test_nonfinite_value_is_reported():
    with pytest.raises(SPDError):
        parse_field_expr("log(x)").evaluate([[0.0]])


_num = st.floats(-50, 50, allow_nan=False).map(lambda v: round(v, 3))


@st.composite
def _expressions(draw, depth=0):
    if depth > 3 or draw(st.booleans()):
        leaf = draw(st.one_of(_num.map(lambda v: f"({v!r})"), st.sampled_from(["x", "y"])))
        return leaf, leaf.replace("x", "X").replace("y", "Y")
    a, pa = draw(_expressions(depth + 1))
    b, pb = draw(_expressions(depth + 1))
    op = draw(st.sampled_from(["+", "-", "*"]))
    return f"({a} {op} {b})", f"({pa} {op} {pb})"


@settings(max_examples=150, deadline=None)
@given(_expressions(), st.floats(-3, 3), st.floats(-3, 3))
def test_parser_agrees_with_python_arithmetic(pair, x, y):
    text, pytext = pair
    got = float(parse_field_expr(text).evaluate([[x, y]])[0])
    want = eval(pytext, {"X": x, "Y": y})
    assert got == pytest.approx(want, rel=1e-12, abs=1e-9)
