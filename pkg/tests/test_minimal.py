import csv

import numpy as np
import pytest

from pacrit.field import Grid, exhaustion_from_extents, interval, make_exhaustion, square
from pacrit.minimal import (
    LiouvilleInput,
    alpha_exponent,
    annular_bump,
    flux,
    green_function,
    liouville_check,
    minimal_growth_solution,
    singularity_exponent,
    write_profile_csv,
)
from pacrit.solve import InconclusiveError, ProblemFamily, ProblemSpec, SolveError, solve_dirichlet


# ---------------------------------------------------------------- singularity fits


@pytest.fixture(scope="module")
def fine():
    return Grid.with_spacing(square(1.0), 1 / 64)


def _radius(grid, x0=(0.0, 0.0)):
    r = np.linalg.norm(grid.nodes - np.asarray(x0), axis=1)
    return np.where(r == 0, grid.spacing[0] / 2, r)


def test_alpha_exponent():
    assert alpha_exponent(2, 1.5) == -1.0
    assert alpha_exponent(3, 2.0) == -1.0
    assert alpha_exponent(2, 2.0) == 0.0


def test_constant_field_is_removable(fine):
    fit = singularity_exponent(np.full(fine.size, 3.0), fine, (0, 0), (1 / 16, 0.25), p=1.5)
    assert fit.classification == "removable" and fit.ratio == 1.0


def test_inverse_radius_exponent(fine):
    fit = singularity_exponent(1 / _radius(fine), fine, (0, 0), (1 / 16, 0.25), p=1.5)
    assert fit.mode == "power"
    assert fit.exponent == pytest.approx(-1.0, rel=0.02)
    assert fit.classification == "nonremovable"


def test_power_fit_absorbs_offset(fine):
    vals = 0.7 * _radius(fine) ** -1.0 - 2.0 + 3.0
    fit = singularity_exponent(vals, fine, (0, 0), (1 / 16, 0.25), p=1.5)
    # shell averaging of r^-1 perturbs the fit only slightly
    assert fit.exponent == pytest.approx(-1.0, abs=2e-3)
    assert fit.offset == pytest.approx(1.0, abs=0.05)
    assert fit.raw_slope > -0.95


def test_logarithmic_profile(fine):
    fit = singularity_exponent(-np.log(_radius(fine)), fine, (0, 0), (1 / 16, 0.25), p=2.0)
    assert fit.mode == "log"
    assert fit.exponent == pytest.approx(1.0, rel=0.02)
    assert fit.classification == "nonremovable"


def test_window_must_hold_more_than_four_radii(fine):
    with pytest.raises(SolveError):
        singularity_exponent(np.ones(fine.size), fine, (0, 0), (0.01, 0.03), p=1.5)
    with pytest.raises(SolveError):
        singularity_exponent(np.ones(fine.size), fine, (0, 0), (0.2, 0.1), p=1.5)


def test_annular_bump_support(fine):
    f = annular_bump(fine, (0, 0), 0.125)
    r = _radius(fine)
    assert np.all(f[(r <= 0.125) | (r >= 0.25)] == 0)
    assert f.max() <= 1.0 and f.max() > 0.9


# ---------------------------------------------------------------- Green function


@pytest.fixture(scope="module", params=[1.5, 2.0])
def green(request):
    ex = make_exhaustion(square(2.0), 4, 1 / 16)
    return request.param, green_function(ProblemFamily(request.param, ex), (0.0, 0.0), (0.75, 0.0),
                                         strict=False)


def test_green_normalized_and_positive(green):
    _, rep = green
    g = rep.grid
    assert rep.solution[g.nearest_node(rep.x1)] == 1.0
    assert np.all(rep.field[g.free] > 0)
    assert rep.source_radii == tuple(sorted(rep.source_radii, reverse=True))
    assert rep.source_radii[-1] == pytest.approx(2 / 16)


def test_green_near_field_profile(green):
    p, rep = green
    assert rep.classification == "nonremovable"
    if p == 2.0:
        assert rep.fit.mode == "log" and rep.fit.r2 >= 0.98
    else:
        assert rep.fit.exponent == pytest.approx(-1.0, rel=0.1)


def test_green_profile_csv(green, tmp_path):
    _, rep = green
    path = tmp_path / "profile.csv"
    write_profile_csv(path, rep)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["radius", "value"] and len(rows) == len(rep.fit.radii) + 1


def test_green_rejects_bad_normalization_point():
    ex = make_exhaustion(square(2.0), 3, 1 / 8)
    fam = ProblemFamily(2.0, ex)
    with pytest.raises(SolveError):
        green_function(fam, (0.0, 0.0), (0.25, 0.0))
    with pytest.raises(SolveError):
        green_function(fam, (0.0, 0.0), (1.5, 0.0))


def test_green_strict_non_stabilization():
    ex = make_exhaustion(square(2.0), 3, 1 / 8)
    with pytest.raises(InconclusiveError):
        green_function(ProblemFamily(1.5, ex), (0.0, 0.0), (0.75, 0.0), window=(0.25, 1.5), tol=1e-9)


# ---------------------------------------------------------------- minimal growth


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_minimal_growth_bounds(p):
    ex = exhaustion_from_extents((0.0, 0.0), [1, 2, 3], 0.125)
    rep = minimal_growth_solution(ProblemFamily(p, ex), ((0.0, 0.0), 0.5), data=2.0, strict=False)
    u = rep.solution[rep.grid.free]
    assert np.all(u > 0) and u.max() <= 2.0 * (1 + 1e-8)


def test_minimal_growth_last_member_is_one_solve():
    ex = exhaustion_from_extents((0.0, 0.0), [1.0, 2.0], 0.125)
    rep = minimal_growth_solution(ProblemFamily(3.0, ex), ((0.0, 0.0), 0.5), strict=False)
    g = ex.members[-1]
    K = np.linalg.norm(g.nodes, axis=1) <= 0.5
    direct = solve_dirichlet(ProblemSpec.build(3.0, g), g=K.astype(float), fixed=g.fixed | K).solution
    assert np.array_equal(rep.solution, direct) and len(rep.differences) == 1


def test_minimal_growth_does_not_depend_on_exhaustion():
    margin = make_exhaustion(square(2.0), 3, 0.125)
    extents = exhaustion_from_extents((0.0, 0.0), [1.25, 1.5, 2.0], 0.125)
    a = minimal_growth_solution(ProblemFamily(1.5, margin), ((0.0, 0.0), 0.25), strict=False)
    b = minimal_growth_solution(ProblemFamily(1.5, extents), ((0.0, 0.0), 0.25), strict=False)
    first = margin.members[0]
    ua, ub = first.restrict_from(a.grid, a.solution), first.restrict_from(b.grid, b.solution)
    assert np.max(np.abs(ua - ub)) <= 1e-3 * np.max(np.abs(ua))


def test_minimal_growth_input_checks():
    ex = exhaustion_from_extents((0.0, 0.0), [1, 2], 0.125)
    fam = ProblemFamily(2.0, ex)
    with pytest.raises(SolveError):
        minimal_growth_solution(fam, ((0.0, 0.0), 0.5), data=-1.0)
    with pytest.raises(SolveError):
        minimal_growth_solution(fam, ((1.0, 0.0), 0.5))
    deep = ProblemFamily(2.0, ex, V="-40*max(0, 1 - r^2)")
    with pytest.raises(SolveError):
        minimal_growth_solution(deep, ((0.0, 0.0), 0.1))


def test_minimal_growth_callable_set_and_data():
    ex = exhaustion_from_extents((0.0,), [1, 2, 4], 0.125)
    K = lambda g: np.abs(g.nodes[:, 0]) <= 0.25
    rep = minimal_growth_solution(ProblemFamily(3.0, ex), K, data=lambda x: 1 + x[:, 0] ** 2, strict=False)
    assert rep.solution.max() <= 1 + 0.25**2 + 1e-8
    assert all(d >= 0 for d in rep.differences)


# ---------------------------------------------------------------- Liouville


EXAMPLE_A0 = "[[2 + x^2, 0.5], [0.5, 1]]"


def _liouville(p=3.0, A0=EXAMPLE_A0, psi=None, phi=None, M=2.0, N=1.0, V1=0.0):
    g = Grid.with_spacing(square(1.0), 1 / 8)
    P0 = ProblemSpec.build(p, g, A=A0)
    P1 = ProblemSpec.build(p, g, V=V1)
    psi = np.ones(g.size) if psi is None else psi(g.nodes)
    phi = np.ones(g.size) if phi is None else phi(g.nodes)
    return LiouvilleInput(P0, psi, P1, phi, M, N)


def test_liouville_example_passes():
    rep = liouville_check(_liouville())
    assert rep.all_passed
    assert rep.conclusion == "criticality of problem0 certified (desk scale)"


@pytest.mark.parametrize("p", [1.5, 2.0])
def test_liouville_example_other_exponents(p):
    assert liouville_check(_liouville(p=p)).all_passed


def test_liouville_fails_i_for_non_solution():
    rep = liouville_check(_liouville(phi=lambda x: 1 + x[:, 0] ** 2))
    assert not rep.conditions["i"].passed and rep.conditions["i"].witness is not None
    assert rep.conclusion == "not certified"


def test_liouville_fails_ii_for_zero_psi():
    rep = liouville_check(_liouville(psi=lambda x: np.zeros(len(x))))
    assert not rep.conditions["ii"].passed
    assert [k for k, c in rep.conditions.items() if not c.passed] == ["ii"]


def test_liouville_fails_iii_for_small_m():
    rep = liouville_check(_liouville(M=0.5))
    res = rep.conditions["iii"]
    assert not res.passed and len(res.witness) == 2
    assert [k for k, c in rep.conditions.items() if not c.passed] == ["iii"]


def test_liouville_fails_iv_for_steep_psi():
    g = Grid(interval(0, 1), (17,))
    P = ProblemSpec.build(3.0, g)
    x = g.nodes[:, 0]
    rep = liouville_check(LiouvilleInput(P, x, P, np.ones(g.size), 2.0, 1.0))
    assert [k for k, c in rep.conditions.items() if not c.passed] == ["iv"]


def test_liouville_input_errors():
    inp = _liouville()
    with pytest.raises(SolveError):
        liouville_check(LiouvilleInput(inp.problem0, inp.psi, inp.problem1, None, 2.0, 1.0))
    other = ProblemSpec.build(3.0, Grid.with_spacing(square(1.0), 1 / 4))
    with pytest.raises(SolveError):
        liouville_check(LiouvilleInput(inp.problem0, inp.psi, other, inp.phi, 2.0, 1.0))
    q = ProblemSpec.build(2.0, inp.problem0.grid)
    with pytest.raises(SolveError):
        liouville_check(LiouvilleInput(inp.problem0, inp.psi, q, inp.phi, 2.0, 1.0))


def test_flux_of_linear_field():
    g = Grid(square(1.0), (5, 5))
    P = ProblemSpec.build(3.0, g, A="[[2, 0], [0, 1]]")
    fl = flux(g.nodes[:, 0] + g.nodes[:, 1], P)
    # |grad u|_A = sqrt(3), A grad u = (2, 1)
    assert np.allclose(fl, np.sqrt(3) * np.array([2.0, 1.0]))
