"""Minimal-growth solutions, Green functions, singularity exponents, Liouville checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .energy import anorm2, apply_A
from .field import Grid, gradient
from .solve import (
    InconclusiveError,
    ProblemFamily,
    ProblemSpec,
    SolveError,
    default_tol,
    principal_eigenpair,
    residual_scale,
    solve_dirichlet,
    weak_residual,
)

REMOVABLE_RATIO = 3.0


def _ball_mask(grid: Grid, center, radius: float) -> np.ndarray:
    return np.linalg.norm(grid.nodes - np.asarray(center, dtype=float), axis=1) <= radius * (1 + 1e-12)


# ---------------------------------------------------------------- minimal growth


@dataclass(frozen=True)
class MinimalGrowthReport:
    solution: np.ndarray = field(repr=False)
    grid: Grid = field(repr=False)
    differences: tuple[float, ...]
    converged: bool


def minimal_growth_solution(family: ProblemFamily, K, data=1.0, tol: float = 1e-2,
                            mono_tol: float = 1e-6, strict: bool = True) -> MinimalGrowthReport:
    """Monotone limit of solutions in member minus K with u = data on K and 0 outside.

    ``K`` is (centre, radius) of a closed ball or a callable grid -> node mask;
    ``data`` is a positive number or a callable points -> values.
    """
    exh = family.exhaustion
    first = exh.members[0]
    prev_first = None
    prev_u, prev_grid = None, None
    diffs = []
    u = grid = None
    for k, grid in enumerate(exh.members):
        mask = K(grid) if callable(K) else _ball_mask(grid, *K)
        if np.any(mask & grid.boundary):
            raise SolveError("K must lie inside the first member")
        values = data(grid.nodes) if callable(data) else np.full(grid.size, float(data))
        if np.any(values[mask] <= 0):
            raise SolveError("boundary data on K must be positive")
        prob = family.member(k)
        if prob.V.min() < 0:
            holed = Grid(grid.domain, grid.shape, mask if grid.outside is None else mask | grid.outside)
            lam = principal_eigenpair(ProblemSpec(prob.p, holed, prob.A, prob.V, prob.eps)).lambda1
            if lam <= 0:
                raise SolveError(f"lambda_1 = {lam:.6g} <= 0 outside K on member {k}")
        g = np.where(mask, values, 0.0)
        u = solve_dirichlet(prob, g=g, fixed=grid.fixed | mask).solution
        if prev_u is not None:
            below = prev_grid.restrict_from(grid, u) - prev_u
            scale = max(1.0, float(np.max(np.abs(prev_u))))
            if below.min() < -mono_tol * scale:
                raise SolveError(f"monotonicity violated by {-below.min():.3e} on member {k}")
        on_first = first.restrict_from(grid, u)
        if prev_first is not None:
            diffs.append(float(np.max(np.abs(on_first - prev_first)) / max(np.max(np.abs(on_first)), 1e-300)))
        prev_first, prev_u, prev_grid = on_first, u, grid
    converged = not diffs or diffs[-1] <= tol
    if strict and not converged:
        raise InconclusiveError(f"members still differ by {diffs[-1]:.3e} > {tol:g}")
    return MinimalGrowthReport(u, grid, tuple(diffs), converged)


# ---------------------------------------------------------------- singularity


def alpha_exponent(n: int, p: float) -> float:
    return (p - n) / (p - 1)


@dataclass(frozen=True)
class SingularityFit:
    """Near-field fit.  ``exponent`` is the power (p < n) or log coefficient (p >= n)."""

    exponent: float
    offset: float
    r2: float
    raw_slope: float
    classification: str
    radii: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    ratio: float
    mode: str


def _linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    slope, icpt = np.polyfit(x, y, 1)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - slope * x - icpt) ** 2)) / ss if ss > 0 else 0.0
    return float(slope), float(icpt), r2


def _power_fit(rad: np.ndarray, val: np.ndarray) -> tuple[float, float, float, float]:
    """Least squares u = c r^a + b over a < 0; returns (a, c, b, r2)."""

    def sse(a):
        _, _, r2 = _linear_fit(rad**a, val)
        return 1.0 - r2

    grid = np.linspace(-4.0, -0.02, 198)
    k = int(np.argmin([sse(a) for a in grid]))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    a = float(minimize_scalar(sse, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10}).x)
    c, b, r2 = _linear_fit(rad**a, val)
    return a, c, b, r2


def singularity_exponent(values: np.ndarray, grid: Grid, x0, window: tuple[float, float],
                         p: float, n: int | None = None, shells: int = 12) -> SingularityFit:
    """Fit the radial profile about x0 over log-spaced shells inside ``window``.

    p < n: u = c r^a + b, exponent a.  p >= n: u = c (-log r) + b, exponent c.
    The additive constant absorbs the bounded-domain correction.  The plain
    slope of log u against log r is kept as ``raw_slope``.
    """
    n = grid.dimension if n is None else n
    r = np.linalg.norm(grid.nodes - np.asarray(x0, dtype=float), axis=1)
    lo, hi = window
    if not 0 < lo < hi:
        raise SolveError("fit window must satisfy 0 < inner < outer")
    edges = np.geomspace(lo, hi, shells + 1)
    rad, val = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (r >= a) & (r < b)
        if sel.any():
            rad.append(float(np.exp(np.mean(np.log(r[sel])))))
            val.append(float(np.mean(values[sel])))
    if len(rad) <= 4:
        raise SolveError(f"fit window holds only {len(rad)} sample radii")
    rad, val = np.array(rad), np.array(val)
    if np.any(val <= 0):
        raise SolveError("field must be positive on the fit window")
    in_window = (r >= lo) & (r <= hi)
    ratio = float(np.max(values[in_window]) / np.median(values[in_window]))
    raw, _, _ = _linear_fit(np.log(rad), np.log(val))
    if p < n:
        expo, c, offset, r2 = _power_fit(rad, val)
        expected = alpha_exponent(n, p)
        diverging = c > 0 and abs(expo - expected) <= 0.25 * abs(expected) and r2 >= 0.9
        mode = "power"
    else:
        expo, offset, r2 = _linear_fit(-np.log(rad), val)
        diverging = p == n and expo > 0.1 * float(np.median(val)) and r2 >= 0.9
        mode = "log"
    if diverging:
        label = "nonremovable"
    elif ratio < REMOVABLE_RATIO:
        label = "removable"
    else:
        label = "inconclusive"
    return SingularityFit(expo, offset, r2, raw, label, rad, val, ratio, mode)


# ---------------------------------------------------------------- Green function


@dataclass(frozen=True)
class GreenReport:
    solution: np.ndarray = field(repr=False)
    grid: Grid = field(repr=False)
    x0: np.ndarray
    x1: np.ndarray
    fit: SingularityFit
    differences: tuple[float, ...]
    source_radii: tuple[float, ...]
    converged: bool

    @property
    def classification(self) -> str:
        return self.fit.classification

    @property
    def field(self) -> np.ndarray:
        return self.solution


def annular_bump(grid: Grid, x0, inner: float) -> np.ndarray:
    """Unit-peak bump supported in inner < |x - x0| < 2 inner."""
    r = np.linalg.norm(grid.nodes - np.asarray(x0, dtype=float), axis=1)
    out = np.zeros(grid.size)
    live = (r > inner) & (r < 2 * inner)
    out[live] = (4 * (r[live] - inner) * (2 * inner - r[live]) / inner**2) ** 2
    return out


def green_function(family: ProblemFamily, x0, x1, window: tuple[float, float] | None = None,
                   tol: float = 5e-2, shells: int = 12, strict: bool = True) -> GreenReport:
    """Normalized limit of solutions with shrinking annular sources about x0.

    Source inner radii shrink geometrically to 2h on the last member; each
    solution is scaled to 1 at x1 and successive members are compared on
    the first member at distance at least |x1 - x0|/2 from x0.  The default fit window is
    [4h, d/4] with d the distance from x0 to the boundary of the base box.
    """
    exh = family.exhaustion
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    h = float(np.max(exh.spacing))
    count = len(exh)
    first = exh.members[0]
    reach = float(np.linalg.norm(x1 - x0))
    if not first.domain.contains(x1[None, :], strict=True)[0] or reach <= 4 * h:
        raise SolveError("x1 must lie in the first member, away from x0")
    start = max(2 * h, min(2 * h * 2.0 ** (count - 1), reach / 4))
    radii = tuple(float(r) for r in np.geomspace(start, 2 * h, count))
    # compare members away from the shrinking sources
    keep = np.linalg.norm(first.nodes - x0, axis=1) >= reach / 2
    prev = None
    diffs = []
    u = grid = None
    for k, grid in enumerate(exh.members):
        prob = family.member(k)
        if prob.V.min() < 0:
            lam = principal_eigenpair(prob).lambda1
            if lam <= 0:
                raise SolveError(f"lambda_1 = {lam:.6g} <= 0 on member {k}")
        f = annular_bump(grid, x0, radii[k])
        if not f.any():
            raise SolveError("source annulus not resolved by the grid")
        rep = solve_dirichlet(prob, f=f)
        u = rep.solution / rep.solution[grid.nearest_node(x1)]
        on_first = first.restrict_from(grid, u)
        if prev is not None:
            diffs.append(float(np.max(np.abs(on_first - prev)[keep]) / np.max(np.abs(on_first[keep]))))
        prev = on_first
    base = grid.domain
    if window is None:
        dist = float(np.min(np.minimum(x0 - np.asarray(base.lower), np.asarray(base.upper) - x0)))
        window = (4 * h, dist / 4)
    fit = singularity_exponent(u, grid, x0, window, family.p, grid.dimension, shells)
    converged = not diffs or diffs[-1] <= tol
    if strict and not converged:
        raise InconclusiveError(f"normalized members still differ by {diffs[-1]:.3e} > {tol:g}")
    return GreenReport(u, grid, x0, x1, fit, tuple(diffs), radii, converged)


def write_profile_csv(path, report: GreenReport) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["radius", "value"])
        for r, v in zip(report.fit.radii, report.fit.values):
            w.writerow([repr(float(r)), repr(float(v))])


# ---------------------------------------------------------------- Liouville


@dataclass(frozen=True)
class LiouvilleInput:
    problem0: ProblemSpec
    psi: np.ndarray
    problem1: ProblemSpec
    phi: np.ndarray | None
    M: float
    N: float


@dataclass(frozen=True)
class ConditionResult:
    passed: bool
    witness: tuple[float, ...] | None
    detail: str


@dataclass(frozen=True)
class LiouvilleReport:
    conditions: dict
    conclusion: str

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.conditions.values())


def _point(grid: Grid, idx: int, cells: bool) -> tuple[float, ...]:
    pts = grid.cell_centers if cells else grid.nodes
    return tuple(float(c) for c in pts[idx])


def liouville_check(inp: LiouvilleInput, tol: float = 1e-8) -> LiouvilleReport:
    """Check the four Liouville comparison conditions on a shared grid.

    (i) phi positive solution for problem1; (ii) psi_+ nonzero, problem0
    nonnegative and psi a subsolution; (iii) M^2 phi^2 A1 - psi_+^2 A0
    nonnegative definite per cell; (iv) |grad psi|_A0^(p-2) <= N^(p-2)
    |grad phi|_A1^(p-2) on cells where psi > 0.
    """
    P0, P1 = inp.problem0, inp.problem1
    if inp.phi is None:
        raise SolveError("missing ground state phi")
    grid = P0.grid
    if P1.grid is not grid and (P1.grid.shape != grid.shape or P1.grid.domain != grid.domain):
        raise SolveError("problems must share the grid")
    if P0.p != P1.p:
        raise SolveError("problems must share the exponent p")
    p = P0.p
    phi = np.asarray(inp.phi, dtype=float)
    psi = np.asarray(inp.psi, dtype=float)
    free = grid.free
    out = {}

    # (i)
    if np.any(phi <= 0):
        i = int(np.argmin(phi))
        out["i"] = ConditionResult(False, _point(grid, i, False), "phi not positive")
    else:
        r = weak_residual(phi, P1)[free]
        scale = residual_scale(phi, P1)
        j = int(np.argmax(np.abs(r))) if r.size else 0
        ok = r.size == 0 or abs(r[j]) <= tol * scale
        out["i"] = ConditionResult(bool(ok), None if ok else _point(grid, free[j], False),
                                   f"max |residual| {abs(r[j]) if r.size else 0.0:.3e}")

    # (ii)
    plus = np.maximum(psi, 0.0)
    if not np.any(plus[free] > 0):
        out["ii"] = ConditionResult(False, _point(grid, int(free[0]), False), "psi_+ vanishes")
    else:
        detail = []
        ok = True
        witness = None
        if P0.V.min() < 0:
            lam = principal_eigenpair(P0).lambda1
            detail.append(f"lambda_1 {lam:.6g}")
            if lam < -10 * default_tol(p):
                ok = False
        r = weak_residual(psi, P0)[free]
        scale = residual_scale(psi, P0)
        j = int(np.argmax(r))
        if r[j] > tol * scale:
            ok = False
            witness = _point(grid, int(free[j]), False)
        detail.append(f"max residual {r[j]:.3e}")
        out["ii"] = ConditionResult(ok, witness, ", ".join(detail))

    # (iii)
    phc = grid.cell_values(phi)
    psc = np.maximum(grid.cell_values(psi), 0.0)
    n = grid.dimension
    eye = np.broadcast_to(np.eye(n), (grid.ncells, n, n))
    A0 = eye if P0.A is None else P0.A
    A1 = eye if P1.A is None else P1.A
    mat = (inp.M * phc)[:, None, None] ** 2 * A1 - psc[:, None, None] ** 2 * A0
    low = np.linalg.eigvalsh(mat)[:, 0]
    ref = np.max(np.abs(mat).reshape(grid.ncells, -1), axis=1) + 1.0
    bad = low < -tol * ref
    out["iii"] = ConditionResult(not bad.any(),
                                 _point(grid, int(np.argmax(bad)), True) if bad.any() else None,
                                 f"min eigenvalue {low.min():.3e}")

    # (iv): t -> t^(p-2) is monotone, so compare |grad psi| with N |grad phi|
    a = np.sqrt(anorm2(P0.A, gradient(psi, grid)))
    b = inp.N * np.sqrt(anorm2(P1.A, gradient(phi, grid)))
    pos = grid.cell_values(psi) > 0
    slack = tol * (1.0 + np.maximum(a, b))
    if p > 2:
        bad = pos & (a > b + slack)
    elif p < 2:
        bad = pos & (a < b - slack)
    else:
        bad = np.zeros_like(pos)
    out["iv"] = ConditionResult(not bad.any(),
                                _point(grid, int(np.argmax(bad)), True) if bad.any() else None,
                                f"{int(bad.sum())} violating cells")
    passed = all(c.passed for c in out.values())
    conclusion = "criticality of problem0 certified (desk scale)" if passed else "not certified"
    return LiouvilleReport(out, conclusion)


def flux(u: np.ndarray, problem: ProblemSpec) -> np.ndarray:
    """Cellwise |grad u|_A^(p-2) A grad u."""
    g = gradient(u, problem.grid)
    w = np.power(anorm2(problem.A, g) + problem.eps**2, 0.5 * (problem.p - 2))
    return apply_A(problem.A, g) * w[:, None]


__all__ = [
    "GreenReport", "LiouvilleInput", "LiouvilleReport", "MinimalGrowthReport", "SingularityFit",
    "alpha_exponent", "annular_bump", "green_function", "liouville_check", "minimal_growth_solution",
    "singularity_exponent", "write_profile_csv", "flux",
]
