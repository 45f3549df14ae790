"""Dirichlet solver, principal eigenpair and positive solutions on exhaustions.

All solvers minimize a regularized energy

    J(u) = (1/p) int F(grad u) + (1/p) int V Phi(u) - <b, u>

with F(xi) = (|xi|_A^2 + eps^2)^(p/2) and Phi(s) = (s^2 + eps^2)^(p/2), so that
the gradient of J is the weak Euler-Lagrange residual tested against nodal
hat functions.  Steps are damped Newton directions with an Armijo line search,
falling back to the Laplacian-preconditioned gradient when the Newton
direction is not a descent direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .energy import anorm2, apply_A, default_eps
from .field import CoefficientField, Exhaustion, Grid, SPDError, gradient, integrate, parse_field_expr


class SolveError(RuntimeError):
    """Analysis failed (non-convergence, violated precondition)."""


class SupercriticalError(SolveError):
    """The energy is not bounded below: lambda_1 <= 0 on some grid."""


class InconclusiveError(SolveError):
    """Finite evidence does not settle the question."""


MAX_ITER = 100_000
KACANOV_SWITCH = 1e-2
# inner accuracy of the inverse power steps; Newton does the final polish
INVERSE_TOL = 1e-5


def default_tol(p: float) -> float:
    return 1e-8 if p >= 2 else 1e-6


def cellwise(coef, grid: Grid, kind: str = "scalar") -> np.ndarray | None:
    """Evaluate a coefficient (text, CoefficientField, callable, number or array) at cell centres."""
    if coef is None:
        return None
    if isinstance(coef, str):
        coef = parse_field_expr(coef, kind)
    pts = grid.cell_centers
    if isinstance(coef, CoefficientField):
        return coef.evaluate(pts)
    if callable(coef):
        return np.asarray(coef(pts), dtype=float)
    arr = np.asarray(coef, dtype=float)
    if kind == "scalar":
        return np.broadcast_to(arr, (grid.ncells,)).astype(float) if arr.ndim == 0 else arr
    if arr.ndim == 2:
        return np.broadcast_to(arr, (grid.ncells,) + arr.shape).astype(float)
    return arr


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Exponent, grid, per-cell matrix A (None means identity), per-cell V, regularization."""

    p: float
    grid: Grid
    A: np.ndarray | None = field(default=None, repr=False)
    V: np.ndarray = field(default=None, repr=False)
    eps: float = None

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError("p must exceed 1")
        n, m = self.grid.dimension, self.grid.ncells
        V = np.zeros(m) if self.V is None else np.asarray(self.V, dtype=float)
        if V.shape != (m,) or not np.all(np.isfinite(V)):
            raise ValueError("V must be finite with one value per cell")
        object.__setattr__(self, "V", V)
        if self.A is not None:
            A = np.asarray(self.A, dtype=float)
            if A.shape != (m, n, n):
                raise ValueError(f"A must have shape {(m, n, n)}")
            eig = np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, 1, 2)))
            if np.any(eig[:, 0] <= 0):
                bad = int(np.argmax(eig[:, 0] <= 0))
                raise SPDError("A not positive definite at a cell centre", self.grid.cell_centers[bad])
            object.__setattr__(self, "A", A)
        eps = default_eps(self.p) if self.eps is None else float(self.eps)
        if eps < 0 or (eps == 0 and self.p < 2):
            raise ValueError("eps must be positive when p < 2")
        object.__setattr__(self, "eps", eps)

    @classmethod
    def build(cls, p: float, grid: Grid, A=None, V=0.0, eps: float | None = None) -> "ProblemSpec":
        return cls(float(p), grid, cellwise(A, grid, "matrix"), cellwise(V, grid), eps)

    def with_potential(self, V: np.ndarray) -> "ProblemSpec":
        return replace(self, V=np.asarray(V, dtype=float))

    @property
    def ellipticity(self) -> tuple[float, float]:
        if self.A is None:
            return 1.0, 1.0
        eig = np.linalg.eigvalsh(self.A)
        return float(eig[:, 0].min()), float(eig[:, -1].max())


@dataclass(frozen=True, eq=False)
class ProblemFamily:
    """Coefficient data on every member of an exhaustion."""

    p: float
    exhaustion: Exhaustion
    A: object = None
    V: object = 0.0
    eps: float | None = None

    def member(self, k: int, extra_V=None) -> ProblemSpec:
        grid = self.exhaustion.members[k]
        prob = ProblemSpec.build(self.p, grid, self.A, self.V, self.eps)
        if extra_V is not None:
            prob = prob.with_potential(prob.V + cellwise(extra_V, grid))
        return prob

    def __len__(self) -> int:
        return len(self.exhaustion)


# ---------------------------------------------------------------- assembly


class _Energy:
    """Regularized energy, gradient and Hessian on one grid."""

    def __init__(self, problem: ProblemSpec, V: np.ndarray | None = None):
        self.problem = problem
        grid = problem.grid
        self.G, self.S = grid.operators
        self.vol = grid.cell_volume
        self.V = problem.V if V is None else V
        self.p = problem.p
        self.eps = problem.eps

    def _parts(self, u):
        g = np.stack([G @ u for G in self.G], axis=1)
        s = self.S @ u
        return g, s

    def value(self, u, load=None) -> float:
        g, s = self._parts(u)
        e2 = self.eps**2
        dens = np.power(anorm2(self.problem.A, g) + e2, 0.5 * self.p)
        dens = dens + self.V * np.power(s * s + e2, 0.5 * self.p)
        val = integrate(dens, self.problem.grid) / self.p
        if load is not None:
            val -= float(load @ u)
        return val

    def gradient(self, u, load=None) -> np.ndarray:
        g, s = self._parts(u)
        A, p, e2 = self.problem.A, self.p, self.eps**2
        w = np.power(anorm2(A, g) + e2, 0.5 * (p - 2))
        flux = apply_A(A, g) * (w * self.vol)[:, None]
        out = sum(G.T @ flux[:, a] for a, G in enumerate(self.G))
        ws = np.power(s * s + e2, 0.5 * (p - 2))
        out = out + self.S.T @ (self.vol * self.V * ws * s)
        if load is not None:
            out = out - load
        return out

    def mass_gradient(self, u) -> np.ndarray:
        s = self.S @ u
        ws = np.power(s * s + self.eps**2, 0.5 * (self.p - 2))
        return self.S.T @ (self.vol * ws * s)

    def hessian(self, u, mass_coef: float = 0.0, majorant: bool = False) -> sp.csr_matrix:
        """Hessian of J, optionally minus mass_coef times the mass Hessian.

        ``majorant`` drops the rank-one (p-2) terms: for p < 2 this gives the
        quadratic majorizer of the gradient part (a Kacanov step).
        """
        g, s = self._parts(u)
        A, p, e2 = self.problem.A, self.p, self.eps**2
        n2 = anorm2(A, g) + e2
        w = np.power(n2, 0.5 * (p - 2))
        Ag = apply_A(A, g)
        n = g.shape[1]
        rank1 = 0.0 if majorant else p - 2
        H = None
        for a in range(n):
            for b in range(n):
                base = (A[:, a, b] if A is not None else float(a == b)) * w
                coef = base + rank1 * w * Ag[:, a] * Ag[:, b] / n2
                term = self.G[a].T @ sp.diags(self.vol * coef) @ self.G[b]
                H = term if H is None else H + term
        ws2 = s * s + e2
        ds = np.power(ws2, 0.5 * (p - 2)) * (1 + rank1 * s * s / ws2)
        pot = self.V - mass_coef
        H = H + self.S.T @ sp.diags(self.vol * pot * ds) @ self.S
        return H.tocsr()

    def mass(self, u) -> float:
        s = self.S @ u
        return integrate(np.power(s * s + self.eps**2, 0.5 * self.p), self.problem.grid)


class _Dual:
    """Dual norm sqrt(r^T K^-1 r) for the p=2, A=I stiffness on the free nodes."""

    def __init__(self, grid: Grid, free: np.ndarray):
        G, _ = grid.operators
        K = sum(g.T @ g for g in G) * grid.cell_volume
        self.K = K.tocsr()[free][:, free].tocsc()
        self.lu = spla.splu(self.K)

    def solve(self, r):
        return self.lu.solve(r)

    def norm(self, r) -> float:
        return float(np.sqrt(max(r @ self.solve(r), 0.0)))


_DUAL_CACHE: dict = {}


def _dual(grid: Grid, free: np.ndarray) -> _Dual:
    key = (id(grid), grid.size, free.size, int(free.sum()) if free.size else 0)
    hit = _DUAL_CACHE.get(key)
    if hit is None or hit[0] is not grid:
        if len(_DUAL_CACHE) > 64:
            _DUAL_CACHE.clear()
        hit = (grid, _Dual(grid, free))
        _DUAL_CACHE[key] = hit
    return hit[1]


@dataclass
class _MinResult:
    u: np.ndarray
    value: float
    residual: float
    iterations: int
    converged: bool


def _minimize(
    energy: _Energy,
    u: np.ndarray,
    free: np.ndarray,
    load: np.ndarray | None,
    tol: float,
    maxiter: int,
    lower: tuple[np.ndarray, float] | None = None,
) -> _MinResult:
    """Damped Newton / preconditioned gradient descent over the free nodes.

    ``lower`` = (node indices, bound) keeps those nodes >= bound by projection.
    """
    u = np.array(u, dtype=float)
    dual = _dual(energy.problem.grid, free)
    val = energy.value(u, load)
    r = energy.gradient(u, load)[free]
    scale = max(1.0, dual.norm(r))
    mu = 0.0
    it = 0
    res = dual.norm(r)
    while it < maxiter:
        if res <= tol * scale:
            return _MinResult(u, val, res, it, True)
        it += 1
        far = energy.p < 2 and res > KACANOV_SWITCH * scale
        H = energy.hessian(u, majorant=far)[free][:, free]
        if mu > 0:
            H = H + mu * dual.K
        d = None
        try:
            d = spla.splu(H.tocsc()).solve(-r)
            if not np.all(np.isfinite(d)) or d @ r >= 0:
                d = None
        except RuntimeError:
            d = None
        newton = d is not None
        if not newton:
            d = -dual.solve(r)
        slope = float(d @ r)
        t = 1.0
        accepted = False
        for _ in range(60):
            trial = u.copy()
            trial[free] += t * d
            if lower is not None:
                idx, bound = lower
                trial[idx] = np.maximum(trial[idx], bound)
            tval = energy.value(trial, load)
            if np.isfinite(tval) and tval <= val + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if newton:
                mu = max(10 * mu, 1e-8)
                continue
            if res <= 10 * tol * scale:
                return _MinResult(u, val, res, it, True)
            return _MinResult(u, val, res, it, False)
        if not np.isfinite(tval) or tval < -1e14 or np.max(np.abs(trial)) > 1e14:
            raise SupercriticalError("energy unbounded below: lambda_1 <= 0 on this grid")
        u, val = trial, tval
        r = energy.gradient(u, load)[free]
        res = dual.norm(r)
        mu = 0.0 if t == 1.0 else max(mu, 0.0)
    return _MinResult(u, val, res, it, res <= tol * scale)


# ---------------------------------------------------------------- Dirichlet


@dataclass(frozen=True)
class SolveReport:
    solution: np.ndarray = field(repr=False)
    energy: float
    residual: float
    iterations: int
    converged: bool


def _load_from_source(problem: ProblemSpec, f) -> np.ndarray | None:
    if f is None:
        return None
    grid = problem.grid
    f = np.broadcast_to(np.asarray(f, dtype=float), (grid.size,))
    return grid.operators[1].T @ (grid.cell_volume * grid.cell_values(f))


def exact_energy(u: np.ndarray, problem: ProblemSpec, f=None) -> float:
    """int |grad u|_A^p + V|u|^p - p f u without regularization."""
    grid = problem.grid
    g = gradient(u, grid)
    s = grid.cell_values(u)
    dens = np.power(anorm2(problem.A, g), 0.5 * problem.p) + problem.V * np.abs(s) ** problem.p
    if f is not None:
        dens = dens - problem.p * grid.cell_values(np.broadcast_to(f, (grid.size,))) * s
    return integrate(dens, grid)


def solve_dirichlet(
    problem: ProblemSpec,
    f=None,
    g=None,
    u0: np.ndarray | None = None,
    tol: float | None = None,
    maxiter: int = MAX_ITER,
    fixed: np.ndarray | None = None,
    strict: bool = True,
) -> SolveReport:
    """Minimize int |grad u|_A^p + V|u|^p - p f u with u = g on fixed nodes.

    ``fixed`` optionally replaces the grid's Dirichlet mask (e.g. to add an
    inner obstacle set).  Raises SupercriticalError when the energy is
    unbounded below and SolveError on non-convergence if ``strict``.
    """
    grid = problem.grid
    mask = grid.fixed if fixed is None else np.asarray(fixed, dtype=bool)
    free = np.flatnonzero(~mask)
    u = np.zeros(grid.size) if u0 is None else np.array(u0, dtype=float)
    if g is not None:
        gv = np.broadcast_to(np.asarray(g, dtype=float), (grid.size,))
        u[mask] = gv[mask]
    else:
        u[mask] = 0.0
    tol = default_tol(problem.p) if tol is None else tol
    energy = _Energy(problem)
    load = _load_from_source(problem, f)
    if free.size == 0:
        return SolveReport(u, exact_energy(u, problem, f), 0.0, 0, True)
    res = _minimize(energy, u, free, load, tol, maxiter)
    report = SolveReport(res.u, exact_energy(res.u, problem, f), res.residual, res.iterations, res.converged)
    if strict and not res.converged:
        raise SolveError(f"Dirichlet solve did not converge (residual {res.residual:.3e})")
    return report


def weak_residual(u: np.ndarray, problem: ProblemSpec, f=None) -> np.ndarray:
    """Nodal residual int |grad u|^(p-2) A grad u . grad h + V|u|^(p-2) u h - f h."""
    grid = problem.grid
    g = gradient(u, grid)
    s = grid.cell_values(u)
    p, A = problem.p, problem.A
    w = np.power(anorm2(A, g) + problem.eps**2, 0.5 * (p - 2))
    flux = apply_A(A, g) * (w * grid.cell_volume)[:, None]
    G, S = grid.operators
    out = sum(Ga.T @ flux[:, a] for a, Ga in enumerate(G))
    with np.errstate(divide="ignore", invalid="ignore"):
        pot = np.where(s != 0, np.abs(s) ** (p - 2) * s, 0.0)
    out = out + S.T @ (grid.cell_volume * problem.V * pot)
    load = _load_from_source(problem, f)
    return out if load is None else out - load


def residual_scale(u: np.ndarray, problem: ProblemSpec) -> float:
    """Size of the individual terms entering weak_residual, for relative tests."""
    grid = problem.grid
    g = gradient(u, grid)
    s = grid.cell_values(u)
    flux = np.power(anorm2(problem.A, g), 0.5 * (problem.p - 1))
    pot = np.abs(problem.V) * np.abs(s) ** (problem.p - 1)
    return float(np.max(flux + pot, initial=0.0) * grid.cell_volume / np.min(grid.spacing)) + 1e-300


# ---------------------------------------------------------------- eigenpair


@dataclass(frozen=True)
class EigenReport:
    lambda1: float
    phi: np.ndarray = field(repr=False)
    shift: float
    iterations: int
    converged: bool
    residual: float
    normalization: float


def exact_mass(u: np.ndarray, problem: ProblemSpec) -> float:
    return integrate(np.abs(problem.grid.cell_values(u)) ** problem.p, problem.grid)


def rayleigh(u: np.ndarray, problem: ProblemSpec) -> float:
    return exact_energy(u, problem) / exact_mass(u, problem)


def default_start(grid: Grid) -> np.ndarray:
    lo = np.asarray(grid.domain.lower)
    ext = grid.domain.extent
    u = np.prod(np.sin(np.pi * (grid.nodes - lo) / ext), axis=1)
    u[grid.fixed] = 0.0
    if not np.any(u > 0):
        u = (~grid.fixed).astype(float)
    return np.maximum(u, 0.0)


def _normalize(u: np.ndarray, problem: ProblemSpec) -> np.ndarray:
    m = exact_mass(u, problem)
    if not m > 0:
        raise SolveError("eigen iterate collapsed to zero")
    return u / m ** (1.0 / problem.p)


def _eigen_residual(energy: _Energy, phi, lam, free, dual) -> float:
    r = energy.gradient(phi)[free] - lam * energy.mass_gradient(phi)[free]
    return dual.norm(r)


def principal_eigenpair(
    problem: ProblemSpec,
    init: np.ndarray | None = None,
    tol: float | None = None,
    maxiter: int = 2000,
) -> EigenReport:
    """Principal eigenvalue and nonnegative eigenfunction with int |phi|^p = 1.

    Shifted inverse power steps on the coercive operator with V + M bring the
    iterate near the principal eigenfunction; Newton steps on the bordered
    system (eigen equation plus normalization) then finish the solve.
    """
    grid = problem.grid
    free = grid.free
    if free.size == 0:
        raise SolveError("degenerate grid: no interior nodes")
    p = problem.p
    tol = default_tol(p) if tol is None else tol
    shift = max(0.0, -float(problem.V.min())) + 1.0
    shifted = _Energy(problem, problem.V + shift)
    plain = _Energy(problem)
    dual = _dual(grid, free)
    phi = default_start(grid) if init is None else np.where(grid.fixed, 0.0, np.abs(init))
    phi = _normalize(phi, problem)
    iterations = 0

    def inverse_steps(phi, count):
        nonlocal iterations
        prev = rayleigh(phi, problem)
        for _ in range(count):
            iterations += 1
            load = shifted.mass_gradient(phi)
            # start from the best multiple of phi: J is nearly p-homogeneous
            scale = (float(load @ phi) / float(shifted.gradient(phi) @ phi)) ** (1.0 / (p - 1))
            res = _minimize(shifted, scale * phi, free, load, INVERSE_TOL, 200)
            phi = _normalize(np.maximum(res.u, 0.0) if res.u[free].sum() > 0 else -res.u, problem)
            lam = rayleigh(phi, problem)
            if abs(lam - prev) <= 1e-10 * (abs(lam) + shift):
                break
            prev = lam
        return phi

    def newton(phi, steps):
        nonlocal iterations
        lam = rayleigh(phi, problem)
        for _ in range(steps):
            res = _eigen_residual(plain, phi, lam, free, dual)
            if res <= tol:
                return phi, lam, res, True
            iterations += 1
            m = plain.mass_gradient(phi)[free]
            R1 = plain.gradient(phi)[free] - lam * m
            c = (plain.mass(phi) - 1.0) / p
            H = plain.hessian(phi, mass_coef=lam)[free][:, free]
            mcol = sp.csr_matrix(m[:, None])
            J = sp.bmat([[H, -mcol], [mcol.T, None]]).tocsc()
            try:
                step = spla.splu(J).solve(np.concatenate([-R1, [-c]]))
            except RuntimeError:
                return phi, lam, res, False
            best = None
            t = 1.0
            for _ in range(30):
                trial = phi.copy()
                trial[free] += t * step[:-1]
                if np.all(np.isfinite(trial)) and exact_mass(trial, problem) > 0:
                    trial = _normalize(trial, problem)
                    tlam = rayleigh(trial, problem)
                    tres = _eigen_residual(plain, trial, tlam, free, dual)
                    if tres < res:
                        best = (trial, tlam)
                        break
                t *= 0.5
            if best is None:
                return phi, lam, res, False
            phi, lam = best
        res = _eigen_residual(plain, phi, lam, free, dual)
        return phi, lam, res, res <= tol

    phi = inverse_steps(phi, 3 if init is not None else 6)
    converged = False
    lam = rayleigh(phi, problem)
    res = np.inf
    budget = maxiter
    while budget > 0:
        cand, clam, cres, ok = newton(phi, 40)
        peak = np.max(np.abs(cand))
        if ok and np.min(cand[free]) >= -1e-8 * peak:
            phi, lam, res, converged = cand, clam, cres, True
            break
        phi = inverse_steps(phi, 20)
        budget -= 20
        lam = rayleigh(phi, problem)
        res = _eigen_residual(plain, phi, lam, free, dual)
    phi = np.where(grid.fixed, 0.0, np.maximum(phi, 0.0))
    phi = _normalize(phi, problem)
    lam = rayleigh(phi, problem)
    return EigenReport(lam, phi, shift, iterations, converged, float(res), exact_mass(phi, problem))


# ---------------------------------------------------------------- exhaustion solutions


def layer_bump(grid: Grid, inner, outer) -> np.ndarray:
    """Smooth bump with unit peak, supported in outer minus the closure of inner.

    ``inner`` may be None, giving a bump over the whole of ``outer``.
    """
    pts = grid.nodes
    olo, ohi = np.asarray(outer.lower), np.asarray(outer.upper)
    b = np.min(np.minimum(pts - olo, ohi - pts), axis=1)
    if inner is None:
        t = np.clip(b / (0.5 * np.min(outer.extent)), 0, 1)
        return np.sin(0.5 * np.pi * t) ** 4
    ilo, ihi = np.asarray(inner.lower), np.asarray(inner.upper)
    outside = np.maximum(ilo - pts, pts - ihi)
    a = np.where(np.any(outside > 0, axis=1), np.linalg.norm(np.clip(outside, 0, None), axis=1), 0.0)
    live = (a > 0) & (b > 0)
    out = np.zeros(len(pts))
    out[live] = (4 * a[live] * b[live] / (a[live] + b[live]) ** 2) ** 2
    return out


@dataclass(frozen=True)
class AAPReport:
    solution: np.ndarray = field(repr=False)
    grid: Grid = field(repr=False)
    members_used: int
    differences: tuple[float, ...]
    lambdas: tuple[float, ...]
    residual: float
    converged: bool


def positive_solution_aap(family: ProblemFamily, tol: float = 1e-4) -> AAPReport:
    """Positive solution as a limit of Dirichlet problems with sources in the layers.

    Each member solve uses a source supported in the layer between that member
    and the previous one; solutions are normalized to 1 at the anchor.
    """
    exh = family.exhaustion
    first = exh.members[0]
    prev = None
    diffs, lams = [], []
    u = None
    grid = None
    resid = np.inf
    for k, grid in enumerate(exh.members):
        prob = family.member(k)
        eig = principal_eigenpair(prob)
        lams.append(eig.lambda1)
        if eig.lambda1 <= 0:
            raise SupercriticalError(
                f"functional not nonnegative: lambda_1 = {eig.lambda1:.6g} on member {k}")
        inner = exh.members[k - 1].domain if k > 0 else None
        f = layer_bump(grid, inner, grid.domain)
        rep = solve_dirichlet(prob, f=f)
        anchor = grid.nearest_node(exh.anchor)
        u = rep.solution / rep.solution[anchor]
        resid = float(np.max(np.abs(weak_residual(u, prob, f / rep.solution[anchor])[grid.free])))
        on_first = first.restrict_from(grid, u)
        if prev is not None:
            diffs.append(float(np.max(np.abs(on_first - prev))))
            if diffs[-1] <= tol:
                return AAPReport(u, grid, k + 1, tuple(diffs), tuple(lams), resid, True)
        prev = on_first
    return AAPReport(u, grid, len(exh), tuple(diffs), tuple(lams), resid, False)


@dataclass(frozen=True)
class TruncationReport:
    solution: np.ndarray = field(repr=False)
    margin: float
    passed: bool


def is_subsolution(v: np.ndarray, problem: ProblemSpec, tol: float = 1e-8) -> tuple[bool, float]:
    """Weak inequality against every interior hat; returns (passes, worst margin)."""
    r = weak_residual(v, problem)[problem.grid.free]
    worst = float(np.max(r, initial=-np.inf))
    return worst <= tol * residual_scale(v, problem), worst


def truncate_subsolution(v: np.ndarray, problem: ProblemSpec, tol: float = 1e-8) -> TruncationReport:
    """Positive part of a subsolution, verified to remain a subsolution."""
    ok, _ = is_subsolution(v, problem, tol)
    if not ok:
        raise SolveError("input is not a subsolution")
    vp = np.maximum(np.asarray(v, dtype=float), 0.0)
    passed, margin = is_subsolution(vp, problem, tol)
    return TruncationReport(vp, margin, passed)

