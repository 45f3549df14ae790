"""Capacities, criticality classification, perturbation thresholds and ground states.

Criticality is asymptotic, so verdicts here rest on finite evidence along an
exhaustion and are conventions: "critical" needs capacities and ground-state
thresholds that keep decaying, "subcritical" needs a capacity floor that has
stopped moving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .field import Grid, integrate
from .solve import (
    EigenReport,
    InconclusiveError,
    ProblemFamily,
    ProblemSpec,
    SolveError,
    _dual,
    _Energy,
    _minimize,
    cellwise,
    default_tol,
    exact_energy,
    principal_eigenpair,
    weak_residual,
)

FLOOR_VARIATION = 0.10
FIT_R2 = 0.9


def ball_nodes(grid: Grid, center, radius: float) -> np.ndarray:
    """Nodes of the closed ball."""
    d = np.linalg.norm(grid.nodes - np.asarray(center, dtype=float), axis=1)
    return d <= radius * (1 + 1e-12)


# ---------------------------------------------------------------- capacity


@dataclass(frozen=True)
class CapacityResult:
    value: float
    potential: np.ndarray = field(repr=False)
    released: int
    residual: float


def capacity_potential(K: np.ndarray, problem: ProblemSpec, tol: float | None = None) -> CapacityResult:
    """Minimize Q over zero-trace fields with phi >= 1 on the node set K.

    Active-set projection: K nodes start clamped at 1; any whose residual asks
    to rise above 1 are released and kept >= 1 by projection.
    """
    grid = problem.grid
    K = np.asarray(K, dtype=bool) & ~grid.fixed
    if not K.any():
        return CapacityResult(0.0, np.zeros(grid.size), 0, 0.0)
    if problem.V.min() < 0:
        lam = principal_eigenpair(problem).lambda1
        if lam < -10 * default_tol(problem.p):
            raise SolveError(f"capacity undefined: lambda_1 = {lam:.6g} < 0")
    tol = default_tol(problem.p) if tol is None else tol
    energy = _Energy(problem)
    u = np.where(K, 1.0, 0.0)
    active = K.copy()
    released = 0
    for _ in range(50):
        free = np.flatnonzero(~(grid.fixed | active))
        loose = np.flatnonzero(K & ~active)
        res = _minimize(energy, u, free, None, tol, 100_000, lower=(loose, 1.0) if loose.size else None)
        if not res.converged:
            raise SolveError("capacity minimization did not converge")
        u = res.u
        r = energy.gradient(u)
        scale = np.max(np.abs(r[free]), initial=0.0) + tol
        rise = active & (r < -10 * tol * scale)
        stuck = K & ~active & (u <= 1.0 + 1e-14)
        if not rise.any() and not stuck.any():
            break
        released += int(rise.sum())
        active = (active & ~rise) | stuck
        u[active] = 1.0
    return CapacityResult(exact_energy(u, problem), u, released, res.residual)


def capacity(K: np.ndarray, problem: ProblemSpec, tol: float | None = None) -> float:
    """Q-capacity of the node set K in the problem's grid."""
    return capacity_potential(K, problem, tol).value


# ---------------------------------------------------------------- t_N scan


@dataclass(frozen=True)
class ThresholdResult:
    t: float
    phi: np.ndarray = field(repr=False)
    lambda1: float
    steps: int


def zero_threshold(problem: ProblemSpec, W: np.ndarray, rel_tol: float = 1e-9,
                   init: np.ndarray | None = None, max_steps: int = 60,
                   base: EigenReport | None = None) -> ThresholdResult:
    """t >= 0 with lambda_1(V - t W) = 0, by a bracketed Newton iteration.

    lambda_1(V - t W) is concave and decreasing in t with slope -int W phi^p,
    so Newton from a positive value overshoots once and then descends
    monotonically; every step is kept inside the current bracket.
    """
    W = np.asarray(W, dtype=float)
    eig = principal_eigenpair(problem, init=init) if base is None else base
    base = problem.V
    lam0 = eig.lambda1
    if abs(lam0) <= 10 * default_tol(problem.p):
        # already critical on this grid
        return ThresholdResult(0.0, eig.phi, lam0, 0)
    if lam0 <= 0:
        raise SolveError(f"lambda_1 = {lam0:.6g} <= 0 before perturbation")
    lo, hi = 0.0, math.inf
    t, phi, lam = 0.0, eig.phi, lam0
    steps = 0
    for steps in range(1, max_steps + 1):
        slope = -integrate(W * np.abs(problem.grid.cell_values(phi)) ** problem.p, problem.grid)
        if slope >= 0:
            raise SolveError("probe weight does not meet the eigenfunction")
        cand = t - lam / slope
        if not (lo < cand < hi):
            cand = 2 * max(lo, 1e-12) if hi == math.inf else 0.5 * (lo + hi)
        t = cand
        eig = principal_eigenpair(problem.with_potential(base - t * W), init=phi)
        phi, lam = eig.phi, eig.lambda1
        if lam > 0:
            lo = t
        else:
            hi = t
        if abs(lam) <= rel_tol * abs(lam0) or (hi - lo) <= rel_tol * t:
            break
    return ThresholdResult(t, phi, lam, steps)


# ---------------------------------------------------------------- classification


@dataclass(frozen=True)
class CriticalityReport:
    verdict: str
    lambdas: tuple[float, ...]
    capacities: tuple[float, ...]
    thresholds: tuple[float, ...]
    radii: tuple[float, ...]
    ground_state: np.ndarray | None = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)
    notes: tuple[str, ...] = ()


def _member_radius(grid: Grid, center) -> float:
    c = np.asarray(center, dtype=float)
    lo, hi = np.asarray(grid.domain.lower), np.asarray(grid.domain.upper)
    return float(np.min(np.minimum(c - lo, hi - c)))


def log_law_fit(radii, values) -> dict:
    """Least squares 1/value = a ln R + b; returns a, b and R^2."""
    x = np.log(np.asarray(radii, dtype=float))
    y = 1.0 / np.asarray(values, dtype=float)
    a, b = np.polyfit(x, y, 1)
    pred = a * x + b
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss if ss > 0 else 0.0
    return {"slope": float(a), "intercept": float(b), "r2": r2}


def power_law_fit(radii, values) -> dict:
    """Least squares ln value = s ln R + b; returns s, b and R^2."""
    x = np.log(np.asarray(radii, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    s, b = np.polyfit(x, y, 1)
    pred = s * x + b
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss if ss > 0 else 0.0
    return {"slope": float(s), "intercept": float(b), "r2": r2}


def floor_variation(values, tail: int = 3) -> float:
    v = np.asarray(values[-tail:], dtype=float)
    return float((v.max() - v.min()) / v.min()) if v.min() > 0 else math.inf


def classify(
    family: ProblemFamily,
    W,
    ball_radius: float = 1.0,
    ball_center=None,
    threshold_tol: float = 1e-6,
) -> CriticalityReport:
    """Classify the family's functional on the exhaustion's base domain.

    W is a nonnegative probe weight supported in the first member;
    ``threshold_tol`` is the relative accuracy of each t_N.
    """
    exh = family.exhaustion
    if len(exh) < 3:
        raise SolveError("exhaustion too short for a trend fit (need >= 3 members)")
    center = exh.anchor if ball_center is None else np.asarray(ball_center, dtype=float)
    lam_tol = 10 * default_tol(family.p)
    lambdas, caps, ts, radii, phis = [], [], [], [], []
    notes = [
        f"critical: capacities and thresholds strictly decreasing, log-law or power-law decay fit "
        f"with R^2 >= {FIT_R2} and a finite projected decade radius, tail variation >= {FLOOR_VARIATION:.0%}",
        f"subcritical: capacity tail variation < {FLOOR_VARIATION:.0%} over the last three members",
    ]
    init = None
    eigs = []
    for k, grid in enumerate(exh.members):
        prob = family.member(k)
        if init is not None:
            init = grid.restrict_from(exh.members[k - 1], init)
        eig = principal_eigenpair(prob, init=init)
        eigs.append(eig)
        init = eig.phi
        lambdas.append(eig.lambda1)
        radii.append(_member_radius(grid, center))
        if eig.lambda1 < -lam_tol:
            return CriticalityReport("supercritical", tuple(lambdas), (), (), tuple(radii),
                                     diagnostics={"member": k}, notes=tuple(notes))
    for k, grid in enumerate(exh.members):
        prob = family.member(k)
        K = ball_nodes(grid, center, ball_radius)
        if np.any(K & grid.fixed):
            raise SolveError("capacity ball must lie inside the first member")
        caps.append(capacity(K, prob))
        thr = zero_threshold(prob, cellwise(W, grid), rel_tol=threshold_tol, base=eigs[k])
        ts.append(thr.t)
        anchor = grid.nearest_node(exh.anchor)
        phis.append(thr.phi / thr.phi[anchor])
    variation = floor_variation(caps)
    decreasing_c = all(b < a for a, b in zip(caps, caps[1:]))
    decreasing_t = all(b < a for a, b in zip(ts, ts[1:]))
    fit = log_law_fit(radii, caps)
    positive = all(c > 0 for c in caps)
    pfit = power_law_fit(radii, caps) if positive else {"slope": 0.0, "intercept": 0.0, "r2": 0.0}
    # radius where the fitted law puts the capacity at a tenth of the first one
    if pfit["r2"] > fit["r2"]:
        law, best = "power", pfit
        expo = (math.log(caps[0] / 10) - pfit["intercept"]) / pfit["slope"] if pfit["slope"] < 0 else math.inf
    else:
        law, best = "log", fit
        expo = (10.0 / caps[0] - fit["intercept"]) / fit["slope"] if fit["slope"] > 0 else math.inf
    decade = math.exp(expo) if expo < 700 else math.inf
    diag = {
        "log_fit": fit,
        "power_fit": pfit,
        "decay_law": law,
        "tail_variation": variation,
        "capacity_drop": caps[0] / caps[-1],
        "threshold_drop": ts[0] / ts[-1] if ts[-1] > 0 else math.inf,
        "projected_decade_radius": decade,
    }
    ground = None
    if (decreasing_c and decreasing_t and best["r2"] >= FIT_R2 and variation >= FLOOR_VARIATION
            and math.isfinite(decade)):
        verdict = "critical"
        ground = phis[-1]
    elif variation < FLOOR_VARIATION and caps[-1] > 0:
        verdict = "subcritical"
    else:
        verdict = "inconclusive"
    return CriticalityReport(verdict, tuple(lambdas), tuple(caps), tuple(ts), tuple(radii),
                             ground, diag, tuple(notes))


# ---------------------------------------------------------------- ground state


@dataclass(frozen=True)
class GroundStateReport:
    solution: np.ndarray = field(repr=False)
    grid: Grid = field(repr=False)
    thresholds: tuple[float, ...]
    differences: tuple[float, ...]
    converged: bool


def ground_state(family: ProblemFamily, W, override: bool = False, tol: float = 5e-2,
                 verdict: str | None = None, strict: bool = True) -> GroundStateReport:
    """Limit of principal eigenfunctions of V - t_N W with lambda_1 = 0 on each member.

    Each eigenfunction is normalized to 1 at the anchor.  ``verdict`` is a
    previously computed classification; without it (and without ``override``)
    the family is classified first.
    """
    exh = family.exhaustion
    if not override:
        if verdict is None:
            verdict = classify(family, W).verdict
        if verdict != "critical":
            raise SolveError(f"ground state requested for a {verdict} functional")
    first = exh.members[0]
    ts, diffs = [], []
    prev = None
    init = None
    phi = None
    grid = None
    for k, grid in enumerate(exh.members):
        prob = family.member(k)
        if init is not None:
            init = grid.restrict_from(exh.members[k - 1], init)
        thr = zero_threshold(prob, cellwise(W, grid), init=init)
        init = thr.phi
        ts.append(thr.t)
        phi = thr.phi / thr.phi[grid.nearest_node(exh.anchor)]
        on_first = first.restrict_from(grid, phi)
        if prev is not None:
            diffs.append(float(np.max(np.abs(on_first - prev))))
        prev = on_first
    if not all(b < a for a, b in zip(ts, ts[1:])):
        raise SolveError(f"thresholds t_N not decreasing: {ts}")
    converged = not diffs or diffs[-1] <= tol
    if strict and not converged:
        raise InconclusiveError(f"normalized members still differ by {diffs[-1]:.3e} > {tol:g}")
    return GroundStateReport(phi, grid, tuple(ts), tuple(diffs), converged)


# ---------------------------------------------------------------- perturbation


@dataclass(frozen=True)
class PerturbationScan:
    tau_plus: float
    history: tuple[tuple[float, str, float], ...]
    lambda_at_tau: float
    lambda_base: float

    @property
    def infinite(self) -> bool:
        return math.isinf(self.tau_plus)


def _verdict(lam: float, tol: float) -> str:
    if lam > tol:
        return "subcritical"
    if lam < -tol:
        return "supercritical"
    return "critical"


def perturbation_threshold(problem: ProblemSpec, V0, steps: int = 40, tau0: float = 1.0) -> PerturbationScan:
    """Largest tau with V + tau V0 still nonnegative, on the problem's (bounded) grid.

    On a bounded grid the verdict of V + tau V0 is the sign of lambda_1.  The
    bracket doubles from ``tau0`` until the verdict flips, then bisects.
    """
    V0c = np.asarray(cellwise(V0, problem.grid), dtype=float)
    if not np.any(V0c):
        raise SolveError("perturbation V0 vanishes identically")
    base = principal_eigenpair(problem)
    tol = 10 * default_tol(problem.p)
    if base.lambda1 <= tol:
        raise SolveError("base problem is not subcritical")
    history = [(0.0, "subcritical", base.lambda1)]
    if np.all(V0c >= 0):
        return PerturbationScan(math.inf, tuple(history), base.lambda1, base.lambda1)
    phi = base.phi

    def probe(tau):
        nonlocal phi
        eig = principal_eigenpair(problem.with_potential(problem.V + tau * V0c), init=phi)
        phi = eig.phi
        history.append((tau, _verdict(eig.lambda1, tol), eig.lambda1))
        return eig.lambda1

    lo, hi = 0.0, tau0
    while probe(hi) > 0:
        lo, hi = hi, 2 * hi
        if hi > 1e12:
            raise SolveError("no sign change found: V0 too weak")
    lam = None
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        lam = probe(mid)
        if lam > 0:
            lo = mid
        else:
            hi = mid
    tau = 0.5 * (lo + hi)
    lam = principal_eigenpair(problem.with_potential(problem.V + tau * V0c), init=phi).lambda1
    return PerturbationScan(tau, tuple(history), lam, base.lambda1)


# ---------------------------------------------------------------- inequalities


def smooth_random_fields(grid: Grid, rng: np.random.Generator, count: int, modes: int = 4) -> list[np.ndarray]:
    """Random zero-trace fields built from low sine modes."""
    lo = np.asarray(grid.domain.lower)
    ext = grid.domain.extent
    z = (grid.nodes - lo) / ext
    out = []
    for _ in range(count):
        u = np.zeros(grid.size)
        for k in range(1, modes + 1):
            for l in range(1, (modes if grid.dimension == 2 else 1) + 1):
                coef = rng.normal() / (k * l)
                term = np.sin(np.pi * k * z[:, 0])
                if grid.dimension == 2:
                    term = term * np.sin(np.pi * l * z[:, 1])
                u += coef * term
        u[grid.fixed] = 0.0
        out.append(u)
    return out


def poincare_constant(problem: ProblemSpec, phi: np.ndarray, psi: np.ndarray, W, rng=None,
                      battery: int = 64) -> float:
    """Battery estimate of the smallest C with Q(u) + C |int u psi|^p >= C^-1 int W |u|^p."""
    grid = problem.grid
    rng = np.random.default_rng(0) if rng is None else rng
    Wc = np.asarray(cellwise(W, grid), dtype=float)
    pc = grid.cell_values(psi)
    phc = grid.cell_values(phi)
    if abs(integrate(pc * phc, grid)) < 1e-12 * (integrate(np.abs(pc * phc), grid) + 1e-300):
        raise SolveError("int psi phi vanishes")
    p = problem.p
    cut = smooth_random_fields(grid, np.random.default_rng(12345), 1, modes=1)[0]
    trials = smooth_random_fields(grid, rng, battery)
    near = []
    for k in range(battery):
        noise = smooth_random_fields(grid, rng, 1, modes=6)[0]
        near.append(phi * np.abs(cut) ** (1.0 / (k + 2)) + 0.05 * noise)
    best = 0.0
    for u in trials + near:
        u = np.where(grid.fixed, 0.0, u)
        a = exact_energy(u, problem)
        uc = grid.cell_values(u)
        b = abs(integrate(uc * pc, grid)) ** p
        w = integrate(Wc * np.abs(uc) ** p, grid)
        if w <= 0:
            continue
        if b > 0:
            c = (-a + math.sqrt(a * a + 4 * b * w)) / (2 * b)
        elif a > 0:
            c = w / a
        else:
            c = math.inf
        best = max(best, c)
    return best


def hsm_ratio(problem: ProblemSpec, Wtilde, rng=None, battery: int = 32, refine: int = 4,
              steps: int = 300) -> float:
    """Estimate of inf Q(u) / (int W |u|^p*)^(p/p*) with p* = pn/(n-p).

    Random fields seed a descent on the logarithm of the ratio; the lowest
    value found is returned.
    """
    grid = problem.grid
    n, p = grid.dimension, problem.p
    if p >= n:
        raise SolveError("the Sobolev exponent needs p < n")
    pstar = p * n / (n - p)
    rng = np.random.default_rng(0) if rng is None else rng
    Wc = np.asarray(cellwise(Wtilde, grid), dtype=float)
    energy = _Energy(problem)
    free = grid.free
    dual = _dual(grid, free)
    S = grid.operators[1]
    vol = grid.cell_volume

    def logratio(u):
        q = exact_energy(u, problem)
        uc = S @ u
        d = integrate(Wc * np.abs(uc) ** pstar, grid)
        return math.log(q) - (p / pstar) * math.log(d), q, d

    def grad(u, q, d):
        gq = p * energy.gradient(u)
        uc = S @ u
        gd = pstar * (S.T @ (vol * Wc * np.abs(uc) ** (pstar - 2) * uc))
        return gq / q - (p / pstar) * gd / d

    trials = smooth_random_fields(grid, rng, battery)
    scored = sorted(((logratio(u)[0], i) for i, u in enumerate(trials)))
    best = scored[0][0]
    for _, i in scored[:refine]:
        u = trials[i]
        f, q, d = logratio(u)
        for _ in range(steps):
            g = grad(u, q, d)[free]
            dirn = -dual.solve(g)
            slope = float(dirn @ g)
            if slope >= -1e-14:
                break
            scale = np.max(np.abs(u))
            t = scale / max(np.max(np.abs(dirn)), 1e-300)
            for _ in range(40):
                trial = u.copy()
                trial[free] += t * dirn
                tf = logratio(trial)
                if tf[0] <= f + 1e-4 * t * slope:
                    break
                t *= 0.5
            else:
                break
            u, (f, q, d) = trial, tf
        best = min(best, f)
    return math.exp(best)


def subsolution_margin(v: np.ndarray, problem: ProblemSpec) -> float:
    return float(np.max(weak_residual(v, problem)[problem.grid.free], initial=-math.inf))
