"""Energy functional, Picone identity and related pointwise inequalities.

Every function taking ``problem`` reads ``problem.p``, ``problem.grid``,
``problem.A`` (per-cell matrices or None for the identity), ``problem.V``
(per-cell potential) and ``problem.eps`` (gradient regularization).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import gradient, integrate

RATIO_CAP = 1e12


class EnergyError(ValueError):
    pass


def default_eps(p: float) -> float:
    return 1e-10 if p >= 2 else 1e-6


def reg_pow(norm2: np.ndarray, exponent: float, eps: float) -> np.ndarray:
    """(|xi|^2 + eps^2)^(exponent/2), with 0^negative avoided only through eps."""
    with np.errstate(divide="ignore"):
        return np.power(norm2 + eps * eps, 0.5 * exponent)


def apply_A(A: np.ndarray | None, g: np.ndarray) -> np.ndarray:
    if A is None:
        return g
    return np.einsum("mij,mj->mi", A, g)


def anorm2(A: np.ndarray | None, g: np.ndarray) -> np.ndarray:
    return np.maximum(np.sum(g * apply_A(A, g), axis=1), 0.0)


def _check_spd(A: np.ndarray) -> None:
    if not np.allclose(A, A.T, rtol=1e-12, atol=1e-14) or np.linalg.eigvalsh(A)[0] <= 0:
        raise EnergyError("matrix is not symmetric positive definite")


def anisotropic_norm(xi, A) -> float:
    """sqrt(xi . A xi) for a single vector and SPD matrix."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    _check_spd(A)
    return float(np.sqrt(max(xi @ A @ xi, 0.0)))


def _cells(u: np.ndarray, problem) -> tuple[np.ndarray, np.ndarray]:
    grid = problem.grid
    return gradient(u, grid), grid.cell_values(u)


def functional_Q(phi: np.ndarray, problem, trace_tol: float = 1e-10) -> float:
    """Integral of |grad phi|_A^p + V |phi|^p for a field vanishing on fixed nodes."""
    phi = np.asarray(phi, dtype=float)
    grid = problem.grid
    scale = max(1.0, float(np.max(np.abs(phi))))
    if np.any(np.abs(phi[grid.fixed]) > trace_tol * scale):
        raise EnergyError("field does not vanish on the boundary")
    g, val = _cells(phi, problem)
    p = problem.p
    dens = np.power(anorm2(problem.A, g), 0.5 * p) + problem.V * np.abs(val) ** p
    return integrate(dens, grid)


@dataclass(frozen=True)
class PiconeResult:
    L: np.ndarray
    R: np.ndarray
    int_L: float
    int_R: float


def _picone_cells(gu, gv, uc, vc, A, p, eps):
    """Cellwise L_A(u, v) and R_A(u, v)."""
    Agv = apply_A(A, gv)
    nu2 = anorm2(A, gu)
    nv2 = anorm2(A, gv)
    nu_p = np.power(nu2, 0.5 * p)
    weight = reg_pow(nv2, p - 2, eps)
    q = uc / vc
    cross = np.sum(gu * Agv, axis=1) * weight
    L = nu_p + (p - 1) * q**p * nv2 * weight - p * q ** (p - 1) * cross
    # gradient of u^p / v^(p-1) by the quotient rule on cell data
    gquot = p * q[:, None] ** (p - 1) * gu - (p - 1) * q[:, None] ** p * gv
    R = nu_p - np.sum(gquot * Agv, axis=1) * weight
    return L, R


def picone(u: np.ndarray, v: np.ndarray, problem) -> PiconeResult:
    """Picone pair (L, R) per cell together with their integrals."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0):
        raise EnergyError("v must be positive at every node")
    if np.any(u < 0):
        raise EnergyError("u must be nonnegative")
    gu, uc = _cells(u, problem)
    gv, vc = _cells(v, problem)
    L, R = _picone_cells(gu, gv, uc, vc, problem.A, problem.p, problem.eps)
    grid = problem.grid
    return PiconeResult(L, R, integrate(L, grid), integrate(R, grid))


def simplified_energy(v: np.ndarray, w: np.ndarray, problem) -> float:
    """Integral of v^2 |grad w|_A^2 (w |grad v|_A + v |grad w|_A)^(p-2)."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(v <= 0):
        raise EnergyError("v must be positive at every node")
    if np.any(w < 0):
        raise EnergyError("w must be nonnegative")
    gv, vc = _cells(v, problem)
    gw, wc = _cells(w, problem)
    nw2 = anorm2(problem.A, gw)
    base = wc * np.sqrt(anorm2(problem.A, gv)) + vc * np.sqrt(nw2)
    dens = np.zeros_like(base)
    live = nw2 > 0
    dens[live] = vc[live] ** 2 * nw2[live] * base[live] ** (problem.p - 2)
    return integrate(dens, problem.grid)


def adsa_I(u: np.ndarray, v: np.ndarray, problem, cap: float = RATIO_CAP) -> float:
    """Integral of R_A(u, v) + R_A(v, u) for positive u, v with bounded ratios."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(u <= 0) or np.any(v <= 0):
        raise EnergyError("u and v must be positive at every node")
    if np.max(u / v) > cap or np.max(v / u) > cap:
        raise EnergyError(f"ratio u/v exceeds the cap {cap:g}")
    gu, uc = _cells(u, problem)
    gv, vc = _cells(v, problem)
    p, A, eps = problem.p, problem.A, problem.eps
    _, r_uv = _picone_cells(gu, gv, uc, vc, A, p, eps)
    _, r_vu = _picone_cells(gv, gu, vc, uc, A, p, eps)
    grid = problem.grid
    # float addition commutes, so I(u, v) == I(v, u) bit for bit
    return integrate(r_uv, grid) + integrate(r_vu, grid)


def elementary_equiv(a, b, A, p: float) -> tuple[float, float, float]:
    """(lhs, rhs, lhs/rhs) for the two-sided bound on the p-th power remainder."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    _check_spd(A)
    na = anisotropic_norm(a, A)
    nb = anisotropic_norm(b, A)
    if na == 0 and nb == 0:
        raise EnergyError("a and b must not both vanish")
    nab = anisotropic_norm(a + b, A)
    first = p * na ** (p - 2) * float(a @ A @ b) if na > 0 else 0.0
    lhs = nab**p - na**p - first
    if nb == 0:
        return 0.0, 0.0, float("nan")
    rhs = nb**2 * (na + nb) ** (p - 2)
    return float(lhs), float(rhs), float(lhs / rhs)


def elementary_equiv_batch(a: np.ndarray, b: np.ndarray, A: np.ndarray, p: float) -> np.ndarray:
    """Vectorized ratio for stacks a, b of shape (m, n) and A of shape (m, n, n)."""
    na = np.sqrt(anorm2(A, a))
    nb = np.sqrt(anorm2(A, b))
    nab = np.sqrt(anorm2(A, a + b))
    lhs = nab**p - na**p - p * na ** (p - 2) * np.sum(a * apply_A(A, b), axis=1)
    return lhs / (nb**2 * (na + nb) ** (p - 2))


def linearized_bounds(grad_u, xi, A, p: float) -> tuple[float, float, float]:
    """Quadratic form of the linearized operator and its two-sided bounds.

    Bounds are c |grad u|^(p-2) |xi|^2 with Euclidean norms and c built from
    the extreme eigenvalues of A; see the README for the p < 2 form.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    g = np.atleast_1d(np.asarray(grad_u, dtype=float))
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    _check_spd(A)
    if not np.any(g):
        raise EnergyError("zero gradient")
    ng2 = float(g @ A @ g)
    Ag = A @ g
    quad = ng2 ** ((p - 2) / 2) * (float(xi @ A @ xi) + (p - 2) * float(Ag @ xi) ** 2 / ng2)
    lo_c, hi_c = linearized_constants(A, p)
    scale = float(g @ g) ** ((p - 2) / 2) * float(xi @ xi)
    return quad, lo_c * scale, hi_c * scale


def linearized_constants(A, p: float) -> tuple[float, float]:
    theta, Theta = np.linalg.eigvalsh(np.atleast_2d(A))[[0, -1]]
    if p >= 2:
        return min(1.0, p - 1) * theta ** (p / 2), max(1.0, p - 1) * Theta ** (p / 2)
    return (p - 1) * theta * Theta ** ((p - 2) / 2), Theta * theta ** ((p - 2) / 2)
