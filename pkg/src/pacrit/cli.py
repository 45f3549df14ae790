"""Command-line front end: JSON scenarios in, JSON or CSV reports out.

Exit codes: 0 success, 1 validation error, 2 analysis error, 3 inconclusive.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import criticality as crit
from . import energy, minimal
from .field import (
    DomainBox,
    ExpressionError,
    FieldError,
    Grid,
    SPDError,
    exhaustion_from_extents,
    interval,
    make_exhaustion,
    parse_field_expr,
    square,
)
from .solve import (
    InconclusiveError,
    ProblemFamily,
    ProblemSpec,
    SolveError,
    default_tol,
    principal_eigenpair,
    solve_dirichlet,
)

ANALYSES = ("eigen", "dirichlet", "classify", "capacity", "tau-scan", "ground-state", "green",
            "liouville", "verify-identities")
DEFAULT_W = "max(0, 1 - r^2)^2"
REQUIRED = object()

# name -> (kind, default); kind "scalar"/"matrix" marks expressions parsed at validation
PARAMS = {
    "eigen": {"tol": ("number?", None)},
    "dirichlet": {"f": ("scalar", "0"), "g": ("scalar", "0"), "tol": ("number?", None)},
    "classify": {"W": ("scalar", DEFAULT_W), "ball_radius": ("number", 1.0), "ball_center": ("point?", None)},
    "capacity": {"radius": ("number", REQUIRED), "center": ("point?", None), "tol": ("number?", None)},
    "tau-scan": {"V0": ("scalar", REQUIRED), "steps": ("int", 40), "tau0": ("number", 1.0)},
    "ground-state": {"W": ("scalar", DEFAULT_W), "override": ("bool", False), "tol": ("number", 5e-2)},
    "green": {"x0": ("point", REQUIRED), "x1": ("point", REQUIRED), "window": ("pair?", None),
              "tol": ("number", 5e-2)},
    "liouville": {"psi": ("scalar", REQUIRED), "phi": ("scalar?", None), "A1": ("matrix?", None),
                  "V1": ("scalar", "0"), "M": ("number", REQUIRED), "N": ("number", REQUIRED)},
    "verify-identities": {"count": ("int", 200), "exponents": ("numbers", [1.5, 2.0, 3.0])},
}
NEEDS_EXHAUSTION = ("classify", "ground-state", "green")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# ---------------------------------------------------------------- scenario


@dataclass(frozen=True)
class Scenario:
    name: str
    analysis: str
    problem: dict
    params: dict
    exhaustion: dict | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        out = {"name": self.name, "analysis": self.analysis, "problem": self.problem,
               "params": self.params, "seed": self.seed}
        if self.exhaustion is not None:
            out["exhaustion"] = self.exhaustion
        return copy.deepcopy(out)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _number(value, path: str, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(path, f"expected a finite number, got {value!r}")
    if positive and value <= 0:
        raise ConfigError(path, "must be positive")
    return float(value)


def _point(value, path: str, dim: int | None = None) -> list[float]:
    if not isinstance(value, list) or not value:
        raise ConfigError(path, "expected a list of coordinates")
    pt = [_number(v, f"{path}[{i}]") for i, v in enumerate(value)]
    if dim is not None and len(pt) != dim:
        raise ConfigError(path, f"expected {dim} coordinates")
    return pt


def _expression(text, path: str, kind: str) -> str:
    if isinstance(text, (int, float)) and not isinstance(text, bool) and kind == "scalar":
        text = repr(text)
    if not isinstance(text, str):
        raise ConfigError(path, "expected an expression string")
    try:
        parse_field_expr(text, kind)
    except ExpressionError as exc:
        raise ConfigError(path, f"parse error: {exc}") from None
    return text


def _check_keys(d: dict, allowed, path: str) -> None:
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}" if path else extra[0], "unknown key")


def _problem(d, path: str = "problem") -> dict:
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    _check_keys(d, ("p", "domain", "grid", "A", "V", "eps", "holes", "disk"), path)
    if "p" not in d:
        raise ConfigError(f"{path}.p", "missing")
    p = _number(d["p"], f"{path}.p")
    if p <= 1:
        raise ConfigError(f"{path}.p", "must exceed 1")
    dom = d.get("domain")
    if not isinstance(dom, dict) or "lower" not in dom or "upper" not in dom:
        raise ConfigError(f"{path}.domain", "expected {lower: [...], upper: [...]}")
    _check_keys(dom, ("lower", "upper"), f"{path}.domain")
    lower = _point(dom["lower"], f"{path}.domain.lower")
    upper = _point(dom["upper"], f"{path}.domain.upper", len(lower))
    if len(lower) not in (1, 2):
        raise ConfigError(f"{path}.domain", "only 1-D and 2-D domains are supported")
    if any(b <= a for a, b in zip(lower, upper)):
        raise ConfigError(f"{path}.domain", "upper must exceed lower on every axis")
    g = d.get("grid")
    if not isinstance(g, dict) or len(g) != 1 or not ({"nodes", "spacing"} & set(g)):
        raise ConfigError(f"{path}.grid", "expected {nodes: [...]} or {spacing: h}")
    if "nodes" in g:
        nodes = g["nodes"]
        if not isinstance(nodes, list) or len(nodes) != len(lower) or not all(
                isinstance(k, int) and not isinstance(k, bool) and k >= 3 for k in nodes):
            raise ConfigError(f"{path}.grid.nodes", "expected one integer >= 3 per axis")
        grid = {"nodes": list(nodes)}
    else:
        grid = {"spacing": _number(g["spacing"], f"{path}.grid.spacing", positive=True)}
    out = {"p": p, "domain": {"lower": lower, "upper": upper}, "grid": grid,
           "A": None, "V": "0", "eps": None, "holes": [], "disk": None}
    if d.get("A") is not None:
        out["A"] = _expression(d["A"], f"{path}.A", "matrix")
    if d.get("V") is not None:
        out["V"] = _expression(d["V"], f"{path}.V", "scalar")
    if d.get("eps") is not None:
        out["eps"] = _number(d["eps"], f"{path}.eps")
    for i, hole in enumerate(d.get("holes") or []):
        hp = f"{path}.holes[{i}]"
        if not isinstance(hole, dict):
            raise ConfigError(hp, "expected {center, radius}")
        _check_keys(hole, ("center", "radius"), hp)
        out["holes"].append({"center": _point(hole.get("center"), f"{hp}.center", len(lower)),
                             "radius": _number(hole.get("radius"), f"{hp}.radius", positive=True)})
    if d.get("disk") is not None:
        disk = d["disk"]
        if not isinstance(disk, dict):
            raise ConfigError(f"{path}.disk", "expected {center, radius}")
        _check_keys(disk, ("center", "radius"), f"{path}.disk")
        out["disk"] = {"center": _point(disk.get("center"), f"{path}.disk.center", len(lower)),
                       "radius": _number(disk.get("radius"), f"{path}.disk.radius", positive=True)}
    return out


def _exhaustion(d, dim: int, problem: dict) -> dict:
    path = "exhaustion"
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    _check_keys(d, ("scheme", "count", "ratio", "half_widths", "center", "anchor"), path)
    if "spacing" not in problem["grid"]:
        raise ConfigError("problem.grid", "exhaustions need {spacing: h}")
    scheme = d.get("scheme", "margin")
    out = {"scheme": scheme, "anchor": None}
    if scheme in ("margin", "geometric"):
        count = d.get("count")
        if not isinstance(count, int) or isinstance(count, bool) or count < 3:
            raise ConfigError(f"{path}.count", "expected an integer >= 3")
        out["count"] = count
        out["ratio"] = _number(d.get("ratio", 2.0), f"{path}.ratio", positive=True)
    elif scheme == "extents":
        hw = d.get("half_widths")
        if not isinstance(hw, list) or len(hw) < 3:
            raise ConfigError(f"{path}.half_widths", "expected at least 3 half-widths")
        out["half_widths"] = [_number(v, f"{path}.half_widths[{i}]", positive=True) for i, v in enumerate(hw)]
        out["center"] = _point(d.get("center", [0.0] * dim), f"{path}.center", dim)
    else:
        raise ConfigError(f"{path}.scheme", f"unknown scheme {scheme!r}")
    if d.get("anchor") is not None:
        out["anchor"] = _point(d["anchor"], f"{path}.anchor", dim)
    return out


def _params(analysis: str, d, dim: int) -> dict:
    path = "params"
    d = {} if d is None else d
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    schema = PARAMS[analysis]
    _check_keys(d, schema, path)
    out = {}
    for key, (kind, default) in schema.items():
        kp = f"{path}.{key}"
        value = d.get(key, default)
        if value is REQUIRED:
            raise ConfigError(kp, "missing")
        optional = kind.endswith("?")
        base = kind.rstrip("?")
        if value is None:
            if not optional:
                raise ConfigError(kp, "may not be null")
            out[key] = None
            continue
        if base in ("scalar", "matrix"):
            out[key] = _expression(value, kp, base)
        elif base == "number":
            out[key] = _number(value, kp)
        elif base == "int":
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(kp, "expected a positive integer")
            out[key] = value
        elif base == "bool":
            if not isinstance(value, bool):
                raise ConfigError(kp, "expected true or false")
            out[key] = value
        elif base == "point":
            out[key] = _point(value, kp, dim)
        elif base == "pair":
            pair = _point(value, kp, 2)
            if not 0 < pair[0] < pair[1]:
                raise ConfigError(kp, "expected 0 < inner < outer")
            out[key] = pair
        elif base == "numbers":
            out[key] = _point(value, kp)
    for key in ("M", "N", "radius", "ball_radius", "tau0"):
        if key in out and out[key] is not None and out[key] <= 0:
            raise ConfigError(f"{path}.{key}", "must be positive")
    if analysis == "verify-identities" and any(q <= 1 for q in out["exponents"]):
        raise ConfigError(f"{path}.exponents", "every exponent must exceed 1")
    return out


def parse_scenario(data, analysis: str | None = None, seed: int | None = None) -> Scenario:
    """Validate a config (JSON text or dict) into a normalized Scenario."""
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ConfigError("<config>", f"invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("<config>", "expected a JSON object")
    _check_keys(data, ("name", "analysis", "problem", "params", "exhaustion", "seed"), "")
    analysis = analysis or data.get("analysis")
    if analysis not in ANALYSES:
        raise ConfigError("analysis", f"expected one of {', '.join(ANALYSES)}")
    name = data.get("name", analysis)
    if not isinstance(name, str):
        raise ConfigError("name", "expected a string")
    if "problem" not in data:
        raise ConfigError("problem", "missing")
    problem = _problem(data["problem"])
    dim = len(problem["domain"]["lower"])
    params = _params(analysis, data.get("params"), dim)
    exh = None
    if analysis in NEEDS_EXHAUSTION:
        if "exhaustion" not in data:
            raise ConfigError("exhaustion", f"required for {analysis}")
        exh = _exhaustion(data["exhaustion"], dim, problem)
    elif data.get("exhaustion") is not None:
        exh = _exhaustion(data["exhaustion"], dim, problem)
    s = data.get("seed", 0) if seed is None else seed
    if not isinstance(s, int) or isinstance(s, bool) or s < 0:
        raise ConfigError("seed", "expected a nonnegative integer")
    return Scenario(name, analysis, problem, params, exh, s)


def apply_overrides(data: dict, items) -> dict:
    """Apply ``key.path=value`` overrides; values are JSON when they parse, else strings."""
    data = copy.deepcopy(data)
    for item in items or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return data


# ---------------------------------------------------------------- construction


def build_grid(problem: dict) -> Grid:
    dom = DomainBox(tuple(problem["domain"]["lower"]), tuple(problem["domain"]["upper"]))
    try:
        if "nodes" in problem["grid"]:
            grid = Grid(dom, tuple(problem["grid"]["nodes"]))
        else:
            grid = Grid.with_spacing(dom, problem["grid"]["spacing"])
    except FieldError as exc:
        raise ConfigError("problem.grid", str(exc)) from None
    return _shape_domain(grid, problem)


def _shape_domain(grid: Grid, problem: dict) -> Grid:
    mask = np.zeros(grid.size, dtype=bool) if grid.outside is None else grid.outside.copy()
    if problem.get("disk"):
        d = problem["disk"]
        mask |= np.linalg.norm(grid.nodes - np.asarray(d["center"]), axis=1) >= d["radius"]
    for hole in problem.get("holes", ()):
        mask |= np.linalg.norm(grid.nodes - np.asarray(hole["center"]), axis=1) <= hole["radius"]
    if not mask.any():
        return grid
    return Grid(grid.domain, grid.shape, mask)


def build_problem(problem: dict, grid: Grid | None = None, path: str = "problem") -> ProblemSpec:
    grid = build_grid(problem) if grid is None else grid
    try:
        return ProblemSpec.build(problem["p"], grid, problem["A"], problem["V"], problem["eps"])
    except SPDError as exc:
        raise ConfigError(f"{path}.A", f"{exc} at {tuple(float(c) for c in exc.point)}") from None
    except (ValueError, FieldError) as exc:
        raise ConfigError(path, str(exc)) from None


def build_family(s: Scenario) -> ProblemFamily:
    pr, ex = s.problem, s.exhaustion
    dom = DomainBox(tuple(pr["domain"]["lower"]), tuple(pr["domain"]["upper"]))
    h = pr["grid"]["spacing"]
    try:
        if ex["scheme"] == "extents":
            exh = exhaustion_from_extents(ex["center"], ex["half_widths"], h, ex["anchor"])
        else:
            exh = make_exhaustion(dom, ex["count"], h, ex["scheme"], ex["ratio"], ex["anchor"])
        fam = ProblemFamily(pr["p"], exh, pr["A"], pr["V"], pr["eps"])
        for k in range(len(exh)):
            fam.member(k)
    except SPDError as exc:
        raise ConfigError("problem.A", f"{exc} at {tuple(float(c) for c in exc.point)}") from None
    except (ValueError, FieldError) as exc:
        raise ConfigError("exhaustion", str(exc)) from None
    return fam


def nodal(text: str, grid: Grid) -> np.ndarray:
    return parse_field_expr(text).evaluate(grid.nodes)


# ---------------------------------------------------------------- analyses


@dataclass
class RunReport:
    scenario: Scenario
    results: dict
    tables: dict = field(default_factory=dict)
    inconclusive: bool = False

    def to_dict(self) -> dict:
        out = dict(self.results)
        out["scenario"] = self.scenario.to_dict()
        out["provenance"] = {"config_hash": self.scenario.digest, "seed": self.scenario.seed}
        return _jsonable(out)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "+inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _node_table(grid: Grid, **fields) -> tuple[list[str], list[list]]:
    names = ["x", "y"][: grid.dimension]
    head = names + list(fields)
    cols = [grid.nodes[:, i] for i in range(grid.dimension)] + [np.asarray(v) for v in fields.values()]
    return head, [list(row) for row in zip(*cols)]


def _run_eigen(s, prob):
    tol = s.params["tol"] or default_tol(prob.p)
    eig = principal_eigenpair(prob, tol=tol)
    res = {"lambda1": eig.lambda1, "normalization": eig.normalization, "iterations": eig.iterations,
           "converged": eig.converged, "residual": eig.residual, "shift": eig.shift, "tolerance": tol}
    return res, {"eigenfunction": _node_table(prob.grid, phi=eig.phi)}, not eig.converged


def _run_dirichlet(s, prob):
    grid = prob.grid
    tol = s.params["tol"] or default_tol(prob.p)
    f = nodal(s.params["f"], grid)
    g = np.where(grid.fixed, nodal(s.params["g"], grid), 0.0)
    rep = solve_dirichlet(prob, f=f, g=g, tol=tol)
    res = {"energy": rep.energy, "residual": rep.residual, "iterations": rep.iterations,
           "converged": rep.converged, "min": float(rep.solution.min()), "max": float(rep.solution.max()),
           "tolerance": tol}
    return res, {"solution": _node_table(grid, u=rep.solution)}, False


def _run_capacity(s, prob):
    grid = prob.grid
    center = s.params["center"] or list(grid.domain.center)
    K = crit.ball_nodes(grid, center, s.params["radius"])
    tol = s.params["tol"] or default_tol(prob.p)
    out = crit.capacity_potential(K, prob, tol)
    res = {"capacity": out.value, "released": out.released, "residual": out.residual,
           "ball_nodes": int(K.sum()), "tolerance": tol}
    return res, {"potential": _node_table(grid, potential=out.potential)}, False


def _run_classify(s, fam):
    rep = crit.classify(fam, s.params["W"], s.params["ball_radius"], s.params["ball_center"])
    res = {"verdict": rep.verdict, "lambda1": rep.lambdas, "capacity": rep.capacities, "tN": rep.thresholds,
           "radii": rep.radii, "diagnostics": rep.diagnostics, "notes": list(rep.notes),
           "tolerance": {"lambda1": 10 * default_tol(fam.p), "floor_variation": crit.FLOOR_VARIATION,
                         "fit_r2": crit.FIT_R2}}
    rows = []
    for k, lam in enumerate(rep.lambdas):
        cap = rep.capacities[k] if k < len(rep.capacities) else ""
        t = rep.thresholds[k] if k < len(rep.thresholds) else ""
        rows.append([k, lam, cap, t])
    return res, {"sequences": (["member-index", "lambda1", "capacity", "tN"], rows)}, rep.verdict == "inconclusive"


def _run_tau(s, prob):
    scan = crit.perturbation_threshold(prob, s.params["V0"], s.params["steps"], s.params["tau0"])
    res = {"tau_plus": scan.tau_plus, "infinite": scan.infinite, "lambda_at_tau": scan.lambda_at_tau,
           "lambda_base": scan.lambda_base, "history": [list(h) for h in scan.history],
           "tolerance": {"lambda1": 10 * default_tol(prob.p), "bisection_steps": s.params["steps"]}}
    rows = [list(h) for h in scan.history]
    return res, {"history": (["tau", "verdict", "lambda1"], rows)}, False


def _run_ground(s, fam):
    rep = crit.ground_state(fam, s.params["W"], override=s.params["override"], tol=s.params["tol"], strict=False)
    res = {"thresholds": rep.thresholds, "differences": rep.differences, "converged": rep.converged,
           "tolerance": s.params["tol"]}
    return res, {"ground_state": _node_table(rep.grid, phi=rep.solution)}, not rep.converged


def _run_green(s, fam):
    window = tuple(s.params["window"]) if s.params["window"] else None
    rep = minimal.green_function(fam, s.params["x0"], s.params["x1"], window, tol=s.params["tol"], strict=False)
    fit = rep.fit
    res = {"x0": rep.x0, "x1": rep.x1, "exponent": fit.exponent, "mode": fit.mode, "offset": fit.offset,
           "r2": fit.r2, "raw_slope": fit.raw_slope, "classification": fit.classification,
           "max_median_ratio": fit.ratio, "differences": rep.differences, "source_radii": rep.source_radii,
           "converged": rep.converged,
           "tolerance": {"stabilization": s.params["tol"], "removable_ratio": minimal.REMOVABLE_RATIO}}
    rows = [[r, v] for r, v in zip(fit.radii, fit.values)]
    return res, {"profile": (["radius", "value"], rows)}, not rep.converged or fit.classification == "inconclusive"


def _run_liouville(s, prob0):
    grid = prob0.grid
    if s.params["phi"] is None:
        raise SolveError("missing ground state phi")
    p1 = dict(s.problem, A=s.params["A1"], V=s.params["V1"])
    prob1 = build_problem(p1, grid, "params")
    inp = minimal.LiouvilleInput(prob0, nodal(s.params["psi"], grid), prob1, nodal(s.params["phi"], grid),
                                 s.params["M"], s.params["N"])
    rep = minimal.liouville_check(inp)
    conds = {k: {"passed": c.passed, "witness": c.witness, "detail": c.detail} for k, c in rep.conditions.items()}
    res = {"conditions": conds, "conclusion": rep.conclusion, "tolerance": 1e-8}
    rows = [[k, c.passed, "" if c.witness is None else " ".join(repr(v) for v in c.witness), c.detail]
            for k, c in rep.conditions.items()]
    return res, {"conditions": (["condition", "passed", "witness", "detail"], rows)}, False


def identity_battery(p: float, count: int, rng: np.random.Generator, dim: int = 2) -> dict:
    """Random checks of the pointwise identities and inequalities at exponent p."""
    dom = square(1.0) if dim == 2 else interval(-1.0, 1.0)
    grid = Grid(dom, (9, 9) if dim == 2 else (33,))
    B = rng.normal(size=(grid.ncells, dim, dim))
    A = B @ np.swapaxes(B, 1, 2) + 0.2 * np.eye(dim)
    prob = ProblemSpec(p, grid, A)
    worst = {"picone_min_L": math.inf, "picone_gap": 0.0, "picone_rigidity": 0.0, "adsa_min": math.inf,
             "adsa_scaled": 0.0, "linearized_lower": math.inf, "linearized_upper": math.inf}
    fields = crit.smooth_random_fields(grid, rng, 2 * count)
    for k in range(count):
        u = np.abs(fields[2 * k])
        v = 0.1 + np.abs(fields[2 * k + 1])
        pic = energy.picone(u, v, prob)
        scale = 1.0 + float(np.max(np.abs(pic.L)))
        worst["picone_min_L"] = min(worst["picone_min_L"], float(pic.L.min()) / scale)
        worst["picone_gap"] = max(worst["picone_gap"], abs(pic.int_L - pic.int_R) / (1 + abs(pic.int_L)))
        kk = float(rng.uniform(0.5, 3.0))
        rig = energy.picone(kk * v, v, prob)
        worst["picone_rigidity"] = max(worst["picone_rigidity"], abs(rig.int_L) / scale)
        up = u + 0.1
        val = energy.adsa_I(up, v, prob)
        worst["adsa_min"] = min(worst["adsa_min"], val / scale)
        worst["adsa_scaled"] = max(worst["adsa_scaled"], abs(energy.adsa_I(kk * v, v, prob)) / scale)
        g = rng.normal(size=dim)
        xi = rng.normal(size=dim)
        quad, lo, hi = energy.linearized_bounds(g, xi, A[k % grid.ncells], p)
        worst["linearized_lower"] = min(worst["linearized_lower"], (quad - lo) / (abs(quad) + 1e-300))
        worst["linearized_upper"] = min(worst["linearized_upper"], (hi - quad) / (abs(quad) + 1e-300))
    tol = 1e-8
    checks = {
        "picone_min_L": worst["picone_min_L"] >= -tol,
        "picone_gap": worst["picone_gap"] <= tol,
        "picone_rigidity": worst["picone_rigidity"] <= 1e-6,
        "adsa_min": worst["adsa_min"] >= -tol,
        "adsa_scaled": worst["adsa_scaled"] <= 1e-6,
        "linearized_lower": worst["linearized_lower"] >= -1e-12,
        "linearized_upper": worst["linearized_upper"] >= -1e-12,
    }
    return {name: {"worst": worst[name], "passed": ok} for name, ok in checks.items()}


def _run_identities(s, prob):
    rng = np.random.default_rng(s.seed)
    dim = prob.grid.dimension
    out = {}
    rows = []
    for q in s.params["exponents"]:
        res = identity_battery(q, s.params["count"], rng, dim)
        out[repr(q)] = res
        for name, r in res.items():
            rows.append([name, q, s.params["count"], r["worst"], r["passed"]])
    passed = all(r["passed"] for res in out.values() for r in res.values())
    res = {"checks": out, "passed": passed, "count": s.params["count"],
           "tolerance": {"identity": 1e-8, "rigidity": 1e-6}}
    if not passed:
        raise SolveError("identity battery failed: " + json.dumps(_jsonable(out), sort_keys=True))
    return res, {"checks": (["check", "p", "count", "worst", "passed"], rows)}, False


RUNNERS = {
    "eigen": (_run_eigen, "problem"),
    "dirichlet": (_run_dirichlet, "problem"),
    "capacity": (_run_capacity, "problem"),
    "tau-scan": (_run_tau, "problem"),
    "liouville": (_run_liouville, "problem"),
    "verify-identities": (_run_identities, "problem"),
    "classify": (_run_classify, "family"),
    "ground-state": (_run_ground, "family"),
    "green": (_run_green, "family"),
}


def run_scenario(config, analysis: str | None = None, seed: int | None = None,
                 overrides=None) -> RunReport:
    """Validate ``config`` (JSON text or dict) and run its analysis."""
    if isinstance(config, str):
        try:
            config = json.loads(config)
        except json.JSONDecodeError as exc:
            raise ConfigError("<config>", f"invalid JSON: {exc}") from None
    if overrides:
        if not isinstance(config, dict):
            raise ConfigError("<config>", "expected a JSON object")
        config = apply_overrides(config, overrides)
    s = parse_scenario(config, analysis, seed)
    runner, needs = RUNNERS[s.analysis]
    target = build_family(s) if needs == "family" else build_problem(s.problem)
    try:
        results, tables, inconclusive = runner(s, target)
    except InconclusiveError as exc:
        return RunReport(s, {"inconclusive": str(exc)}, {}, True)
    return RunReport(s, results, tables, inconclusive)


# ---------------------------------------------------------------- output


def _atomic_write(path: str, text: str) -> None:
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=folder)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def report_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _csv_text(head, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(head)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def emit_report(report: RunReport, fmt: str = "json", path: str | None = None, stream=None) -> list[str]:
    """Write the report; returns the paths written.

    CSV writes one file per table: ``path`` for the first and
    ``<stem>-<table>.csv`` for the rest; green additionally writes its JSON
    summary to ``<stem>.json``, as does any run that produced no table.
    """
    stream = sys.stdout if stream is None else stream
    stem = os.path.splitext(path)[0] if path else None
    if fmt == "json" or not report.tables:
        text = report_json(report)
        if path is None:
            stream.write(text)
            return []
        # a CSV request without tables (inconclusive run) still leaves a JSON record
        target = path if fmt == "json" else stem + ".json"
        _atomic_write(target, text)
        return [target]
    written = []
    for i, (name, (head, rows)) in enumerate(report.tables.items()):
        text = _csv_text(head, rows)
        if path is None:
            stream.write(text)
            continue
        target = path if i == 0 else f"{stem}-{name}.csv"
        _atomic_write(target, text)
        written.append(target)
    if report.scenario.analysis == "green" and path is not None:
        _atomic_write(stem + ".json", report_json(report))
        written.append(stem + ".json")
    return written


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pacrit", description="Criticality analyses for (p,A)-Laplacian energies.")
    sub = parser.add_subparsers(dest="analysis", required=True, parser_class=_Parser)
    for name in ANALYSES:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON scenario file, or - for stdin")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry by dotted path")
        sp.add_argument("--out", help="output path (stdout when omitted)")
        sp.add_argument("--format", choices=("json", "csv"), default="json")
        sp.add_argument("--seed", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = sys.stdin.read() if args.config == "-" else open(args.config).read()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1
    try:
        report = run_scenario(text, args.analysis, args.seed, args.set)
    except ConfigError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except (SolveError, energy.EnergyError, FieldError, ValueError, ArithmeticError) as exc:
        print(f"{args.analysis} failed: {exc}", file=sys.stderr)
        return 2
    try:
        emit_report(report, args.format, args.out)
    except OSError as exc:
        print(f"error: cannot write report: {exc}", file=sys.stderr)
        return 2
    return 3 if report.inconclusive else 0


if __name__ == "__main__":
    sys.exit(main())
