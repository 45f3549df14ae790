"""Domains, tensor grids, exhaustions, coefficient expressions and quadrature.

Nodal fields are plain 1-D float arrays indexed in C order of the node
lattice (axis 0 varies slowest).  Cells carry one quadrature point at their
centre; gradients there are the multilinear element gradients.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp


class FieldError(ValueError):
    """Invalid domain, grid or exhaustion."""


class ExpressionError(ValueError):
    """Malformed coefficient expression; ``position`` is a 0-based offset."""

    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} at position {position}")


class SPDError(ValueError):
    """Matrix coefficient not symmetric positive definite at some point."""

    def __init__(self, message: str, point: np.ndarray):
        self.point = np.asarray(point, dtype=float)
        super().__init__(f"{message} at point {tuple(float(c) for c in self.point)}")


@dataclass(frozen=True)
class DomainBox:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) != len(hi) or len(lo) not in (1, 2):
            raise FieldError("domain corners must both have length 1 or 2")
        if not all(math.isfinite(v) for v in lo + hi):
            raise FieldError("domain corners must be finite")
        if any(a >= b for a, b in zip(lo, hi)):
            raise FieldError("degenerate domain: lower must be < upper componentwise")

    @property
    def dimension(self) -> int:
        return len(self.lower)

    @property
    def extent(self) -> np.ndarray:
        return np.subtract(self.upper, self.lower)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lower) + np.asarray(self.upper))

    def contains(self, points, strict: bool = True) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        if strict:
            return np.all((pts > lo) & (pts < hi), axis=1)
        return np.all((pts >= lo) & (pts <= hi), axis=1)


def interval(a: float, b: float) -> DomainBox:
    return DomainBox((a,), (b,))


def square(half_width: float, center: Sequence[float] = (0.0, 0.0)) -> DomainBox:
    c = np.asarray(center, dtype=float)
    return DomainBox(tuple(c - half_width), tuple(c + half_width))


@dataclass(frozen=True, eq=False)
class Grid:
    """Tensor grid on a box.

    ``outside`` optionally marks nodes removed from the domain (held at zero
    like boundary nodes); this is how disks and annuli are represented.
    """

    domain: DomainBox
    shape: tuple[int, ...]
    outside: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        if len(shape) != self.domain.dimension:
            raise FieldError("shape length must match the domain dimension")
        if any(s < 3 for s in shape):
            raise FieldError("grids need at least 3 nodes per axis")
        if self.outside is not None:
            mask = np.asarray(self.outside, dtype=bool).ravel()
            if mask.size != self.size:
                raise FieldError("outside mask has the wrong size")
            object.__setattr__(self, "outside", mask)

    @classmethod
    def with_spacing(cls, domain: DomainBox, h: float) -> "Grid":
        counts = domain.extent / h
        nodes = np.rint(counts).astype(int)
        if np.any(np.abs(counts - nodes) > 1e-6 * np.maximum(counts, 1)):
            raise FieldError(f"domain extent is not a multiple of spacing {h}")
        return cls(domain, tuple(int(k) + 1 for k in nodes))

    @property
    def dimension(self) -> int:
        return self.domain.dimension

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_shape(self) -> tuple[int, ...]:
        return tuple(s - 1 for s in self.shape)

    @property
    def ncells(self) -> int:
        return int(np.prod(self.cell_shape))

    @property
    def spacing(self) -> np.ndarray:
        return self.domain.extent / (np.asarray(self.shape) - 1)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(
            np.linspace(lo, hi, s)
            for lo, hi, s in zip(self.domain.lower, self.domain.upper, self.shape)
        )

    @cached_property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @cached_property
    def cell_centers(self) -> np.ndarray:
        mids = [0.5 * (a[1:] + a[:-1]) for a in self.axes]
        mesh = np.meshgrid(*mids, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @cached_property
    def boundary(self) -> np.ndarray:
        idx = np.meshgrid(*[np.arange(s) for s in self.shape], indexing="ij")
        mask = np.zeros(self.shape, dtype=bool)
        for i, s in zip(idx, self.shape):
            mask |= (i == 0) | (i == s - 1)
        return mask.ravel()

    @cached_property
    def fixed(self) -> np.ndarray:
        """Nodes carrying Dirichlet data: box boundary plus removed nodes."""
        if self.outside is None:
            return self.boundary
        return self.boundary | self.outside

    @cached_property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.fixed)

    @cached_property
    def operators(self) -> tuple[list[sp.csr_matrix], sp.csr_matrix]:
        """Per-axis cell-gradient matrices and the cell-average matrix."""
        diffs, avgs = [], []
        for s, h in zip(self.shape, self.spacing):
            diffs.append(sp.diags([-np.ones(s - 1), np.ones(s - 1)], [0, 1], shape=(s - 1, s)) / h)
            avgs.append(sp.diags([np.full(s - 1, 0.5), np.full(s - 1, 0.5)], [0, 1], shape=(s - 1, s)))
        if self.dimension == 1:
            return [diffs[0].tocsr()], avgs[0].tocsr()
        grads = [
            sp.kron(diffs[0], avgs[1]).tocsr(),
            sp.kron(avgs[0], diffs[1]).tocsr(),
        ]
        return grads, sp.kron(avgs[0], avgs[1]).tocsr()

    def cell_values(self, u: np.ndarray) -> np.ndarray:
        return self.operators[1] @ np.asarray(u, dtype=float)

    def nearest_node(self, point: Sequence[float]) -> int:
        idx = [
            int(np.clip(np.rint((c - lo) / h), 0, s - 1))
            for c, lo, h, s in zip(point, self.domain.lower, self.spacing, self.shape)
        ]
        return int(np.ravel_multi_index(idx, self.shape))

    def restrict_from(self, other: "Grid", values: np.ndarray) -> np.ndarray:
        """Sample a field living on a lattice-compatible grid at this grid's nodes.

        Nodes of this grid outside ``other`` receive zero.
        """
        out = np.zeros(self.size)
        inside = other.domain.contains(self.nodes, strict=False)
        pts = self.nodes[inside]
        idx = [
            np.rint((pts[:, a] - other.domain.lower[a]) / other.spacing[a]).astype(int)
            for a in range(self.dimension)
        ]
        out[inside] = np.asarray(values)[np.ravel_multi_index(idx, other.shape)]
        return out

    def without_ball(self, center: Sequence[float], radius: float) -> "Grid":
        """Same grid with nodes at distance >= radius from centre removed."""
        dist = np.linalg.norm(self.nodes - np.asarray(center, dtype=float), axis=1)
        mask = dist >= radius
        if self.outside is not None:
            mask |= self.outside
        return Grid(self.domain, self.shape, mask)


def gradient(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Cell-centre gradient of a nodal field, shape (ncells, dimension)."""
    u = np.asarray(u, dtype=float)
    return np.stack([g @ u for g in grid.operators[0]], axis=1)


def integrate(values: np.ndarray, grid: Grid) -> float:
    """Midpoint rule: sum of cell values times cell volume, pairwise in fixed order."""
    vals = np.asarray(values, dtype=float)
    if vals.shape != (grid.ncells,):
        raise FieldError(f"expected {grid.ncells} cell values, got shape {vals.shape}")
    return float(np.sum(vals) * grid.cell_volume)


def write_grid_csv(path, grid: Grid, **fields: np.ndarray) -> None:
    names = ["x", "y"][: grid.dimension]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names + list(fields))
        cols = [grid.nodes[:, a] for a in range(grid.dimension)] + [np.asarray(v) for v in fields.values()]
        for row in zip(*cols):
            writer.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------- exhaustion


@dataclass(frozen=True, eq=False)
class Exhaustion:
    base: DomainBox
    members: tuple[Grid, ...]
    anchor: np.ndarray

    def __post_init__(self):
        if len(self.members) < 2:
            raise FieldError("an exhaustion needs at least two members")
        for small, big in zip(self.members, self.members[1:]):
            if not np.all(big.domain.contains(small.nodes, strict=False)):
                raise FieldError("exhaustion members are not nested")
            corners = np.array([small.domain.lower, small.domain.upper])
            if not np.all(big.domain.contains(corners, strict=True)):
                raise FieldError("exhaustion members are not strictly nested")
        for g in self.members:
            if not g.domain.contains(self.anchor, strict=True)[0]:
                raise FieldError("anchor point must be interior to every member")

    @property
    def spacing(self) -> np.ndarray:
        return self.members[0].spacing

    def __len__(self) -> int:
        return len(self.members)


def make_exhaustion(
    domain: DomainBox,
    count: int,
    spacing: float,
    scheme: str = "margin",
    ratio: float = 2.0,
    anchor: Sequence[float] | None = None,
) -> Exhaustion:
    """Nested boxes at fixed spacing whose last member is ``domain`` itself.

    ``margin``: member j < count-1 is the domain shrunk on every side by
    extent * 2**-(j+2); ``geometric``: boxes about the centre whose extents
    shrink by ``ratio`` per step inward.
    """
    if count < 2:
        raise FieldError("exhaustion count must be at least 2")
    Grid.with_spacing(domain, spacing)
    lo, hi = np.asarray(domain.lower), np.asarray(domain.upper)
    ext = domain.extent
    boxes = []
    for j in range(count):
        if scheme == "margin":
            shrink = ext * 2.0 ** -(j + 2) if j < count - 1 else np.zeros_like(ext)
        elif scheme == "geometric":
            shrink = 0.5 * ext * (1.0 - ratio ** -(count - 1 - j))
        else:
            raise FieldError(f"unknown exhaustion scheme {scheme!r}")
        steps = np.rint(shrink / spacing)
        boxes.append((lo + steps * spacing, hi - steps * spacing, steps))
    for (_, _, s0), (_, _, s1) in zip(boxes, boxes[1:]):
        if np.any(s0 <= s1):
            raise FieldError("nesting violated: spacing too coarse for the requested members")
    members = tuple(
        Grid(DomainBox(tuple(a), tuple(b)), tuple(int(k) for k in (np.rint((b - a) / spacing) + 1)))
        for a, b, _ in boxes
    )
    point = domain.center if anchor is None else np.asarray(anchor, dtype=float)
    return Exhaustion(domain, members, np.asarray(point, dtype=float))


def exhaustion_from_extents(
    center: Sequence[float], half_widths: Sequence[float], spacing: float,
    anchor: Sequence[float] | None = None,
) -> Exhaustion:
    """Concentric boxes (intervals in 1-D) with the given half-widths."""
    c = np.asarray(center, dtype=float)
    members = []
    for r in half_widths:
        box = DomainBox(tuple(c - r), tuple(c + r))
        members.append(Grid.with_spacing(box, spacing))
    point = c if anchor is None else np.asarray(anchor, dtype=float)
    return Exhaustion(members[-1].domain, tuple(members), point)


# ---------------------------------------------------------------- expressions

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^(),\[\]]))"
)
_FUNCS = {"exp": (1, 1), "log": (1, 1), "abs": (1, 1), "min": (2, None), "max": (2, None)}
_VARS = ("x", "y", "r")
_CONSTS = {"pi": math.pi}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens, pos = [], 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ExpressionError(f"unexpected character {text[pos:].lstrip()[:1]!r}",
                                  len(text) - len(text[pos:].lstrip()), text)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, value: str | None = None):
        tok = self.tokens[self.i]
        if value is not None and tok[1] != value:
            found = "end of input" if tok[0] == "end" else repr(tok[1])
            raise ExpressionError(f"expected {value!r}, found {found}", tok[2], self.text)
        self.i += 1
        return tok

    def finish(self):
        tok = self.peek()
        if tok[0] != "end":
            raise ExpressionError(f"unexpected {tok[1]!r}", tok[2], self.text)

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = (op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = (op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[0] == "op" and self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            operand = self.unary()
            return ("neg", operand) if op == "-" else operand
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return ("^", base, self.unary())
        return base

    def atom(self):
        kind, value, pos = self.peek()
        if kind == "num":
            self.take()
            return ("num", float(value))
        if kind == "name":
            self.take()
            if value in _FUNCS:
                lo, hi = _FUNCS[value]
                self.take("(")
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.take(")")
                if len(args) < lo or (hi is not None and len(args) > hi):
                    raise ExpressionError(f"wrong number of arguments to {value}", pos, self.text)
                return ("call", value, tuple(args))
            if value in _VARS:
                return ("var", value)
            if value in _CONSTS:
                return ("num", _CONSTS[value])
            raise ExpressionError(f"unknown name {value!r}", pos, self.text)
        if kind == "op" and value == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        found = "end of input" if kind == "end" else repr(value)
        raise ExpressionError(f"unexpected {found}", pos, self.text)

    def matrix(self):
        self.take("[")
        rows = [self.row()]
        while self.peek()[1] == ",":
            self.take()
            rows.append(self.row())
        self.take("]")
        width = len(rows[0])
        if any(len(r) != width for r in rows) or width != len(rows):
            raise ExpressionError("matrix must be square", self.tokens[0][2], self.text)
        return rows

    def row(self):
        self.take("[")
        items = [self.expr()]
        while self.peek()[1] == ",":
            self.take()
            items.append(self.expr())
        self.take("]")
        return items


def _evaluate(node, env: dict[str, np.ndarray], npts: int) -> np.ndarray:
    tag = node[0]
    if tag == "num":
        return np.full(npts, node[1])
    if tag == "var":
        if node[1] not in env:
            raise ExpressionError(f"variable {node[1]!r} unavailable in this dimension", 0)
        return env[node[1]]
    if tag == "neg":
        return -_evaluate(node[1], env, npts)
    if tag == "call":
        args = [_evaluate(a, env, npts) for a in node[2]]
        name = node[1]
        with np.errstate(all="ignore"):
            if name == "exp":
                return np.exp(args[0])
            if name == "log":
                return np.log(args[0])
            if name == "abs":
                return np.abs(args[0])
            reduce = np.minimum if name == "min" else np.maximum
            out = args[0]
            for a in args[1:]:
                out = reduce(out, a)
            return out
    left = _evaluate(node[1], env, npts)
    right = _evaluate(node[2], env, npts)
    with np.errstate(all="ignore"):
        if tag == "+":
            return left + right
        if tag == "-":
            return left - right
        if tag == "*":
            return left * right
        if tag == "/":
            return left / right
        return np.power(left, right)


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Scalar or matrix coefficient defined by expression text."""

    kind: str
    text: str
    tree: object = field(repr=False)

    def _env(self, points: np.ndarray) -> dict[str, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        env = {"x": pts[:, 0], "r": np.linalg.norm(pts, axis=1)}
        if pts.shape[1] > 1:
            env["y"] = pts[:, 1]
        return env

    def evaluate(self, points) -> np.ndarray:
        """Values at points of shape (m, n): (m,) for scalars, (m, n, n) for matrices."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        env = self._env(pts)
        m = pts.shape[0]
        if self.kind == "scalar":
            vals = _evaluate(self.tree, env, m)
        else:
            k = len(self.tree)
            if k != pts.shape[1]:
                raise FieldError(f"{k}x{k} matrix used on a {pts.shape[1]}-D grid")
            vals = np.empty((m, k, k))
            for i in range(k):
                for j in range(k):
                    vals[:, i, j] = _evaluate(self.tree[i][j], env, m)
            vals = 0.5 * (vals + np.swapaxes(vals, 1, 2))
        bad = ~np.isfinite(vals.reshape(m, -1)).all(axis=1)
        if bad.any():
            raise SPDError(f"non-finite value of {self.text!r}", pts[np.argmax(bad)])
        return vals

    def spd_bounds(self, points) -> tuple[float, float]:
        """Extreme eigenvalues over the points; raises at the first non-SPD point."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        eig = np.linalg.eigvalsh(self.evaluate(pts))
        bad = eig[:, 0] <= 0
        if bad.any():
            raise SPDError(f"matrix {self.text!r} is not positive definite", pts[np.argmax(bad)])
        return float(eig[:, 0].min()), float(eig[:, -1].max())


def parse_field_expr(text: str, kind: str = "scalar") -> CoefficientField:
    """Parse a scalar expression or a ``[[a,b],[c,d]]`` matrix expression."""
    if kind not in ("scalar", "matrix"):
        raise ValueError(f"kind must be 'scalar' or 'matrix', not {kind!r}")
    parser = _Parser(str(text))
    tree = parser.matrix() if kind == "matrix" else parser.expr()
    parser.finish()
    return CoefficientField(kind, str(text), tree)


def identity_matrix_text(dimension: int) -> str:
    if dimension == 1:
        return "[[1]]"
    return "[[1,0],[0,1]]"
