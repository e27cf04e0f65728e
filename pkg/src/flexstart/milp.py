"""Tagged MILP modeling layer with a pluggable solve backend.

The model object is a thin bookkeeping layer: variables, linear expressions and
tagged constraints. It owns no algorithm; solving is delegated to an external
MILP backend (HiGHS through :func:`scipy.optimize.milp` by default). Tags serve
double duty as a verification index: after a solve, every stored row can be
re-evaluated against the solution vector and reported per tag.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint
from scipy.optimize import milp as _scipy_milp

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous"
BINARY = "binary"

LESS_EQUAL = "<="
EQUAL = "="
GREATER_EQUAL = ">="
_SENSES = (LESS_EQUAL, EQUAL, GREATER_EQUAL)

#: Environment variable naming the solve backend (see BACKENDS).
SOLVER_ENV_VAR = "FLEXSTART_SOLVER"


class ModelError(ValueError):
    """Malformed variable, expression, constraint, or solve input."""


@dataclass(frozen=True)
class VarId:
    """Handle for one decision variable.

    The handle supports arithmetic (``2 * x - y + 1``) and yields
    :class:`LinExpr` instances, which keeps model-building code close to the
    algebra it implements.
    """

    index: int
    kind: str
    bounds: tuple[float, float]
    name: str

    def __add__(self, other):
        return LinExpr.of(self) + other

    __radd__ = __add__

    def __sub__(self, other):
        return LinExpr.of(self) - other

    def __rsub__(self, other):
        return -LinExpr.of(self) + other

    def __mul__(self, coef):
        if not isinstance(coef, (int, float)):
            return NotImplemented
        return LinExpr({self.index: float(coef)})

    __rmul__ = __mul__

    def __neg__(self):
        return LinExpr({self.index: -1.0})


class LinExpr:
    """Linear expression: ``sum(coef_i * var_i) + constant``."""

    __slots__ = ("terms", "constant")

    def __init__(self, terms: dict[int, float] | None = None, constant: float = 0.0):
        self.terms: dict[int, float] = dict(terms) if terms else {}
        self.constant = float(constant)

    @staticmethod
    def of(var: "VarId", coef: float = 1.0) -> "LinExpr":
        return LinExpr({var.index: float(coef)})

    @staticmethod
    def total(items) -> "LinExpr":
        """Sum of a mix of VarId / LinExpr / numbers, empty-safe."""
        acc = LinExpr()
        for it in items:
            acc += it
        return acc

    def copy(self) -> "LinExpr":
        return LinExpr(self.terms, self.constant)

    def add_term(self, var: "VarId", coef: float) -> "LinExpr":
        self.terms[var.index] = self.terms.get(var.index, 0.0) + float(coef)
        return self

    def __add__(self, other):
        out = self.copy()
        if isinstance(other, LinExpr):
            for i, c in other.terms.items():
                out.terms[i] = out.terms.get(i, 0.0) + c
            out.constant += other.constant
        elif isinstance(other, VarId):
            out.terms[other.index] = out.terms.get(other.index, 0.0) + 1.0
        elif isinstance(other, (int, float)):
            out.constant += float(other)
        else:
            return NotImplemented
        return out

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (LinExpr, VarId)):
            return self + (other * -1.0)
        if isinstance(other, (int, float)):
            return self + (-float(other))
        return NotImplemented

    def __rsub__(self, other):
        return (self * -1.0) + other

    def __mul__(self, coef):
        if not isinstance(coef, (int, float)):
            return NotImplemented
        return LinExpr({i: c * float(coef) for i, c in self.terms.items()}, self.constant * float(coef))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def value(self, x: np.ndarray) -> float:
        return float(sum(c * x[i] for i, c in self.terms.items()) + self.constant)

    def __repr__(self):  # pragma: no cover - debug aid
        body = " + ".join(f"{c:g}*x{i}" for i, c in sorted(self.terms.items()))
        return f"LinExpr({body or '0'} + {self.constant:g})"


def _as_expr(obj) -> LinExpr:
    if isinstance(obj, LinExpr):
        return obj
    if isinstance(obj, VarId):
        return LinExpr.of(obj)
    if isinstance(obj, (int, float)):
        return LinExpr(constant=float(obj))
    raise ModelError(f"not a linear expression: {obj!r}")


@dataclass(frozen=True)
class Constraint:
    """One stored row: ``expr (sense) rhs``, carrying its family tag."""

    index: int
    expr: LinExpr
    sense: str
    rhs: float
    tag: str


@dataclass(frozen=True)
class BigMConfig:
    """Big-M constants and the switching tolerance shared across a build.

    ``m_power`` should dominate any physical power flow (two times feeder peak
    by convention), ``m_freq`` any frequency spread in Hz, ``m_volt`` any
    squared-voltage spread in pu^2.
    """

    m_power: float
    m_freq: float = 10.0
    m_volt: float = 2.0
    epsilon: float = 1e-4

    @staticmethod
    def for_peak(peak_kw: float, **kw) -> "BigMConfig":
        return BigMConfig(m_power=2.0 * float(peak_kw), **kw)


@dataclass(frozen=True)
class SolveLimits:
    """Optional stopping limits forwarded to the backend."""

    time_limit_s: float | None = None
    mip_gap: float | None = None
    node_limit: int | None = None


@dataclass
class SolveResult:
    """Outcome of one backend call.

    ``status`` is one of ``optimal | feasible | infeasible | unbounded |
    limit``; ``feasible`` means a limit stopped the search but an incumbent is
    available, ``limit`` that it stopped with no incumbent.
    """

    status: str
    objective: float | None
    values: np.ndarray | None
    gap: float | None
    wall_time_s: float

    def value(self, var: VarId) -> float:
        if self.values is None:
            raise ModelError("no solution values available")
        return float(self.values[var.index])

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


class Model:
    """Container for variables and tagged constraints of one MILP instance.

    Single-writer: build it in one place, then hand it to :func:`solve` (which
    does not mutate it) as many times as needed with different objectives.
    """

    def __init__(self, name: str = "model"):
        self.name = name
        self.vars: list[VarId] = []
        self.constraints: list[Constraint] = []
        self._matrix_cache = None

    # -- variables ---------------------------------------------------------

    def add_var(self, kind: str = CONTINUOUS, lo: float = 0.0, hi: float | None = None,
                name: str = "") -> VarId:
        if kind not in (CONTINUOUS, BINARY):
            raise ModelError(f"unknown variable kind {kind!r}")
        if kind == BINARY:
            lo = 0.0 if lo is None else float(lo)
            hi = 1.0 if hi is None else float(hi)
            if lo < -1e-12 or hi > 1.0 + 1e-12:
                raise ModelError(f"binary bounds outside [0,1]: [{lo}, {hi}]")
        else:
            lo = -math.inf if lo is None else float(lo)
            hi = math.inf if hi is None else float(hi)
        if lo > hi:
            raise ModelError(f"variable lower bound {lo} exceeds upper bound {hi} ({name!r})")
        vid = VarId(index=len(self.vars), kind=kind, bounds=(lo, hi),
                    name=name or f"x{len(self.vars)}")
        self.vars.append(vid)
        self._matrix_cache = None
        return vid

    def fix_var(self, var: VarId, value: float) -> None:
        """Pin a variable by collapsing its bounds (used by enumeration oracles)."""
        self._check_var(var)
        v = float(value)
        self.vars[var.index] = VarId(index=var.index, kind=var.kind, bounds=(v, v),
                                     name=var.name)
        self._matrix_cache = None

    def set_var_lower(self, var: VarId, lo: float) -> None:
        """Tighten a lower bound in place (monotone-state warm fixing)."""
        self._check_var(var)
        old = self.vars[var.index]
        if lo > old.bounds[1] + 1e-9:
            raise ModelError(f"lower bound {lo} above upper bound {old.bounds[1]} ({old.name!r})")
        self.vars[var.index] = VarId(index=old.index, kind=old.kind,
                                     bounds=(float(lo), old.bounds[1]), name=old.name)
        self._matrix_cache = None

    def _check_var(self, var: VarId) -> None:
        if not isinstance(var, VarId) or var.index < 0 or var.index >= len(self.vars) \
                or self.vars[var.index].name != var.name:
            raise ModelError(f"unknown variable {var!r} for model {self.name!r}")

    # -- constraints -------------------------------------------------------

    def add_constraint(self, expr, sense: str, rhs: float, tag: str) -> int:
        if sense not in _SENSES:
            raise ModelError(f"unknown sense {sense!r}")
        if not tag or not isinstance(tag, str):
            raise ModelError("every constraint needs a non-empty tag")
        e = _as_expr(expr)
        n = len(self.vars)
        for i in e.terms:
            if i < 0 or i >= n:
                raise ModelError(f"expression references unknown variable index {i}")
        row = Constraint(index=len(self.constraints), expr=e.copy(), sense=sense,
                         rhs=float(rhs), tag=tag)
        self.constraints.append(row)
        self._matrix_cache = None
        return row.index

    def add_range(self, expr, lo: float, hi: float, tag: str) -> tuple[int, int]:
        """Two tagged rows ``lo <= expr`` and ``expr <= hi``."""
        a = self.add_constraint(expr, GREATER_EQUAL, lo, tag)
        b = self.add_constraint(expr, LESS_EQUAL, hi, tag)
        return a, b

    def linearize_binary_product(self, a: VarId, b: VarId, name: str = "",
                                 tag: str = "binprod") -> VarId:
        """Exact linearization of ``w = a*b`` for binary a, b.

        Adds ``w <= a``, ``w <= b``, ``w >= a + b - 1`` with w binary.
        """
        for v in (a, b):
            self._check_var(v)
            if v.kind != BINARY:
                raise ModelError(f"binary product needs binary factors, got {v.kind} ({v.name!r})")
        w = self.add_var(BINARY, name=name or f"and_{a.name}_{b.name}")
        self.add_constraint(w - a, LESS_EQUAL, 0.0, tag)
        self.add_constraint(w - b, LESS_EQUAL, 0.0, tag)
        self.add_constraint(w - a - b, GREATER_EQUAL, -1.0, tag)
        return w

    # -- inspection --------------------------------------------------------

    @property
    def num_vars(self) -> int:
        return len(self.vars)

    @property
    def num_constraints(self) -> int:
        return len(self.constraints)

    def tags(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for c in self.constraints:
            out[c.tag] = out.get(c.tag, 0) + 1
        return out

    def _matrix(self):
        """(A, lb, ub) row system over all constraints, cached."""
        if self._matrix_cache is None:
            rows, cols, data = [], [], []
            lb = np.empty(len(self.constraints))
            ub = np.empty(len(self.constraints))
            for r, c in enumerate(self.constraints):
                for i, coef in c.expr.terms.items():
                    if coef != 0.0:
                        rows.append(r)
                        cols.append(i)
                        data.append(coef)
                adj = c.rhs - c.expr.constant
                if c.sense == LESS_EQUAL:
                    lb[r], ub[r] = -np.inf, adj
                elif c.sense == GREATER_EQUAL:
                    lb[r], ub[r] = adj, np.inf
                else:
                    lb[r], ub[r] = adj, adj
            a = sp.csr_matrix((data, (rows, cols)),
                              shape=(len(self.constraints), len(self.vars)))
            self._matrix_cache = (a, lb, ub)
        return self._matrix_cache

    def constraint_violations(self, x: np.ndarray, tol: float = 1e-6) -> np.ndarray:
        """Per-row violation magnitudes (0 where satisfied within tol)."""
        if len(self.constraints) == 0:
            return np.zeros(0)
        a, lb, ub = self._matrix()
        ax = a @ np.asarray(x, dtype=float)
        viol = np.maximum(ax - ub, 0.0) + np.maximum(lb - ax, 0.0)
        viol[viol <= tol] = 0.0
        return viol

    def report_by_tag(self, x: np.ndarray, tol: float = 1e-6) -> dict[str, dict]:
        """Worst violation and row count per tag for a candidate solution."""
        if len(self.constraints) == 0:
            return {}
        a, lb, ub = self._matrix()
        ax = a @ np.asarray(x, dtype=float)
        raw = np.maximum(ax - ub, 0.0) + np.maximum(lb - ax, 0.0)
        out: dict[str, dict] = {}
        for r, c in enumerate(self.constraints):
            rec = out.setdefault(c.tag, {"rows": 0, "max_violation": 0.0, "ok": True})
            rec["rows"] += 1
            v = float(raw[r])
            if v > rec["max_violation"]:
                rec["max_violation"] = v
            if v > tol:
                rec["ok"] = False
        return out

    # -- text dump ---------------------------------------------------------

    def dump_lp(self, objective: LinExpr | None = None, direction: str = "min") -> str:
        """LP-format-compatible text: one constraint per line, tag as trailing comment."""
        safe = _lp_name_map(self.vars)
        lines = [f"\\ model {self.name}"]
        lines.append("Maximize" if direction == "max" else "Minimize")
        obj = objective or LinExpr()
        lines.append(" obj: " + (_lp_terms(obj, safe) or "0"))
        lines.append("Subject To")
        for c in self.constraints:
            sense = {LESS_EQUAL: "<=", GREATER_EQUAL: ">=", EQUAL: "="}[c.sense]
            body = _lp_terms(LinExpr(c.expr.terms), safe) or "0"
            lines.append(f" c{c.index}: {body} {sense} {c.rhs - c.expr.constant:.12g} \\ tag={c.tag}")
        lines.append("Bounds")
        for v in self.vars:
            lo, hi = v.bounds
            lo_s = "-inf" if lo == -math.inf else f"{lo:.12g}"
            hi_s = "+inf" if hi == math.inf else f"{hi:.12g}"
            lines.append(f" {lo_s} <= {safe[v.index]} <= {hi_s}")
        binaries = [safe[v.index] for v in self.vars if v.kind == BINARY]
        if binaries:
            lines.append("Binaries")
            for chunk in range(0, len(binaries), 12):
                lines.append(" " + " ".join(binaries[chunk:chunk + 12]))
        lines.append("End")
        return "\n".join(lines) + "\n"

    def write_lp(self, path, objective: LinExpr | None = None, direction: str = "min") -> None:
        with open(path, "w") as fh:
            fh.write(self.dump_lp(objective, direction))


def _lp_name_map(vars_: list[VarId]) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    for v in vars_:
        base = "".join(ch if ch.isalnum() or ch in "_.[]" else "_" for ch in v.name) or f"x{v.index}"
        if base[0].isdigit():
            base = "v" + base
        n = seen.get(base, 0)
        seen[base] = n + 1
        out.append(base if n == 0 else f"{base}__{n}")
    return out


def _lp_terms(expr: LinExpr, names: list[str]) -> str:
    parts = []
    for i, c in sorted(expr.terms.items()):
        if c == 0.0:
            continue
        parts.append(f"{'+' if c >= 0 else '-'}{abs(c):.12g} {names[i]}")
    return " ".join(parts)


# -- backends ---------------------------------------------------------------


class HighsBackend:
    """HiGHS branch-and-bound through scipy.optimize.milp."""

    name = "highs"

    def solve(self, model: Model, objective: LinExpr, direction: str,
              limits: SolveLimits) -> SolveResult:
        n = model.num_vars
        sign = -1.0 if direction == "max" else 1.0
        c = np.zeros(n)
        for i, coef in objective.terms.items():
            c[i] = sign * coef
        integrality = np.array([1 if v.kind == BINARY else 0 for v in model.vars])
        lb = np.array([v.bounds[0] for v in model.vars])
        ub = np.array([v.bounds[1] for v in model.vars])
        options: dict = {"disp": False}
        if limits.time_limit_s is not None:
            options["time_limit"] = float(limits.time_limit_s)
        if limits.mip_gap is not None:
            options["mip_rel_gap"] = float(limits.mip_gap)
        if limits.node_limit is not None:
            options["node_limit"] = int(limits.node_limit)
        kwargs = {}
        if model.num_constraints:
            a, row_lb, row_ub = model._matrix()
            kwargs["constraints"] = LinearConstraint(a, row_lb, row_ub)
        t0 = time.perf_counter()
        res = _scipy_milp(c=c, integrality=integrality, bounds=Bounds(lb, ub),
                          options=options, **kwargs)
        wall = time.perf_counter() - t0
        status = {0: "optimal", 1: "limit", 2: "infeasible", 3: "unbounded"}.get(res.status, "limit")
        values = None
        obj = None
        if res.x is not None:
            values = np.asarray(res.x, dtype=float)
            obj = sign * float(res.fun) + objective.constant
            if status == "limit":
                status = "feasible"
        gap = getattr(res, "mip_gap", None)
        if gap is not None:
            gap = float(gap)
        if status in ("infeasible", "unbounded"):
            values, obj = None, None
        return SolveResult(status=status, objective=obj, values=values, gap=gap,
                           wall_time_s=wall)


BACKENDS = {"highs": HighsBackend}


def get_backend(name: str | None = None):
    """Resolve the backend from an explicit name or the environment."""
    key = (name or os.environ.get(SOLVER_ENV_VAR) or "highs").lower()
    if key not in BACKENDS:
        raise ModelError(f"unknown solver backend {key!r}; available: {sorted(BACKENDS)}")
    return BACKENDS[key]()


def solve(model: Model, objective, direction: str = "min",
          limits: SolveLimits | None = None, backend: str | None = None) -> SolveResult:
    """Solve ``model`` for the given objective.

    The model itself is not mutated, so one build can serve several solves
    (e.g. the two envelope directions).
    """
    if direction not in ("min", "max"):
        raise ModelError(f"direction must be 'min' or 'max', got {direction!r}")
    obj = _as_expr(objective)
    n = model.num_vars
    for i in obj.terms:
        if i < 0 or i >= n:
            raise ModelError(f"objective references unknown variable index {i}")
    result = get_backend(backend).solve(model, obj, direction, limits or SolveLimits())
    logger.debug("solve %s: status=%s obj=%s rows=%d vars=%d t=%.3fs",
                 model.name, result.status, result.objective,
                 model.num_constraints, model.num_vars, result.wall_time_s)
    return result
