"""Coupled multi-agent quadratic problems and their plaintext calculus.

The problem class is

    minimize    1/2 ||sum_i A_u[i] x_i + c||^2 + sum_i f_i(x_i)
    subject to  x_i in [lower_i, upper_i]
                sum_i A_g[i] x_i + d <= 0

with ``f_i(x) = (A_q x)^T (A_q x) + A_l x + C_t``. The operator owns ``c``,
``d`` and every coupling matrix; agent ``i`` owns its coupling matrices and
its local cost, and nothing else.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

SO = "so"
DEFAULT_LAMBDA_MAX = 100.0


class InstanceError(ValueError):
    pass


class SchemaError(InstanceError):
    pass


class DimensionError(InstanceError):
    pass


class EmptyBoxError(InstanceError):
    pass


def agent_role(i: int) -> str:
    """Role id of the agent with 0-based index ``i``; wire ids are 1-based."""
    return f"agent{i + 1}"


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LocalCost:
    A_q: np.ndarray
    A_l: np.ndarray
    C_t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "A_q", _frozen(self.A_q))
        object.__setattr__(self, "A_l", _frozen(self.A_l))
        object.__setattr__(self, "C_t", float(self.C_t))

    def value(self, x) -> float:
        y = self.A_q @ x
        return float(y @ y + self.A_l @ x + self.C_t)

    def gradient(self, x) -> np.ndarray:
        return 2.0 * (self.A_q.T @ (self.A_q @ x)) + self.A_l


@dataclass(frozen=True, eq=False)
class AgentBlock:
    """Everything agent ``index`` is allowed to know about the problem."""

    index: int
    A_u: np.ndarray
    A_g: np.ndarray
    cost: LocalCost
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        for name in ("A_u", "A_g", "lower", "upper"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def role(self) -> str:
        return agent_role(self.index)

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)


@dataclass(frozen=True, eq=False)
class OperatorView:
    """Coefficients held by the system operator."""

    c: np.ndarray
    d: np.ndarray
    A_u: tuple
    A_g: tuple

    @property
    def n(self) -> int:
        return len(self.A_u)


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    c: np.ndarray
    d: np.ndarray
    agents: tuple
    lambda_max: float = DEFAULT_LAMBDA_MAX
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "c", _frozen(self.c))
        object.__setattr__(self, "d", _frozen(self.d))
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "lambda_max", float(self.lambda_max))
        _validate(self)

    @property
    def n(self) -> int:
        return len(self.agents)

    @property
    def dims(self) -> list[int]:
        return [a.dim for a in self.agents]

    @property
    def dual_dim(self) -> int:
        return self.d.shape[0]

    @property
    def dual_lower(self) -> np.ndarray:
        return np.zeros(self.dual_dim)

    @property
    def dual_upper(self) -> np.ndarray:
        return np.full(self.dual_dim, self.lambda_max)

    def agent_view(self, i: int) -> AgentBlock:
        return self.agents[i]

    def operator_view(self) -> OperatorView:
        return OperatorView(self.c, self.d,
                            tuple(a.A_u for a in self.agents),
                            tuple(a.A_g for a in self.agents))

    def ownership(self) -> dict[str, frozenset[str]]:
        """Owner roles of every coefficient."""
        owners = {"c": frozenset({SO}), "d": frozenset({SO})}
        for a in self.agents:
            k = a.index + 1
            owners[f"A_u{k}"] = frozenset({SO, a.role})
            owners[f"A_g{k}"] = frozenset({SO, a.role})
            for name in ("A_q", "A_l", "C_t"):
                owners[f"{name}{k}"] = frozenset({a.role})
        return owners

    def split(self, x) -> list[np.ndarray]:
        """Per-agent blocks of a stacked vector (or a sequence of blocks)."""
        if isinstance(x, np.ndarray) and x.ndim == 1:
            if x.shape[0] != sum(self.dims):
                raise DimensionError(f"stacked vector has length {x.shape[0]}, expected {sum(self.dims)}")
            return np.split(x, np.cumsum(self.dims)[:-1])
        blocks = [np.asarray(b, dtype=float) for b in x]
        if [b.shape for b in blocks] != [(m,) for m in self.dims]:
            raise DimensionError(f"block shapes {[b.shape for b in blocks]} do not match dims {self.dims}")
        return blocks

    def stack(self, xs) -> np.ndarray:
        return np.concatenate(self.split(xs))


def _validate(inst: ProblemInstance) -> None:
    if inst.n < 1:
        raise SchemaError("an instance needs at least one agent")
    if inst.c.ndim != 1 or inst.d.ndim != 1:
        raise DimensionError("c and d must be vectors")
    if inst.lambda_max <= 0:
        raise EmptyBoxError("lambda_max must be positive")
    for i, a in enumerate(inst.agents):
        k = i + 1
        if a.index != i:
            raise SchemaError(f"agent {k} carries index {a.index}")
        if a.lower.ndim != 1 or a.lower.shape != a.upper.shape:
            raise DimensionError(f"agent {k}: box bounds must be equal-length vectors")
        m = a.dim
        if a.A_u.shape != (inst.c.shape[0], m):
            raise DimensionError(f"agent {k}: A_u has shape {a.A_u.shape}, expected {(inst.c.shape[0], m)}")
        if a.A_g.shape != (inst.d.shape[0], m):
            raise DimensionError(f"agent {k}: A_g has shape {a.A_g.shape}, expected {(inst.d.shape[0], m)}")
        if a.cost.A_q.ndim != 2 or a.cost.A_q.shape[1] != m:
            raise DimensionError(f"agent {k}: A_q must have {m} columns")
        if a.cost.A_l.shape != (m,):
            raise DimensionError(f"agent {k}: A_l must have length {m}")
        if np.any(a.lower > a.upper) or not np.all(np.isfinite(a.lower) & np.isfinite(a.upper)):
            raise EmptyBoxError(f"agent {k}: box is empty or unbounded")


# -- plaintext calculus ---------------------------------------------------------

def coupling_aggregate(inst: ProblemInstance, x) -> np.ndarray:
    """``sum_i A_u[i] x_i + c``."""
    return sum((a.A_u @ xi for a, xi in zip(inst.agents, inst.split(x))), inst.c.copy())


def constraint_aggregate(inst: ProblemInstance, x) -> np.ndarray:
    """``sum_i A_g[i] x_i + d``, the global constraint value."""
    return sum((a.A_g @ xi for a, xi in zip(inst.agents, inst.split(x))), inst.d.copy())


def objective(inst: ProblemInstance, x) -> float:
    xs = inst.split(x)
    z = coupling_aggregate(inst, xs)
    return float(0.5 * z @ z + sum(a.cost.value(xi) for a, xi in zip(inst.agents, xs)))


def lagrangian(inst: ProblemInstance, x, lam) -> float:
    return objective(inst, x) + float(np.asarray(lam) @ constraint_aggregate(inst, x))


def block_subgradient(block: AgentBlock, z_c, x_i, lam) -> np.ndarray:
    """Gradient of the Lagrangian in ``x_i`` given the coupling aggregate ``z_c``.

    Only agent-local data plus the aggregate is needed, which is what lets an
    agent evaluate it without seeing anyone else's variables.
    """
    z_c = np.asarray(z_c, dtype=float)
    x_i = np.asarray(x_i, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if z_c.shape != (block.A_u.shape[0],) or x_i.shape != (block.dim,) or lam.shape != (block.A_g.shape[0],):
        raise DimensionError("z_c, x_i or lambda has the wrong length for this agent")
    return block.A_u.T @ z_c + block.cost.gradient(x_i) + block.A_g.T @ lam


def primal_subgradient(inst: ProblemInstance, i: int, z_c, x_i, lam) -> np.ndarray:
    return block_subgradient(inst.agents[i], z_c, x_i, lam)


def dual_subgradient(inst: ProblemInstance, z_d) -> np.ndarray:
    """The constraint aggregate is itself the dual subgradient."""
    z_d = np.asarray(z_d, dtype=float)
    if z_d.shape != (inst.dual_dim,):
        raise DimensionError(f"z_d has shape {z_d.shape}, expected {(inst.dual_dim,)}")
    return z_d


# -- documents ----------------------------------------------------------------

_AGENT_KEYS = ("A_u", "A_g", "A_q", "A_l", "C_t", "box_lower", "box_upper")


def _num(value, where: str) -> float:
    if not isinstance(value, str):
        raise SchemaError(f"{where}: numbers must be decimal strings, got {value!r}")
    try:
        return float(Decimal(value))
    except InvalidOperation:
        raise SchemaError(f"{where}: {value!r} is not a decimal number") from None


def _vec(value, where: str) -> np.ndarray:
    if not isinstance(value, list):
        raise SchemaError(f"{where}: expected a list")
    return np.array([_num(v, f"{where}[{j}]") for j, v in enumerate(value)])


def _mat(value, where: str) -> np.ndarray:
    if not isinstance(value, list) or not value or not all(isinstance(r, list) for r in value):
        raise SchemaError(f"{where}: expected a non-empty list of rows")
    rows = [_vec(r, f"{where}[{j}]") for j, r in enumerate(value)]
    if len({len(r) for r in rows}) != 1:
        raise DimensionError(f"{where}: ragged rows")
    return np.vstack(rows)


def load_instance(doc: Mapping) -> ProblemInstance:
    """Validate an instance document and build the instance.

    Raises ``SchemaError`` for missing or mistyped fields, ``DimensionError``
    for inconsistent shapes and ``EmptyBoxError`` for empty boxes.
    """
    if not isinstance(doc, Mapping):
        raise SchemaError("instance document must be a mapping")
    for key in ("n", "c", "d", "agents"):
        if key not in doc:
            raise SchemaError(f"missing field {key!r}")
    agents_doc = doc["agents"]
    if not isinstance(agents_doc, list):
        raise SchemaError("'agents' must be a list")
    n = doc["n"]
    if not isinstance(n, int) or isinstance(n, bool) or n != len(agents_doc):
        raise SchemaError(f"'n' must be an integer equal to the number of agent blocks ({len(agents_doc)})")
    c = _vec(doc["c"], "c")
    d = _vec(doc["d"], "d")
    agents = []
    for i, blk in enumerate(agents_doc):
        where = f"agents[{i}]"
        if not isinstance(blk, Mapping):
            raise SchemaError(f"{where}: expected a mapping")
        missing = [k for k in _AGENT_KEYS if k not in blk]
        if missing:
            raise SchemaError(f"{where}: missing {missing}")
        cost = LocalCost(_mat(blk["A_q"], f"{where}.A_q"), _vec(blk["A_l"], f"{where}.A_l"),
                         _num(blk["C_t"], f"{where}.C_t"))
        agents.append(AgentBlock(i, _mat(blk["A_u"], f"{where}.A_u"), _mat(blk["A_g"], f"{where}.A_g"),
                                 cost, _vec(blk["box_lower"], f"{where}.box_lower"),
                                 _vec(blk["box_upper"], f"{where}.box_upper")))
    lambda_max = DEFAULT_LAMBDA_MAX
    if "dual" in doc:
        dual = doc["dual"]
        if not isinstance(dual, Mapping) or "lambda_max" not in dual:
            raise SchemaError("'dual' must be a mapping with 'lambda_max'")
        lambda_max = _num(dual["lambda_max"], "dual.lambda_max")
    return ProblemInstance(c, d, agents, lambda_max, name=str(doc.get("name", "")))


def _s(x: float) -> str:
    return repr(float(x))


def dump_instance(inst: ProblemInstance) -> dict:
    """Canonical document for ``inst``; every number is written as ``repr(float)``."""
    doc = {"n": inst.n, "c": [_s(v) for v in inst.c], "d": [_s(v) for v in inst.d], "agents": []}
    if inst.name:
        doc["name"] = inst.name
    for a in inst.agents:
        doc["agents"].append({
            "A_u": [[_s(v) for v in row] for row in a.A_u],
            "A_g": [[_s(v) for v in row] for row in a.A_g],
            "A_q": [[_s(v) for v in row] for row in a.cost.A_q],
            "A_l": [_s(v) for v in a.cost.A_l],
            "C_t": _s(a.cost.C_t),
            "box_lower": [_s(v) for v in a.lower],
            "box_upper": [_s(v) for v in a.upper],
        })
    doc["dual"] = {"lambda_max": _s(inst.lambda_max)}
    return doc


def normalize_document(doc: Mapping) -> dict:
    """Rewrite every decimal string of an instance document the way ``dump_instance`` would."""

    def walk(v):
        if isinstance(v, Mapping):
            return {k: walk(x) for k, x in v.items()}
        if isinstance(v, list):
            return [walk(x) for x in v]
        if isinstance(v, str):
            return _s(Decimal(v))
        return v

    out = {k: (v if k == "name" else walk(v)) for k, v in doc.items()}
    out.setdefault("dual", {"lambda_max": _s(DEFAULT_LAMBDA_MAX)})
    return out


def fixture_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("privopt.data").iterdir() if p.name.endswith(".json"))


def fixture_document(name: str) -> dict:
    path = resources.files("privopt.data") / f"{name}.json"
    if not path.is_file():
        raise InstanceError(f"no bundled instance named {name!r}; available: {fixture_names()}")
    return json.loads(path.read_text())


def read_instance(source: str | Path) -> ProblemInstance:
    """Load a bundled fixture by name, or an instance document from a JSON file."""
    path = Path(source)
    if path.suffix == "" and not path.exists():
        return load_instance(fixture_document(str(source)))
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read instance {source}: {exc}") from None
    return load_instance(doc)


def paper_instance() -> ProblemInstance:
    """The three-agent benchmark instance bundled as ``paper_sva``."""
    return load_instance(fixture_document("paper_sva"))


def random_feasible_point(inst: ProblemInstance, rng: np.random.Generator) -> list[np.ndarray]:
    return [rng.uniform(a.lower, a.upper) for a in inst.agents]
