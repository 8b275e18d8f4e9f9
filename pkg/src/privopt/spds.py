"""Shrunken primal-dual subgradient iteration.

Each primal block is updated by a nested projection

    x_i <- P_X( P_X(tau_x * x_i - alpha_i * grad_i) / tau_x )

and the dual vector by

    lam <- P_D( P_D(tau_lam * lam + beta * z_d) / tau_lam )

where ``z_d`` is the global constraint value. With ``tau_x = tau_lam = 1``
this is plain projected gradient descent/ascent.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import problem as pb


@dataclass(frozen=True)
class SolverConfig:
    """Step sizes, shrunken parameters and the stopping rule.

    ``alpha`` is either one step size shared by every agent or one per agent.
    The run stops once the successive-difference error stays at or below
    ``eps0`` for ``window`` consecutive iterations, or after ``k_max``
    iterations. ``window=1`` is the bare single-step test.
    """

    alpha: float | tuple = 1.6e-2
    beta: float = 0.8
    tau_x: float = 1.0
    tau_lambda: float = 1.0
    eps0: float = 1e-3
    k_max: int = 1000
    window: int = 5

    def __post_init__(self):
        if not np.isscalar(self.alpha):
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        alphas = self.alpha if isinstance(self.alpha, tuple) else (self.alpha,)
        if not alphas or min(alphas) <= 0:
            raise ValueError("alpha must be positive")
        for name in ("beta", "tau_x", "tau_lambda", "eps0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.k_max < 1 or self.window < 1:
            raise ValueError("k_max and window must be at least 1")

    def alpha_for(self, i: int) -> float:
        if isinstance(self.alpha, tuple):
            return self.alpha[i]
        return float(self.alpha)


@dataclass(frozen=True, eq=False)
class IterationState:
    k: int
    x: tuple
    lam: np.ndarray
    epsilon: float = float("inf")

    def stacked(self) -> np.ndarray:
        return np.concatenate(self.x + (self.lam,))


def project_box(v, lower, upper) -> np.ndarray:
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    v = np.asarray(v, dtype=float)
    if lower.shape != upper.shape or np.any(lower > upper):
        raise ValueError("malformed box")
    if v.shape != lower.shape:
        raise pb.DimensionError(f"vector of shape {v.shape} projected onto a box of shape {lower.shape}")
    return np.minimum(np.maximum(v, lower), upper)


def primal_step(cfg: SolverConfig, i: int, x_i, grad, lower, upper) -> np.ndarray:
    inner = project_box(cfg.tau_x * np.asarray(x_i, dtype=float) - cfg.alpha_for(i) * np.asarray(grad), lower, upper)
    return project_box(inner / cfg.tau_x, lower, upper)


def dual_step(cfg: SolverConfig, lam, z_d, lower, upper) -> np.ndarray:
    inner = project_box(cfg.tau_lambda * np.asarray(lam, dtype=float) + cfg.beta * np.asarray(z_d), lower, upper)
    return project_box(inner / cfg.tau_lambda, lower, upper)


class UpdateRule(NamedTuple):
    """Pair of block updates; another primal-dual method plugs in here."""

    primal: Callable
    dual: Callable


SPDS = UpdateRule(primal_step, dual_step)


def local_error(x_prev, x_next, lam_prev, lam_next) -> float:
    """``max(||x_next - x_prev||_inf, ||lam_next - lam_prev||_inf)`` for one agent's view."""
    dx = np.max(np.abs(np.asarray(x_next) - np.asarray(x_prev)), initial=0.0)
    dl = np.max(np.abs(np.asarray(lam_next) - np.asarray(lam_prev)), initial=0.0)
    return float(max(dx, dl))


def error_metric(prev: IterationState, next: IterationState) -> float:
    if len(prev.x) != len(next.x):
        raise pb.DimensionError("states have different agent counts")
    return max((local_error(a, b, prev.lam, next.lam) for a, b in zip(prev.x, next.x)),
               default=local_error((), (), prev.lam, next.lam))


class StopMonitor:
    """Sliding-window stopping test shared by the solver and every agent."""

    def __init__(self, eps0: float, window: int = 1):
        self.eps0 = eps0
        self.recent = deque(maxlen=window)

    def update(self, epsilon: float) -> bool:
        self.recent.append(epsilon)
        return len(self.recent) == self.recent.maxlen and max(self.recent) <= self.eps0


@dataclass
class SolveResult:
    trace: list
    status: str
    info: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def final(self) -> IterationState:
        return self.trace[-1]

    @property
    def iterations(self) -> int:
        return self.final.k


def initial_state(inst: pb.ProblemInstance, x0=None, lam0=None) -> IterationState:
    """Box midpoints and a zero dual unless given; inputs are projected onto their sets."""
    if x0 is None:
        xs = [a.midpoint for a in inst.agents]
    else:
        xs = [project_box(xi, a.lower, a.upper) for a, xi in zip(inst.agents, inst.split(x0))]
    lam = np.zeros(inst.dual_dim) if lam0 is None else np.asarray(lam0, dtype=float)
    lam = project_box(lam, inst.dual_lower, inst.dual_upper)
    return IterationState(0, tuple(xs), lam)


def plaintext_step(inst: pb.ProblemInstance, cfg: SolverConfig, state: IterationState,
                   rule: UpdateRule = SPDS) -> IterationState:
    """One synchronous iteration with every block computed from the same ``state``."""
    z_c = pb.coupling_aggregate(inst, state.x)
    z_d = pb.dual_subgradient(inst, pb.constraint_aggregate(inst, state.x))
    xs = tuple(
        rule.primal(cfg, i, xi, pb.block_subgradient(a, z_c, xi, state.lam), a.lower, a.upper)
        for i, (a, xi) in enumerate(zip(inst.agents, state.x))
    )
    lam = rule.dual(cfg, state.lam, z_d, inst.dual_lower, inst.dual_upper)
    nxt = IterationState(state.k + 1, xs, lam)
    return IterationState(nxt.k, xs, lam, error_metric(state, nxt))


def solve_plaintext(inst: pb.ProblemInstance, cfg: SolverConfig, x0=None, lam0=None,
                    rule: UpdateRule = SPDS) -> SolveResult:
    """Run the iteration centrally, without encryption.

    Returns the full trace starting at the (projected) initial state. Hitting
    ``k_max`` is reported through ``status`` rather than raised.
    """
    state = initial_state(inst, x0, lam0)
    trace = [state]
    monitor = StopMonitor(cfg.eps0, cfg.window)
    status = "max_iter"
    while state.k < cfg.k_max:
        state = plaintext_step(inst, cfg, state, rule)
        trace.append(state)
        if monitor.update(state.epsilon):
            status = "converged"
            break
    return SolveResult(trace, status)


TRACE_HEADER_BASE = ("k", "agent", "coord", "x")


def write_trace_csv(trace: Sequence[IterationState], fh, agent_ids=None) -> None:
    """One row per (iteration, agent, coordinate) with the dual vector and error alongside.

    ``agent_ids`` labels the blocks of ``x`` (1-based); defaults to ``1..len(x)``.
    """
    if not trace:
        return
    m = trace[0].lam.shape[0]
    ids = list(agent_ids) if agent_ids is not None else list(range(1, len(trace[0].x) + 1))
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_HEADER_BASE + tuple(f"lambda_{j}" for j in range(m)) + ("epsilon",))
    for s in trace:
        lam = [repr(float(v)) for v in s.lam]
        for aid, xi in zip(ids, s.x):
            for j, v in enumerate(xi):
                w.writerow([s.k, aid, j, repr(float(v)), *lam, repr(float(s.epsilon))])


def read_trace_csv(fh) -> list[IterationState]:
    rows = list(csv.DictReader(fh))
    if not rows:
        return []
    lam_cols = sorted((c for c in rows[0] if c.startswith("lambda_")), key=lambda c: int(c[7:]))
    states: dict[int, dict] = {}
    for r in rows:
        k = int(r["k"])
        st = states.setdefault(k, {"x": {}, "lam": [float(r[c]) for c in lam_cols], "eps": float(r["epsilon"])})
        st["x"].setdefault(int(r["agent"]), {})[int(r["coord"])] = float(r["x"])
    out = []
    for k in sorted(states):
        st = states[k]
        xs = tuple(np.array([blk[j] for j in sorted(blk)]) for _, blk in sorted(st["x"].items()))
        out.append(IterationState(k, xs, np.array(st["lam"]), st["eps"]))
    return out


def gap_series(a: Sequence[IterationState], b: Sequence[IterationState]) -> list[tuple[int, float, float]]:
    """Per-iteration ``(k, ||x_a - x_b||_inf, ||lam_a - lam_b||_inf)`` over the common prefix."""
    out = []
    for sa, sb in zip(a, b):
        dx = max(float(np.max(np.abs(xa - xb))) for xa, xb in zip(sa.x, sb.x))
        dl = float(np.max(np.abs(sa.lam - sb.lam)))
        out.append((sa.k, dx, dl))
    return out


def write_gap_csv(gaps, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["k", "primal_gap", "dual_gap"])
    for k, dx, dl in gaps:
        w.writerow([k, repr(dx), repr(dl)])
