"""Adapter Transferability Cost: optimal transport over module similarity.

Source locations each supply 1/S, target locations each demand 1/T, moving
mass from source i to target j costs ``C[i, j] = 1 - Φ``. The LP is solved
exactly as a min-cost flow on the bipartite graph with a network simplex.

Internally supplies are scaled to integers (T per source, S per target) so
every flow is an exact integer and the marginals hold bit-exactly before the
final division by S*T.
"""
from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import IncompleteReport, OracleOutOfRange, ShapeError
from .similarity import SimilarityReport

REDUCED_COST_TOL = -1e-12


@dataclass(frozen=True)
class CostMatrix:
    costs: np.ndarray
    source_keys: tuple[str, ...] = ()
    target_keys: tuple[str, ...] = ()

    def __post_init__(self):
        c = np.asarray(self.costs, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ShapeError(f"cost matrix must be S x T with S, T >= 1, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("cost matrix has non-finite entries")
        object.__setattr__(self, "costs", c)

    @property
    def s(self) -> int:
        return self.costs.shape[0]

    @property
    def t(self) -> int:
        return self.costs.shape[1]


@dataclass(frozen=True)
class TransportPlan:
    x: np.ndarray
    atc: float
    iterations: int
    min_reduced_cost: float = 0.0

    def to_json(self, side: str | None = None, include_plan: bool = False) -> dict:
        d = {"side": side, "S": self.x.shape[0], "T": self.x.shape[1], "atc": self.atc,
             "iterations": self.iterations}
        if include_plan:
            d["plan"] = self.x.tolist()
        return d


@dataclass(frozen=True)
class FlowProblem:
    incidence: np.ndarray
    demand: np.ndarray
    edge_costs: np.ndarray


def _costs(c) -> np.ndarray:
    return c.costs if isinstance(c, CostMatrix) else CostMatrix(c).costs


def build_cost_matrix(report: SimilarityReport, side: str = "left") -> CostMatrix:
    """``C[i, j] = 1 - Φ_side`` over every (source, target) pair; invalid pairs cost 1."""
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    src = [k.raw for k in report.source_keys()]
    tgt = [k.raw for k in report.target_keys()]
    c = np.ones((len(src), len(tgt)))
    for i, s in enumerate(src):
        for j, t in enumerate(tgt):
            p = report.get(s, t)
            if p is None:
                raise IncompleteReport(f"report has no entry for pair ({s}, {t})")
            if p.valid:
                c[i, j] = 1.0 - p.score.side(side)
    return CostMatrix(np.clip(c, 0.0, 1.0), tuple(src), tuple(tgt))


def build_flow_problem(c) -> FlowProblem:
    """Node-edge incidence form: edge (i, j) has column i*T + j, -1 at node i, +1 at node S+j."""
    c = _costs(c)
    S, T = c.shape
    inc = np.zeros((S + T, S * T))
    e = np.arange(S * T)
    inc[e // T, e] = -1.0
    inc[S + e % T, e] = 1.0
    demand = np.concatenate([np.full(S, -1.0 / S), np.full(T, 1.0 / T)])
    return FlowProblem(inc, demand, c.reshape(-1).copy())


def atc(c, plan: TransportPlan) -> float:
    c = _costs(c)
    if c.shape != plan.x.shape:
        raise ShapeError(f"plan {plan.x.shape} does not match cost matrix {c.shape}")
    return float(np.sum(c * plan.x))


class _Tree:
    """Spanning tree of basic cells. Row node i is i, column node j is S + j."""

    def __init__(self, S, T):
        self.S, self.T = S, T
        self.adj = [set() for _ in range(S + T)]

    def add(self, i, j):
        self.adj[i].add(self.S + j)
        self.adj[self.S + j].add(i)

    def remove(self, i, j):
        self.adj[i].discard(self.S + j)
        self.adj[self.S + j].discard(i)

    def potentials(self, c):
        S = self.S
        pot = np.full(S + self.T, np.nan)
        pot[0] = 0.0
        queue = deque([0])
        while queue:
            a = queue.popleft()
            for b in self.adj[a]:
                if np.isnan(pot[b]):
                    # u_i + v_j = c_ij on basic cells
                    pot[b] = (c[a, b - S] if a < S else c[b, a - S]) - pot[a]
                    queue.append(b)
        return pot[:S], pot[S:]

    def path(self, start, goal):
        parent = {start: None}
        queue = deque([start])
        while queue:
            a = queue.popleft()
            if a == goal:
                break
            for b in self.adj[a]:
                if b not in parent:
                    parent[b] = a
                    queue.append(b)
        nodes = [goal]
        while parent[nodes[-1]] is not None:
            nodes.append(parent[nodes[-1]])
        return nodes[::-1]


def _northwest_corner(S, T):
    supply, demand = [T] * S, [S] * T
    flow = {}
    i = j = 0
    while i < S and j < T:
        q = min(supply[i], demand[j])
        flow[(i, j)] = q
        supply[i] -= q
        demand[j] -= q
        if supply[i] == 0 and i < S - 1:
            i += 1
        else:
            j += 1
    return flow


def solve_min_cost_flow(c, pivot_rule: str = "dantzig", max_iter: int | None = None) -> TransportPlan:
    """Exact optimal coupling by network simplex.

    Starts from the northwest-corner basis. With ``pivot_rule="bland"`` every
    pivot enters the lowest-index edge with negative reduced cost and, among
    tied blocking edges, removes the lowest index; this cannot cycle.
    ``"dantzig"`` enters the most negative reduced cost, which needs far fewer
    pivots, and switches to Bland's rule after a run of degenerate pivots
    until the objective moves again, so termination is still guaranteed.
    """
    if pivot_rule not in ("dantzig", "bland"):
        raise ValueError(f"unknown pivot rule {pivot_rule!r}")
    c = _costs(c)
    S, T = c.shape
    flow = _northwest_corner(S, T)
    tree = _Tree(S, T)
    basic = np.zeros((S, T), dtype=bool)
    for (i, j) in flow:
        tree.add(i, j)
        basic[i, j] = True

    limit = max_iter if max_iter is not None else 50 * (S + T) * max(S, T) + 1000
    iterations = 0
    min_rc = 0.0
    degenerate_run = 0
    stall_limit = S + T
    while True:
        u, v = tree.potentials(c)
        reduced = c - u[:, None] - v[None, :]
        reduced[basic] = 0.0
        min_rc = float(reduced.min())
        cand = np.flatnonzero(reduced.reshape(-1) < REDUCED_COST_TOL)
        if cand.size == 0:
            break
        if iterations >= limit:
            raise RuntimeError(f"network simplex exceeded {limit} pivots")
        if pivot_rule == "bland" or degenerate_run > stall_limit:
            e = int(cand[0])
        else:
            e = int(np.argmin(reduced))
        ie, je = divmod(e, T)
        nodes = tree.path(S + je, ie)
        # cycle: entering edge +, then path edges alternate -, +, ..., -
        cycle = []
        for k in range(len(nodes) - 1):
            a, b = nodes[k], nodes[k + 1]
            cell = (b, a - S) if a >= S else (a, b - S)
            cycle.append((cell, -1 if k % 2 == 0 else +1))
        minus = [cell for cell, sgn in cycle if sgn < 0]
        theta = min(flow[cell] for cell in minus)
        degenerate_run = degenerate_run + 1 if theta == 0 else 0
        leaving = min((cell for cell in minus if flow[cell] == theta), key=lambda ij: ij[0] * T + ij[1])
        for cell, sgn in cycle:
            flow[cell] += sgn * theta
        flow[(ie, je)] = theta
        del flow[leaving]
        tree.remove(*leaving)
        tree.add(ie, je)
        basic[leaving] = False
        basic[ie, je] = True
        iterations += 1

    x = np.zeros((S, T))
    total = S * T
    for (i, j), q in flow.items():
        x[i, j] = q / total
    return TransportPlan(x, float(np.sum(c * x)), iterations, min_rc)


def brute_force_transport(c) -> TransportPlan:
    """Best permutation coupling; equals the LP optimum for uniform square marginals."""
    c = _costs(c)
    S, T = c.shape
    if S != T or S > 8:
        raise OracleOutOfRange(f"brute force needs S == T <= 8, got {S} x {T}")
    rows = np.arange(S)
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(S)):
        cost = float(c[rows, perm].sum()) / S
        if cost < best:
            best, best_perm = cost, perm
    x = np.zeros((S, T))
    x[rows, best_perm] = 1.0 / S
    return TransportPlan(x, float(np.sum(c * x)), 0)


def atc_report_json(plan: TransportPlan, side: str, include_plan: bool = False) -> str:
    return json.dumps(plan.to_json(side, include_plan), indent=1)
