"""Workload assignment for a fixed deployment via an LCM-normalised flow network.

Network layout (node order is fixed, which makes every solve deterministic)::

    0            source S
    1..J         workload nodes w_j
    ...          intermediates i_{k,j}, replica by replica
    ...          c_k^in, c_k^out for each replica
    last         sink T

Flow on the replica side is measured in capacity units: replica k has M_k =
lcm_j(n_{k,j}) units per span and one type-j request consumes M_k / n_{k,j}.

Maximising served requests under shared replica capacity is an integer program
(it contains bin packing), so a plain max-flow is not always integrally optimal.
``solve`` therefore uses the preflow-push flow as the starting point, tops it
up greedily and, unless every request is already served, closes the remaining
gap with a small LP-bounded branch-and-bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import _kernels
from .core import EmptyDeployment, FlowServeError, InvalidSpec, TraceSpan
from .costmodel import CapacityTable

LCM_LIMIT = 2 ** 62
# flow units per replica used when the exact LCM is too large
FALLBACK_UNITS = 2 ** 32


class LcmOverflow(FlowServeError):
    pass


def normalize(n_row: Sequence[int], limit: int = LCM_LIMIT) -> tuple[int, list[int]]:
    """Return (M, units) with M = lcm(n_row) and units[j] = M // n_row[j]."""
    if not n_row:
        raise InvalidSpec("empty capacity row")
    if any(v < 1 for v in n_row):
        raise InvalidSpec("normalize needs strictly positive capacities")
    m = 1
    for v in n_row:
        m = m * int(v) // math.gcd(m, int(v))
        if m > limit:
            raise LcmOverflow(f"lcm of {list(n_row)} exceeds {limit}")
    return m, [m // int(v) for v in n_row]


def normalize_row(n_row: Sequence[int], limit: int = LCM_LIMIT) -> tuple[int, list[int]]:
    """Like ``normalize`` but tolerant of zero capacities and LCM overflow.

    Zero-capacity types get unit cost 0 (their arcs carry no flow anyway).
    On overflow every unit cost is rounded up against FALLBACK_UNITS, which
    can only tighten the sharing constraint (at most one request per type lost).
    """
    positive = [int(v) for v in n_row if v > 0]
    if not positive:
        return 1, [0] * len(n_row)
    try:
        m, _ = normalize(positive, limit)
        return m, [m // int(v) if v > 0 else 0 for v in n_row]
    except LcmOverflow:
        m = FALLBACK_UNITS
        return m, [-(-m // int(v)) if v > 0 else 0 for v in n_row]


@dataclass(frozen=True)
class FlowNetwork:
    num_types: int
    num_replicas: int
    cap: np.ndarray          # dense (N, N) int64 capacity matrix
    unit_cost: np.ndarray    # [k, j] flow units per request (0 = arc unusable)
    node_cap: np.ndarray     # [k] M_k
    demand: np.ndarray       # [j] lambda_j in requests
    e: np.ndarray            # [k, j]
    n: np.ndarray            # [k, j]
    labels: tuple[str, ...]

    @property
    def source(self) -> int:
        return 0

    @property
    def sink(self) -> int:
        return self.cap.shape[0] - 1

    @property
    def num_nodes(self) -> int:
        return self.cap.shape[0]

    def w(self, j: int) -> int:
        return 1 + j

    def i(self, k: int, j: int) -> int:
        return 1 + self.num_types + k * self.num_types + j

    def c_in(self, k: int) -> int:
        return 1 + self.num_types * (1 + self.num_replicas) + 2 * k

    def c_out(self, k: int) -> int:
        return self.c_in(k) + 1

    def edges(self) -> list[tuple[int, int, int]]:
        rows, cols = np.nonzero(self.cap)
        return [(int(a), int(b), int(self.cap[a, b])) for a, b in zip(rows, cols)]

    def to_dot(self, flow: np.ndarray | None = None) -> str:
        lines = ["digraph flow {", "  rankdir=LR;"]
        for a, b, c in self.edges():
            label = f"{int(flow[a, b])} | {c}" if flow is not None else str(c)
            lines.append(f'  "{self.labels[a]}" -> "{self.labels[b]}" [label="{label}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class AssignmentMatrix:
    x: np.ndarray            # [k, j] integer requests
    objective: int
    optimal: bool = True

    def to_rows(self) -> list[tuple[int, int, int]]:
        k, j = self.x.shape
        return [(a, b, int(self.x[a, b])) for a in range(k) for b in range(j)]


def build_network(span: TraceSpan, table: CapacityTable) -> FlowNetwork:
    """Build the four-edge-class network for one span."""
    n = np.asarray(table.n, dtype=np.int64)
    e = np.asarray(table.e, dtype=np.int64)
    if n.ndim != 2 or n.shape[0] == 0:
        raise EmptyDeployment("deployment has no replicas")
    R, J = n.shape
    lam = np.asarray(span.counts, dtype=np.int64)
    if lam.shape[0] != J:
        raise InvalidSpec(f"span has {lam.shape[0]} types but table has {J}")

    units = np.zeros((R, J), dtype=np.int64)
    node_cap = np.zeros(R, dtype=np.int64)
    for k in range(R):
        m, u = normalize_row(n[k])
        node_cap[k] = m
        units[k] = u

    N = 1 + J + R * J + 2 * R + 1
    cap = np.zeros((N, N), dtype=np.int64)
    labels = ["S"] + [f"w{j}" for j in range(J)] + \
        [f"i{k},{j}" for k in range(R) for j in range(J)]
    for k in range(R):
        labels += [f"c{k}in", f"c{k}out"]
    labels.append("T")
    net = FlowNetwork(J, R, cap, units, node_cap, lam, e, n, tuple(labels))

    # a type's demand expressed in the largest unit any replica charges for it
    widest = units.max(axis=0)
    for j in range(J):
        cap[0, net.w(j)] = lam[j] * max(int(widest[j]), 1)
    for k in range(R):
        for j in range(J):
            c = int(min(e[k, j], n[k, j])) * int(units[k, j])
            cap[net.w(j), net.i(k, j)] = c
            cap[net.i(k, j), net.c_in(k)] = c
        cap[net.c_in(k), net.c_out(k)] = node_cap[k]
        cap[net.c_out(k), net.sink] = J * node_cap[k]
    return net


def max_flow(net: FlowNetwork) -> tuple[int, np.ndarray]:
    value, flow = _kernels.preflow_push(net.cap, net.source, net.sink)
    return int(value), flow


def extract_assignment(net: FlowNetwork, flow: np.ndarray) -> AssignmentMatrix:
    """Convert arc flows to whole requests and restore the demand limit."""
    R, J = net.num_replicas, net.num_types
    x = np.zeros((R, J), dtype=np.int64)
    for k in range(R):
        for j in range(J):
            u = int(net.unit_cost[k, j])
            if u > 0:
                x[k, j] = max(0, int(flow[net.i(k, j), net.c_in(k)])) // u
    # widest-unit source arcs can over-admit cheap replicas; trim the most
    # expensive placements first so the demand constraint holds
    for j in range(J):
        excess = int(x[:, j].sum() - net.demand[j])
        if excess <= 0:
            continue
        for k in sorted(range(R), key=lambda k: (-int(net.unit_cost[k, j]) * 1.0 / max(int(net.node_cap[k]), 1), k)):
            cut = min(excess, int(x[k, j]))
            x[k, j] -= cut
            excess -= cut
            if excess == 0:
                break
    return AssignmentMatrix(x, int(x.sum()), optimal=False)


def check_constraints(x: np.ndarray, demand, table_n, table_e, node_cap=None, unit_cost=None) -> bool:
    """C1-C3 in exact integer arithmetic."""
    x = np.asarray(x, dtype=np.int64)
    n = np.asarray(table_n, dtype=np.int64)
    if (x < 0).any():
        return False
    if (x.sum(axis=0) > np.asarray(demand)).any():
        return False
    if (x > np.asarray(table_e)).any():
        return False
    for k in range(x.shape[0]):
        used = Fraction(0)
        for j in range(x.shape[1]):
            if x[k, j] > 0:
                if n[k, j] <= 0:
                    return False
                used += Fraction(int(x[k, j]), int(n[k, j]))
        if used > 1:
            return False
    return True


def _fill_greedy(x: np.ndarray, net: FlowNetwork) -> np.ndarray:
    """Add requests into leftover capacity, cheapest replica-fraction first."""
    x = x.copy()
    R, J = x.shape
    units, M = net.unit_cost, net.node_cap
    cap_e = np.minimum(net.e, net.n)
    residual = [int(M[k]) - int((x[k] * units[k]).sum()) for k in range(R)]
    remaining = [int(net.demand[j]) - int(x[:, j].sum()) for j in range(J)]
    pairs = [(int(units[k, j]) / int(M[k]), k, j)
             for k in range(R) for j in range(J) if units[k, j] > 0]
    pairs.sort()
    for _, k, j in pairs:
        if remaining[j] <= 0:
            continue
        u = int(units[k, j])
        add = min(remaining[j], int(cap_e[k, j] - x[k, j]), residual[k] // u)
        if add > 0:
            x[k, j] += add
            residual[k] -= add * u
            remaining[j] -= add
    return x


def _integer_program(net: FlowNetwork):
    """Constraint rows shared by the exact solver: demand rows then sharing rows."""
    R, J = net.num_replicas, net.num_types
    nv = R * J
    A = np.zeros((J + R, nv))
    A_int = np.zeros((J + R, nv), dtype=np.int64)
    for j in range(J):
        A[j, j::J] = 1.0
        A_int[j, j::J] = 1
    for k in range(R):
        A[J + k, k * J:(k + 1) * J] = net.unit_cost[k] / float(net.node_cap[k])
        A_int[J + k, k * J:(k + 1) * J] = net.unit_cost[k]
    b = np.concatenate([net.demand.astype(np.float64), np.ones(R)])
    b_int = np.concatenate([net.demand, net.node_cap]).astype(np.int64)
    ub = np.minimum(net.e, net.n).astype(np.float64).ravel()
    ub[net.unit_cost.ravel() == 0] = 0.0
    return A, b, A_int, b_int, ub


def branch_and_bound(net: FlowNetwork, incumbent: np.ndarray,
                     node_limit: int = 20000) -> tuple[np.ndarray, bool]:
    """Exact integer optimum seeded with ``incumbent``; LP bounds from a dense simplex."""
    A, b, A_int, b_int, ub = _integer_program(net)
    best, proven = _kernels.integer_assignment(A, b, A_int, b_int, ub,
                                               incumbent.ravel().astype(np.float64), node_limit)
    x = np.rint(best).astype(np.int64).reshape(incumbent.shape)
    return x, bool(proven)


def fractional_assignment(net: FlowNetwork) -> np.ndarray:
    """LP relaxation of the assignment (fractional requests)."""
    from scipy.optimize import linprog

    R, J = net.num_replicas, net.num_types
    nv = R * J
    rows, ub = [], []
    for j in range(J):
        row = np.zeros(nv)
        row[j::J] = 1.0
        rows.append(row)
        ub.append(float(net.demand[j]))
    for k in range(R):
        row = np.zeros(nv)
        nk = net.n[k].astype(np.float64)
        row[k * J:(k + 1) * J] = np.divide(1.0, nk, out=np.zeros(J), where=nk > 0)
        rows.append(row)
        ub.append(1.0)
    upper = np.minimum(net.e, net.n).astype(np.float64).ravel()
    res = linprog(-np.ones(nv), A_ub=np.array(rows), b_ub=np.array(ub),
                  bounds=list(zip(np.zeros(nv), upper)), method="highs")
    return res.x.reshape(R, J)


def solve(span: TraceSpan, table: CapacityTable, exact: bool = True,
          node_limit: int = 20000) -> tuple[AssignmentMatrix, FlowNetwork]:
    """Best integral assignment for one span.

    The preflow-push flow (after extraction and a greedy top-up) seeds the
    search; with ``exact`` a branch-and-bound then closes any integrality gap.
    """
    net = build_network(span, table)
    if int(net.demand.sum()) == 0:
        return AssignmentMatrix(np.zeros((net.num_replicas, net.num_types), dtype=np.int64), 0), net
    _, flow = max_flow(net)
    from_flow = _fill_greedy(extract_assignment(net, flow).x, net)
    from_scratch = _fill_greedy(np.zeros_like(from_flow), net)
    x = from_flow if from_flow.sum() >= from_scratch.sum() else from_scratch
    if int(x.sum()) == int(net.demand.sum()):
        return AssignmentMatrix(x, int(x.sum()), True), net
    if not exact:
        return AssignmentMatrix(x, int(x.sum()), False), net
    x, proven = branch_and_bound(net, x, node_limit)
    return AssignmentMatrix(x, int(x.sum()), proven), net


def replica_usage(x: np.ndarray, net: FlowNetwork) -> np.ndarray:
    """Capacity units consumed per replica."""
    return (x * net.unit_cost).sum(axis=1)
