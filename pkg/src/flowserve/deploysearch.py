"""Upper-level search over replica device sets and (tp, pp) strategies.

The heuristic follows the flow-guided loop: solve the assignment for the
current deployment, label replicas whose capacity node is saturated as
over-utilized and the rest as under-utilized, mutate device counts
accordingly, re-enumerate strategies and keep the candidate only if the
served-request objective strictly improves.

``exhaustive`` is the brute-force oracle for small clusters.
"""

from __future__ import annotations

import csv
import itertools
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import flowassign
from .core import (ClusterSpec, Deployment, InvalidSpec, ModelSpec, ModelTooLarge,
                   NoFeasibleMutation, ReplicaConfig, TooLarge, TraceSpan, WorkloadType,
                   placement_ok)
from .costmodel import CapacityTable, ProfileParams, capacity_row, memory_feasible
from .flowassign import AssignmentMatrix

log = logging.getLogger(__name__)

STALE_LIMIT = 20
MAX_ITERS = 500
MUTATION_RETRIES = 8
EXHAUSTIVE_GUARD = 16


@dataclass
class SearchState:
    deployment: Deployment
    throughput: int
    rng_seed: int = 0
    stale_iters: int = 0
    iterations: int = 0
    assignment: AssignmentMatrix | None = None
    history: list[int] = field(default_factory=list)   # throughput after every iteration
    log_rows: list[tuple] = field(default_factory=list)


@dataclass(frozen=True)
class UtilizationReport:
    overutilized: frozenset[int]
    underutilized: frozenset[int]


@dataclass(frozen=True)
class _Candidate:
    tp: int
    pp: int
    n: tuple[int, ...]
    e: tuple[int, ...]


class Evaluator:
    """Caches capacity rows and assignment objectives for one (cluster, model, span) problem."""

    def __init__(self, cluster: ClusterSpec, model: ModelSpec, types: Sequence[WorkloadType],
                 span: TraceSpan, params: ProfileParams, span_s: float = 60.0):
        if len(types) != len(span.counts):
            raise InvalidSpec(f"{len(types)} workload types but span has {len(span.counts)} counts")
        self.cluster = cluster
        self.model = model
        self.types = tuple(types)
        self.span = span
        self.params = params
        self.span_s = span_s
        self._rows: dict = {}
        self._cands: dict = {}
        self._objective: dict = {}
        self.solves = 0

    def _row(self, devs: tuple[int, ...], tp: int, pp: int) -> _Candidate:
        mems = tuple(sorted(self.cluster.device_mem(d) for d in devs))
        key = (mems, tp, pp)
        if key not in self._rows:
            cfg = ReplicaConfig(devs, tp, pp)
            n, e, _ = capacity_row(cfg, self.types, self.model, self.params, self.span_s, self.cluster)
            self._rows[key] = _Candidate(tp, pp, tuple(n), tuple(e))
        return self._rows[key]

    def feasible(self, devs: Sequence[int]) -> bool:
        devs = tuple(sorted(devs))
        return bool(devs) and memory_feasible(ReplicaConfig(devs, 1, len(devs)), self.model, self.cluster)

    def candidates(self, devs: Sequence[int]) -> list[_Candidate]:
        """Feasible strategies for a device set, minus ones dominated by a preferred strategy.

        Listed in tie-break preference order: fewer stages first (tp descending).
        """
        devs = tuple(sorted(devs))
        pattern = tuple(self.cluster.machine_of(d) for d in devs)
        mems = tuple(self.cluster.device_mem(d) for d in devs)
        key = (pattern, mems)
        if key in self._cands:
            return self._cands[key]
        d = len(devs)
        out: list[_Candidate] = []
        for tp in range(d, 0, -1):
            if d % tp or not placement_ok(devs, tp, d // tp, self.cluster):
                continue
            if not memory_feasible(ReplicaConfig(devs, tp, d // tp), self.model, self.cluster):
                continue
            out.append(self._row(devs, tp, d // tp))
        kept = []
        for c in out:
            # drop c only when an earlier-preferred strategy is at least as good everywhere
            if any(all(a >= b for a, b in zip(k.n, c.n)) and all(a >= b for a, b in zip(k.e, c.e))
                   for k in kept):
                continue
            kept.append(c)
        self._cands[key] = kept
        return kept

    def objective(self, rows: Sequence[_Candidate]) -> int:
        """Served requests for a multiset of replica rows (order does not matter)."""
        key = tuple(sorted((c.n, c.e) for c in rows))
        if key not in self._objective:
            if not rows:
                self._objective[key] = 0
            else:
                table = _table([c for c in rows])
                self.solves += 1
                self._objective[key] = flowassign.solve(self.span, table)[0].objective
        return self._objective[key]

    def table(self, deployment: Deployment) -> CapacityTable:
        return _table([self._row(r.device_ids, r.tp, r.pp) for r in deployment.replicas])

    def assignment(self, deployment: Deployment) -> tuple[AssignmentMatrix, flowassign.FlowNetwork]:
        return flowassign.solve(self.span, self.table(deployment))


def _table(rows: Sequence[_Candidate]) -> CapacityTable:
    n = np.array([c.n for c in rows], dtype=np.int64)
    e = np.array([c.e for c in rows], dtype=np.int64)
    return CapacityTable(n, e, np.zeros(n.shape))


def min_replica_devices(cluster: ClusterSpec, model: ModelSpec) -> int:
    """Smallest device count that can hold the model (devices taken in id order)."""
    devs = cluster.devices
    for g in range(1, len(devs) + 1):
        if memory_feasible(ReplicaConfig(devs[:g], 1, g), model, cluster):
            return g
    raise ModelTooLarge(f"model {model.name} does not fit on all {len(devs)} devices")


def _default_strategy(devs: tuple[int, ...], cluster: ClusterSpec) -> ReplicaConfig:
    d = len(devs)
    for tp in range(d, 0, -1):
        if d % tp == 0 and placement_ok(devs, tp, d // tp, cluster):
            return ReplicaConfig(devs, tp, d // tp)
    raise InvalidSpec(f"no placement for {devs}")  # unreachable: tp=1 always places


def init_uniform(cluster: ClusterSpec, model: ModelSpec) -> Deployment:
    """floor(D / g_min) pure-tp replicas of g_min consecutive devices; leftovers unassigned."""
    g = min_replica_devices(cluster, model)
    devs = cluster.devices
    replicas = [_default_strategy(tuple(devs[i:i + g]), cluster)
                for i in range(0, len(devs) - g + 1, g)]
    return Deployment(tuple(replicas))


def absorb_leftovers(deployment: Deployment, cluster: ClusterSpec, model: ModelSpec) -> Deployment:
    """Attach unassigned devices so the deployment covers the whole cluster.

    Each leftover device joins the replica holding the nearest lower device id
    (the first replica when there is none).
    """
    spare = [d for d in cluster.devices if d not in deployment.devices]
    if not spare:
        return deployment
    if not deployment.replicas:
        return Deployment((_default_strategy(tuple(spare), cluster),))
    groups = [list(r.device_ids) for r in deployment.replicas]
    for d in spare:
        below = [i for i, g in enumerate(groups) if min(g) < d]
        target = max(below, key=lambda i: max(x for x in groups[i] if x < d)) if below else 0
        groups[target].append(d)
    return Deployment(tuple(_default_strategy(tuple(sorted(g)), cluster) for g in groups))


def classify(assignment: AssignmentMatrix, net: flowassign.FlowNetwork) -> UtilizationReport:
    """Saturated replicas (no further request of a still-pending type fits) versus the rest.

    Flow is counted in whole requests, so "node flow equals capacity" means the
    leftover units on c_in -> c_out cannot pay for one more request of any
    type that still has unserved demand.
    """
    used = flowassign.replica_usage(assignment.x, net)
    pending = net.demand - assignment.x.sum(axis=0)
    over, under = set(), set()
    for k in range(net.num_replicas):
        residual = int(net.node_cap[k] - used[k])
        costs = [int(net.unit_cost[k, j]) for j in range(net.num_types)
                 if net.unit_cost[k, j] > 0 and pending[j] > 0]
        if used[k] > 0 and (residual == 0 or (costs and residual < min(costs))):
            over.add(k)
        else:
            under.add(k)
    return UtilizationReport(frozenset(over), frozenset(under))


def _stage_slice(cfg: ReplicaConfig) -> int:
    return max(1, cfg.tp)


def _machines(devs, cluster: ClusterSpec) -> set[int]:
    return {cluster.machine_of(d) for d in devs}


def _closest(r: int, others: Sequence[int], groups, cluster: ClusterSpec, rng: random.Random) -> int:
    """Random pick among the others whose union with r spans the fewest machines."""
    span = {o: len(_machines(list(groups[r]) + list(groups[o]), cluster)) for o in others}
    low = min(span.values())
    return rng.choice(sorted(o for o in others if span[o] == low))


def _split(group: list[int], cluster: ClusterSpec, rng: random.Random) -> tuple[list[int], list[int]]:
    g = sorted(group)
    cuts = [i for i in range(1, len(g)) if cluster.machine_of(g[i - 1]) != cluster.machine_of(g[i])]
    if cuts and rng.random() < 0.7:
        cut = rng.choice(cuts)
    elif rng.random() < 0.7:
        cut = len(g) // 2
    else:
        cut = rng.randint(1, len(g) - 1)
    return g[:cut], g[cut:]


def _take(donor: list[int], delta: int, receiver: Sequence[int], cluster: ClusterSpec) -> list[int]:
    """Remove delta devices from donor (preferring the receiver's machines) and return them."""
    home = _machines(receiver, cluster)
    order = sorted(donor, key=lambda d: (cluster.machine_of(d) not in home, -d))
    moved = order[:min(delta, len(donor))]
    for d in moved:
        donor.remove(d)
    return moved


def mutate(state: SearchState, report: UtilizationReport, rng: random.Random,
           evaluator: Evaluator) -> tuple[list[tuple[int, ...]], str]:
    """One flow-guided mutation of the device groups.

    A replica is drawn from O or U and gets its rule applied: an over-utilized
    replica merges with another over-utilized one or takes one stage worth of
    devices from an under-utilized one; an under-utilized replica splits or
    cedes one stage worth of devices to an over-utilized one. When no partner
    exists the replica splits instead (a lone saturated replica can only gain
    by becoming several). Infeasible results are retried.
    Returns the new groups and the operation name.
    """
    reps = state.deployment.replicas
    cluster = evaluator.cluster
    over, under = sorted(report.overutilized), sorted(report.underutilized)
    pool = over + under
    if not pool:
        raise NoFeasibleMutation("empty deployment")
    for _ in range(MUTATION_RETRIES):
        groups = [list(r.device_ids) for r in reps]
        r = rng.choice(pool)
        if r in report.overutilized:
            partners = [o for o in over if o != r]
            choices = (["merge"] if partners else []) + (["swap"] if under else [])
        else:
            partners = over or [o for o in range(len(groups)) if o != r]
            choices = ["split"] + (["cede"] if partners else [])
        op = rng.choice(choices) if choices else "split"
        if op == "merge":
            o = _closest(r, partners, groups, cluster, rng)
            groups[r] += groups[o]
            groups[o] = []
        elif op == "swap":
            u = _closest(r, under, groups, cluster, rng)
            groups[r] += _take(groups[u], _stage_slice(reps[u]), groups[r], cluster)
        elif op == "cede":
            o = _closest(r, partners, groups, cluster, rng)
            groups[o] += _take(groups[r], _stage_slice(reps[r]), groups[o], cluster)
        else:
            if len(groups[r]) < 2:
                continue
            groups[r], extra = _split(groups[r], cluster, rng)
            groups.append(extra)
        result = [tuple(sorted(g)) for g in groups if g]
        if all(evaluator.feasible(g) for g in result):
            return result, op
    raise NoFeasibleMutation("no feasible mutation within the retry budget")


def enumerate_strategies(groups: Sequence[Sequence[int]], evaluator: Evaluator) -> tuple[Deployment, int]:
    """Best (tp, pp) per device group over the product grid.

    Ties go to fewer total stages, then to the lexicographically larger tuple
    of tp degrees. Replicas with identical option lists are enumerated as a
    multiset, which is exact because the objective ignores replica order.
    """
    groups = [tuple(sorted(g)) for g in groups]
    options = [evaluator.candidates(g) for g in groups]
    if any(not o for o in options):
        raise InvalidSpec("a device group has no feasible strategy")
    # bucket replicas whose option lists coincide
    buckets: dict = {}
    for idx, opts in enumerate(options):
        buckets.setdefault(tuple(opts), []).append(idx)
    bucket_list = list(buckets.items())
    per_bucket = [list(itertools.combinations_with_replacement(range(len(opts)), len(members)))
                  for opts, members in bucket_list]
    best_key, best_choice = None, None
    for combo in itertools.product(*per_bucket):
        choice = [None] * len(groups)
        for (opts, members), picks in zip(bucket_list, combo):
            # picks are sorted by preference, so earlier replicas get preferred strategies
            for member, p in zip(members, picks):
                choice[member] = opts[p]
        value = evaluator.objective(choice)
        key = (value, -sum(c.pp for c in choice), tuple(c.tp for c in choice))
        if best_key is None or key > best_key:
            best_key, best_choice = key, choice
    dep = Deployment(tuple(ReplicaConfig(g, c.tp, c.pp) for g, c in zip(groups, best_choice)))
    return dep, best_key[0]


def search(cluster: ClusterSpec, model: ModelSpec, types: Sequence[WorkloadType], span: TraceSpan,
           params: ProfileParams, seed: int = 0, *, init: Deployment | None = None,
           max_iters: int = MAX_ITERS, stale_limit: int = STALE_LIMIT, span_s: float = 60.0,
           evaluator: Evaluator | None = None) -> SearchState:
    """Flow-guided local search; accepts a candidate only on strict improvement."""
    ev = evaluator or Evaluator(cluster, model, types, span, params, span_s)
    rng = random.Random(seed)
    if init is None or not all(ev.feasible(r.device_ids) for r in init.replicas) \
            or not init.devices <= set(cluster.devices):
        init = init_uniform(cluster, model)
    start = absorb_leftovers(init, cluster, model)
    dep, value = enumerate_strategies([r.device_ids for r in start.replicas], ev)
    state = SearchState(dep, value, rng_seed=seed)
    state.history.append(value)
    state.log_rows.append((0, "init", True, value))
    assign, net = ev.assignment(dep)
    while state.iterations < max_iters and state.stale_iters < stale_limit:
        state.iterations += 1
        report = classify(assign, net)
        try:
            groups, op = mutate(state, report, rng, ev)
        except NoFeasibleMutation:
            state.stale_iters += 1
            state.history.append(state.throughput)
            state.log_rows.append((state.iterations, "none", False, state.throughput))
            continue
        cand, cand_value = enumerate_strategies(groups, ev)
        accepted = cand_value > state.throughput
        if accepted:
            state.deployment, state.throughput = cand, cand_value
            state.stale_iters = 0
            assign, net = ev.assignment(cand)
        else:
            state.stale_iters += 1
        state.history.append(state.throughput)
        state.log_rows.append((state.iterations, op, accepted, cand_value))
    state.assignment = assign
    log.debug("search finished after %d iterations (%d solves), throughput %d",
              state.iterations, ev.solves, state.throughput)
    return state


def _vector_parts(rem: tuple[int, ...], upper: tuple[int, ...] | None, g_min: int):
    """Multisets of non-zero count vectors summing to rem, parts in non-increasing order."""
    if not any(rem):
        yield []
        return
    ranges = [range(r, -1, -1) for r in rem]
    for part in itertools.product(*ranges):
        if sum(part) < max(g_min, 1):
            continue
        if upper is not None and part > upper:
            continue
        rest = tuple(r - p for r, p in zip(rem, part))
        for tail in _vector_parts(rest, part, g_min):
            yield [part] + tail


def device_partitions(cluster: ClusterSpec, g_min: int) -> list[list[tuple[int, ...]]]:
    """Canonical device partitions: one per multiset of per-machine count vectors.

    Devices are interchangeable within a machine, so each replica takes the
    lowest unused ids of every machine it spans.
    """
    caps = tuple(len(m.device_ids) for m in cluster.machines)
    out = []
    for parts in _vector_parts(caps, None, g_min):
        free = [sorted(m.device_ids) for m in cluster.machines]
        groups = []
        for part in parts:
            devs = []
            for m, c in enumerate(part):
                devs += free[m][:c]
                free[m] = free[m][c:]
            groups.append(tuple(sorted(devs)))
        out.append(groups)
    return out


def exhaustive(cluster: ClusterSpec, model: ModelSpec, types: Sequence[WorkloadType], span: TraceSpan,
               params: ProfileParams, span_s: float = 60.0, evaluator: Evaluator | None = None) -> SearchState:
    """Global optimum over all canonical partitions and strategy grids (D <= 16)."""
    if cluster.num_devices > EXHAUSTIVE_GUARD:
        raise TooLarge(f"exhaustive search is limited to {EXHAUSTIVE_GUARD} devices")
    ev = evaluator or Evaluator(cluster, model, types, span, params, span_s)
    g_min = min_replica_devices(cluster, model)
    best = None
    for groups in device_partitions(cluster, g_min):
        if not all(ev.feasible(g) for g in groups):
            continue
        dep, value = enumerate_strategies(groups, ev)
        if best is None or value > best[0]:
            best = (value, dep)
    if best is None:
        raise ModelTooLarge("no feasible partition")
    state = SearchState(best[1], best[0])
    state.assignment = ev.assignment(best[1])[0]
    state.history.append(best[0])
    return state


def write_search_log(state: SearchState, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "op", "accepted", "throughput"])
        for it, op, acc, value in state.log_rows:
            w.writerow([it, op, int(acc), value])
