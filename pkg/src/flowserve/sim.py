"""Deterministic discrete-event replay of a trace against a strategy timeline.

Each replica has one prefill server (FIFO, one request at a time) and a pool
of decode slots bounded by free KV memory and ``max_batch``. A request
reserves its KV footprint when its prefill starts and releases it when
decoding finishes. Virtual time is kept in integer microseconds.

At a timeline boundary, replicas that do not survive unchanged stop taking
work: their queued requests are re-dispatched to the new deployment and
their in-flight requests drain. New or changed replicas come up after the
switch plan's estimated time.
"""

from __future__ import annotations

import csv
import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (ClusterSpec, Deployment, InvalidSpec, ModelSpec, NoCompletions,
                   ReplicaConfig, TimelineGap, TraceRecord)
from .costmodel import ProfileParams, decode_latency, kv_free_bytes, prefill_latency

US = 1_000_000
PERCENTILES = (90, 95, 96, 97, 98, 99)

# same-instant event order: completions free resources before new work shows up
_DECODE_DONE, _PREFILL_DONE, _UP, _SPAN, _ARRIVE = range(5)


@dataclass(frozen=True)
class TimelineEntry:
    start_span: int
    deployment: Deployment
    assignment: np.ndarray          # x[k, j]
    capacity: np.ndarray            # n[k, j], used to spill unplanned requests
    switch_seconds: float = 0.0


@dataclass(frozen=True)
class StrategyTimeline:
    entries: tuple[TimelineEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise TimelineGap("timeline is empty")
        starts = [e.start_span for e in self.entries]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise InvalidSpec("timeline spans must be strictly increasing")
        if self.entries[0].switch_seconds != 0:
            raise InvalidSpec("the first timeline entry cannot carry a switch")

    def entry_for(self, span: int) -> TimelineEntry:
        found = None
        for e in self.entries:
            if e.start_span <= span:
                found = e
            else:
                break
        if found is None:
            raise TimelineGap(f"no strategy covers span {span}")
        return found

    def with_switch_seconds(self, seconds: float) -> "StrategyTimeline":
        """Same strategies, every switch charged ``seconds`` of downtime."""
        return StrategyTimeline(tuple(
            TimelineEntry(e.start_span, e.deployment, e.assignment, e.capacity, 0.0 if i == 0 else seconds)
            for i, e in enumerate(self.entries)))

    def to_dict(self) -> dict:
        return {"schema_version": 1, "entries": [
            {"start_span": e.start_span, "deployment": e.deployment.to_dict()["replicas"],
             "assignment": e.assignment.tolist(), "capacity": e.capacity.tolist(),
             "switch_seconds": e.switch_seconds} for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyTimeline":
        return cls(tuple(TimelineEntry(int(e["start_span"]), Deployment.from_dict(e["deployment"]),
                                       np.array(e["assignment"], dtype=np.int64),
                                       np.array(e["capacity"], dtype=np.int64),
                                       float(e["switch_seconds"])) for e in d["entries"]))


@dataclass(frozen=True)
class RequestOutcome:
    request_id: int
    arrival: float
    start: float
    finish: float
    replica: int

    @property
    def latency(self) -> float:
        return self.finish - self.arrival


@dataclass(frozen=True)
class MetricsReport:
    avg: float
    percentiles: dict
    throughput: float
    completed: int                  # all completions, including after the horizon
    horizon: float
    per_span: tuple = ()

    @property
    def p90(self) -> float:
        return self.percentiles[90]

    @property
    def p99(self) -> float:
        return self.percentiles[99]

    def row(self) -> dict:
        out = {"avg": self.avg}
        out.update({f"p{p}": v for p, v in sorted(self.percentiles.items())})
        out.update({"throughput": self.throughput, "completed": self.completed, "horizon": self.horizon})
        return out


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


def metrics(outcomes: Sequence[RequestOutcome], horizon: float | None = None,
            span_seconds: float | None = None) -> MetricsReport:
    """Latency summary with nearest-rank percentiles over every completed request.

    Throughput counts the requests finished within ``horizon`` seconds of the
    trace start (default: the last finish), divided by ``horizon``.
    """
    if not outcomes:
        raise NoCompletions("no request completed")
    lat = sorted(o.latency for o in outcomes)
    if horizon is None:
        horizon = max(o.finish for o in outcomes)
    horizon = max(horizon, 1e-9)
    done = sum(1 for o in outcomes if o.finish <= horizon)
    per_span = ()
    if span_seconds:
        groups: dict[int, list[float]] = {}
        for o in outcomes:
            groups.setdefault(int(o.arrival // span_seconds), []).append(o.latency)
        per_span = tuple((s, len(v), float(np.mean(v)), nearest_rank(sorted(v), 99))
                         for s, v in sorted(groups.items()))
    return MetricsReport(float(np.mean(lat)), {p: nearest_rank(lat, p) for p in PERCENTILES},
                         done / horizon, len(lat), horizon, per_span)


def dispatch(type_ids: Sequence[int], x: np.ndarray, capacity: np.ndarray | None = None) -> list[int]:
    """Route requests (given in arrival order by type) so replica k gets x[k, j] of type j.

    Within a type, the next request goes to the replica with the largest
    remaining share of its quota (deficit round-robin, ties to the lowest
    index). Requests beyond the planned total spill to the replica whose
    planned-plus-spilled load is the smallest fraction of its capacity.
    """
    x = np.asarray(x, dtype=np.int64)
    R, J = x.shape
    cap = np.asarray(capacity if capacity is not None else np.maximum(x, 1), dtype=np.float64)
    remaining = x.copy()
    load = x.astype(np.float64).copy()          # planned load, grows as requests spill
    out = []
    for j in type_ids:
        quota = remaining[:, j]
        if quota.sum() > 0:
            share = np.where(x[:, j] > 0, quota / np.maximum(x[:, j], 1), -1.0)
            k = int(np.argmax(share))           # first maximum = lowest index
            remaining[k, j] -= 1
        else:
            util = np.array([(load[k] / np.where(cap[k] > 0, cap[k], np.inf)).sum() if cap[k, j] > 0
                             else np.inf for k in range(R)])
            k = int(np.argmin(util)) if np.isfinite(util).any() else 0
            load[k, j] += 1
        out.append(k)
    return out


@dataclass
class _Replica:
    uid: int
    cfg: ReplicaConfig
    kv_limit: int
    up_us: int
    queue: deque = field(default_factory=deque)
    busy: bool = False
    active: int = 0
    kv_used: int = 0
    retired: bool = False


@dataclass(frozen=True)
class SimResult:
    report: MetricsReport
    outcomes: tuple[RequestOutcome, ...]


def _us(seconds: float) -> int:
    return int(round(seconds * US))


def run(records: Sequence[TraceRecord], type_ids: Sequence[int], timeline: StrategyTimeline,
        model: ModelSpec, params: ProfileParams, cluster: ClusterSpec,
        span_seconds: float = 60.0, probe=None) -> SimResult:
    """Replay ``records`` (with their workload types) against ``timeline``.

    ``probe(now_us, arrived, completed, in_service, queued)`` is called after
    every event when given.
    """
    if len(records) != len(type_ids):
        raise InvalidSpec("records and type ids differ in length")
    if not records:
        raise NoCompletions("empty trace")
    order = sorted(range(len(records)), key=lambda i: (records[i].arrival_ms, i))
    span_us = _us(span_seconds)
    first_span = math.floor(records[order[0]].arrival_ms / (1000.0 * span_seconds))
    base_us = first_span * span_us
    arrive_us = {i: records[i].arrival_ms * 1000 - base_us for i in order}
    by_span: dict[int, list[int]] = {}
    for i in order:
        by_span.setdefault(first_span + arrive_us[i] // span_us, []).append(i)
    last_span = max(by_span)
    for s in range(first_span, last_span + 1):
        timeline.entry_for(s)                   # raises TimelineGap early

    kv_per_token = model.bytes_per_token_kv
    replicas: list[_Replica] = []
    live: dict[tuple, _Replica] = {}            # (devices, tp, pp) -> replica
    slot_of: list[_Replica] = []                # current entry's replica index -> replica
    events: list = []
    seq = 0
    start_at: dict[int, int] = {}
    outcomes: list[RequestOutcome] = []
    arrived = completed = in_service = queued = 0
    current_entry = None

    def push(t, kind, payload):
        nonlocal seq
        heapq.heappush(events, (t, kind, seq, payload))
        seq += 1

    def lat(rep: _Replica, i: int):
        r = records[i]
        return (_us(prefill_latency(rep.cfg, model, r.input_len, params)),
                _us(decode_latency(rep.cfg, model, r.output_len, params)))

    def try_start(rep: _Replica, now: int):
        nonlocal queued, in_service
        if rep.busy or now < rep.up_us or not rep.queue:
            return
        i = rep.queue[0]
        need = (records[i].input_len + records[i].output_len) * kv_per_token
        if rep.active >= params.max_batch:
            return
        if rep.active > 0 and rep.kv_used + need > rep.kv_limit:
            return
        rep.queue.popleft()
        rep.busy = True
        rep.active += 1
        rep.kv_used += need
        queued -= 1
        in_service += 1
        start_at[i] = now
        pre, _ = lat(rep, i)
        push(now + pre, _PREFILL_DONE, (rep.uid, i))

    def enqueue(rep: _Replica, i: int, now: int):
        nonlocal queued
        rep.queue.append(i)
        queued += 1
        try_start(rep, now)

    def apply_entry(entry: TimelineEntry, now: int) -> list[int]:
        """Switch to ``entry``; returns orphaned queued requests in arrival order."""
        nonlocal slot_of, queued
        down_until = now + _us(entry.switch_seconds)
        keep = {(r.device_ids, r.tp, r.pp) for r in entry.deployment.replicas}
        orphans: list[int] = []
        for key, rep in list(live.items()):
            if key not in keep:
                rep.retired = True
                orphans.extend(rep.queue)
                queued -= len(rep.queue)
                rep.queue.clear()
                del live[key]
        slots = []
        for cfg in entry.deployment.replicas:
            key = (cfg.device_ids, cfg.tp, cfg.pp)
            if key not in live:
                rep = _Replica(len(replicas), cfg, kv_free_bytes(cfg, model, cluster),
                               down_until if current_entry is not None else now)
                replicas.append(rep)
                live[key] = rep
                if rep.up_us > now:
                    push(rep.up_us, _UP, rep.uid)
            slots.append(live[key])
        slot_of = slots
        return sorted(orphans, key=lambda i: (arrive_us[i], i))

    for s in range(first_span, last_span + 1):
        push((s - first_span) * span_us, _SPAN, s)

    while events:
        now, kind, _, payload = heapq.heappop(events)
        if kind == _SPAN:
            s = payload
            entry = timeline.entry_for(s)
            orphans = []
            if entry is not current_entry:
                orphans = apply_entry(entry, now)
                current_entry = entry
            batch = orphans + by_span.get(s, [])
            if batch:
                x = entry.assignment
                if x.shape[0] != len(slot_of):
                    raise InvalidSpec(f"span {s}: assignment has {x.shape[0]} rows for "
                                      f"{len(slot_of)} replicas")
                targets = dispatch([type_ids[i] for i in batch], x, entry.capacity)
                for i, k in zip(orphans, targets[:len(orphans)]):
                    enqueue(slot_of[k], i, now)
                for i, k in zip(batch[len(orphans):], targets[len(orphans):]):
                    push(arrive_us[i], _ARRIVE, (slot_of[k].uid, i))
        elif kind == _ARRIVE:
            uid, i = payload
            arrived += 1
            # arrivals land before the next span boundary, so their replica is still live
            enqueue(replicas[uid], i, now)
        elif kind == _UP:
            try_start(replicas[payload], now)
        elif kind == _PREFILL_DONE:
            uid, i = payload
            rep = replicas[uid]
            rep.busy = False
            _, dec = lat(rep, i)
            push(now + dec, _DECODE_DONE, (uid, i))
            try_start(rep, now)
        else:
            uid, i = payload
            rep = replicas[uid]
            rep.active -= 1
            rep.kv_used -= (records[i].input_len + records[i].output_len) * kv_per_token
            in_service -= 1
            completed += 1
            outcomes.append(RequestOutcome(i, arrive_us[i] / US, start_at[i] / US, now / US, uid))
            try_start(rep, now)
        if probe is not None:
            probe(now, arrived, completed, in_service, queued)

    outcomes.sort(key=lambda o: o.request_id)
    # the trace horizon: from the first span start to the end of the last span
    horizon = (last_span - first_span + 1) * span_seconds
    report = metrics(outcomes, horizon=horizon, span_seconds=span_seconds)
    return SimResult(report, tuple(outcomes))


def write_outcomes(outcomes: Sequence[RequestOutcome], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["request_id", "arrival", "start", "finish", "replica", "latency"])
        for o in outcomes:
            w.writerow([o.request_id, f"{o.arrival:.6f}", f"{o.start:.6f}", f"{o.finish:.6f}",
                        o.replica, f"{o.latency:.6f}"])


def write_metrics(rows: Sequence[tuple[str, MetricsReport]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = None
        for name, rep in rows:
            row = rep.row()
            if header is None:
                header = ["schema_version", "configuration"] + list(row)
                w.writerow(header)
            w.writerow([1, name] + [f"{v:.6f}" if isinstance(v, float) else v for v in row.values()])
