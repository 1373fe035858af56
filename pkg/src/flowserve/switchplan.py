"""Parameter re-sharding plans for switching between deployments.

Every replica holds the whole model: pipeline stage s of a (tp, pp) replica
owns the s-th of pp equal byte ranges, and tensor rank t within the stage owns
the t-th of tp equal slices of that range. Devices keep whatever they held
under the source deployment, so only missing bytes move.
"""

from __future__ import annotations

import csv
import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .core import ClusterSpec, Deployment, InvalidSpec, ModelSpec, UnsourcedFragment

DRAIN_THRESHOLD = 256
KV_HEADROOM = 0.15


@dataclass(frozen=True)
class Shard:
    shard_id: int
    start: int
    end: int
    holders: frozenset[int]

    @property
    def size(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class ShardLayout:
    param_bytes: int
    device_range: dict                  # device -> (start, end) it holds
    shards: tuple[Shard, ...] = field(default=())

    @property
    def holders(self) -> dict[int, frozenset[int]]:
        return {s.shard_id: s.holders for s in self.shards}

    def holders_at(self, start: int, end: int) -> frozenset[int]:
        """Devices holding all of [start, end)."""
        return frozenset(d for d, (a, b) in self.device_range.items() if a <= start and end <= b)


def _cut(total: int, parts: int, i: int) -> int:
    return total * i // parts


def layout(deployment: Deployment, model: ModelSpec) -> ShardLayout:
    total = int(model.param_bytes)
    ranges: dict[int, tuple[int, int]] = {}
    for rep in deployment.replicas:
        for s, stage in enumerate(rep.stages()):
            a, b = _cut(total, rep.pp, s), _cut(total, rep.pp, s + 1)
            for t, dev in enumerate(stage):
                ranges[dev] = (a + _cut(b - a, rep.tp, t), a + _cut(b - a, rep.tp, t + 1))
    by_range: dict[tuple[int, int], set[int]] = defaultdict(set)
    for dev, rng in ranges.items():
        if rng[1] > rng[0]:
            by_range[rng].add(dev)
    shards = tuple(Shard(i, a, b, frozenset(devs))
                   for i, ((a, b), devs) in enumerate(sorted(by_range.items())))
    return ShardLayout(total, ranges, shards)


@dataclass(frozen=True)
class Transfer:
    start: int
    length: int
    src: int
    dst: int


@dataclass(frozen=True)
class SwitchPlan:
    transfers: tuple[Transfer, ...]
    link_load: dict                     # (src, dst) -> bytes
    est_seconds: float

    def to_rows(self) -> list[tuple[int, int, int, int]]:
        return [(t.start, t.length, t.src, t.dst) for t in self.transfers]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fragment_start", "fragment_len", "src", "dst"])
            w.writerows(self.to_rows())


@dataclass(frozen=True)
class Fragment:
    start: int
    end: int
    holders: frozenset[int]
    needers: frozenset[int]


def fragments(src: ShardLayout, dst: ShardLayout) -> list[Fragment]:
    """Maximal byte ranges over which (source holders, targets lacking the bytes) is constant."""
    if src.param_bytes != dst.param_bytes:
        raise InvalidSpec("source and target layouts describe different models")
    cuts = {0, src.param_bytes}
    for lay in (src, dst):
        for a, b in lay.device_range.values():
            cuts.update((a, b))
    cuts = sorted(cuts)
    out: list[Fragment] = []
    for a, b in zip(cuts, cuts[1:]):
        if b <= a:
            continue
        holders = src.holders_at(a, b)
        needers = frozenset(d for d in dst.holders_at(a, b) if d not in holders)
        if out and out[-1].end == a and out[-1].holders == holders and out[-1].needers == needers:
            out[-1] = Fragment(out[-1].start, b, holders, needers)
        else:
            out.append(Fragment(a, b, holders, needers))
    return out


def choose_source(holders: Iterable[int], target: int, load: dict, cluster: ClusterSpec) -> int:
    """Intra-machine holder with the least C[s->t]; else the least-loaded inter-machine one."""
    holders = sorted(holders)
    intra = [s for s in holders if cluster.same_machine(s, target)]
    pool = intra or holders
    return min(pool, key=lambda s: (load.get((s, target), 0), s))


def _plan(frags: Sequence[Fragment], cluster: ClusterSpec, pick, load: dict | None = None) -> SwitchPlan:
    load = dict(load or {})
    transfers = []
    for f in frags:
        if not f.needers:
            continue
        if not f.holders:
            raise UnsourcedFragment(f"bytes [{f.start}, {f.end}) have no source holder")
        for t in sorted(f.needers):
            s = pick(f.holders, t, load)
            load[(s, t)] = load.get((s, t), 0) + (f.end - f.start)
            transfers.append(Transfer(f.start, f.end - f.start, s, t))
    return SwitchPlan(tuple(transfers), load, link_time(load, cluster))


def greedy_plan(src: ShardLayout, dst: ShardLayout, cluster: ClusterSpec,
                load: dict | None = None) -> SwitchPlan:
    return _plan(fragments(src, dst), cluster,
                 lambda h, t, ld: choose_source(h, t, ld, cluster), load)


def naive_plan(src: ShardLayout, dst: ShardLayout, cluster: ClusterSpec) -> SwitchPlan:
    """Reference plan that always copies from the lowest-id holder."""
    return _plan(fragments(src, dst), cluster, lambda h, t, ld: min(h))


def link_time(load: dict, cluster: ClusterSpec) -> float:
    """Links run concurrently and each one serially: time = max bytes / bandwidth."""
    return max((b / cluster.bandwidth(s, t) for (s, t), b in load.items() if s != t), default=0.0)


def estimate_time(plan: SwitchPlan, cluster: ClusterSpec) -> float:
    load: dict = defaultdict(int)
    for tr in plan.transfers:
        load[(tr.src, tr.dst)] += tr.length
    return link_time(load, cluster)


def optimal_link_time(src: ShardLayout, dst: ShardLayout, cluster: ClusterSpec) -> float:
    """Brute-force min over all source choices of the max link time (small instances only)."""
    jobs = [(f, t) for f in fragments(src, dst) for t in sorted(f.needers)]
    if any(not f.holders for f, _ in jobs):
        raise UnsourcedFragment("fragment without a source holder")
    best = float("inf")
    for choice in itertools.product(*[sorted(f.holders) for f, _ in jobs]):
        load: dict = defaultdict(int)
        for (f, t), s in zip(jobs, choice):
            load[(s, t)] += f.end - f.start
        best = min(best, link_time(load, cluster))
    return 0.0 if best == float("inf") else best


def switch(src_dep: Deployment, dst_dep: Deployment, model: ModelSpec, cluster: ClusterSpec) -> SwitchPlan:
    return greedy_plan(layout(src_dep, model), layout(dst_dep, model), cluster)


def changed_replicas(src_dep: Deployment, dst_dep: Deployment) -> list[int]:
    """Indices of target replicas whose (devices, tp, pp) did not exist in the source."""
    old = {(r.device_ids, r.tp, r.pp) for r in src_dep.replicas}
    return [k for k, r in enumerate(dst_dep.replicas) if (r.device_ids, r.tp, r.pp) not in old]


@dataclass(frozen=True)
class InflightRequest:
    request_id: int
    generated_tokens: int
    kv_bytes: int
    replica: int


@dataclass(frozen=True)
class KvPlan:
    drained: tuple[int, ...]
    migrated_ids: tuple[int, ...]
    migrated: tuple[tuple[int, int, int, int], ...]   # (request id, bytes, src device, dst device)
    buffer_bytes: int
    link_load: dict = field(default_factory=dict)


def kv_plan(inflight: Sequence[InflightRequest], threshold_tokens: int, src: Deployment, dst: Deployment,
            cluster: ClusterSpec, headroom: float = KV_HEADROOM, load: dict | None = None) -> KvPlan:
    """Drain short requests, migrate long ones with the same greedy source choice.

    A migrating request moves to the target replica sharing the most devices
    with its source replica, then the most devices on the source replica's
    machines (lowest index on ties). Its KV bytes are split
    evenly over the target's devices; slices whose target device already
    held the request are not moved.
    """
    if not 0.0 <= headroom <= 0.5:
        raise InvalidSpec("headroom must lie in [0, 0.5]")
    load = dict(load or {})
    drained, migrated_ids, migrated = [], [], []
    moved_total = 0
    for req in sorted(inflight, key=lambda r: r.request_id):
        if req.generated_tokens <= threshold_tokens:
            drained.append(req.request_id)
            continue
        if not dst.replicas:
            raise InvalidSpec("no target replica for KV migration")
        holders = set(src.replicas[req.replica].device_ids)
        home = {cluster.machine_of(d) for d in holders}

        def affinity(i):
            devs = dst.replicas[i].device_ids
            return (len(holders.intersection(devs)),
                    sum(cluster.machine_of(d) in home for d in devs), -i)

        k = max(range(len(dst.replicas)), key=affinity)
        targets = dst.replicas[k].device_ids
        moved_total += req.kv_bytes
        migrated_ids.append(req.request_id)
        for idx, t in enumerate(targets):
            part = _cut(req.kv_bytes, len(targets), idx + 1) - _cut(req.kv_bytes, len(targets), idx)
            if t in holders or part == 0:
                continue
            s = choose_source(holders, t, load, cluster)
            load[(s, t)] = load.get((s, t), 0) + part
            migrated.append((req.request_id, part, s, t))
    buffer = int(-(-moved_total * (1.0 + headroom) // 1))
    return KvPlan(tuple(drained), tuple(migrated_ids), tuple(migrated), buffer, load)
