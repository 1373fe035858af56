"""Domain types shared across the scheduler, planner and simulator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

SCHEMA_VERSION = 1
DEFAULT_SPAN_SECONDS = 60.0


class FlowServeError(Exception):
    """Base class for every error raised by this package."""


class InvalidSpec(FlowServeError):
    pass


class InfeasibleReplica(FlowServeError):
    pass


class ModelTooLarge(FlowServeError):
    pass


class TooLarge(FlowServeError):
    pass


class EmptyDeployment(FlowServeError):
    pass


class NoFeasibleMutation(FlowServeError):
    pass


class UnsourcedFragment(FlowServeError):
    pass


class TimelineGap(FlowServeError):
    pass


class NoCompletions(FlowServeError):
    pass


class TooFewRecords(FlowServeError):
    pass


class DegenerateActuals(FlowServeError):
    pass


@dataclass(frozen=True)
class MachineSpec:
    machine_id: str
    device_ids: tuple[int, ...]
    device_mem: int

    def __post_init__(self):
        object.__setattr__(self, "device_ids", tuple(int(d) for d in self.device_ids))
        if not self.device_ids:
            raise InvalidSpec(f"machine {self.machine_id} has no devices")
        if self.device_mem <= 0:
            raise InvalidSpec(f"machine {self.machine_id}: device_mem must be > 0")

    def to_dict(self) -> dict:
        return {
            "machine_id": self.machine_id,
            "device_ids": list(self.device_ids),
            "device_mem": int(self.device_mem),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MachineSpec":
        return cls(str(d["machine_id"]), tuple(d["device_ids"]), int(d["device_mem"]))


@dataclass(frozen=True)
class ClusterSpec:
    machines: tuple[MachineSpec, ...]
    intra_bw: float
    inter_bw: float
    _machine_of: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "machines", tuple(self.machines))
        if not self.machines:
            raise InvalidSpec("cluster has no machines")
        if not (self.intra_bw >= self.inter_bw > 0):
            raise InvalidSpec("bandwidths must satisfy intra_bw >= inter_bw > 0")
        lookup = {}
        for idx, m in enumerate(self.machines):
            for dev in m.device_ids:
                if dev in lookup:
                    raise InvalidSpec(f"device id {dev} appears twice")
                lookup[dev] = idx
        object.__setattr__(self, "_machine_of", lookup)

    @classmethod
    def uniform(cls, n_machines: int, devices_per_machine: int, device_mem: int,
                intra_bw: float = 400e9, inter_bw: float = 200e9) -> "ClusterSpec":
        machines = tuple(
            MachineSpec(f"m{i}", tuple(range(i * devices_per_machine, (i + 1) * devices_per_machine)),
                        device_mem)
            for i in range(n_machines)
        )
        return cls(machines, intra_bw, inter_bw)

    @property
    def devices(self) -> tuple[int, ...]:
        return tuple(sorted(self._machine_of))

    @property
    def num_devices(self) -> int:
        return len(self._machine_of)

    def machine_of(self, device: int) -> int:
        return self._machine_of[device]

    def device_mem(self, device: int) -> int:
        return self.machines[self._machine_of[device]].device_mem

    def same_machine(self, a: int, b: int) -> bool:
        return self._machine_of[a] == self._machine_of[b]

    def bandwidth(self, a: int, b: int) -> float:
        return self.intra_bw if self.same_machine(a, b) else self.inter_bw

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "intra_bw": self.intra_bw,
            "inter_bw": self.inter_bw,
            "machines": [m.to_dict() for m in self.machines],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterSpec":
        return cls(tuple(MachineSpec.from_dict(m) for m in d["machines"]),
                   float(d["intra_bw"]), float(d["inter_bw"]))


@dataclass(frozen=True)
class ModelSpec:
    name: str
    param_bytes: int
    num_layers: int
    bytes_per_token_kv: int
    flops_per_token_prefill: int
    min_mem_bytes: int

    def __post_init__(self):
        for attr in ("param_bytes", "num_layers", "bytes_per_token_kv",
                     "flops_per_token_prefill", "min_mem_bytes"):
            if getattr(self, attr) < 0:
                raise InvalidSpec(f"{attr} must be non-negative")
        if self.min_mem_bytes < self.param_bytes:
            raise InvalidSpec("min_mem_bytes must be >= param_bytes")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "param_bytes": int(self.param_bytes),
            "num_layers": int(self.num_layers),
            "bytes_per_token_kv": int(self.bytes_per_token_kv),
            "flops_per_token_prefill": int(self.flops_per_token_prefill),
            "min_mem_bytes": int(self.min_mem_bytes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(str(d["name"]), int(d["param_bytes"]), int(d["num_layers"]),
                   int(d["bytes_per_token_kv"]), int(d["flops_per_token_prefill"]),
                   int(d["min_mem_bytes"]))


def stage_groups(device_ids: Sequence[int], tp: int) -> list[tuple[int, ...]]:
    """Split an id-ordered device list into consecutive tp-sized pipeline stages."""
    devs = sorted(device_ids)
    return [tuple(devs[i:i + tp]) for i in range(0, len(devs), tp)]


def placement_ok(device_ids: Iterable[int], tp: int, pp: int, cluster: ClusterSpec) -> bool:
    """True iff (tp, pp) is realisable on these devices: every tp group sits on one machine."""
    devs = sorted(device_ids)
    if tp < 1 or pp < 1 or tp * pp != len(devs):
        return False
    for group in stage_groups(devs, tp):
        m = cluster.machine_of(group[0])
        if any(cluster.machine_of(d) != m for d in group[1:]):
            return False
    return True


@dataclass(frozen=True)
class ReplicaConfig:
    device_ids: tuple[int, ...]
    tp: int
    pp: int

    def __post_init__(self):
        devs = tuple(sorted(int(d) for d in self.device_ids))
        if len(set(devs)) != len(devs):
            raise InvalidSpec(f"replica lists a device twice: {devs}")
        if self.tp < 1 or self.pp < 1 or self.tp * self.pp != len(devs):
            raise InvalidSpec(f"tp*pp={self.tp}*{self.pp} does not match {len(devs)} devices")
        object.__setattr__(self, "device_ids", devs)

    @property
    def size(self) -> int:
        return len(self.device_ids)

    def stages(self) -> list[tuple[int, ...]]:
        return stage_groups(self.device_ids, self.tp)

    def valid_on(self, cluster: ClusterSpec) -> bool:
        return all(d in cluster._machine_of for d in self.device_ids) and \
            placement_ok(self.device_ids, self.tp, self.pp, cluster)

    def to_dict(self) -> dict:
        return {"devices": list(self.device_ids), "tp": self.tp, "pp": self.pp}

    @classmethod
    def from_dict(cls, d: dict) -> "ReplicaConfig":
        return cls(tuple(d["devices"]), int(d["tp"]), int(d["pp"]))


@dataclass(frozen=True)
class Deployment:
    replicas: tuple[ReplicaConfig, ...]

    def __post_init__(self):
        object.__setattr__(self, "replicas", tuple(self.replicas))
        seen: set[int] = set()
        for r in self.replicas:
            overlap = seen.intersection(r.device_ids)
            if overlap:
                raise InvalidSpec(f"device(s) {sorted(overlap)} assigned to two replicas")
            seen.update(r.device_ids)

    def __len__(self) -> int:
        return len(self.replicas)

    @property
    def devices(self) -> frozenset[int]:
        return frozenset(d for r in self.replicas for d in r.device_ids)

    @property
    def num_devices(self) -> int:
        return sum(r.size for r in self.replicas)

    def validate(self, cluster: ClusterSpec) -> None:
        for idx, r in enumerate(self.replicas):
            if not r.valid_on(cluster):
                raise InvalidSpec(f"replica {idx} {r.to_dict()} violates the placement rule")

    def canonical(self) -> tuple:
        return tuple(sorted((r.device_ids, r.tp, r.pp) for r in self.replicas))

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "replicas": [r.to_dict() for r in self.replicas]}

    @classmethod
    def from_dict(cls, d) -> "Deployment":
        # bare JSON arrays are accepted as well as the versioned object form
        items = d if isinstance(d, list) else d["replicas"]
        return cls(tuple(ReplicaConfig.from_dict(r) for r in items))


@dataclass(frozen=True)
class WorkloadType:
    type_id: int
    centroid_in: float
    centroid_out: float

    def __post_init__(self):
        if self.centroid_in < 1 or self.centroid_out < 1:
            raise InvalidSpec("workload centroids must be >= 1 token")

    def to_dict(self) -> dict:
        return {"type_id": self.type_id, "centroid_in": self.centroid_in,
                "centroid_out": self.centroid_out}

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadType":
        return cls(int(d["type_id"]), float(d["centroid_in"]), float(d["centroid_out"]))


@dataclass(frozen=True)
class TraceRecord:
    arrival_ms: int
    input_len: int
    output_len: int

    def __post_init__(self):
        if self.input_len < 1 or self.output_len < 1:
            raise InvalidSpec("input_len and output_len must be >= 1")

    def to_dict(self) -> dict:
        return {"arrival_ms": self.arrival_ms, "input_len": self.input_len,
                "output_len": self.output_len}

    @classmethod
    def from_dict(cls, d: dict) -> "TraceRecord":
        return cls(int(d["arrival_ms"]), int(d["input_len"]), int(d["output_len"]))


@dataclass(frozen=True)
class TraceSpan:
    span_index: int
    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise InvalidSpec("span counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def to_dict(self) -> dict:
        return {"span_index": self.span_index, "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, d: dict) -> "TraceSpan":
        return cls(int(d["span_index"]), tuple(d["counts"]))
