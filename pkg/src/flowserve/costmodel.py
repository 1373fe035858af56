"""Analytical latency/capacity model standing in for per-hardware profiling.

Prefill is treated as compute-bound (batched prefill costs the sum of the
individual latencies) and decode as memory-bound (a decode step costs roughly
the same regardless of how many requests share it, up to the KV-memory limit).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (ClusterSpec, Deployment, InfeasibleReplica, InvalidSpec,
                   ModelSpec, ReplicaConfig, WorkloadType)

PROFILE_VERSION = 1


@dataclass(frozen=True)
class ProfileParams:
    prefill_coeff: float = 5.0e-6     # s per (input token x layer) at tp=1
    decode_coeff: float = 6.25e-4     # s per (decode step x layer) at tp=1
    tp_efficiency: float = 0.8        # per-doubling scaling efficiency of prefill
    pp_comm_cost: float = 2.0e-3      # s per stage boundary per microbatch
    mem_bw_penalty: float = 0.05      # decode slowdown per extra tp rank
    max_batch: int = 256              # cap on concurrently decoding requests

    def __post_init__(self):
        if min(self.prefill_coeff, self.decode_coeff, self.tp_efficiency,
               self.pp_comm_cost) <= 0:
            raise InvalidSpec("profile coefficients must be > 0")
        if self.tp_efficiency > 1:
            raise InvalidSpec("tp_efficiency must be <= 1")
        if self.mem_bw_penalty < 0 or self.max_batch < 1:
            raise InvalidSpec("mem_bw_penalty must be >= 0 and max_batch >= 1")

    def to_dict(self) -> dict:
        return {"profile_version": PROFILE_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileParams":
        fields = {k: v for k, v in d.items() if k != "profile_version"}
        if "max_batch" in fields:
            fields["max_batch"] = int(fields["max_batch"])
        return cls(**fields)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ProfileParams":
        if path is None:
            text = resources.files("flowserve.data").joinpath("profile_default.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class CapacityTable:
    n: np.ndarray        # [k, j] requests per span under exclusive use
    e: np.ndarray        # [k, j] per-type admission cap, e <= n
    latency: np.ndarray  # [k, j] expected single-request latency, seconds

    @property
    def shape(self) -> tuple[int, int]:
        return self.n.shape

    def key(self) -> tuple:
        return (self.n.tobytes(), self.e.tobytes(), self.n.shape)


def tp_speedup(tp: int, efficiency: float) -> float:
    return tp * efficiency ** math.log2(tp)


def decode_penalty(tp: int, params: ProfileParams) -> float:
    return 1.0 + params.mem_bw_penalty * (tp - 1)


def prefill_latency(cfg: ReplicaConfig, model: ModelSpec, input_len: float,
                    params: ProfileParams) -> float:
    compute = input_len * model.num_layers * params.prefill_coeff / tp_speedup(cfg.tp, params.tp_efficiency)
    return compute + (cfg.pp - 1) * params.pp_comm_cost


def decode_latency(cfg: ReplicaConfig, model: ModelSpec, output_len: float,
                   params: ProfileParams) -> float:
    step = model.num_layers * params.decode_coeff * decode_penalty(cfg.tp, params) / cfg.tp
    return output_len * step + (cfg.pp - 1) * params.pp_comm_cost * output_len


def request_latency(cfg, model, wtype: WorkloadType, params) -> float:
    return (prefill_latency(cfg, model, wtype.centroid_in, params)
            + decode_latency(cfg, model, wtype.centroid_out, params))


def replica_memory(cfg: ReplicaConfig, cluster: ClusterSpec) -> int:
    return sum(cluster.device_mem(d) for d in cfg.device_ids)


def memory_feasible(cfg: ReplicaConfig, model: ModelSpec, cluster: ClusterSpec) -> bool:
    if replica_memory(cfg, cluster) < model.min_mem_bytes:
        return False
    share = model.param_bytes / (cfg.tp * cfg.pp)
    return all(share <= cluster.device_mem(d) for d in cfg.device_ids)


def kv_free_bytes(cfg: ReplicaConfig, model: ModelSpec, cluster: ClusterSpec) -> int:
    return max(0, replica_memory(cfg, cluster) - model.min_mem_bytes)


def kv_bytes_per_request(model: ModelSpec, wtype: WorkloadType) -> int:
    tokens = math.ceil(wtype.centroid_in) + math.ceil(wtype.centroid_out)
    return tokens * model.bytes_per_token_kv


def batch_slots(cfg, model, wtype, params, cluster) -> int:
    """Requests of this type that can decode concurrently on the replica."""
    per_req = kv_bytes_per_request(model, wtype)
    if per_req == 0:
        return params.max_batch
    fit = kv_free_bytes(cfg, model, cluster) // per_req
    return int(min(params.max_batch, max(1, fit)))


def service_time(cfg, model, wtype, params, cluster) -> float:
    """Amortised replica time consumed by one request of this type."""
    slots = batch_slots(cfg, model, wtype, params, cluster)
    return (prefill_latency(cfg, model, wtype.centroid_in, params)
            + decode_latency(cfg, model, wtype.centroid_out, params) / slots)


def _floor_ratio(num: float, den: float) -> int:
    # tolerate representation error at exact boundaries (e.g. 60 / 0.75)
    return int(math.floor(num / den * (1 + 1e-12)))


def capacity(cfg: ReplicaConfig, model: ModelSpec, wtype: WorkloadType, span_s: float,
             params: ProfileParams, cluster: ClusterSpec) -> int:
    if not memory_feasible(cfg, model, cluster):
        raise InfeasibleReplica(f"replica {cfg.to_dict()} cannot hold model {model.name}")
    return _floor_ratio(span_s, service_time(cfg, model, wtype, params, cluster))


def edge_capacity(cfg: ReplicaConfig, model: ModelSpec, wtype: WorkloadType, span_s: float,
                  params: ProfileParams, kv_budget: float, cluster: ClusterSpec) -> int:
    n = capacity(cfg, model, wtype, span_s, params, cluster)
    per_req = kv_bytes_per_request(model, wtype)
    if per_req == 0 or math.isinf(kv_budget):
        return n
    return min(n, int(kv_budget // per_req))


def kv_span_budget(cfg, model, wtype, span_s, params, cluster) -> float:
    """KV bytes the replica can hand out over one span: free memory times the
    number of times a request's footprint turns over within the span."""
    lat = request_latency(cfg, model, wtype, params)
    return kv_free_bytes(cfg, model, cluster) * span_s / lat


def capacity_row(cfg, types: Sequence[WorkloadType], model, params, span_s, cluster):
    n_row, e_row, lat_row = [], [], []
    for wt in types:
        n = capacity(cfg, model, wt, span_s, params, cluster)
        budget = kv_span_budget(cfg, model, wt, span_s, params, cluster)
        n_row.append(n)
        e_row.append(edge_capacity(cfg, model, wt, span_s, params, budget, cluster))
        lat_row.append(request_latency(cfg, model, wt, params))
    return n_row, e_row, lat_row


def build_capacity_table(deployment: Deployment, types: Sequence[WorkloadType], model: ModelSpec,
                         params: ProfileParams, span_s: float, cluster: ClusterSpec) -> CapacityTable:
    rows_n, rows_e, rows_l = [], [], []
    for idx, cfg in enumerate(deployment.replicas):
        if not memory_feasible(cfg, model, cluster):
            raise InfeasibleReplica(f"replica {idx} {cfg.to_dict()} cannot hold model {model.name}")
        n, e, lat = capacity_row(cfg, types, model, params, span_s, cluster)
        rows_n.append(n)
        rows_e.append(e)
        rows_l.append(lat)
    j = len(types)
    return CapacityTable(np.array(rows_n, dtype=np.int64).reshape(-1, j),
                         np.array(rows_e, dtype=np.int64).reshape(-1, j),
                         np.array(rows_l, dtype=np.float64).reshape(-1, j))
