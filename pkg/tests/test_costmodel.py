import math

import pytest

from flowserve.core import (ClusterSpec, Deployment, InfeasibleReplica, InvalidSpec, ModelSpec,
                            ReplicaConfig, WorkloadType)
from flowserve.costmodel import (ProfileParams, build_capacity_table, capacity, decode_latency,
                                 edge_capacity, kv_span_budget, memory_feasible, prefill_latency,
                                 service_time, tp_speedup)


def test_profile_roundtrip_and_defaults(params):
    assert ProfileParams.from_dict(params.to_dict()) == params
    assert params == ProfileParams()


def test_profile_rejects_bad_values():
    with pytest.raises(InvalidSpec):
        ProfileParams(tp_efficiency=1.5)
    with pytest.raises(InvalidSpec):
        ProfileParams(prefill_coeff=0)


def test_tp_speedup_closed_form():
    assert tp_speedup(1, 0.8) == 1.0
    assert math.isclose(tp_speedup(4, 0.8), 4 * 0.64)


def test_latency_terms(model, params):
    one = ReplicaConfig((0,), 1, 1)
    assert math.isclose(prefill_latency(one, model, 100, params),
                        100 * model.num_layers * params.prefill_coeff)
    assert math.isclose(decode_latency(one, model, 10, params),
                        10 * model.num_layers * params.decode_coeff)
    two_stage = ReplicaConfig((0, 1), 1, 2)
    assert prefill_latency(two_stage, model, 100, params) > prefill_latency(one, model, 100, params)


def test_more_tp_means_faster_requests(model, params):
    lat = [prefill_latency(ReplicaConfig(tuple(range(t)), t, 1), model, 1000, params) for t in (1, 2, 4)]
    assert lat[0] > lat[1] > lat[2]


def test_memory_feasibility(model, big_model, cluster):
    assert memory_feasible(ReplicaConfig((0,), 1, 1), model, cluster)
    assert not memory_feasible(ReplicaConfig((0,), 1, 1), big_model, cluster)
    assert memory_feasible(ReplicaConfig((0, 1), 2, 1), big_model, cluster)


def test_capacity_is_floor_of_span_over_service(model, params, cluster, short_long_types):
    cfg = ReplicaConfig((0, 1), 2, 1)
    for wt in short_long_types:
        assert capacity(cfg, model, wt, 60, params, cluster) == \
            math.floor(60 / service_time(cfg, model, wt, params, cluster))


def test_edge_capacity_never_exceeds_capacity(model, params, cluster, short_long_types):
    cfg = ReplicaConfig((0,), 1, 1)
    for wt in short_long_types:
        budget = kv_span_budget(cfg, model, wt, 60, params, cluster)
        assert edge_capacity(cfg, model, wt, 60, params, budget, cluster) <= \
            capacity(cfg, model, wt, 60, params, cluster)
        assert edge_capacity(cfg, model, wt, 60, params, 0.0, cluster) == 0


def test_capacity_table_shape(model, params, cluster, short_long_types):
    dep = Deployment((ReplicaConfig((0, 1, 2, 3), 4, 1), ReplicaConfig((4,), 1, 1)))
    table = build_capacity_table(dep, short_long_types, model, params, 60, cluster)
    assert table.shape == (2, 2)
    assert (table.e <= table.n).all()


def test_capacity_table_rejects_small_replica(big_model, params, cluster, short_long_types):
    dep = Deployment((ReplicaConfig((0,), 1, 1),))
    with pytest.raises(InfeasibleReplica):
        build_capacity_table(dep, short_long_types, big_model, params, 60, cluster)


def test_short_outputs_favour_replicas_long_outputs_favour_tp(model, params):
    cl = ClusterSpec.uniform(1, 4, 80_000_000_000)
    short, long_ = WorkloadType(0, 1024, 16), WorkloadType(1, 128, 1024)
    four = 4 * capacity(ReplicaConfig((0,), 1, 1), model, short, 60, params, cl)
    one = capacity(ReplicaConfig((0, 1, 2, 3), 4, 1), model, short, 60, params, cl)
    assert four > one
    four = 4 * capacity(ReplicaConfig((0,), 1, 1), model, long_, 60, params, cl)
    one = capacity(ReplicaConfig((0, 1, 2, 3), 4, 1), model, long_, 60, params, cl)
    assert one > four


def _unit_model(kv=0):
    return ModelSpec("unit", 0, 1, kv, 1, 0)


def test_prefill_identity_case():
    p = ProfileParams(prefill_coeff=0.001)
    assert math.isclose(prefill_latency(ReplicaConfig((0,), 1, 1), _unit_model(), 1, p), 0.001)


def test_doubling_tp_halves_compute_at_full_efficiency():
    p = ProfileParams(tp_efficiency=1.0)
    m = _unit_model()
    one = prefill_latency(ReplicaConfig((0,), 1, 1), m, 64, p)
    two = prefill_latency(ReplicaConfig((0, 1), 2, 1), m, 64, p)
    assert math.isclose(two, one / 2)


def test_pipeline_stage_pays_one_comm_cost_per_microbatch():
    p = ProfileParams()
    m = _unit_model()
    a = prefill_latency(ReplicaConfig((0, 1, 2, 3), 2, 2), m, 100, p)
    b = prefill_latency(ReplicaConfig((0, 1, 2, 3), 4, 1), m, 100, p)
    compute2 = 100 * p.prefill_coeff / tp_speedup(2, p.tp_efficiency)
    compute4 = 100 * p.prefill_coeff / tp_speedup(4, p.tp_efficiency)
    assert math.isclose(a, compute2 + p.pp_comm_cost)
    assert math.isclose(b, compute4)


def test_decode_identity_and_symmetry():
    m = _unit_model()
    p = ProfileParams(decode_coeff=0.002)
    assert math.isclose(decode_latency(ReplicaConfig((0,), 1, 1), m, 1, p), 0.002)
    flat = ProfileParams(mem_bw_penalty=0.0)
    one = decode_latency(ReplicaConfig((0,), 1, 1), m, 10, flat)
    two = decode_latency(ReplicaConfig((0, 1), 2, 1), m, 10, flat)
    assert math.isclose(two, one / 2)


def test_two_device_trade_off(model, params):
    cl = ClusterSpec.uniform(1, 2, 80_000_000_000)
    short, long_ = WorkloadType(0, 1024, 16), WorkloadType(1, 128, 1024)
    dp = 2 * capacity(ReplicaConfig((0,), 1, 1), model, short, 60, params, cl)
    tp = capacity(ReplicaConfig((0, 1), 2, 1), model, short, 60, params, cl)
    assert dp > tp
    dp = 2 * capacity(ReplicaConfig((0,), 1, 1), model, long_, 60, params, cl)
    tp = capacity(ReplicaConfig((0, 1), 2, 1), model, long_, 60, params, cl)
    assert tp > dp


def test_capacity_floor_boundary():
    p = ProfileParams(prefill_coeff=30.0, decode_coeff=30.0, max_batch=1)
    cl = ClusterSpec.uniform(1, 1, 10)
    assert capacity(ReplicaConfig((0,), 1, 1), _unit_model(), WorkloadType(0, 1, 1), 60, p, cl) == 1


def test_capacities_for_the_lcm_example():
    # service times of 60/80 s and 60/50 s give the 80 / 50 capacities
    p = ProfileParams(prefill_coeff=0.45, decode_coeff=0.3, max_batch=1)
    cl = ClusterSpec.uniform(1, 1, 10)
    cfg = ReplicaConfig((0,), 1, 1)
    m = _unit_model()
    assert capacity(cfg, m, WorkloadType(0, 1, 1), 60, p, cl) == 80
    assert capacity(cfg, m, WorkloadType(1, 2, 1), 60, p, cl) == 50


def test_capacity_monotone_in_output_length(model, params, cluster):
    cfg = ReplicaConfig((0, 1), 2, 1)
    caps = [capacity(cfg, model, WorkloadType(0, 256, out), 60, params, cluster) for out in (8, 64, 512)]
    assert caps[0] >= caps[1] >= caps[2]


def test_edge_capacity_limits(model, params, cluster, short_long_types):
    cfg = ReplicaConfig((0,), 1, 1)
    wt = short_long_types[0]
    assert edge_capacity(cfg, model, wt, 60, params, math.inf, cluster) == \
        capacity(cfg, model, wt, 60, params, cluster)


def test_long_outputs_get_fewer_admissions(model, params, cluster):
    cfg = ReplicaConfig((0,), 1, 1)
    budget = 1e10
    short = edge_capacity(cfg, model, WorkloadType(0, 256, 16), 60, params, budget, cluster)
    long_ = edge_capacity(cfg, model, WorkloadType(1, 256, 2048), 60, params, budget, cluster)
    assert long_ < short


def test_paper_memory_anchor():
    m70 = ModelSpec("70b", 140_000_000_000, 80, 1, 1, 140_000_000_000)
    cl = ClusterSpec.uniform(1, 2, 80_000_000_000)
    assert not memory_feasible(ReplicaConfig((0,), 1, 1), m70, cl)
    assert memory_feasible(ReplicaConfig((0, 1), 2, 1), m70, cl)
    assert memory_feasible(ReplicaConfig((0,), 1, 1), _unit_model(), cl)


def test_table_composes_scalar_calls(model, params, cluster, short_long_types):
    cfg = ReplicaConfig((0,), 1, 1)
    wt = short_long_types[1]
    table = build_capacity_table(Deployment((cfg,)), [wt], model, params, 60, cluster)
    budget = kv_span_budget(cfg, model, wt, 60, params, cluster)
    assert table.n[0, 0] == capacity(cfg, model, wt, 60, params, cluster)
    assert table.e[0, 0] == edge_capacity(cfg, model, wt, 60, params, budget, cluster)


def test_identical_replicas_identical_rows(model, params, cluster, short_long_types):
    dep = Deployment((ReplicaConfig((0, 1), 2, 1), ReplicaConfig((4, 5), 2, 1)))
    table = build_capacity_table(dep, short_long_types, model, params, 60, cluster)
    assert (table.n[0] == table.n[1]).all() and (table.e[0] == table.e[1]).all()
