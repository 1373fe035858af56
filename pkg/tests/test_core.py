import pytest

from flowserve.core import (ClusterSpec, Deployment, InvalidSpec, MachineSpec, ModelSpec,
                            ReplicaConfig, TraceRecord, TraceSpan, placement_ok, stage_groups)


def test_uniform_cluster_layout():
    cl = ClusterSpec.uniform(2, 4, 80)
    assert cl.devices == tuple(range(8))
    assert cl.same_machine(0, 3) and not cl.same_machine(3, 4)
    assert cl.bandwidth(0, 1) == 400e9 and cl.bandwidth(0, 7) == 200e9


def test_cluster_rejects_duplicate_devices():
    with pytest.raises(InvalidSpec):
        ClusterSpec((MachineSpec("a", (0, 1), 1), MachineSpec("b", (1, 2), 1)), 2.0, 1.0)


def test_cluster_rejects_inverted_bandwidth():
    with pytest.raises(InvalidSpec):
        ClusterSpec.uniform(1, 2, 1, intra_bw=1.0, inter_bw=2.0)


def test_cluster_roundtrip():
    cl = ClusterSpec.uniform(2, 2, 80)
    assert ClusterSpec.from_dict(cl.to_dict()) == cl


def test_stage_groups_are_consecutive():
    assert stage_groups([5, 1, 2, 3], 2) == [(1, 2), (3, 5)]


def test_placement_rule():
    cl = ClusterSpec.uniform(2, 4, 80)
    assert placement_ok((0, 1, 2, 3), 4, 1, cl)
    assert not placement_ok((2, 3, 4, 5), 4, 1, cl)     # tp group straddles machines
    assert placement_ok((2, 3, 4, 5), 2, 2, cl)
    assert placement_ok((3, 4), 1, 2, cl)
    assert not placement_ok((0, 1, 2), 2, 1, cl)


def test_replica_validation():
    with pytest.raises(InvalidSpec):
        ReplicaConfig((0, 1, 2), 2, 2)
    with pytest.raises(InvalidSpec):
        ReplicaConfig((0, 0), 2, 1)
    assert ReplicaConfig((3, 1), 2, 1).device_ids == (1, 3)


def test_deployment_rejects_shared_devices():
    with pytest.raises(InvalidSpec):
        Deployment((ReplicaConfig((0, 1), 2, 1), ReplicaConfig((1,), 1, 1)))


def test_deployment_json_forms():
    dep = Deployment((ReplicaConfig((0, 1), 2, 1), ReplicaConfig((2,), 1, 1)))
    assert Deployment.from_dict(dep.to_dict()) == dep
    bare = [{"devices": [0, 1], "tp": 2, "pp": 1}, {"devices": [2], "tp": 1, "pp": 1}]
    assert Deployment.from_dict(bare) == dep


def test_validate_names_replica():
    cl = ClusterSpec.uniform(2, 2, 80)
    dep = Deployment((ReplicaConfig((1, 2), 2, 1),))
    with pytest.raises(InvalidSpec, match="replica 0"):
        dep.validate(cl)


def test_model_needs_room_for_params():
    with pytest.raises(InvalidSpec):
        ModelSpec("m", 10, 1, 1, 1, 5)


def test_trace_record_lengths():
    with pytest.raises(InvalidSpec):
        TraceRecord(0, 0, 5)
    assert TraceRecord.from_dict({"arrival_ms": 3, "input_len": 4, "output_len": 5}).output_len == 5


def test_span_counts_non_negative():
    with pytest.raises(InvalidSpec):
        TraceSpan(0, (1, -1))
    assert TraceSpan(2, (3, 4)).total == 7
