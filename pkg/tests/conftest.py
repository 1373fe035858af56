import json
from importlib import resources

import numpy as np
import pytest

from flowserve.core import ClusterSpec, ModelSpec, TraceRecord, WorkloadType
from flowserve.costmodel import ProfileParams

_CRITERIA: list[tuple[int, str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _CRITERIA.append((mark.args[0], mark.args[1], "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, status, detail in sorted(_CRITERIA):
        line = f"criterion {num:2d} {status}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


def _packaged(name):
    return json.loads(resources.files("flowserve.data").joinpath(name).read_text())


@pytest.fixture(scope="session")
def params():
    return ProfileParams.load()


@pytest.fixture(scope="session")
def model():
    return ModelSpec.from_dict(_packaged("model_default.json"))


@pytest.fixture(scope="session")
def big_model():
    return ModelSpec("dense-70b", 140_000_000_000, 80, 2_600_000, 1, 150_000_000_000)


@pytest.fixture(scope="session")
def cluster():
    return ClusterSpec.from_dict(_packaged("cluster_2x4.json"))


@pytest.fixture(scope="session")
def short_long_types():
    return [WorkloadType(0, 1024, 16), WorkloadType(1, 128, 1024)]


def blob_records(n_per_blob=200, seed=0):
    """Two well separated length blobs with +-5% jitter; returns (records, true labels)."""
    rng = np.random.default_rng(seed)
    records, labels = [], []
    for label, (a, b) in enumerate([(100, 50), (2000, 4000)]):
        for _ in range(n_per_blob):
            ja, jb = rng.uniform(0.95, 1.05, 2)
            records.append(TraceRecord(int(rng.integers(0, 600_000)), int(round(a * ja)), int(round(b * jb))))
            labels.append(label)
    return records, labels
