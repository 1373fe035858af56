"""Workload typing (k-means over request lengths), per-span counting and forecasting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import _kernels
from .core import (SCHEMA_VERSION, DegenerateActuals, InvalidSpec, TooFewRecords,
                   TraceRecord, TraceSpan, WorkloadType)

MAX_ITERS = 300
TOL = 1e-6
WINDOW = 50
DEFAULT_K = 4


@dataclass(frozen=True)
class TypeModel:
    """Centroids in token units plus the min-max normalisation used to fit them."""
    k: int
    centroids: tuple[tuple[float, float], ...]
    lo: tuple[float, float]
    scale: tuple[float, float]

    def __post_init__(self):
        if self.k < 1 or len(self.centroids) != self.k:
            raise InvalidSpec("TypeModel needs k >= 1 centroids")
        if len(set(self.centroids)) != self.k:
            raise InvalidSpec("TypeModel centroids must be distinct")

    def normalize(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.array(self.lo)) / np.array(self.scale)

    def normalized_centroids(self) -> np.ndarray:
        return self.normalize(np.array(self.centroids, dtype=np.float64))

    def types(self) -> list[WorkloadType]:
        return [WorkloadType(j, max(1.0, c[0]), max(1.0, c[1])) for j, c in enumerate(self.centroids)]

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "k": self.k,
                "centroids": [list(c) for c in self.centroids],
                "lo": list(self.lo), "scale": list(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "TypeModel":
        return cls(int(d["k"]), tuple((float(a), float(b)) for a, b in d["centroids"]),
                   tuple(float(v) for v in d["lo"]), tuple(float(v) for v in d["scale"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TypeModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SpanSeries:
    spans: tuple[TraceSpan, ...]
    span_seconds: float = 60.0

    def __post_init__(self):
        idx = [s.span_index for s in self.spans]
        if any(b != a + 1 for a, b in zip(idx, idx[1:])):
            raise InvalidSpec("spans must be contiguous")
        if len({len(s.counts) for s in self.spans}) > 1:
            raise InvalidSpec("spans disagree on the number of types")

    def __len__(self) -> int:
        return len(self.spans)

    def matrix(self) -> np.ndarray:
        """(spans, types) count matrix."""
        if not self.spans:
            return np.zeros((0, 0))
        return np.array([s.counts for s in self.spans], dtype=np.float64)


@dataclass(frozen=True)
class Forecast:
    predicted: tuple[float, ...]
    horizon: int = 1


def read_trace(path: str | Path) -> list[TraceRecord]:
    """Parse a JSONL trace; errors name the offending line."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(TraceRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise InvalidSpec(f"{path}:{lineno}: bad trace record ({exc})") from exc
    return records


def write_trace(records: Iterable[TraceRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def _points(records: Sequence[TraceRecord]) -> np.ndarray:
    return np.array([(r.input_len, r.output_len) for r in records], dtype=np.float64).reshape(-1, 2)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise TooFewRecords(f"fewer than {k} distinct (input, output) points")
        nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def fit_types(records: Sequence[TraceRecord], k: int = DEFAULT_K, seed: int = 0,
              history: list | None = None) -> TypeModel:
    """k-means++ seeded Lloyd iterations on min-max normalised (input, output) lengths.

    Types are numbered by ascending centroid so ids are stable across seeds
    that find the same clustering. When ``history`` is given, the SSE of
    every iteration is appended to it.
    """
    if k < 1:
        raise InvalidSpec("k must be >= 1")
    if len(records) < k:
        raise TooFewRecords(f"{len(records)} records cannot form {k} types")
    raw = _points(records)
    lo = raw.min(axis=0)
    span = raw.max(axis=0) - lo
    scale = np.where(span > 0, span, 1.0)
    pts = (raw - lo) / scale
    centroids = _kmeans_pp(pts, k, np.random.default_rng(seed))
    for _ in range(MAX_ITERS):
        _, new, sse = _kernels.lloyd_step(pts, centroids)
        if history is not None:
            history.append(float(sse))
        moved = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if moved < TOL:
            break
    real = centroids * scale + lo
    order = sorted(range(k), key=lambda c: (real[c, 0], real[c, 1]))
    cents = tuple((float(real[c, 0]), float(real[c, 1])) for c in order)
    if len(set(cents)) != k:
        raise TooFewRecords(f"fewer than {k} distinct clusters in the data")
    return TypeModel(k, cents, (float(lo[0]), float(lo[1])), (float(scale[0]), float(scale[1])))


def assign_types(model: TypeModel, records: Sequence[TraceRecord]) -> np.ndarray:
    if not records:
        return np.zeros(0, dtype=np.int64)
    return _kernels.nearest_centroid(model.normalize(_points(records)), model.normalized_centroids())


def assign_type(model: TypeModel, rec: TraceRecord) -> int:
    """Nearest centroid in normalised space; ties go to the lowest type id."""
    return int(assign_types(model, [rec])[0])


def span_of(arrival_ms: int, span_seconds: float) -> int:
    return math.floor(arrival_ms / (1000.0 * span_seconds))


def bucketize(records: Sequence[TraceRecord], model: TypeModel, span_seconds: float = 60.0) -> SpanSeries:
    """Per-span per-type counts over the contiguous range of spans the trace touches."""
    if span_seconds <= 0:
        raise InvalidSpec("span_seconds must be > 0")
    if not records:
        return SpanSeries((), span_seconds)
    recs = sorted(records, key=lambda r: r.arrival_ms)
    labels = assign_types(model, recs)
    idx = np.array([span_of(r.arrival_ms, span_seconds) for r in recs], dtype=np.int64)
    first, last = int(idx[0]), int(idx[-1])
    counts = np.zeros((last - first + 1, model.k), dtype=np.int64)
    np.add.at(counts, (idx - first, labels), 1)
    return SpanSeries(tuple(TraceSpan(first + s, tuple(counts[s])) for s in range(counts.shape[0])),
                      span_seconds)


class Predictor(Protocol):
    """Maps a (window, types) block of past counts to next-span counts (non-negative)."""

    def predict(self, window: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class HoltPredictor:
    """Per-type double exponential smoothing (level plus trend)."""
    alpha: float = 0.5
    beta: float = 0.3

    def predict(self, window: np.ndarray) -> np.ndarray:
        w = np.asarray(window, dtype=np.float64)
        if w.ndim == 1:
            w = w[:, None]
        level = w[0].copy()
        trend = (w[1] - w[0]) if w.shape[0] > 1 else np.zeros(w.shape[1])
        for t in range(1, w.shape[0]):
            prev = level
            level = self.alpha * w[t] + (1 - self.alpha) * (level + trend)
            trend = self.beta * (level - prev) + (1 - self.beta) * trend
        return np.maximum(level + trend, 0.0)


@dataclass(frozen=True)
class LastValuePredictor:
    def predict(self, window: np.ndarray) -> np.ndarray:
        w = np.asarray(window, dtype=np.float64)
        return np.maximum(w[-1], 0.0)


def forecast_next(series: SpanSeries, predictor: Predictor | None = None, window: int = WINDOW) -> Forecast:
    if len(series) == 0:
        raise InvalidSpec("cannot forecast from an empty series")
    predictor = predictor or HoltPredictor()
    block = series.matrix()[-window:]
    pred = np.maximum(np.asarray(predictor.predict(block), dtype=np.float64), 0.0)
    return Forecast(tuple(float(v) for v in pred))


def rolling_forecasts(series: SpanSeries, predictor: Predictor | None = None,
                      window: int = WINDOW, start: int = 1) -> np.ndarray:
    """One-step-ahead forecasts for spans start..end (row t predicts span t)."""
    m = series.matrix()
    predictor = predictor or HoltPredictor()
    out = np.zeros((max(0, m.shape[0] - start), m.shape[1] if m.ndim == 2 else 0))
    for t in range(start, m.shape[0]):
        out[t - start] = np.maximum(predictor.predict(m[max(0, t - window):t]), 0.0)
    return out


def rrmse(predicted, actual) -> float:
    """sqrt(mean((p - a)^2)) / mean(a) * 100 per type, averaged over types.

    Types whose actuals are all zero carry no relative error and are skipped;
    if every type is all zero the metric is undefined.
    """
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape or a.shape[0] < 1:
        raise InvalidSpec("predicted and actual must have equal, non-zero length")
    if a.ndim == 1:
        p, a = p[:, None], a[:, None]
    scores = []
    for j in range(a.shape[1]):
        mean = a[:, j].mean()
        if mean == 0:
            continue
        scores.append(math.sqrt(((p[:, j] - a[:, j]) ** 2).mean()) / mean * 100.0)
    if not scores:
        raise DegenerateActuals("actual series has zero mean")
    return float(np.mean(scores))
