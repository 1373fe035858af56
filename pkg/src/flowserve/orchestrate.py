"""Predict -> schedule -> switch loop and the baselines it is compared against."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import deploysearch, flowassign, switchplan
from .core import ClusterSpec, Deployment, ModelSpec, ReplicaConfig, TraceRecord, TraceSpan
from .costmodel import ProfileParams, build_capacity_table, memory_feasible
from .sim import SimResult, StrategyTimeline, TimelineEntry, run
from .workload import (HoltPredictor, Predictor, SpanSeries, TypeModel, assign_types,
                       bucketize, forecast_next)

log = logging.getLogger(__name__)

HEADROOM = 1.1
RELOAD_SECONDS = 50.0


@dataclass(frozen=True)
class OrchestrationResult:
    timeline: StrategyTimeline
    forecasts: tuple[tuple[float, ...], ...]
    series: SpanSeries
    switches: int


def _forecast(series: SpanSeries, idx: int, predictor: Predictor, window: int) -> tuple[float, ...]:
    # the first span has no history; it is planned on its own counts
    if idx == 0:
        return tuple(float(c) for c in series.spans[0].counts)
    hist = SpanSeries(series.spans[:idx], series.span_seconds)
    return forecast_next(hist, predictor, window).predicted


def _schedule(cluster, model, types, target, params, seed, prev, max_iters, stale_limit, span_s):
    """Warm-started search, backed by a cold start.

    Mutations only ever grow saturated replicas, so a search started from a
    deployment of large replicas cannot get back to many small ones. The cold
    run from the uniform start covers that direction; the warm result wins
    ties, which avoids needless switches.
    """
    ev = deploysearch.Evaluator(cluster, model, types, target, params, span_s)
    kw = dict(max_iters=max_iters, stale_limit=stale_limit, span_s=span_s, evaluator=ev)
    cold = deploysearch.search(cluster, model, types, target, params, seed=seed, **kw)
    if prev is None:
        return cold
    warm = deploysearch.search(cluster, model, types, target, params, seed=seed, init=prev, **kw)
    return warm if warm.throughput >= cold.throughput else cold


def plan_timeline(records: Sequence[TraceRecord], type_model: TypeModel, cluster: ClusterSpec,
                  model: ModelSpec, params: ProfileParams, span_seconds: float = 60.0, seed: int = 0,
                  headroom: float = HEADROOM, predictor: Predictor | None = None, window: int = 50,
                  max_iters: int = deploysearch.MAX_ITERS,
                  stale_limit: int = deploysearch.STALE_LIMIT) -> OrchestrationResult:
    """One timeline entry per span whose deployment or assignment differs from the last."""
    predictor = predictor or HoltPredictor()
    types = type_model.types()
    series = bucketize(records, type_model, span_seconds)
    entries: list[TimelineEntry] = []
    forecasts = []
    prev: Deployment | None = None
    switches = 0
    for idx, span in enumerate(series.spans):
        pred = _forecast(series, idx, predictor, window)
        forecasts.append(pred)
        target = TraceSpan(span.span_index, tuple(int(math.ceil(v * headroom)) for v in pred))
        state = _schedule(cluster, model, types, target, params, seed, prev, max_iters,
                          stale_limit, span_seconds)
        dep = state.deployment
        table = build_capacity_table(dep, types, model, params, span_seconds, cluster)
        x = state.assignment.x
        seconds = 0.0
        if prev is not None and dep.canonical() != prev.canonical():
            seconds = switchplan.switch(prev, dep, model, cluster).est_seconds
            switches += 1
        last = entries[-1] if entries else None
        if last is None or seconds > 0 or dep.canonical() != last.deployment.canonical() \
                or not np.array_equal(x, last.assignment):
            entries.append(TimelineEntry(span.span_index, dep, x, table.n, seconds))
            log.info("span %d: %d replicas, objective %d, switch %.3fs", span.span_index,
                     len(dep), state.throughput, seconds)
        prev = dep
    return OrchestrationResult(StrategyTimeline(tuple(entries)), tuple(forecasts), series, switches)


def homogeneous_deployments(cluster: ClusterSpec, model: ModelSpec) -> list[Deployment]:
    """Every deployment of identical replicas (same size and strategy) covering the cluster."""
    devs = cluster.devices
    D = len(devs)
    out = []
    for size in range(1, D + 1):
        if D % size:
            continue
        groups = [tuple(devs[i:i + size]) for i in range(0, D, size)]
        for tp in range(size, 0, -1):
            if size % tp:
                continue
            reps = [ReplicaConfig(g, tp, size // tp) for g in groups]
            if all(r.valid_on(cluster) and memory_feasible(r, model, cluster) for r in reps):
                out.append(Deployment(tuple(reps)))
    return out


def static_timeline(dep: Deployment, series: SpanSeries, forecasts: Sequence[Sequence[float]],
                    type_model: TypeModel, model: ModelSpec, params: ProfileParams,
                    cluster: ClusterSpec, span_seconds: float = 60.0,
                    headroom: float = HEADROOM) -> StrategyTimeline:
    """Fixed deployment; the per-span assignment still follows the forecast."""
    types = type_model.types()
    table = build_capacity_table(dep, types, model, params, span_seconds, cluster)
    entries = []
    for span, pred in zip(series.spans, forecasts):
        target = TraceSpan(span.span_index, tuple(int(math.ceil(v * headroom)) for v in pred))
        x = flowassign.solve(target, table)[0].x
        if not entries or not np.array_equal(x, entries[-1].assignment):
            entries.append(TimelineEntry(span.span_index, dep, x, table.n, 0.0))
    return StrategyTimeline(tuple(entries))


@dataclass(frozen=True)
class Comparison:
    adaptive: SimResult
    reload: SimResult
    static: SimResult
    static_deployment: Deployment
    plan: OrchestrationResult


def compare(records: Sequence[TraceRecord], type_model: TypeModel, cluster: ClusterSpec,
            model: ModelSpec, params: ProfileParams, span_seconds: float = 60.0, seed: int = 0,
            headroom: float = HEADROOM, reload_seconds: float = RELOAD_SECONDS) -> Comparison:
    """Adaptive timeline vs the same timeline with reload downtime vs the best static deployment."""
    plan = plan_timeline(records, type_model, cluster, model, params, span_seconds, seed, headroom)
    labels = [int(v) for v in assign_types(type_model, records)]
    adaptive = run(records, labels, plan.timeline, model, params, cluster, span_seconds)
    reload = run(records, labels, plan.timeline.with_switch_seconds(reload_seconds),
                 model, params, cluster, span_seconds)
    best = None
    for dep in homogeneous_deployments(cluster, model):
        tl = static_timeline(dep, plan.series, plan.forecasts, type_model, model, params,
                             cluster, span_seconds, headroom)
        res = run(records, labels, tl, model, params, cluster, span_seconds)
        key = (res.report.p99, -res.report.throughput)
        if best is None or key < best[0]:
            best = (key, res, dep)
    return Comparison(adaptive, reload, best[1], best[2], plan)
