"""Command-line entry point: fit, predict, schedule, switch-plan, simulate, orchestrate, synth."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from importlib import resources
from pathlib import Path


from . import deploysearch, flowassign, orchestrate, sim, switchplan, synth, workload
from .core import (SCHEMA_VERSION, ClusterSpec, Deployment, FlowServeError, InvalidSpec,
                   ModelSpec, ModelTooLarge, TooLarge, TraceSpan)
from .costmodel import ProfileParams, build_capacity_table

log = logging.getLogger("flowserve")

EXIT_ERROR = 2
EXIT_MODEL_TOO_LARGE = 3
EXIT_TOO_LARGE = 4
EXIT_MISSING_FILE = 5


@dataclasses.dataclass(frozen=True)
class RunConfig:
    cluster: ClusterSpec
    model: ModelSpec
    profile: ProfileParams
    trace: Path | None
    types: Path | None
    seed: int
    span_seconds: float
    out_dir: Path


def _packaged(name: str) -> dict:
    return json.loads(resources.files("flowserve.data").joinpath(name).read_text())


def _read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"{path}: invalid JSON ({exc})") from exc


def _config(args) -> RunConfig:
    if args.span_seconds <= 0:
        raise InvalidSpec("--span-seconds must be > 0")
    cluster = ClusterSpec.from_dict(_read_json(args.cluster) if args.cluster else _packaged("cluster_2x4.json"))
    model = ModelSpec.from_dict(_read_json(args.model) if args.model else _packaged("model_default.json"))
    profile = ProfileParams.load(args.profile)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return RunConfig(cluster, model, profile, Path(args.trace) if args.trace else None,
                     Path(args.types) if args.types else None, args.seed, args.span_seconds, out)


def _need(path: Path | None, flag: str) -> Path:
    if path is None:
        raise InvalidSpec(f"{flag} is required for this command")
    return path


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def cmd_fit(cfg: RunConfig, args) -> None:
    records = workload.read_trace(_need(cfg.trace, "--trace"))
    model = workload.fit_types(records, args.k, cfg.seed)
    model.save(cfg.out_dir / "types.json")
    print(f"fitted {model.k} types from {len(records)} records")


def cmd_predict(cfg: RunConfig, args) -> None:
    records = workload.read_trace(_need(cfg.trace, "--trace"))
    tm = workload.TypeModel.load(_need(cfg.types, "--types"))
    series = workload.bucketize(records, tm, cfg.span_seconds)
    pred = workload.rolling_forecasts(series, window=args.window, start=1)
    actual = series.matrix()[1:]
    with open(cfg.out_dir / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version", "span", "type", "predicted", "actual"])
        for t in range(pred.shape[0]):
            for j in range(pred.shape[1]):
                w.writerow([SCHEMA_VERSION, series.spans[t + 1].span_index, j,
                            _fmt(float(pred[t, j])), int(actual[t, j])])
    if pred.shape[0]:
        print(f"rrmse {workload.rrmse(pred, actual):.3f}%")


def _span_counts(cfg: RunConfig, args, tm: workload.TypeModel) -> TraceSpan:
    if args.counts:
        counts = tuple(int(v) for v in args.counts.split(","))
        return TraceSpan(0, counts)
    records = workload.read_trace(_need(cfg.trace, "--trace or --counts"))
    series = workload.bucketize(records, tm, cfg.span_seconds)
    idx = args.span_index if args.span_index is not None else series.spans[0].span_index
    for s in series.spans:
        if s.span_index == idx:
            return s
    raise InvalidSpec(f"span {idx} not present in {cfg.trace}")


def cmd_schedule(cfg: RunConfig, args) -> None:
    tm = workload.TypeModel.load(_need(cfg.types, "--types"))
    span = _span_counts(cfg, args, tm)
    types = tm.types()
    if len(span.counts) != len(types):
        raise InvalidSpec(f"{len(span.counts)} counts given for {len(types)} types")
    if args.exhaustive:
        state = deploysearch.exhaustive(cfg.cluster, cfg.model, types, span, cfg.profile, cfg.span_seconds)
    else:
        state = deploysearch.search(cfg.cluster, cfg.model, types, span, cfg.profile, seed=cfg.seed,
                                    max_iters=args.max_iters, stale_limit=args.stale_limit,
                                    span_s=cfg.span_seconds)
        if args.search_log:
            deploysearch.write_search_log(state, args.search_log)
    _write_json(cfg.out_dir / "deployment.json", state.deployment.to_dict())
    x = state.assignment.x
    with open(cfg.out_dir / "assignment.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version", "replica", "type", "requests"])
        for k, j, v in state.assignment.to_rows():
            w.writerow([SCHEMA_VERSION, k, j, v])
    _write_json(cfg.out_dir / "schedule_summary.json", {
        "schema_version": SCHEMA_VERSION, "objective": int(state.throughput),
        "demand": list(span.counts), "replicas": len(state.deployment),
        "iterations": state.iterations, "exhaustive": bool(args.exhaustive)})
    if args.dot:
        table = build_capacity_table(state.deployment, types, cfg.model, cfg.profile,
                                     cfg.span_seconds, cfg.cluster)
        net = flowassign.build_network(span, table)
        _, flow = flowassign.max_flow(net)
        Path(args.dot).write_text(net.to_dot(flow))
    print(f"objective {state.throughput} of {span.total} requests on {len(state.deployment)} replicas; "
          f"x={x.tolist()}")


def _load_deployment(path: str) -> Deployment:
    return Deployment.from_dict(_read_json(path))


def cmd_switch_plan(cfg: RunConfig, args) -> None:
    src, dst = _load_deployment(args.src), _load_deployment(args.dst)
    src.validate(cfg.cluster)
    dst.validate(cfg.cluster)
    plan = switchplan.switch(src, dst, cfg.model, cfg.cluster)
    plan.write_csv(cfg.out_dir / "switch_plan.csv")
    _write_json(cfg.out_dir / "switch_summary.json", {
        "schema_version": SCHEMA_VERSION, "transfers": len(plan.transfers),
        "bytes": int(sum(t.length for t in plan.transfers)), "est_seconds": plan.est_seconds})
    print(f"{len(plan.transfers)} transfers, estimated {plan.est_seconds:.3f} s")


def _labelled_trace(cfg: RunConfig):
    records = workload.read_trace(_need(cfg.trace, "--trace"))
    tm = workload.TypeModel.load(_need(cfg.types, "--types"))
    return records, tm, [int(v) for v in workload.assign_types(tm, records)]


def cmd_simulate(cfg: RunConfig, args) -> None:
    records, tm, labels = _labelled_trace(cfg)
    if args.timeline:
        timeline = sim.StrategyTimeline.from_dict(_read_json(args.timeline))
        name = "timeline"
    elif args.deployment:
        dep = _load_deployment(args.deployment)
        dep.validate(cfg.cluster)
        series = workload.bucketize(records, tm, cfg.span_seconds)
        timeline = orchestrate.static_timeline(dep, series, [s.counts for s in series.spans], tm,
                                               cfg.model, cfg.profile, cfg.cluster, cfg.span_seconds,
                                               headroom=1.0)
        name = "static"
    else:
        raise InvalidSpec("simulate needs --timeline or --deployment")
    res = sim.run(records, labels, timeline, cfg.model, cfg.profile, cfg.cluster, cfg.span_seconds)
    sim.write_metrics([(name, res.report)], cfg.out_dir / "metrics.csv")
    if args.outcomes:
        sim.write_outcomes(res.outcomes, cfg.out_dir / "outcomes.csv")
    print(f"p99 {res.report.p99:.3f} s, throughput {res.report.throughput:.3f} req/s")


def cmd_orchestrate(cfg: RunConfig, args) -> None:
    records, tm, _ = _labelled_trace(cfg)
    cmp = orchestrate.compare(records, tm, cfg.cluster, cfg.model, cfg.profile, cfg.span_seconds,
                              cfg.seed, args.headroom, args.reload_seconds)
    _write_json(cfg.out_dir / "timeline.json", cmp.plan.timeline.to_dict())
    _write_json(cfg.out_dir / "static_deployment.json", cmp.static_deployment.to_dict())
    rows = [("adaptive", cmp.adaptive.report), ("reload", cmp.reload.report),
            ("static", cmp.static.report)]
    sim.write_metrics(rows, cfg.out_dir / "metrics.csv")
    with open(cfg.out_dir / "forecasts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version", "span", "type", "predicted", "actual"])
        for span, pred in zip(cmp.plan.series.spans, cmp.plan.forecasts):
            for j, (p, a) in enumerate(zip(pred, span.counts)):
                w.writerow([SCHEMA_VERSION, span.span_index, j, _fmt(float(p)), a])
    for name, rep in rows:
        print(f"{name:9s} p99 {rep.p99:9.3f} s  avg {rep.avg:8.3f} s  throughput {rep.throughput:.3f} req/s")
    print(f"{len(cmp.plan.timeline.entries)} timeline entries, {cmp.plan.switches} deployment switches")


def cmd_synth(cfg: RunConfig, args) -> None:
    mix = synth.ACCEPTANCE
    if args.spans is not None:
        mix = dataclasses.replace(mix, spans=args.spans, flip_span=args.spans / 2)
    if args.rate is not None:
        mix = dataclasses.replace(mix, rate_per_min=args.rate, rate_by_share=None)
    records, _ = synth.mixed_shift_trace(mix, seed=cfg.seed, span_seconds=cfg.span_seconds)
    workload.write_trace(records, cfg.out_dir / "trace.jsonl")
    print(f"wrote {len(records)} records")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowserve", description=__doc__)
    ap.add_argument("--cluster", help="cluster spec JSON (default: packaged 2x4 cluster)")
    ap.add_argument("--model", help="model spec JSON (default: packaged model)")
    ap.add_argument("--profile", help="profile parameters JSON (default: packaged profile)")
    ap.add_argument("--trace", help="JSONL trace")
    ap.add_argument("--types", help="types.json from `fit`")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--span-seconds", type=float, default=60.0)
    ap.add_argument("--out-dir", default=".")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="cluster trace requests into workload types")
    p.add_argument("--k", type=int, default=workload.DEFAULT_K)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="one-step-ahead forecasts vs actual counts")
    p.add_argument("--window", type=int, default=workload.WINDOW)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("schedule", help="choose a deployment and assignment for one span")
    p.add_argument("--counts", help="comma-separated per-type counts (else taken from --trace)")
    p.add_argument("--span-index", type=int)
    p.add_argument("--exhaustive", action="store_true")
    p.add_argument("--max-iters", type=int, default=deploysearch.MAX_ITERS)
    p.add_argument("--stale-limit", type=int, default=deploysearch.STALE_LIMIT)
    p.add_argument("--search-log", help="write the search trace CSV here")
    p.add_argument("--dot", help="write the solved flow network as DOT here")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("switch-plan", help="greedy transfer plan between two deployments")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.set_defaults(func=cmd_switch_plan)

    p = sub.add_parser("simulate", help="replay the trace against a timeline or a fixed deployment")
    p.add_argument("--timeline")
    p.add_argument("--deployment")
    p.add_argument("--outcomes", action="store_true", help="also write per-request outcomes.csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("orchestrate", help="predict, schedule, switch per span and compare baselines")
    p.add_argument("--headroom", type=float, default=orchestrate.HEADROOM)
    p.add_argument("--reload-seconds", type=float, default=orchestrate.RELOAD_SECONDS)
    p.set_defaults(func=cmd_orchestrate)

    p = sub.add_parser("synth", help="write the synthetic mixed-shift trace")
    p.add_argument("--spans", type=int, help="number of spans (flip at the midpoint)")
    p.add_argument("--rate", type=float, help="flat arrival rate per minute")
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.func(cfg, args)
    except ModelTooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL_TOO_LARGE
    except TooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TOO_LARGE
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except FlowServeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
