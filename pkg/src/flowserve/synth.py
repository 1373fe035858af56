"""Synthetic traces with a workload mix that shifts over time."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import TraceRecord


@dataclass(frozen=True)
class MixShift:
    """Two request classes whose share flips smoothly around ``flip_span``."""
    spans: int = 30
    rate_per_min: float = 1200.0
    short: tuple[int, int] = (1024, 16)
    long: tuple[int, int] = (128, 1024)
    short_share_start: float = 0.20
    short_share_end: float = 0.95
    flip_span: float = 15.0
    flip_width: float = 1.0          # spans; sigmoid steepness
    jitter: float = 0.1              # relative sd of the length noise
    rate_by_share: tuple[float, float] | None = None   # (rate at start mix, rate at end mix)


def short_share(cfg: MixShift, t: float) -> float:
    w = 1.0 / (1.0 + math.exp(-(t - cfg.flip_span) / cfg.flip_width))
    return cfg.short_share_start + (cfg.short_share_end - cfg.short_share_start) * w


def mixed_shift_trace(cfg: MixShift = MixShift(), seed: int = 0,
                      span_seconds: float = 60.0) -> tuple[list[TraceRecord], list[int]]:
    """Poisson arrivals per span; returns the records and their true class (0 short, 1 long)."""
    rng = np.random.default_rng(seed)
    records, labels = [], []
    for s in range(cfg.spans):
        share = short_share(cfg, s + 0.5)
        rate = cfg.rate_per_min
        if cfg.rate_by_share is not None:
            a, b = cfg.rate_by_share
            frac = (share - cfg.short_share_start) / (cfg.short_share_end - cfg.short_share_start)
            rate = a + (b - a) * frac
        n = int(rng.poisson(rate * span_seconds / 60.0))
        offsets = np.sort(rng.uniform(0.0, span_seconds * 1000.0, n))
        kinds = (rng.uniform(size=n) >= share).astype(int)
        noise = rng.normal(1.0, cfg.jitter, size=(n, 2)).clip(0.5, 1.5)
        for off, kind, (a, b) in zip(offsets, kinds, noise):
            base = cfg.long if kind else cfg.short
            records.append(TraceRecord(int(s * span_seconds * 1000 + off),
                                       max(1, int(round(base[0] * a))), max(1, int(round(base[1] * b)))))
            labels.append(int(kind))
    return records, labels


# the shipped acceptance trace: long-heavy first, short-heavy after the flip,
# arrivals near 90% of what the adaptive 8-device setup sustains in replay
ACCEPTANCE = MixShift(spans=30, rate_per_min=1700.0, rate_by_share=(1780.0, 1680.0))
ACCEPTANCE_SEED = 0
