"""Correlation micro-benchmark on seeded, realistic tag streams."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from ..correlation import dual_pointer_correlate
from ..timetags import PS_PER_S


@dataclass(frozen=True)
class BenchResult:
    n_a: int
    n_b: int
    n_bins: int
    bin_width_ps: int
    trials: int
    mean_ms: float
    std_ms: float
    min_ms: float
    events_per_s: float

    def row(self) -> tuple:
        return (self.n_a, self.n_b, self.n_bins, self.bin_width_ps, self.trials,
                self.mean_ms, self.std_ms, self.min_ms, self.events_per_s)


BENCH_COLUMNS = ("n_a", "n_b", "n_bins", "bin_width_ps", "trials", "mean_ms", "std_ms", "min_ms", "events_per_s")


def bench_streams(n_a: int, n_b: int, seed: int = 0, span_s: float = 1.0,
                  overlap: float = 0.03, offset_ps: int = 123_456, jitter_ps: float = 64.0):
    """Two sorted streams over ``span_s``; a fraction of B echoes A with a fixed offset."""
    rng = np.random.default_rng(seed)
    span = int(span_s * PS_PER_S)
    ta = np.sort(rng.integers(0, span, n_a, dtype=np.int64))
    n_echo = min(int(round(overlap * n_b)), n_a)
    echo = ta[rng.choice(n_a, n_echo, replace=False)] if n_echo else np.empty(0, np.int64)
    echo = echo + offset_ps + np.rint(rng.normal(0.0, jitter_ps, n_echo)).astype(np.int64)
    noise = rng.integers(0, span, n_b - n_echo, dtype=np.int64)
    tb = np.sort(np.concatenate([echo, noise]))
    return ta, tb


def bench_correlator(n_a: int = 144_000, n_b: int = 133_000, n_bins: int = 20_000,
                     bin_width: int = 50, trials: int = 10, seed: int = 0) -> BenchResult:
    """Mean and std of correlation wall time over ``trials`` runs after one warm-up."""
    if n_a < 0 or n_b < 0 or trials < 1:
        raise ValueError("bench sizes must be >= 0 and trials >= 1")
    ta, tb = bench_streams(n_a, n_b, seed)
    dual_pointer_correlate(ta, tb, n_bins, bin_width)
    times = np.empty(trials)
    for i in range(trials):
        t0 = time.perf_counter_ns()
        dual_pointer_correlate(ta, tb, n_bins, bin_width)
        times[i] = (time.perf_counter_ns() - t0) * 1e-6
    mean = float(times.mean())
    rate = (n_a + n_b) / (mean * 1e-3) if mean > 0 else math.inf
    return BenchResult(n_a, n_b, n_bins, bin_width, trials, mean, float(times.std()),
                       float(times.min()), rate)


def scaling_ratios(base_a: int = 144_000, base_b: int = 133_000, factors=(1, 2, 4, 8),
                   trials: int = 10, seed: int = 0) -> tuple[list[BenchResult], list[float]]:
    """Benchmarks at scaled sizes and the time ratio between consecutive sizes."""
    res = [bench_correlator(base_a * f, base_b * f, trials=trials, seed=seed) for f in factors]
    ratios = [b.min_ms / a.min_ms for a, b in zip(res, res[1:])]
    return res, ratios
