"""Robust drift statistics and the long-run stability experiment."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from ..syncproto import BlockResult, SyncConfig, sync_block
from .scenario import ScenarioModel, iter_aligned_blocks, make_pps, true_offset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MadReport:
    n_total: int
    n_removed: int
    median: float
    mad: float
    k: float
    zero_mad: bool
    kept: np.ndarray

    @property
    def fraction(self) -> float:
        return self.n_removed / self.n_total


def mad_filter(series, k: float = 10.0) -> tuple[np.ndarray, MadReport]:
    """Drop samples further than k*MAD from the median.

    A zero MAD (more than half the samples identical) removes nothing and
    sets ``zero_mad``.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("mad_filter needs a non-empty series")
    med = float(np.median(x))
    mad = float(np.median(np.abs(x - med)))
    if mad == 0.0:
        keep = np.ones(x.size, dtype=bool)
    else:
        keep = ~(np.abs(x - med) > k * mad)
    report = MadReport(int(x.size), int(x.size - keep.sum()), med, mad, float(k), mad == 0.0, keep)
    return x[keep], report


def rms_std(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return math.nan, math.nan
    return float(np.sqrt(np.mean(x**2))), float(np.std(x))


STABILITY_COLUMNS = (
    "block_index", "t_start_ps", "rate_a_cps", "rate_b_cps", "coinc_cps", "mu_ps",
    "drift_ps", "sync_error_mean_ps", "sync_error_rms_ps", "kept",
)


@dataclass(frozen=True)
class StabilityReport:
    blocks: tuple[BlockResult, ...]
    drift: np.ndarray
    mad: MadReport
    drift_rms_ps: float
    drift_std_ps: float
    sync_error_rms_ps: float
    sync_block_rms_ps: float
    sync_block_std_ps: float
    rate_a_cps: tuple[float, float]
    rate_b_cps: tuple[float, float]
    coinc_cps: tuple[float, float]
    failed_blocks: int

    @property
    def outliers_removed(self) -> tuple[int, float]:
        return self.mad.n_removed, self.mad.fraction

    def rows(self, block_s: float) -> list[tuple]:
        ok = [b for b in self.blocks if b.ok]
        kept = dict(zip((b.index for b in ok), self.mad.kept.tolist()))
        out = []
        for b in self.blocks:
            out.append((
                b.index, b.t_start_ps, b.n_a / block_s, b.n_b / block_s, b.n_pairs / block_s,
                b.mu_ps, b.residual_ps, b.sync_error_mean_ps, b.sync_error_rms_ps,
                int(kept.get(b.index, False)),
            ))
        return out

    def summary(self) -> dict[str, float]:
        return {
            "blocks": float(len(self.blocks)),
            "failed_blocks": float(self.failed_blocks),
            "outliers_removed": float(self.mad.n_removed),
            "outlier_fraction": self.mad.fraction,
            "mad_ps": self.mad.mad,
            "drift_rms_ps": self.drift_rms_ps,
            "drift_std_ps": self.drift_std_ps,
            "sync_error_rms_ps": self.sync_error_rms_ps,
            "sync_block_rms_ps": self.sync_block_rms_ps,
            "sync_block_std_ps": self.sync_block_std_ps,
            "rate_a_cps": self.rate_a_cps[0],
            "rate_a_std_cps": self.rate_a_cps[1],
            "rate_b_cps": self.rate_b_cps[0],
            "rate_b_std_cps": self.rate_b_cps[1],
            "coinc_cps": self.coinc_cps[0],
            "coinc_std_cps": self.coinc_cps[1],
        }


def stability_run(model: ScenarioModel, sync: SyncConfig, k: float = 10.0) -> StabilityReport:
    """Stream the scenario block by block, synchronize, then MAD-filter the drift.

    The drift series is the per-block residual peak offset after correction.
    Because the simulator knows the true offsets, the mean correction error
    per block is reported alongside it.
    """
    pps_a, pps_b = make_pps(model)
    block_s = sync.block_s
    if block_s != int(block_s):
        raise ValueError("stability runs need an integer block duration")

    def truth(t):
        return true_offset(model, pps_a, pps_b, t)

    blocks: list[BlockResult] = []
    sq_sum, count = 0.0, 0
    prior = None
    cfg = replace(sync, on_block_error="skip", keep_coincidences=False)
    for idx, t0, a, b in iter_aligned_blocks(model, pps_a, pps_b, int(block_s)):
        rec, _, s, c = sync_block(a, b, idx, t0, cfg, truth, prior)
        if rec.ok:
            prior = rec.mu_ps
        blocks.append(rec)
        sq_sum += s
        count += c
    ok = [b for b in blocks if b.ok]
    if not ok:
        raise RuntimeError("stability run: every block failed")
    drift = np.array([b.residual_ps for b in ok])
    filtered, report = mad_filter(drift, k)
    d_rms, d_std = rms_std(filtered)
    err_means = np.array([b.sync_error_mean_ps for b in ok])
    e_rms, e_std = rms_std(err_means[report.kept])

    def rate(values):
        v = np.asarray(values, dtype=np.float64) / block_s
        return float(np.mean(v)), float(np.std(v))

    return StabilityReport(
        tuple(blocks), drift, report, d_rms, d_std,
        math.sqrt(sq_sum / count) if count else math.nan, e_rms, e_std,
        rate([b.n_a for b in ok]), rate([b.n_b for b in ok]), rate([b.n_pairs for b in ok]),
        len(blocks) - len(ok),
    )

