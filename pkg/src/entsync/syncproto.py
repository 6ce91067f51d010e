"""Two-stage synchronization: PPS temporal alignment, then sub-block correction.

Stage one rebases each party's local timestamps onto the GNSS second grid
using its own PPS edges. Stage two sifts coincidences, averages their
offsets per sub-block and interpolates those means to correct every event.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import NormalDist
from typing import Callable

import numpy as np

from .correlation import (
    DEFAULT_BIN_WIDTH_PS,
    DEFAULT_N_BINS,
    CoincidenceSet,
    GaussianFit,
    PeakNotFound,
    dual_pointer_correlate,
    fit_peak,
    sift_coincidences,
)
from .timetags import PS_PER_S, EventStream, ParameterError, PpsTrain

log = logging.getLogger(__name__)

Z_95 = 1.96
UNACHIEVABLE = math.inf

WINDOW_FACTORS = {"fwhm": 1.0, "wide": 1.2}


class SyncStageError(RuntimeError):
    """A pipeline stage failed; ``stage`` and ``block`` identify where."""

    def __init__(self, stage: str, block: int | None, cause: Exception):
        where = f"block {block}" if block is not None else "run"
        super().__init__(f"{stage} failed in {where}: {cause}")
        self.stage = stage
        self.block = block
        self.cause = cause


@dataclass(frozen=True)
class AlignedStream:
    """Events rebased onto the GNSS grid (ps since GNSS second 0)."""

    events: EventStream
    window_n: int
    first_second: int
    n_windows: int
    dropped_before: int = 0
    dropped_after: int = 0

    @property
    def timestamps(self) -> np.ndarray:
        return self.events.timestamps

    def __len__(self) -> int:
        return len(self.events)

    @property
    def span_ps(self) -> tuple[int, int]:
        start = self.first_second * PS_PER_S
        return start, start + self.n_windows * self.window_n * PS_PER_S


def align_times(
    t_local: np.ndarray, pps: PpsTrain, n: int
) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Vectorized PPS map. Returns (aligned, valid mask, n_before, n_after)."""
    t = np.asarray(t_local, dtype=np.int64)
    n = int(n)
    n_windows = (len(pps) - 1) // n
    if n_windows < 1:
        raise ParameterError(f"PPS train of {len(pps)} edges has no complete {n} s window")
    starts = pps.edges[: n_windows * n + 1 : n]
    w = np.searchsorted(starts, t, side="right") - 1
    before = w < 0
    after = w >= n_windows
    valid = ~(before | after)
    wv = w[valid]
    p0 = starts[wv]
    p1 = starts[wv + 1]
    span = n * PS_PER_S
    frac = (t[valid] - p0).astype(np.float64) / (p1 - p0).astype(np.float64)
    rel = np.minimum(np.rint(frac * span).astype(np.int64), span - 1)
    aligned = (pps.first_second + wv * n) * PS_PER_S + rel
    return aligned, valid, int(before.sum()), int(after.sum())


def pps_align(events: EventStream, pps: PpsTrain, n: int = 1) -> AlignedStream:
    """Rebase local timestamps to the PPS grid with n-second windows.

    Events before the first edge or in a trailing partial window are dropped
    and counted.
    """
    if int(n) < 1:
        raise ParameterError("alignment window n must be >= 1 s")
    aligned, valid, n_before, n_after = align_times(events.timestamps, pps, n)
    if n_before:
        log.warning("pps_align: dropped %d events before the first PPS edge", n_before)
    if n_after:
        log.info("pps_align: dropped %d events in the trailing partial window", n_after)
    kept = EventStream(
        aligned,
        None if events.tags is None else events.tags[valid],
        None if events.pair_id is None else events.pair_id[valid],
    )
    return AlignedStream(kept, int(n), pps.first_second, (len(pps) - 1) // int(n), n_before, n_after)


@dataclass(frozen=True)
class ErrorBudget:
    """Variance components in ps^2 (sigma2_ts is taken verbatim as a ratio)."""

    sigma2_sync_a: float = 0.0
    sigma2_sync_b: float = 0.0
    eps_prop2: float = 0.0
    sigma2_ppsta: float = 0.0
    sigma2_ts: float = 0.0
    sigma2_mu: float = 0.0
    sigma2_tsec: float = 0.0

    def __post_init__(self) -> None:
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            if not (v >= 0.0):
                raise ValueError(f"{name} must be >= 0, got {v!r}")

    def with_tsec(self, other: ErrorBudget) -> ErrorBudget:
        return replace(
            self, sigma2_ts=other.sigma2_ts, sigma2_mu=other.sigma2_mu, sigma2_tsec=other.sigma2_tsec
        )


def sync_variance(sigma_det: float, sigma_pps: float, window_span: float, t_frac: float) -> float:
    """Per-party alignment variance, [(sd^2 + sp^2)/n^2 + f^2*2*sp^2/n^2]*n."""
    n = float(window_span)
    return ((sigma_det**2 + sigma_pps**2) / n**2 + t_frac**2 * 2.0 * sigma_pps**2 / n**2) * n


def ppsta_variance(
    sigma_det: float,
    sigma_pps_a: float,
    sigma_pps_b: float,
    window_span: float,
    t_frac: float,
    eps_prop: float = 0.0,
) -> ErrorBudget:
    """Closed-form PPS-TA residual variance; window_span in seconds, eps_prop in ps."""
    if not window_span > 0:
        raise ParameterError("window_span must be > 0")
    a = sync_variance(sigma_det, sigma_pps_a, window_span, t_frac)
    b = sync_variance(sigma_det, sigma_pps_b, window_span, t_frac)
    e2 = float(eps_prop) ** 2
    return ErrorBudget(sigma2_sync_a=a, sigma2_sync_b=b, eps_prop2=e2, sigma2_ppsta=a + b + e2)


def shared_edge_variance(sigma_det: float, sigma_pps: float, t_frac: float) -> float:
    """Exact variance of one aligned timestamp when both window edges jitter.

    The start edge enters numerator and denominator alike, so the errors are
    correlated; to first order the result does not depend on the window span.
    """
    f = float(t_frac)
    return sigma_det**2 + ((1.0 - f) ** 2 + f**2) * sigma_pps**2


@dataclass(frozen=True)
class HistConfig:
    n_bins: int = DEFAULT_N_BINS
    bin_width_ps: int = DEFAULT_BIN_WIDTH_PS
    offset_bins: int = 0
    max_search_ps: float = 20e6


def _scan_offsets(base: int, n_bins: int, bin_width: int, max_search_ps: float):
    yield base
    step = 1
    while step * n_bins * bin_width <= max_search_ps:
        yield base + step * n_bins
        yield base - step * n_bins
        step += 1


def coarse_offset(alignedA, alignedB, hist_config: HistConfig = HistConfig(),
                  prior_ps: float | None = None) -> GaussianFit:
    """Greedy correlation plus Gaussian fit; ``mean_ps`` is the mean offset.

    When no peak shows inside the default window, neighboring windows of the
    same geometry are scanned out to ``max_search_ps``. Once found, the
    histogram is recentred on the peak and refit.
    """
    ta = getattr(alignedA, "timestamps", alignedA)
    tb = getattr(alignedB, "timestamps", alignedB)
    if len(ta) == 0 or len(tb) == 0:
        raise PeakNotFound("empty stream")
    hc = hist_config
    base = hc.offset_bins if prior_ps is None else int(round(prior_ps / hc.bin_width_ps))
    for off in _scan_offsets(base, hc.n_bins, hc.bin_width_ps, hc.max_search_ps):
        hist = dual_pointer_correlate(ta, tb, hc.n_bins, hc.bin_width_ps, off, check=False)
        try:
            fit = fit_peak(hist)
        except PeakNotFound:
            continue
        centre = int(round(fit.mean_ps / hc.bin_width_ps))
        if centre != off:
            hist = dual_pointer_correlate(ta, tb, hc.n_bins, hc.bin_width_ps, centre, check=False)
            fit = fit_peak(hist)
        return fit
    raise PeakNotFound(f"no coincidence peak within +-{hc.max_search_ps:g} ps")


@dataclass(frozen=True)
class SubBlockPartition:
    """Sub-block statistics on absolute (aligned) time; empty blocks hold NaN."""

    boundaries: np.ndarray
    means: np.ndarray
    counts: np.ndarray
    variances: np.ndarray
    sigma2_ppsta: float
    merged: tuple[tuple[int, int], ...] = ()
    knot_position: str = "center"

    def __post_init__(self) -> None:
        b = np.asarray(self.boundaries, dtype=np.float64)
        if b.size < 2 or np.any(np.diff(b) <= 0):
            raise ValueError("boundaries must be strictly increasing")

    @property
    def S(self) -> int:
        return int(self.counts.size)

    @property
    def block_span(self) -> np.ndarray:
        return np.diff(self.boundaries)

    @property
    def valid(self) -> np.ndarray:
        return self.counts > 0

    @property
    def knots(self) -> np.ndarray:
        if self.knot_position == "end":
            return self.boundaries[1:]
        return 0.5 * (self.boundaries[:-1] + self.boundaries[1:])


def _pooled_variance(deltas: np.ndarray, idx: np.ndarray, S: int) -> float:
    counts = np.bincount(idx, minlength=S)
    sums = np.bincount(idx, weights=deltas, minlength=S)
    means = np.divide(sums, counts, out=np.zeros(S), where=counts > 0)
    dof = deltas.size - int(np.count_nonzero(counts))
    if dof <= 0:
        return float(np.var(deltas)) if deltas.size > 1 else 0.0
    return float(((deltas - means[idx]) ** 2).sum() / dof)


def partition_and_estimate(
    coincidences: CoincidenceSet,
    S: int,
    span: float,
    t0: float = 0.0,
    sigma2_ppsta: float | None = None,
    min_pairs: float = 0.0,
    knot_position: str = "center",
) -> SubBlockPartition:
    """Split [t0, t0 + span) into S equal sub-blocks keyed on B-side time.

    ``sigma2_ppsta`` defaults to the pooled within-block variance of the
    deltas. Sub-blocks with fewer than ``min_pairs`` pairs are merged into
    a neighbor; with ``min_pairs = 0`` empty blocks are kept and flagged.
    """
    if int(S) < 1:
        raise ParameterError("S must be >= 1")
    if not span > 0:
        raise ParameterError("span must be > 0")
    S = int(S)
    t = coincidences.t_b_ps.astype(np.float64)
    d = coincidences.delta_ps.astype(np.float64)
    inside = (t >= t0) & (t < t0 + span)
    t, d = t[inside], d[inside]
    idx = np.clip(np.floor((t - t0) * S / span).astype(np.int64), 0, S - 1)
    if sigma2_ppsta is None:
        sigma2_ppsta = _pooled_variance(d, idx, S)
    counts = np.bincount(idx, minlength=S)
    sums = np.bincount(idx, weights=d, minlength=S)
    bounds = t0 + np.arange(S + 1, dtype=np.float64) * (span / S)

    groups: list[list[int]] = []
    if min_pairs > 0:
        current: list[int] = []
        acc = 0
        for s in range(S):
            current.append(s)
            acc += int(counts[s])
            if acc >= min_pairs:
                groups.append(current)
                current, acc = [], 0
        if current:
            if groups:
                groups[-1].extend(current)
            else:
                groups.append(current)
    else:
        groups = [[s] for s in range(S)]

    merged = tuple((g[0], g[-1]) for g in groups if len(g) > 1)
    if merged:
        log.info("partition: merged sub-blocks %s below %.2f pairs", merged, min_pairs)
    g_counts = np.array([int(counts[g].sum()) for g in groups], dtype=np.int64)
    g_sums = np.array([float(sums[g].sum()) for g in groups])
    g_bounds = np.array([bounds[g[0]] for g in groups] + [bounds[-1]])
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(g_counts > 0, g_sums / np.maximum(g_counts, 1), np.nan)
        variances = np.where(g_counts > 0, sigma2_ppsta / np.maximum(g_counts, 1), np.nan)
    return SubBlockPartition(
        g_bounds, means, g_counts, variances, float(sigma2_ppsta), merged, knot_position
    )


def _valid_knots(partition: SubBlockPartition) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    v = partition.valid
    if not np.any(v):
        raise ValueError("partition has no non-empty sub-block")
    return partition.knots[v], partition.means[v], partition.variances[v]


def tsec_interpolate(t_b, partition: SubBlockPartition):
    """Piecewise-linear offset at t_b; returns (value, outside-span mask)."""
    x, mu, _ = _valid_knots(partition)
    t = np.asarray(t_b, dtype=np.float64)
    value = np.interp(t, x, mu)
    outside = (t < partition.boundaries[0]) | (t >= partition.boundaries[-1])
    return value, outside


def tsec_correct(t_b, partition: SubBlockPartition):
    """Interpolated mean offset at t_b (subtract from the raw delta).

    Between the first and last populated knots this is the linear rule
    ``alpha*(mu_s - mu_{s-1}) + mu_{s-1}``; beyond them the nearest mean is
    held. Times outside the partition span are clamped and logged.
    """
    value, outside = tsec_interpolate(t_b, partition)
    n_out = int(np.count_nonzero(outside))
    if n_out:
        log.warning("tsec_correct: %d timestamps outside the partition span were clamped", n_out)
    return float(value) if np.ndim(value) == 0 else value


def tsec_alpha(t_b, partition: SubBlockPartition):
    """Interpolation weight and bracketing variances for each t_b.

    Returns (alpha, sigma2_prev, sigma2_next); outside the first/last knot
    alpha is 0 against the held block.
    """
    x, _, var = _valid_knots(partition)
    t = np.atleast_1d(np.asarray(t_b, dtype=np.float64))
    if x.size == 1:
        z = np.zeros(t.size)
        return z, np.full(t.size, var[0]), np.full(t.size, var[0])
    seg = np.clip(np.searchsorted(x, t, side="right") - 1, 0, x.size - 2)
    alpha = np.clip((t - x[seg]) / (x[seg + 1] - x[seg]), 0.0, 1.0)
    prev = var[seg].copy()
    nxt = var[seg + 1].copy()
    after = t >= x[-1]
    prev[after] = var[-1]
    alpha[after] = 0.0
    return alpha, prev, nxt


def tsec_variance(
    alpha: float,
    sigma2_mu_prev: float,
    sigma2_mu_next: float,
    sigma_tb: float,
    delta_tau_s: float,
) -> ErrorBudget:
    """TSEC residual: (sigma_tB/dtau)^2 plus the interpolated mean variance."""
    if not delta_tau_s > 0:
        raise ParameterError("delta_tau_s must be > 0")
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError("alpha must lie in [0, 1)")
    s2_ts = (sigma_tb / delta_tau_s) ** 2
    s2_mu = (1.0 - alpha) ** 2 * sigma2_mu_prev + alpha**2 * sigma2_mu_next
    return ErrorBudget(sigma2_ts=s2_ts, sigma2_mu=s2_mu, sigma2_tsec=s2_ts + s2_mu)


def min_subblocks(T_n_ms: float, gamma: float, delta_eta: float) -> float:
    """Smallest sub-block count keeping the chord error of a parabola below delta_eta."""
    if not delta_eta > 0:
        raise ParameterError("delta_eta must be > 0")
    return T_n_ms * math.sqrt(abs(gamma) / (8.0 * delta_eta))


def linearization_error(gamma: float, delta_tau_ms: float) -> float:
    """Max deviation (ps) of a parabola from its chord over one sub-block."""
    return abs(gamma) * delta_tau_ms**2 / 8.0


def default_delta_eta(sigma_tsec_target: float) -> float:
    return sigma_tsec_target / math.sqrt(3.0)


def delta_eta_guard(delta_eta: float, sigma_noise: float) -> bool:
    """True when the tolerance clears three noise sigmas."""
    return 3.0 * sigma_noise < delta_eta


def min_pairs_vs_ppsta(sigma2_ppsta: float, sigma_tb: float, delta_tau_s: float) -> float:
    """Pairs per sub-block for TSEC to beat PPS-TA; ``UNACHIEVABLE`` (inf) if it cannot."""
    r = (sigma_tb / delta_tau_s) ** 2
    if not sigma2_ppsta > r:
        return UNACHIEVABLE
    return sigma2_ppsta / (2.0 * (sigma2_ppsta - r))


def min_pairs_cramer_rao(sigma_tsec: float, tolerance: float, confidence: float = 0.95) -> float:
    """(z*sigma/tolerance)^2 with z = 1.96 at 95 %."""
    if not tolerance > 0:
        raise ParameterError("tolerance must be > 0")
    z = Z_95 if confidence == 0.95 else NormalDist().inv_cdf(0.5 + confidence / 2.0)
    return (z * sigma_tsec / tolerance) ** 2


@dataclass(frozen=True)
class SyncConfig:
    n_window_s: int = 1
    block_s: float = 1.0
    subblocks: int | None = 20
    window_policy: str = "fwhm"
    sigma_tsec_target_ps: float = 150.0
    drift_accel_ps_per_ms2: float = 0.0
    tsec_enabled: bool = True
    refine_passes: int = 1
    coarse_window_fwhm: float = 3.0
    merge_sparse: bool = True
    knot_position: str = "center"
    hist: HistConfig = field(default_factory=HistConfig)
    sigma_det_ps: float = 45.0 * math.sqrt(2.0)
    pps_sigma_a_ps: float = 1000.0
    pps_sigma_b_ps: float = 1000.0
    eps_prop_ps: float = 0.0
    on_block_error: str = "raise"
    keep_coincidences: bool = True

    def __post_init__(self) -> None:
        if self.window_policy not in WINDOW_FACTORS:
            raise ParameterError(f"window_policy must be one of {sorted(WINDOW_FACTORS)}")
        if self.on_block_error not in ("raise", "skip"):
            raise ParameterError("on_block_error must be 'raise' or 'skip'")
        if self.knot_position not in ("center", "end"):
            raise ParameterError("knot_position must be 'center' or 'end'")
        if self.subblocks is not None and int(self.subblocks) < 1:
            raise ParameterError("subblocks must be >= 1")
        if not self.block_s > 0:
            raise ParameterError("block_s must be > 0")

    @property
    def delta_eta_ps(self) -> float:
        return default_delta_eta(self.sigma_tsec_target_ps)

    def resolved_subblocks(self) -> int:
        if self.subblocks is not None:
            return int(self.subblocks)
        s_min = min_subblocks(self.block_s * 1e3, self.drift_accel_ps_per_ms2, self.delta_eta_ps)
        return max(1, math.ceil(s_min))


@dataclass(frozen=True)
class BlockResult:
    index: int
    t_start_ps: int
    mu_ps: float
    n_pairs: int
    sigma_mu_ps: float
    residual_ps: float
    fwhm_ps: float = math.nan
    tau_w_ps: float = math.nan
    n_subblocks: int = 0
    n_a: int = 0
    n_b: int = 0
    sync_error_mean_ps: float = math.nan
    sync_error_rms_ps: float = math.nan
    failed_stage: str = ""

    @property
    def ok(self) -> bool:
        return not self.failed_stage


CSV_COLUMNS = (
    "block_index", "t_start_ps", "mu_ps", "n_pairs", "sigma_mu_ps", "residual_ps",
    "sync_error_rms_ps",
)


def _fmt(x: float) -> str:
    return "nan" if not math.isfinite(x) else repr(round(float(x), 6))


@dataclass
class SyncResult:
    blocks: list[BlockResult]
    budget: ErrorBudget
    coincidences: CoincidenceSet | None = None
    dropped: dict[str, int] = field(default_factory=dict)
    sync_sq_sum: float = 0.0
    sync_count: int = 0

    @property
    def residuals(self) -> np.ndarray:
        return np.array([b.residual_ps for b in self.blocks if b.ok])

    @property
    def residual_rms_ps(self) -> float:
        r = self.residuals
        return float(np.sqrt(np.mean(r**2))) if r.size else math.nan

    @property
    def residual_std_ps(self) -> float:
        r = self.residuals
        return float(np.std(r)) if r.size else math.nan

    @property
    def sync_error_rms_ps(self) -> float:
        """Pair-level RMS of (applied correction - true offset), when truth was given."""
        if self.sync_count == 0:
            return math.nan
        return math.sqrt(self.sync_sq_sum / self.sync_count)

    @property
    def block_error_means(self) -> np.ndarray:
        return np.array([b.sync_error_mean_ps for b in self.blocks if b.ok])

    def summary(self) -> dict[str, float]:
        out = {
            "blocks": float(len(self.blocks)),
            "failed_blocks": float(sum(not b.ok for b in self.blocks)),
            "residual_rms_ps": self.residual_rms_ps,
            "residual_std_ps": self.residual_std_ps,
            "sync_error_rms_ps": self.sync_error_rms_ps,
            "pairs": float(sum(b.n_pairs for b in self.blocks)),
        }
        for k, v in sorted(self.dropped.items()):
            out[f"dropped_{k}"] = float(v)
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for b in self.blocks:
                w.writerow([
                    b.index, b.t_start_ps, _fmt(b.mu_ps), b.n_pairs, _fmt(b.sigma_mu_ps),
                    _fmt(b.residual_ps), _fmt(b.sync_error_rms_ps),
                ])
            fh.write("\n")
            w.writerow(["summary", "value"])
            for k, v in self.summary().items():
                w.writerow([k, _fmt(v)])


TruthFn = Callable[[np.ndarray], np.ndarray]


def _corrected_peak(a_t: np.ndarray, b_t: np.ndarray, est: np.ndarray, hc: HistConfig) -> GaussianFit:
    shifted = np.maximum.accumulate(b_t + np.rint(est).astype(np.int64))
    hist = dual_pointer_correlate(a_t, shifted, hc.n_bins, hc.bin_width_ps, 0, check=False)
    return fit_peak(hist)


def sync_block(
    a: EventStream,
    b: EventStream,
    index: int,
    t0: int,
    config: SyncConfig,
    truth: TruthFn | None = None,
    prior_ps: float | None = None,
) -> tuple[BlockResult, CoincidenceSet, float, int]:
    """Process one data block of aligned events.

    Returns the block record, its final coincidences and the running sum of
    squared truth-referenced errors with its count.
    """
    span = float(config.block_s * PS_PER_S)
    a_t, b_t = a.timestamps, b.timestamps
    stage = "coarse_offset"
    try:
        coarse = coarse_offset(a_t, b_t, config.hist, prior_ps)
        mu = coarse.mean_ps
        factor = WINDOW_FACTORS[config.window_policy]
        S = config.resolved_subblocks()
        if config.tsec_enabled:
            stage = "sift_coincidences"
            wide = max(config.coarse_window_fwhm * coarse.fwhm_ps, 2.0 * config.hist.bin_width_ps)
            pairs = sift_coincidences(a_t, b_t, mu, wide)
            stage = "partition_and_estimate"
            part = partition_and_estimate(pairs, S, span, t0, knot_position=config.knot_position)
            stage = "tsec_correct"
            est = tsec_interpolate(b_t, part)[0]
            for _ in range(config.refine_passes):
                peak = _corrected_peak(a_t, b_t, est, config.hist)
                pairs = sift_coincidences(a_t, b_t, est, factor * peak.fwhm_ps)
                min_pairs = 0.0
                if config.merge_sparse:
                    min_pairs = min_pairs_cramer_rao(peak.sigma_ps, config.delta_eta_ps)
                stage = "partition_and_estimate"
                part = partition_and_estimate(
                    pairs, S, span, t0, min_pairs=min_pairs, knot_position=config.knot_position
                )
                stage = "tsec_correct"
                est = tsec_interpolate(b_t, part)[0]
        else:
            part = None
            est = np.full(b_t.size, mu)
        stage = "residual"
        peak = _corrected_peak(a_t, b_t, est, config.hist)
        tau_w = factor * peak.fwhm_ps
        final = sift_coincidences(a_t, b_t, est, tau_w)
    except (PeakNotFound, ValueError) as exc:
        if config.on_block_error == "raise":
            raise SyncStageError(stage, index, exc) from exc
        log.warning("block %d skipped: %s failed (%s)", index, stage, exc)
        rec = BlockResult(index, int(t0), math.nan, 0, math.nan, math.nan,
                          n_a=len(a), n_b=len(b), failed_stage=stage)
        return rec, CoincidenceSet.empty(math.nan), 0.0, 0

    n_pairs = len(final)
    if part is not None and n_pairs:
        alpha, prev, nxt = tsec_alpha(final.t_b_ps, part)
        s2 = (1.0 - alpha) ** 2 * prev + alpha**2 * nxt
        sigma_mu = float(np.sqrt(np.mean(s2)))
        n_sub = part.S
    else:
        sigma_mu = math.sqrt(coarse.sigma_ps**2 / max(n_pairs, 1))
        n_sub = 1

    err_mean = err_rms = math.nan
    sq_sum, count = 0.0, 0
    if truth is not None and n_pairs:
        err = final.reference_ps - truth(final.t_b_ps)
        err_mean = float(np.mean(err))
        sq_sum = float(np.sum(err**2))
        count = int(err.size)
        err_rms = math.sqrt(sq_sum / count)

    rec = BlockResult(
        index, int(t0), float(mu), n_pairs, sigma_mu, float(peak.mean_ps), float(peak.fwhm_ps),
        float(tau_w), n_sub, len(a), len(b), err_mean, err_rms,
    )
    return rec, final, sq_sum, count


def _concat_coincidences(sets: list[CoincidenceSet], offsets_a: list[int], offsets_b: list[int]):
    if not sets:
        return None
    return CoincidenceSet(
        np.concatenate([s.idx_a + oa for s, oa in zip(sets, offsets_a)]),
        np.concatenate([s.idx_b + ob for s, ob in zip(sets, offsets_b)]),
        np.concatenate([s.delta_ps for s in sets]),
        np.concatenate([s.t_b_ps for s in sets]),
        np.concatenate([s.reference_ps for s in sets]),
        float(np.nanmax([s.tau_w_ps for s in sets] or [math.nan])) if sets else math.nan,
    )


def model_budget(config: SyncConfig, pairs_per_subblock: float) -> ErrorBudget:
    """Closed-form budget at mid-window / mid-sub-block for a given pair count."""
    ppsta = ppsta_variance(
        config.sigma_det_ps, config.pps_sigma_a_ps, config.pps_sigma_b_ps,
        config.n_window_s, 0.5, config.eps_prop_ps,
    )
    if not config.tsec_enabled or pairs_per_subblock <= 0:
        return ppsta
    s2 = ppsta.sigma2_ppsta / pairs_per_subblock
    dtau = config.block_s * PS_PER_S / config.resolved_subblocks()
    return ppsta.with_tsec(tsec_variance(0.5, s2, s2, config.sigma_det_ps, dtau))


def run_two_stage(
    streamA: EventStream,
    streamB: EventStream,
    ppsA: PpsTrain,
    ppsB: PpsTrain,
    config: SyncConfig = SyncConfig(),
    truth: TruthFn | None = None,
) -> SyncResult:
    """Align both streams and synchronize them block by block."""
    try:
        A = pps_align(streamA, ppsA, config.n_window_s)
        B = pps_align(streamB, ppsB, config.n_window_s)
    except (ValueError, ParameterError) as exc:
        raise SyncStageError("pps_align", None, exc) from exc
    start = max(A.span_ps[0], B.span_ps[0])
    stop = min(A.span_ps[1], B.span_ps[1])
    block = int(round(config.block_s * PS_PER_S))
    n_blocks = max(0, (stop - start) // block)

    blocks: list[BlockResult] = []
    sets: list[CoincidenceSet] = []
    off_a: list[int] = []
    off_b: list[int] = []
    sq_sum, count = 0.0, 0
    prior = None
    for k in range(n_blocks):
        t0 = start + k * block
        ia = np.searchsorted(A.timestamps, [t0, t0 + block])
        ib = np.searchsorted(B.timestamps, [t0, t0 + block])
        a = A.events.window(t0, t0 + block)
        b = B.events.window(t0, t0 + block)
        rec, pairs, s, c = sync_block(a, b, k, t0, config, truth, prior)
        if rec.ok:
            prior = rec.mu_ps
        blocks.append(rec)
        sq_sum += s
        count += c
        if config.keep_coincidences:
            sets.append(pairs)
            off_a.append(int(ia[0]))
            off_b.append(int(ib[0]))

    ok = [b for b in blocks if b.ok]
    if blocks and not ok:
        raise SyncStageError(blocks[0].failed_stage, None, RuntimeError("every block failed"))
    per_sub = float(np.mean([b.n_pairs / max(b.n_subblocks, 1) for b in ok])) if ok else 0.0
    dropped = {
        "before_first_pps_a": A.dropped_before,
        "before_first_pps_b": B.dropped_before,
        "trailing_window_a": A.dropped_after,
        "trailing_window_b": B.dropped_after,
        "failed_blocks": len(blocks) - len(ok),
    }
    return SyncResult(
        blocks,
        model_budget(config, per_sub),
        _concat_coincidences(sets, off_a, off_b) if config.keep_coincidences else None,
        dropped,
        sq_sum,
        count,
    )
