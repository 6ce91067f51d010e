"""Cross-correlation of two timestamp streams.

The greedy dual-pointer correlator is the production path; the all-pairs
sweep is the reference g2 estimator. Both share the binning rule
``k = floor(tA/dt) - floor(tB/dt) - offset``.
"""

from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit
from scipy.optimize import least_squares

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

DEFAULT_N_BINS = 20_000
DEFAULT_BIN_WIDTH_PS = 50

_HIST_MAGIC = b"ECHB"
_HIST_HEADER = struct.Struct("<4sQqq")


class PreconditionError(ValueError):
    """Input streams violate a correlator precondition."""


class PeakNotFound(RuntimeError):
    """The histogram has no dominant coincidence peak."""


def _times(stream) -> np.ndarray:
    ts = np.ascontiguousarray(getattr(stream, "timestamps", stream), dtype=np.int64)
    if ts.ndim != 1:
        raise PreconditionError("timestamps must be one-dimensional")
    return ts


def _check_sorted(ts: np.ndarray, name: str) -> None:
    if ts.size > 1 and np.any(ts[1:] < ts[:-1]):
        raise PreconditionError(f"stream {name} is not sorted")


def _check_geometry(n_bins: int, bin_width: int) -> None:
    if int(n_bins) < 1:
        raise PreconditionError("n_bins must be >= 1")
    if int(bin_width) < 1:
        raise PreconditionError("bin_width must be >= 1 ps")


@njit(cache=True, nogil=True)
def _greedy_kernel(ta, tb, n_bins, dt, offset, hist):
    lower = -(n_bins // 2)
    upper = n_bins - n_bins // 2
    na = ta.size
    nb = tb.size
    i = 0
    j = 0
    iters = 0
    while i < na and j < nb:
        k = ta[i] // dt - tb[j] // dt - offset
        iters += 1
        if k < lower:
            i += 1
        elif k >= upper:
            j += 1
        else:
            hist[k - lower] += 1
            i += 1
            j += 1
    return iters


@njit(cache=True, nogil=True)
def _all_pairs_kernel(ta, tb, n_bins, dt, offset, hist):
    lower = -(n_bins // 2)
    upper = n_bins - n_bins // 2
    na = ta.size
    start = 0
    for j in range(tb.size):
        bj = tb[j] // dt + offset
        while start < na and ta[start] // dt - bj < lower:
            start += 1
        i = start
        while i < na:
            k = ta[i] // dt - bj
            if k >= upper:
                break
            hist[k - lower] += 1
            i += 1


@njit(cache=True, nogil=True)
def _sift_kernel(ta, tb, ref, half, out_i, out_j):
    na = ta.size
    nb = tb.size
    i = 0
    j = 0
    n = 0
    while i < na and j < nb:
        d = float(ta[i] - tb[j]) - ref[j]
        if d < -half:
            i += 1
        elif d > half:
            j += 1
        else:
            out_i[n] = i
            out_j[n] = j
            n += 1
            i += 1
            j += 1
    return n


@dataclass(frozen=True)
class CorrelationHistogram:
    """Raw coincidence counts; bin b holds k = L + b, i.e. delays [(L+b)dt, (L+b+1)dt)."""

    counts: np.ndarray
    bin_width_ps: int
    offset_bins: int = 0

    def __post_init__(self) -> None:
        c = np.ascontiguousarray(self.counts, dtype=np.int64)
        if c.ndim != 1 or c.size < 1:
            raise ValueError("counts must be a non-empty 1-D array")
        if np.any(c < 0):
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def n_bins(self) -> int:
        return int(self.counts.size)

    @property
    def lower(self) -> int:
        return -(self.n_bins // 2)

    @property
    def upper(self) -> int:
        return self.n_bins - self.n_bins // 2

    @property
    def k(self) -> np.ndarray:
        return np.arange(self.lower, self.upper, dtype=np.int64)

    @property
    def delays_ps(self) -> np.ndarray:
        """Lower bin edge on the uncompensated delay axis, (k + offset)*dt."""
        return (self.k + self.offset_bins) * self.bin_width_ps

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: CorrelationHistogram) -> CorrelationHistogram:
        if (self.n_bins, self.bin_width_ps, self.offset_bins) != (
            other.n_bins, other.bin_width_ps, other.offset_bins
        ):
            raise ValueError("cannot merge histograms with different geometry")
        return CorrelationHistogram(self.counts + other.counts, self.bin_width_ps, self.offset_bins)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_index", "delay_ps", "count"])
            for row in zip(range(self.n_bins), self.delays_ps.tolist(), self.counts.tolist()):
                w.writerow(row)

    @classmethod
    def from_csv(cls, path: str | Path, bin_width_ps: int | None = None) -> CorrelationHistogram:
        """Read a histogram; the bin width is inferred unless the file has one zero-delay bin."""
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        counts = np.array([int(r["count"]) for r in rows], dtype=np.int64)
        delays = np.array([int(r["delay_ps"]) for r in rows], dtype=np.int64)
        lower = -(counts.size // 2)
        if bin_width_ps is not None:
            width = int(bin_width_ps)
        elif counts.size > 1:
            width = int(delays[1] - delays[0])
        elif delays[0] != 0:
            width = abs(int(delays[0]))
        else:
            raise ValueError("single zero-delay bin: pass bin_width_ps explicitly")
        offset = int(delays[0] // width) - lower
        return cls(counts, width, offset)

    def to_bytes(self) -> bytes:
        head = _HIST_HEADER.pack(_HIST_MAGIC, self.n_bins, self.bin_width_ps, self.offset_bins)
        return head + self.counts.astype("<i8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> CorrelationHistogram:
        magic, n, width, offset = _HIST_HEADER.unpack_from(data, 0)
        if magic != _HIST_MAGIC:
            raise ValueError("not a correlation histogram")
        counts = np.frombuffer(data, dtype="<i8", count=n, offset=_HIST_HEADER.size)
        return cls(counts.astype(np.int64), int(width), int(offset))


def dual_pointer_correlate(
    tA,
    tB,
    n_bins: int = DEFAULT_N_BINS,
    bin_width: int = DEFAULT_BIN_WIDTH_PS,
    offset_bins: int = 0,
    check: bool = True,
) -> CorrelationHistogram:
    """Greedy single-pass correlation histogram (each event used at most once)."""
    hist, _ = _dual_pointer(tA, tB, n_bins, bin_width, offset_bins, check)
    return hist


def _dual_pointer(tA, tB, n_bins, bin_width, offset_bins, check=True):
    _check_geometry(n_bins, bin_width)
    ta, tb = _times(tA), _times(tB)
    if check:
        _check_sorted(ta, "A")
        _check_sorted(tb, "B")
    hist = np.zeros(int(n_bins), dtype=np.int64)
    iters = _greedy_kernel(ta, tb, np.int64(n_bins), np.int64(bin_width), np.int64(offset_bins), hist)
    return CorrelationHistogram(hist, int(bin_width), int(offset_bins)), int(iters)


def all_pairs_correlate(
    tA,
    tB,
    n_bins: int = DEFAULT_N_BINS,
    bin_width: int = DEFAULT_BIN_WIDTH_PS,
    offset_bins: int = 0,
) -> CorrelationHistogram:
    """Count every (i, j) pair whose binned delay lands in the window."""
    _check_geometry(n_bins, bin_width)
    ta, tb = _times(tA), _times(tB)
    _check_sorted(ta, "A")
    _check_sorted(tb, "B")
    hist = np.zeros(int(n_bins), dtype=np.int64)
    _all_pairs_kernel(ta, tb, np.int64(n_bins), np.int64(bin_width), np.int64(offset_bins), hist)
    return CorrelationHistogram(hist, int(bin_width), int(offset_bins))


def _split_points(ta: np.ndarray, tb: np.ndarray, reach: int, n_parts: int) -> list[int]:
    """Times T where no A/B pair straddling T can fall inside the window."""
    union = np.sort(np.concatenate([ta, tb]), kind="stable")
    if union.size < 2 or n_parts < 2:
        return []
    gaps = np.flatnonzero(np.diff(union) >= reach)
    if gaps.size == 0:
        return []
    targets = (np.arange(1, n_parts) * union.size) // n_parts
    pos = np.clip(np.searchsorted(gaps, targets), 0, gaps.size - 1)
    chosen = sorted({int(union[gaps[p] + 1]) for p in pos})
    return chosen


def dual_pointer_correlate_parallel(
    tA,
    tB,
    n_bins: int = DEFAULT_N_BINS,
    bin_width: int = DEFAULT_BIN_WIDTH_PS,
    offset_bins: int = 0,
    n_parts: int = 4,
    workers: int | None = None,
) -> CorrelationHistogram:
    """Time-partitioned greedy correlation, bit-identical to the serial pass.

    Partitions are cut only inside gaps of the merged stream that are wider
    than the largest delay the window can accept. Across such a cut the
    serial algorithm can only advance one pointer without touching the
    histogram, so per-part histograms sum exactly to the serial one.
    """
    _check_geometry(n_bins, bin_width)
    ta, tb = _times(tA), _times(tB)
    _check_sorted(ta, "A")
    _check_sorted(tb, "B")
    span_bins = max(n_bins // 2, n_bins - n_bins // 2) + abs(int(offset_bins)) + 1
    reach = span_bins * int(bin_width)
    cuts = _split_points(ta, tb, reach, n_parts)
    bounds_a = [0] + [int(np.searchsorted(ta, c)) for c in cuts] + [ta.size]
    bounds_b = [0] + [int(np.searchsorted(tb, c)) for c in cuts] + [tb.size]
    parts = [
        (ta[bounds_a[p]:bounds_a[p + 1]], tb[bounds_b[p]:bounds_b[p + 1]])
        for p in range(len(bounds_a) - 1)
    ]

    def run(part):
        return dual_pointer_correlate(part[0], part[1], n_bins, bin_width, offset_bins, check=False)

    with ThreadPoolExecutor(max_workers=workers or len(parts)) as pool:
        results = list(pool.map(run, parts))
    total = results[0]
    for h in results[1:]:
        total = total + h
    return total


@dataclass(frozen=True)
class GaussianFit:
    mean_ps: float
    sigma_ps: float
    amplitude: float
    baseline: float
    fwhm_ps: float
    n_counts: int = 0
    fitted: bool = True


def _gauss_residuals(p, x, y, w):
    a, mu, s, b = p
    z = (x - mu) / s
    return (b + a * np.exp(-0.5 * z * z) - y) * w


def _gauss_jac(p, x, y, w):
    a, mu, s, b = p
    z = (x - mu) / s
    e = np.exp(-0.5 * z * z)
    jac = np.empty((x.size, 4))
    jac[:, 0] = e
    jac[:, 1] = a * e * z / s
    jac[:, 2] = a * e * z * z / s
    jac[:, 3] = 1.0
    return jac * w[:, None]


def _lm(p0, x, y, w):
    return least_squares(
        _gauss_residuals, p0, jac=_gauss_jac, args=(x, y, w), method="lm",
        xtol=1e-8, ftol=1e-8, max_nfev=200,
    )


def fit_peak(hist: CorrelationHistogram, min_ratio: float = 5.0, min_excess: float = 5.0) -> GaussianFit:
    """Gaussian-plus-baseline fit of the dominant histogram peak.

    Works on the lattice ``x = k`` (bins), where for floor-difference binning
    the expected delay of bin k is exactly ``k*dt``. Peaks with fewer than
    three bins above a tenth of the peak cannot constrain a Gaussian; they
    are reported by the centroid of those bins with at least the
    quantization width ``dt/sqrt(12)``.

    Besides ``max >= min_ratio * median`` the peak must stand ``min_excess``
    Poisson sigmas (plus 3 counts) above the mean of the other bins, which
    rejects noise maxima in sparse histograms whose median is zero.
    """
    y_all = hist.counts.astype(np.float64)
    peak_count = float(y_all.max())
    median = float(np.median(y_all))
    if peak_count <= 0 or peak_count < min_ratio * median:
        raise PeakNotFound(f"max count {peak_count:g} vs median {median:g}")
    rest = (float(y_all.sum()) - peak_count) / max(y_all.size - 1, 1)
    if peak_count < rest + min_excess * math.sqrt(rest) + 3.0:
        raise PeakNotFound(f"max count {peak_count:g} is not significant over {rest:.3g}")
    dt = float(hist.bin_width_ps)
    k_all = hist.k.astype(np.float64)
    p = int(np.argmax(y_all))

    lo, hi = max(0, p - 25), min(y_all.size, p + 26)
    excess = np.clip(y_all[lo:hi] - median, 0.0, None)
    xs = k_all[lo:hi]
    m0 = float(excess.sum())
    centroid = float((excess * xs).sum() / m0)
    var0 = float((excess * (xs - centroid) ** 2).sum() / m0)
    sigma0 = max(math.sqrt(var0), 0.5)

    half = int(max(8.0 * sigma0, 12.0))
    lo, hi = max(0, p - half), min(y_all.size, p + half + 1)
    x = k_all[lo:hi]
    y = y_all[lo:hi]
    n_counts = int(hist.counts[lo:hi].sum())

    core = (y - median) >= 0.1 * (peak_count - median)

    def moments() -> GaussianFit:
        exc = np.where(core, y - median, 0.0)
        c = float((exc * x).sum() / exc.sum())
        v = float((exc * (x - c) ** 2).sum() / exc.sum())
        s = max(math.sqrt(v), 1.0 / math.sqrt(12.0)) * dt
        return GaussianFit(
            (c + hist.offset_bins) * dt, s, peak_count - median, median,
            FWHM_PER_SIGMA * s, n_counts, fitted=False,
        )

    if int(np.count_nonzero(core)) < 3:
        return moments()

    p0 = np.array([peak_count - median, k_all[p], sigma0, median])
    w = 1.0 / np.sqrt(np.maximum(y, 1.0))
    res = _lm(p0, x, y, w)
    model = res.x[3] + res.x[0] * np.exp(-0.5 * ((x - res.x[1]) / res.x[2]) ** 2)
    w = 1.0 / np.sqrt(np.maximum(model, 1.0))
    res = _lm(res.x, x, y, w)
    a, mu, s, b = res.x
    s = abs(s)
    if not (np.all(np.isfinite(res.x)) and a > 0 and s > 1e-6 and x[0] <= mu <= x[-1]):
        return moments()
    sigma_ps = s * dt
    return GaussianFit(
        float((mu + hist.offset_bins) * dt), float(sigma_ps), float(a), float(b),
        float(FWHM_PER_SIGMA * sigma_ps), n_counts,
    )


@dataclass(frozen=True)
class CoincidenceSet:
    """Matched pairs; ``delta_ps = tA - tB`` on the input time axes.

    ``reference_ps`` is the per-pair reference offset used for acceptance and
    ``t_b_ps`` the B-side timestamp of each pair.
    """

    idx_a: np.ndarray
    idx_b: np.ndarray
    delta_ps: np.ndarray
    t_b_ps: np.ndarray
    reference_ps: np.ndarray
    tau_w_ps: float

    def __len__(self) -> int:
        return int(self.idx_a.size)

    @property
    def pairs(self) -> list[tuple[int, int, int]]:
        return list(zip(self.idx_a.tolist(), self.idx_b.tolist(), self.delta_ps.tolist()))

    def select(self, mask: np.ndarray) -> CoincidenceSet:
        return CoincidenceSet(
            self.idx_a[mask], self.idx_b[mask], self.delta_ps[mask],
            self.t_b_ps[mask], self.reference_ps[mask], self.tau_w_ps,
        )

    @classmethod
    def empty(cls, tau_w_ps: float) -> CoincidenceSet:
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy(), np.zeros(0), tau_w_ps)


def sift_coincidences(tA, tB, reference_offset, tau_w: float) -> CoincidenceSet:
    """Greedy matching of pairs with |tA - tB - ref| <= tau_w/2.

    ``reference_offset`` is a scalar or one value per B event (for a
    time-varying reference such as a TSEC interpolant).
    """
    if not tau_w > 0:
        raise PreconditionError("tau_w must be > 0")
    ta, tb = _times(tA), _times(tB)
    _check_sorted(ta, "A")
    _check_sorted(tb, "B")
    ref = np.asarray(reference_offset, dtype=np.float64)
    if ref.ndim == 0:
        ref = np.full(tb.size, float(ref))
    elif ref.shape != tb.shape:
        raise PreconditionError("per-event reference must match stream B")
    n_max = min(ta.size, tb.size)
    out_i = np.empty(n_max, dtype=np.int64)
    out_j = np.empty(n_max, dtype=np.int64)
    n = _sift_kernel(ta, tb, np.ascontiguousarray(ref), float(tau_w) / 2.0, out_i, out_j)
    ia, ib = out_i[:n].copy(), out_j[:n].copy()
    return CoincidenceSet(ia, ib, ta[ia] - tb[ib], tb[ib], ref[ib], float(tau_w))
