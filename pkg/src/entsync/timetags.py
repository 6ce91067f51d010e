"""Timestamp streams, clock/channel models and the photon-pair simulator.

All times are 64-bit integer picoseconds. Jitter is drawn in float64 and
rounded to the nearest tick before it is added to a timestamp.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PS_PER_S = 10**12
PS_PER_MS = 10**9

# tag byte layout
TAG_BIT = 0x01
TAG_BASIS_X = 0x02
TAG_DARK = 0x04

_MAGIC = b"ETTS"
_HEADER = struct.Struct("<4sBBxxQ")


class ParameterError(ValueError):
    """Raised for non-finite or out-of-domain model parameters."""


class ClockMonotonicityError(ValueError):
    """Raised when a clock transform would reorder events."""


def _check_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise ParameterError(f"{name} must be finite, got {value!r}")


def _check_nonneg(**values: float) -> None:
    _check_finite(**values)
    for name, value in values.items():
        if value < 0:
            raise ParameterError(f"{name} must be >= 0, got {value!r}")


def _check_unit(**values: float) -> None:
    _check_finite(**values)
    for name, value in values.items():
        if not 0.0 <= value <= 1.0:
            raise ParameterError(f"{name} must lie in [0, 1], got {value!r}")


def _rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def _round_ps(values: np.ndarray) -> np.ndarray:
    return np.rint(values).astype(np.int64)


@dataclass(frozen=True)
class EventStream:
    """Sorted detection timestamps with optional per-event tag bytes.

    ``pair_id`` is simulation ground truth (index of the source pair, -1 for
    dark counts). It is carried through transforms but never serialized.
    """

    timestamps: np.ndarray
    tags: np.ndarray | None = None
    pair_id: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        ts = np.ascontiguousarray(self.timestamps, dtype=np.int64)
        if ts.ndim != 1:
            raise ValueError("timestamps must be one-dimensional")
        if ts.size > 1 and np.any(np.diff(ts) < 0):
            raise ValueError("timestamps must be non-decreasing")
        object.__setattr__(self, "timestamps", ts)
        if self.tags is not None:
            tags = np.ascontiguousarray(self.tags, dtype=np.uint8)
            if tags.shape != ts.shape:
                raise ValueError("tags must have the same length as timestamps")
            object.__setattr__(self, "tags", tags)
        if self.pair_id is not None:
            pid = np.ascontiguousarray(self.pair_id, dtype=np.int64)
            if pid.shape != ts.shape:
                raise ValueError("pair_id must have the same length as timestamps")
            object.__setattr__(self, "pair_id", pid)

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @classmethod
    def empty(cls, tagged: bool = False) -> EventStream:
        tags = np.zeros(0, dtype=np.uint8) if tagged else None
        return cls(np.zeros(0, dtype=np.int64), tags)

    @property
    def basis(self) -> np.ndarray | None:
        """0 for Z, 1 for X."""
        if self.tags is None:
            return None
        return (self.tags & TAG_BASIS_X) >> 1

    @property
    def bit(self) -> np.ndarray | None:
        if self.tags is None:
            return None
        return self.tags & TAG_BIT

    @property
    def is_dark(self) -> np.ndarray | None:
        if self.tags is None:
            return None
        return (self.tags & TAG_DARK) != 0

    def _take(self, sel: slice | np.ndarray, timestamps: np.ndarray | None = None) -> EventStream:
        ts = self.timestamps[sel] if timestamps is None else timestamps
        tags = None if self.tags is None else self.tags[sel]
        pid = None if self.pair_id is None else self.pair_id[sel]
        return EventStream(ts, tags, pid)

    def window(self, t0: int, t1: int) -> EventStream:
        """Events with t0 <= t < t1."""
        lo, hi = np.searchsorted(self.timestamps, [t0, t1], side="left")
        return self._take(slice(int(lo), int(hi)))

    def shifted(self, delta_ps: int) -> EventStream:
        return self._take(slice(None), self.timestamps + np.int64(delta_ps))

    def with_timestamps(self, timestamps: np.ndarray) -> EventStream:
        return self._take(slice(None), np.asarray(timestamps, dtype=np.int64))


def concat_streams(streams: list[EventStream]) -> EventStream:
    """Concatenate streams that are already in time order."""
    if not streams:
        return EventStream.empty()
    ts = np.concatenate([s.timestamps for s in streams])
    tags = None
    if all(s.tags is not None for s in streams):
        tags = np.concatenate([s.tags for s in streams])
    pid = None
    if all(s.pair_id is not None for s in streams):
        pid = np.concatenate([s.pair_id for s in streams])
    return EventStream(ts, tags, pid)


def merge_streams(a: EventStream, b: EventStream) -> EventStream:
    """Stable time-ordered merge of two streams."""
    ts = np.concatenate([a.timestamps, b.timestamps])
    order = np.argsort(ts, kind="stable")
    tags = None
    if a.tags is not None and b.tags is not None:
        tags = np.concatenate([a.tags, b.tags])[order]
    pid = None
    if a.pair_id is not None and b.pair_id is not None:
        pid = np.concatenate([a.pair_id, b.pair_id])[order]
    return EventStream(ts[order], tags, pid)


@dataclass(frozen=True)
class ClockModel:
    offset_ps: float = 0.0
    drift_rate_ps_per_s: float = 0.0
    drift_accel_ps_per_ms2: float = 0.0
    osc_frac_error: float = 0.0
    pps_sigma_ps: float = 0.0

    def __post_init__(self) -> None:
        _check_finite(
            offset_ps=self.offset_ps,
            drift_rate_ps_per_s=self.drift_rate_ps_per_s,
            drift_accel_ps_per_ms2=self.drift_accel_ps_per_ms2,
            osc_frac_error=self.osc_frac_error,
        )
        _check_nonneg(pps_sigma_ps=self.pps_sigma_ps)

    def deviation(self, t_ps: np.ndarray | float) -> np.ndarray | float:
        """Local minus true time, in ps, as a float."""
        t = np.asarray(t_ps, dtype=np.float64)
        t_s = t / PS_PER_S
        t_ms = t / PS_PER_MS
        dev = (
            t * self.osc_frac_error
            + self.offset_ps
            + self.drift_rate_ps_per_s * t_s
            + 0.5 * self.drift_accel_ps_per_ms2 * t_ms * t_ms
        )
        return float(dev) if dev.ndim == 0 else dev

    def rate(self, t_ps: np.ndarray | float) -> np.ndarray | float:
        """d(local)/d(true), dimensionless."""
        t = np.asarray(t_ps, dtype=np.float64)
        r = (
            1.0
            + self.osc_frac_error
            + self.drift_rate_ps_per_s / PS_PER_S
            + self.drift_accel_ps_per_ms2 * t / (PS_PER_MS * PS_PER_MS)
        )
        return float(r) if r.ndim == 0 else r


def clock_map(t_ps: np.ndarray, clock: ClockModel) -> np.ndarray:
    """True picosecond times to local picosecond times (rounded)."""
    t = np.asarray(t_ps, dtype=np.int64)
    if t.size == 0:
        return t.copy()
    lo, hi = float(t.min()), float(t.max())
    if min(clock.rate(lo), clock.rate(hi)) <= 0.0:
        raise ClockMonotonicityError(
            "clock rate turns non-positive inside the stream span; "
            "drift acceleration is not physical for this duration"
        )
    local = t + _round_ps(clock.deviation(t))
    if local.size > 1 and np.any(np.diff(local) < 0):
        raise ClockMonotonicityError("clock transform reorders events")
    return local


def apply_clock(events: EventStream, clock: ClockModel) -> EventStream:
    """Map true detection times onto a party's local clock."""
    return events.with_timestamps(clock_map(events.timestamps, clock))


@dataclass(frozen=True)
class ChannelState:
    base_delay_ps: float = 0.0
    delay_rate_ps_per_s: float = 0.0
    delay_accel_ps_per_ms2: float = 0.0
    loss_db: float = 0.0

    def __post_init__(self) -> None:
        _check_finite(
            base_delay_ps=self.base_delay_ps,
            delay_rate_ps_per_s=self.delay_rate_ps_per_s,
            delay_accel_ps_per_ms2=self.delay_accel_ps_per_ms2,
        )
        _check_nonneg(loss_db=self.loss_db)

    @property
    def transmittance(self) -> float:
        return 10.0 ** (-self.loss_db / 10.0)

    def delay(self, t_ps: np.ndarray | float) -> np.ndarray | float:
        """Relative propagation delay (ps) for photons emitted at t_ps."""
        t = np.asarray(t_ps, dtype=np.float64)
        t_ms = t / PS_PER_MS
        d = (
            self.base_delay_ps
            + self.delay_rate_ps_per_s * (t / PS_PER_S)
            + 0.5 * self.delay_accel_ps_per_ms2 * t_ms * t_ms
        )
        return float(d) if d.ndim == 0 else d


@dataclass(frozen=True)
class SourceDetectorModel:
    brightness_cps: float = 1e6
    coherence_sigma_ps: float = 3.0
    det_sigma_ps: float = 45.0
    ttm_sigma_ps: float = 45.0
    eta_a: float = 0.72
    eta_b: float = 0.72
    dc_a_cps: float = 1000.0
    dc_b_cps: float = 1000.0
    e0: float = 0.01
    ttm_resolution_ps: int = 1

    def __post_init__(self) -> None:
        _check_nonneg(
            brightness_cps=self.brightness_cps,
            coherence_sigma_ps=self.coherence_sigma_ps,
            det_sigma_ps=self.det_sigma_ps,
            ttm_sigma_ps=self.ttm_sigma_ps,
            dc_a_cps=self.dc_a_cps,
            dc_b_cps=self.dc_b_cps,
        )
        _check_unit(eta_a=self.eta_a, eta_b=self.eta_b, e0=self.e0)
        if int(self.ttm_resolution_ps) < 1:
            raise ParameterError("ttm_resolution_ps must be >= 1")

    def eta(self, arm: str) -> float:
        return self.eta_a if arm == "A" else self.eta_b

    def dark_rate(self, arm: str) -> float:
        return self.dc_a_cps if arm == "A" else self.dc_b_cps

    @property
    def arm_sigma_ps(self) -> float:
        """Timestamp jitter of a single detection (detector and TTM)."""
        return math.hypot(self.det_sigma_ps, self.ttm_sigma_ps)


@dataclass(frozen=True)
class PairSet:
    """Source-frame photon pairs emitted in [t0, t0 + duration).

    ``t_a`` is the emission time; ``t_b`` adds the intra-pair coherence
    jitter. Tags are filled in by :func:`tag_qkd_outcomes`.
    """

    t_a: np.ndarray
    t_b: np.ndarray
    t0_ps: int
    duration_ps: int
    first_id: int = 0
    tags_a: np.ndarray | None = None
    tags_b: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.t_a.size)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.first_id, self.first_id + len(self), dtype=np.int64)


@dataclass(frozen=True)
class PpsTrain:
    """PPS edge timestamps on a local clock; edge k marks GNSS second first_second + k."""

    edges: np.ndarray
    first_second: int = 0

    def __post_init__(self) -> None:
        e = np.ascontiguousarray(self.edges, dtype=np.int64)
        if e.size > 1 and np.any(np.diff(e) <= 0):
            raise ValueError("PPS edges must be strictly increasing")
        object.__setattr__(self, "edges", e)

    def __len__(self) -> int:
        return int(self.edges.size)

    def check_spacing(self, pps_sigma_ps: float, clock: ClockModel | None = None) -> bool:
        """True when every inter-edge gap is 1 s (clock-scaled) within 6 sigma."""
        if self.edges.size < 2:
            return True
        gaps = np.diff(self.edges).astype(np.float64)
        nominal = np.full_like(gaps, float(PS_PER_S))
        if clock is not None:
            k = np.arange(self.first_second, self.first_second + self.edges.size) * PS_PER_S
            nominal = np.diff(clock_map(k, clock)).astype(np.float64)
        return bool(np.all(np.abs(gaps - nominal) <= 6.0 * pps_sigma_ps + 1.0))


def generate_truth_pairs(
    src: SourceDetectorModel,
    duration_s: float,
    seed: int | np.random.SeedSequence,
    t0_s: float = 0.0,
    first_id: int = 0,
) -> PairSet:
    """Poisson pair emissions of rate B over [t0, t0 + duration)."""
    _check_finite(duration_s=duration_s, t0_s=t0_s)
    if duration_s < 0:
        raise ParameterError("duration must be >= 0")
    t0 = int(round(t0_s * PS_PER_S))
    dur = int(round(duration_s * PS_PER_S))
    rng = _rng(seed)
    if dur == 0 or src.brightness_cps == 0:
        z = np.zeros(0, dtype=np.int64)
        return PairSet(z, z.copy(), t0, dur, first_id)
    n = int(rng.poisson(src.brightness_cps * duration_s))
    # conditional on the count, Poisson arrivals are iid uniform
    emit = np.sort(t0 + np.floor(rng.random(n) * dur).astype(np.int64))
    if src.coherence_sigma_ps > 0:
        dt = _round_ps(rng.normal(0.0, src.coherence_sigma_ps, n))
    else:
        dt = np.zeros(n, dtype=np.int64)
    return PairSet(emit, emit + dt, t0, dur, first_id)


def tag_qkd_outcomes(pairs: PairSet, e0: float, seed: int | np.random.SeedSequence) -> PairSet:
    """Draw basis and bit outcomes for both photons of every pair.

    Bases are uniform and independent. For matched bases the bits agree up
    to a flip with probability ``e0``; unmatched bases give independent bits.
    """
    _check_unit(e0=e0)
    rng = _rng(seed)
    n = len(pairs)
    basis_a = rng.integers(0, 2, n, dtype=np.uint8)
    basis_b = rng.integers(0, 2, n, dtype=np.uint8)
    bit_a = rng.integers(0, 2, n, dtype=np.uint8)
    flip = (rng.random(n) < e0).astype(np.uint8)
    random_bit = rng.integers(0, 2, n, dtype=np.uint8)
    bit_b = np.where(basis_a == basis_b, bit_a ^ flip, random_bit).astype(np.uint8)
    tags_a = (basis_a << 1) | bit_a
    tags_b = (basis_b << 1) | bit_b
    return PairSet(
        pairs.t_a, pairs.t_b, pairs.t0_ps, pairs.duration_ps, pairs.first_id,
        tags_a.astype(np.uint8), tags_b.astype(np.uint8),
    )


def propagate_and_detect(
    pairs: PairSet,
    arm: str,
    channel: ChannelState,
    src: SourceDetectorModel,
    seed: int | np.random.SeedSequence,
) -> EventStream:
    """Thin, delay, jitter and quantize one arm, then merge dark counts.

    Arm B sees the channel (delay and ``channel.loss_db``); arm A is local.
    Times are on the true (GNSS) time axis.
    """
    if arm not in ("A", "B"):
        raise ParameterError(f"arm must be 'A' or 'B', got {arm!r}")
    rng = _rng(seed)
    t = pairs.t_a if arm == "A" else pairs.t_b
    tags = pairs.tags_a if arm == "A" else pairs.tags_b
    eta = src.eta(arm)
    if arm == "B":
        eta *= channel.transmittance
    keep = rng.random(t.size) < eta
    t = t[keep]
    ids = pairs.ids[keep]
    if tags is not None:
        tags = tags[keep]
    if arm == "B":
        t = t + _round_ps(channel.delay(t))
    jitter = np.zeros(t.size, dtype=np.float64)
    if src.det_sigma_ps > 0:
        jitter += rng.normal(0.0, src.det_sigma_ps, t.size)
    if src.ttm_sigma_ps > 0:
        jitter += rng.normal(0.0, src.ttm_sigma_ps, t.size)
    res = int(src.ttm_resolution_ps)
    if res == 1:
        t = t + _round_ps(jitter)
    else:
        t = _round_ps((t + jitter) / res) * res

    dc = src.dark_rate(arm)
    n_dark = int(rng.poisson(dc * pairs.duration_ps / PS_PER_S)) if dc > 0 else 0
    t_dark = pairs.t0_ps + np.floor(rng.random(n_dark) * pairs.duration_ps).astype(np.int64)
    if res > 1:
        t_dark = (t_dark // res) * res
    dark_tags = (rng.integers(0, 4, n_dark, dtype=np.uint8) | TAG_DARK).astype(np.uint8)

    order_sig = np.argsort(t, kind="stable")
    signal = EventStream(
        t[order_sig],
        None if tags is None else tags[order_sig],
        ids[order_sig],
    )
    order_dark = np.argsort(t_dark, kind="stable")
    dark = EventStream(
        t_dark[order_dark],
        dark_tags[order_dark] if tags is not None else None,
        np.full(n_dark, -1, dtype=np.int64),
    )
    return merge_streams(signal, dark)


def generate_pps(
    clock: ClockModel,
    duration_s: float,
    seed: int | np.random.SeedSequence,
    first_second: int = 0,
) -> PpsTrain:
    """PPS edges for GNSS seconds first_second..first_second+duration on a local clock."""
    _check_finite(duration_s=duration_s)
    if duration_s < 1:
        raise ParameterError("PPS train needs duration >= 1 s")
    rng = _rng(seed)
    k = np.arange(first_second, first_second + int(math.floor(duration_s)) + 1, dtype=np.int64)
    edges = clock_map(k * PS_PER_S, clock)
    if clock.pps_sigma_ps > 0:
        edges = edges + _round_ps(rng.normal(0.0, clock.pps_sigma_ps, k.size))
    return PpsTrain(edges, first_second)


def matched_basis_qber(tags_a: np.ndarray, tags_b: np.ndarray) -> tuple[float, int]:
    """Bit disagreement rate over basis-matched pairs, and the matched count."""
    a = np.asarray(tags_a, dtype=np.uint8)
    b = np.asarray(tags_b, dtype=np.uint8)
    matched = ((a ^ b) & TAG_BASIS_X) == 0
    n = int(matched.sum())
    if n == 0:
        return math.nan, 0
    errors = int((((a ^ b) & TAG_BIT)[matched]).sum())
    return errors / n, n


def write_binary(stream: EventStream, path: str | Path) -> None:
    has_tags = stream.tags is not None
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, int(has_tags), len(stream)))
        fh.write(stream.timestamps.astype("<i8").tobytes())
        if has_tags:
            fh.write(stream.tags.astype(np.uint8).tobytes())


def read_binary(path: str | Path) -> EventStream:
    data = Path(path).read_bytes()
    magic, version, has_tags, n = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not an event stream file")
    off = _HEADER.size
    ts = np.frombuffer(data, dtype="<i8", count=n, offset=off).astype(np.int64)
    tags = None
    if has_tags:
        tags = np.frombuffer(data, dtype=np.uint8, count=n, offset=off + 8 * n).copy()
    return EventStream(ts, tags)


def write_csv(stream: EventStream, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_ps", "basis", "bit", "origin"])
        if stream.tags is None:
            for t in stream.timestamps.tolist():
                w.writerow([t, "", "", ""])
            return
        for t, tag in zip(stream.timestamps.tolist(), stream.tags.tolist()):
            w.writerow([
                t,
                "X" if tag & TAG_BASIS_X else "Z",
                tag & TAG_BIT,
                "dark" if tag & TAG_DARK else "signal",
            ])


def read_csv(path: str | Path) -> EventStream:
    ts: list[int] = []
    tags: list[int] = []
    tagged = None
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ts.append(int(row["t_ps"]))
            has = row["basis"] != ""
            if tagged is None:
                tagged = has
            if has:
                tag = (TAG_BASIS_X if row["basis"] == "X" else 0) | int(row["bit"])
                if row["origin"] == "dark":
                    tag |= TAG_DARK
                tags.append(tag)
    arr = np.asarray(ts, dtype=np.int64)
    return EventStream(arr, np.asarray(tags, dtype=np.uint8) if tagged else None)


def write_pps_csv(train: PpsTrain, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["second", "edge_ps"])
        for k, e in enumerate(train.edges.tolist()):
            w.writerow([train.first_second + k, e])
