"""Seeded end-to-end scenario: pairs -> channel -> local clocks -> PPS.

Generation is chunked per second of emission time. Every chunk and every
purpose draws from its own ``SeedSequence`` child, so a run is identical
whether it is generated in one go or streamed block by block, and the PPS
trains do not depend on the photon brightness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..syncproto import AlignedStream, align_times, pps_align
from ..timetags import (
    PS_PER_S,
    ChannelState,
    ClockModel,
    EventStream,
    PpsTrain,
    SourceDetectorModel,
    apply_clock,
    clock_map,
    concat_streams,
    generate_pps,
    generate_truth_pairs,
    propagate_and_detect,
    tag_qkd_outcomes,
)

_PAIRS, _TAGS, _DET_A, _DET_B, _PPS_A, _PPS_B = range(6)
_ID_STRIDE = 1 << 32


@dataclass(frozen=True)
class ScenarioModel:
    source: SourceDetectorModel
    clock_a: ClockModel
    clock_b: ClockModel
    channel: ChannelState
    duration_s: int
    seed: int
    window_n: int = 1
    tag_outcomes: bool = False

    def seed_for(self, purpose: int, chunk: int = 0) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=int(self.seed), spawn_key=(purpose, chunk))


@dataclass(frozen=True)
class Scenario:
    model: ScenarioModel
    stream_a: EventStream
    stream_b: EventStream
    pps_a: PpsTrain
    pps_b: PpsTrain

    def truth(self, t_b_aligned: np.ndarray) -> np.ndarray:
        return true_offset(self.model, self.pps_a, self.pps_b, t_b_aligned)


def make_pps(model: ScenarioModel) -> tuple[PpsTrain, PpsTrain]:
    pa = generate_pps(model.clock_a, model.duration_s, model.seed_for(_PPS_A))
    pb = generate_pps(model.clock_b, model.duration_s, model.seed_for(_PPS_B))
    return pa, pb


def chunk_local(model: ScenarioModel, k: int) -> tuple[EventStream, EventStream]:
    """Local-clock detections of both parties for pairs emitted in second k."""
    pairs = generate_truth_pairs(
        model.source, 1.0, model.seed_for(_PAIRS, k), t0_s=float(k), first_id=k * _ID_STRIDE
    )
    if model.tag_outcomes:
        pairs = tag_qkd_outcomes(pairs, model.source.e0, model.seed_for(_TAGS, k))
    a = propagate_and_detect(pairs, "A", model.channel, model.source, model.seed_for(_DET_A, k))
    b = propagate_and_detect(pairs, "B", model.channel, model.source, model.seed_for(_DET_B, k))
    return apply_clock(a, model.clock_a), apply_clock(b, model.clock_b)


def _sorted_concat(parts: list[EventStream]) -> EventStream:
    s = concat_streams(parts)
    if len(s) > 1 and np.any(np.diff(s.timestamps) < 0):
        order = np.argsort(s.timestamps, kind="stable")
        s = EventStream(
            s.timestamps[order],
            None if s.tags is None else s.tags[order],
            None if s.pair_id is None else s.pair_id[order],
        )
    return s


def simulate(model: ScenarioModel) -> Scenario:
    """Whole-run local streams plus PPS trains (memory grows with duration)."""
    pa, pb = make_pps(model)
    chunks = [chunk_local(model, k) for k in range(int(model.duration_s))]
    a = _sorted_concat([c[0] for c in chunks])
    b = _sorted_concat([c[1] for c in chunks])
    return Scenario(model, a, b, pa, pb)


def true_offset(model: ScenarioModel, pps_a: PpsTrain, pps_b: PpsTrain, t_b: np.ndarray) -> np.ndarray:
    """Jitter-free aligned tA - tB for a pair whose aligned B time is t_b.

    The emission time is recovered as t_b - delay(t_b); the PPS maps are
    evaluated on the realized edges, so the result contains the alignment
    errors that the correction stage is meant to remove.
    """
    t = np.asarray(t_b, dtype=np.float64)
    te = np.rint(t - model.channel.delay(t)).astype(np.int64)
    d = np.asarray(model.channel.delay(te), dtype=np.float64)
    tb_true = te + np.rint(d).astype(np.int64)
    out = np.full(t.shape, np.nan)
    al_a, ok_a, _, _ = align_times(clock_map(te, model.clock_a), pps_a, model.window_n)
    al_b, ok_b, _, _ = align_times(clock_map(tb_true, model.clock_b), pps_b, model.window_n)
    err_a = np.full(t.shape, np.nan)
    err_b = np.full(t.shape, np.nan)
    err_a[ok_a] = (al_a - te[ok_a]).astype(np.float64)
    err_b[ok_b] = (al_b - tb_true[ok_b]).astype(np.float64)
    out = err_a - err_b - (tb_true - te)
    return out


def iter_aligned_blocks(
    model: ScenarioModel, pps_a: PpsTrain, pps_b: PpsTrain, block_s: int = 1
) -> Iterator[tuple[int, int, EventStream, EventStream]]:
    """Stream (index, t0, A, B) aligned data blocks without holding the run.

    Events that spill past the end of their emission chunk (channel delay,
    PPS jitter) are carried into the next block; events that land before the
    block being assembled are late and dropped.
    """
    n = model.window_n
    carry_a = EventStream.empty(model.tag_outcomes)
    carry_b = EventStream.empty(model.tag_outcomes)
    block = int(block_s) * PS_PER_S
    n_blocks = int(model.duration_s) // int(block_s)
    chunk = 0
    for idx in range(n_blocks):
        t0 = idx * block
        t1 = t0 + block
        parts_a, parts_b = [carry_a], [carry_b]
        while chunk * PS_PER_S < t1:
            if chunk < model.duration_s:
                la, lb = chunk_local(model, chunk)
                parts_a.append(_align_keep(la, pps_a, n))
                parts_b.append(_align_keep(lb, pps_b, n))
            chunk += 1
        a = _sorted_concat(parts_a)
        b = _sorted_concat(parts_b)
        carry_a = a.window(t1, np.iinfo(np.int64).max)
        carry_b = b.window(t1, np.iinfo(np.int64).max)
        yield idx, t0, a.window(t0, t1), b.window(t0, t1)


def _align_keep(stream: EventStream, pps: PpsTrain, n: int) -> EventStream:
    al: AlignedStream = pps_align(stream, pps, n)
    return al.events
