import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entsync.timetags import (
    PS_PER_S,
    TAG_DARK,
    ChannelState,
    ClockModel,
    ClockMonotonicityError,
    EventStream,
    ParameterError,
    PairSet,
    PpsTrain,
    SourceDetectorModel,
    apply_clock,
    clock_map,
    generate_pps,
    generate_truth_pairs,
    matched_basis_qber,
    merge_streams,
    propagate_and_detect,
    read_binary,
    read_csv,
    tag_qkd_outcomes,
    write_binary,
    write_csv,
)

IDEAL = SourceDetectorModel(
    brightness_cps=1000.0, coherence_sigma_ps=0.0, det_sigma_ps=0.0, ttm_sigma_ps=0.0,
    eta_a=1.0, eta_b=1.0, dc_a_cps=0.0, dc_b_cps=0.0, e0=0.0,
)


def _pairs(n, seed=0, span_s=1.0):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.integers(0, int(span_s * PS_PER_S), n, dtype=np.int64))
    return PairSet(t, t.copy(), 0, int(span_s * PS_PER_S))


# EventStream


def test_stream_rejects_decreasing():
    with pytest.raises(ValueError):
        EventStream(np.array([3, 2, 5]))


def test_stream_rejects_tag_length_mismatch():
    with pytest.raises(ValueError):
        EventStream(np.array([1, 2]), np.array([0], dtype=np.uint8))


def test_stream_allows_ties():
    s = EventStream(np.array([1, 1, 2]))
    assert len(s) == 3


def test_window_half_open():
    s = EventStream(np.array([0, 10, 20, 30]))
    assert s.window(10, 30).timestamps.tolist() == [10, 20]


@given(st.lists(st.integers(-10**12, 10**12), max_size=50), st.lists(st.integers(-10**12, 10**12), max_size=50))
def test_merge_is_sorted_and_complete(a, b):
    m = merge_streams(EventStream(np.sort(np.array(a, dtype=np.int64))),
                      EventStream(np.sort(np.array(b, dtype=np.int64))))
    assert m.timestamps.tolist() == sorted(a + b)


# truth pairs


def test_pair_count_poisson():
    src = SourceDetectorModel(brightness_cps=1e6)
    p = generate_truth_pairs(src, 1.0, 7)
    assert abs(len(p) - 1e6) <= 5 * math.sqrt(1e6)
    assert np.all(np.diff(p.t_a) >= 0)


def test_zero_duration_empty():
    assert len(generate_truth_pairs(SourceDetectorModel(), 0.0, 1)) == 0


def test_zero_coherence_gives_identical_photons():
    p = generate_truth_pairs(IDEAL, 10.0, 3)
    assert len(p) > 0
    assert np.array_equal(p.t_a, p.t_b)


def test_coherence_jitter_std():
    src = SourceDetectorModel(brightness_cps=2e5, coherence_sigma_ps=30.0)
    p = generate_truth_pairs(src, 1.0, 5)
    assert abs(np.std(p.t_b - p.t_a) - 30.0) < 0.5


def test_truth_pairs_reject_nan():
    with pytest.raises(ParameterError):
        generate_truth_pairs(SourceDetectorModel(), float("nan"), 1)


def test_truth_pairs_deterministic():
    a = generate_truth_pairs(SourceDetectorModel(brightness_cps=1e4), 1.0, 11)
    b = generate_truth_pairs(SourceDetectorModel(brightness_cps=1e4), 1.0, 11)
    assert np.array_equal(a.t_a, b.t_a) and np.array_equal(a.t_b, b.t_b)


# propagate_and_detect


def test_identity_channel_adds_base_delay():
    p = _pairs(1000)
    ch = ChannelState(base_delay_ps=35_000)
    b = propagate_and_detect(p, "B", ch, IDEAL, 1)
    assert np.array_equal(b.timestamps, p.t_b + 35_000)
    a = propagate_and_detect(p, "A", ch, IDEAL, 1)
    assert np.array_equal(a.timestamps, p.t_a)


def test_opaque_channel_empty():
    src = SourceDetectorModel(eta_a=0.0, eta_b=0.0, dc_a_cps=0.0, dc_b_cps=0.0)
    p = _pairs(1000)
    assert len(propagate_and_detect(p, "A", ChannelState(), src, 1)) == 0
    assert len(propagate_and_detect(p, "B", ChannelState(), src, 1)) == 0


def test_thinning_binomial():
    src = SourceDetectorModel(eta_a=0.5, dc_a_cps=0.0)
    p = _pairs(100_000)
    n = len(propagate_and_detect(p, "A", ChannelState(), src, 2))
    assert abs(n - 50_000) <= 5 * math.sqrt(100_000 * 0.25)


def test_thinning_binomial_over_trials():
    src = SourceDetectorModel(eta_a=0.3, dc_a_cps=0.0)
    p = _pairs(2000)
    mu, sd = 2000 * 0.3, math.sqrt(2000 * 0.3 * 0.7)
    counts = np.array([len(propagate_and_detect(p, "A", ChannelState(), src, s)) for s in range(100)])
    assert np.all(np.abs(counts - mu) <= 5 * sd)
    assert abs(counts.mean() - mu) <= 5 * sd / 10


def test_channel_loss_thins_arm_b_only():
    src = SourceDetectorModel(eta_a=1.0, eta_b=1.0, dc_a_cps=0.0, dc_b_cps=0.0)
    p = _pairs(100_000)
    ch = ChannelState(loss_db=10.0)
    assert len(propagate_and_detect(p, "A", ch, src, 3)) == 100_000
    nb = len(propagate_and_detect(p, "B", ch, src, 3))
    assert abs(nb - 10_000) <= 5 * math.sqrt(100_000 * 0.1 * 0.9)


def test_detector_jitter_std():
    src = SourceDetectorModel(eta_a=1.0, dc_a_cps=0.0, det_sigma_ps=45.0, ttm_sigma_ps=45.0)
    p = _pairs(200_000)
    a = propagate_and_detect(p, "A", ChannelState(), src, 4)
    d = a.timestamps[np.argsort(a.pair_id, kind="stable")] - p.t_a
    assert abs(np.std(d) - 45.0 * math.sqrt(2)) < 1.0


def test_dark_counts_rate_and_tags():
    src = SourceDetectorModel(eta_a=0.0, dc_a_cps=1e5)
    p = _pairs(10, span_s=1.0)
    tagged = tag_qkd_outcomes(p, 0.0, 1)
    a = propagate_and_detect(tagged, "A", ChannelState(), src, 9)
    assert abs(len(a) - 1e5) <= 5 * math.sqrt(1e5)
    assert np.all(a.tags & TAG_DARK)
    assert np.all(a.pair_id == -1)


def test_ttm_resolution_quantizes():
    src = SourceDetectorModel(eta_a=1.0, dc_a_cps=100.0, ttm_resolution_ps=8)
    p = _pairs(1000)
    a = propagate_and_detect(p, "A", ChannelState(), src, 1)
    assert np.all(a.timestamps % 8 == 0)


def test_arm_validation():
    with pytest.raises(ParameterError):
        propagate_and_detect(_pairs(1), "C", ChannelState(), IDEAL, 0)


# clocks


def test_identity_clock():
    t = np.arange(0, 10 * PS_PER_S, PS_PER_S // 7, dtype=np.int64)
    assert np.array_equal(clock_map(t, ClockModel()), t)


def test_pure_offset():
    t = np.array([0, 5, 10**12], dtype=np.int64)
    assert np.array_equal(clock_map(t, ClockModel(offset_ps=1000)), t + 1000)


def test_quadratic_term_at_one_second():
    c = ClockModel(drift_accel_ps_per_ms2=0.3)
    assert clock_map(np.array([PS_PER_S]), c)[0] - PS_PER_S == 150_000


def test_osc_fraction_error():
    c = ClockModel(osc_frac_error=1e-6)
    assert clock_map(np.array([PS_PER_S]), c)[0] == PS_PER_S + 1_000_000


def test_pathological_acceleration_rejected():
    c = ClockModel(drift_accel_ps_per_ms2=-1e6)
    with pytest.raises(ClockMonotonicityError):
        clock_map(np.array([0, 10 * PS_PER_S]), c)


@settings(max_examples=200)
@given(
    st.integers(-10**6, 10**6), st.floats(-1e3, 1e3),
    st.integers(-10**6, 10**6), st.floats(-1e3, 1e3),
    st.integers(0, PS_PER_S),
)
def test_clock_composition_first_order(o1, e1, o2, e2, t):
    ts = np.array([t], dtype=np.int64)
    two = clock_map(clock_map(ts, ClockModel(o1, e1)), ClockModel(o2, e2))
    one = clock_map(ts, ClockModel(o1 + o2, e1 + e2))
    assert abs(int(two[0]) - int(one[0])) <= 1


@given(st.lists(st.integers(0, 3600 * PS_PER_S), min_size=1, max_size=100),
       st.floats(-1e4, 1e4), st.floats(-1.0, 1.0), st.floats(-1e-5, 1e-5))
def test_clock_preserves_order(ts, eta, gamma, osc):
    t = np.sort(np.array(ts, dtype=np.int64))
    local = apply_clock(EventStream(t), ClockModel(123.0, eta, gamma, osc)).timestamps
    assert np.all(np.diff(local) >= 0)


def test_channel_delay_polynomial():
    ch = ChannelState(35_000, 300.0, 0.2)
    assert ch.delay(0) == 35_000
    assert ch.delay(2 * PS_PER_S) == pytest.approx(35_000 + 600 + 0.5 * 0.2 * 2000**2)


def test_negative_loss_rejected():
    with pytest.raises(ParameterError):
        ChannelState(loss_db=-1.0)


# PPS


def test_ideal_pps_edges():
    pps = generate_pps(ClockModel(), 10, 0)
    assert pps.edges.tolist() == [k * PS_PER_S for k in range(11)]


def test_pps_jitter_std():
    pps = generate_pps(ClockModel(pps_sigma_ps=1000.0), 3600, 42)
    dev = pps.edges - np.arange(3601) * PS_PER_S
    assert abs(np.std(dev) - 1000.0) < 100.0
    assert abs(np.std(np.diff(pps.edges)) - math.sqrt(2) * 1000.0) < 0.1 * math.sqrt(2) * 1000.0


def test_pps_spacing_sanity():
    c = ClockModel(offset_ps=5e6, drift_rate_ps_per_s=300.0, pps_sigma_ps=1000.0, osc_frac_error=1e-6)
    pps = generate_pps(c, 600, 3)
    assert pps.check_spacing(1000.0, c)
    assert not PpsTrain(np.array([0, PS_PER_S + 10_000])).check_spacing(1000.0)


def test_pps_short_duration_rejected():
    with pytest.raises(ParameterError):
        generate_pps(ClockModel(), 0.5, 0)


# QKD tags


def test_qber_zero_without_errors():
    p = tag_qkd_outcomes(_pairs(10_000), 0.0, 1)
    q, n = matched_basis_qber(p.tags_a, p.tags_b)
    assert q == 0.0 and n > 4000


def test_flip_rate_matches_e0():
    p = tag_qkd_outcomes(_pairs(200_000), 0.01, 2)
    q, n = matched_basis_qber(p.tags_a, p.tags_b)
    assert n >= 100_000 * 0.9
    assert abs(q - 0.01) <= 5 * math.sqrt(0.01 * 0.99 / n)


def test_random_bits_give_half():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 4, 100_000).astype(np.uint8)
    b = rng.integers(0, 4, 100_000).astype(np.uint8)
    q, n = matched_basis_qber(a, b)
    assert abs(q - 0.5) <= 5 * math.sqrt(0.25 / n)


# I/O


def test_binary_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    s = EventStream(np.sort(rng.integers(-10**15, 10**15, 1000)), rng.integers(0, 8, 1000).astype(np.uint8))
    write_binary(s, tmp_path / "s.etts")
    r = read_binary(tmp_path / "s.etts")
    assert np.array_equal(r.timestamps, s.timestamps) and np.array_equal(r.tags, s.tags)


def test_binary_roundtrip_untagged(tmp_path):
    s = EventStream(np.array([1, 2, 3], dtype=np.int64))
    write_binary(s, tmp_path / "s.etts")
    r = read_binary(tmp_path / "s.etts")
    assert r.tags is None and r.timestamps.tolist() == [1, 2, 3]


def test_csv_roundtrip(tmp_path):
    p = tag_qkd_outcomes(_pairs(50), 0.1, 3)
    src = SourceDetectorModel(eta_a=1.0, dc_a_cps=20.0)
    s = propagate_and_detect(p, "A", ChannelState(), src, 1)
    write_csv(s, tmp_path / "s.csv")
    r = read_csv(tmp_path / "s.csv")
    assert np.array_equal(r.timestamps, s.timestamps) and np.array_equal(r.tags, s.tags)
    head = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert head == "t_ps,basis,bit,origin"
