import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from entsync.pipeline import cli
from entsync.pipeline.bench import bench_correlator, bench_streams, scaling_ratios
from entsync.pipeline.config import (
    ConfigError,
    RunConfig,
    config_hash,
    dump_config,
    from_dict,
    load_config,
    save_config,
    to_dict,
)
from entsync.pipeline.reproduce import (
    FIG3A_COLUMNS,
    FIG3B_COLUMNS,
    TARGETS,
    read_table,
    reproduce,
    write_table,
)
from entsync.pipeline.stats import STABILITY_COLUMNS, mad_filter, rms_std, stability_run
from entsync.linkbudget import SWEEP_COLUMNS

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


# config

def test_defaults_validate():
    RunConfig().validate()


@pytest.mark.parametrize("name", ["reference.yaml", "tabletop_7p5db.yaml"])
def test_shipped_configs_roundtrip(name, tmp_path):
    cfg = load_config(CONFIGS / name)
    save_config(cfg, tmp_path / "c.yaml")
    again = load_config(tmp_path / "c.yaml")
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)
    assert config_hash(again) == config_hash(cfg)


def test_reference_config_is_default():
    assert load_config(CONFIGS / "reference.yaml") == RunConfig()


@settings(max_examples=40)
@given(
    st.floats(1e3, 1e7), st.floats(0, 200), st.floats(0.01, 1), st.floats(0, 30),
    st.integers(1, 100), st.sampled_from(["fwhm", "wide"]), st.integers(0, 2**64 - 1),
    st.one_of(st.none(), st.floats(0.01, 1)),
)
def test_config_roundtrip_property(b, sdet, eta, loss, S, policy, seed, sr):
    cfg = from_dict({
        "source": {"B_cps": b, "sigma_det_ps": sdet, "eta_B": eta},
        "channel": {"loss_db": loss},
        "protocol": {"S": S, "tau_w_policy": policy},
        "run": {"seed": seed},
        "link": {"SR": sr},
    })
    assert from_dict(yaml.safe_load(dump_config(cfg))) == cfg


def test_partial_section_keeps_defaults():
    cfg = from_dict({"clock_A": {"sigma_p_ps": 20.0}})
    assert cfg.clock_A.sigma_p_ps == 20.0
    assert cfg.clock_A.offset_ps == RunConfig().clock_A.offset_ps


def test_auto_subblocks_accepted():
    assert from_dict({"protocol": {"S": "auto"}}).sync_config().subblocks is None


@pytest.mark.parametrize("doc, where", [
    ({"source": {"B": 1}}, "source.B"),
    ({"bogus": {}}, "bogus"),
    ({"source": {"eta_A": 1.5}}, "source.eta_A"),
    ({"protocol": {"S": "many"}}, "protocol.S"),
    ({"protocol": {"tau_w_policy": "narrow"}}, "protocol.tau_w_policy"),
    ({"run": {"seed": -1}}, "run.seed"),
    ({"run": {"duration_s": "long"}}, "run.duration_s"),
    ({"channel": {"mode": "fiber"}}, "channel.mode"),
])
def test_config_errors_name_location(doc, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        from_dict(doc)


def test_to_dict_is_plain_yaml():
    d = to_dict(RunConfig())
    assert yaml.safe_load(yaml.safe_dump(d)) == d


# MAD filter

def test_mad_constant_series():
    kept, rep = mad_filter(np.full(50, 3.0))
    assert kept.size == 50 and rep.n_removed == 0 and rep.zero_mad


def test_mad_empty_rejected():
    with pytest.raises(ValueError):
        mad_filter([])


def _spiked_series(seed=7, n=3600, n_spikes=102):
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 12.0, n)
    idx = rng.choice(n, n_spikes, replace=False)
    x[idx] += rng.choice([-1.0, 1.0], n_spikes) * 50 * 12.0
    return x, idx


def test_mad_removes_exactly_injected_spikes():
    x, idx = _spiked_series()
    kept, rep = mad_filter(x, 10)
    truth = np.ones(x.size, dtype=bool)
    truth[idx] = False
    assert np.array_equal(rep.kept, truth)
    assert rep.n_removed == 102
    assert rep.fraction == pytest.approx(102 / 3600)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200))
def test_mad_infinite_k_is_identity(xs):
    kept, rep = mad_filter(xs, math.inf)
    assert np.array_equal(kept, np.asarray(xs, dtype=np.float64))
    assert rep.n_removed == 0


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200), st.floats(0.5, 20))
def test_mad_counts_consistent(xs, k):
    kept, rep = mad_filter(xs, k)
    assert kept.size + rep.n_removed == len(xs)
    assert np.array_equal(kept, np.asarray(xs)[rep.kept])


def test_rms_std():
    assert rms_std(np.array([3.0, -3.0])) == (3.0, 3.0)
    assert all(math.isnan(v) for v in rms_std(np.array([])))


# stability

def _ideal_config(duration=4):
    return from_dict({
        "source": {"B_cps": 5e4, "sigma_c_ps": 0, "sigma_det_ps": 0, "sigma_ttm_ps": 0,
                   "eta_A": 0.8, "eta_B": 0.8, "DC_A_cps": 0, "DC_B_cps": 0},
        "clock_A": {"offset_ps": 4000, "osc_frac_error": 0, "sigma_p_ps": 0},
        "clock_B": {"offset_ps": -9000, "osc_frac_error": 0, "sigma_p_ps": 0},
        "channel": {"loss_db": 0, "delay_rate_ps_per_s": 0},
        "protocol": {"gamma_ps_per_ms2": 0.0},
        "run": {"duration_s": duration, "seed": 3},
    })


def test_stability_zero_jitter_rms_zero():
    cfg = _ideal_config()
    rep = stability_run(cfg.scenario_model(), cfg.sync_config())
    assert len(rep.blocks) == 4 and rep.failed_blocks == 0
    assert rep.drift_rms_ps == 0.0
    assert rep.sync_error_rms_ps == 0.0
    assert rep.mad.zero_mad


def test_stability_rows_shape():
    cfg = _ideal_config(3)
    rep = stability_run(cfg.scenario_model(), cfg.sync_config())
    rows = rep.rows(1.0)
    assert len(rows) == 3 and all(len(r) == len(STABILITY_COLUMNS) for r in rows)
    assert [r[0] for r in rows] == [0, 1, 2]
    assert set(rep.summary()) >= {"drift_rms_ps", "coinc_cps", "outliers_removed"}


def test_stability_rejects_fractional_blocks():
    cfg = _ideal_config(2)
    with pytest.raises(ValueError):
        stability_run(cfg.scenario_model(), cfg.sync_config(block_s=0.5))


@pytest.fixture(scope="module")
def tabletop_hour():
    cfg = load_config(CONFIGS / "tabletop_7p5db.yaml")
    return stability_run(cfg.scenario_model(), cfg.sync_config())


@pytest.mark.slow
def test_tabletop_hour_drift_rms(tabletop_hour):
    assert len(tabletop_hour.blocks) == 3600
    assert tabletop_hour.drift_rms_ps <= 50.0


@pytest.mark.slow
def test_tabletop_hour_coincidence_rate_within_factor_two(tabletop_hour):
    rate = tabletop_hour.coinc_cps[0]
    assert 877 / 2 <= rate <= 877 * 2, rate


# bench

def test_bench_streams_shape():
    a, b = bench_streams(1000, 900, seed=1)
    assert a.size == 1000 and b.size == 900
    assert np.all(np.diff(a) >= 0) and np.all(np.diff(b) >= 0)


def test_bench_reference_size_under_50ms():
    r = bench_correlator(trials=10, seed=0)
    assert (r.n_a, r.n_b, r.trials) == (144_000, 133_000, 10)
    assert r.mean_ms < 50.0
    assert r.events_per_s > 0


def test_bench_scaling_linear():
    _, ratios = scaling_ratios(trials=5, seed=0)
    assert len(ratios) == 3
    assert max(ratios) <= 2.5, ratios


def test_bench_empty_streams():
    r = bench_correlator(0, 0, trials=3)
    assert r.mean_ms < 5.0
    assert math.isfinite(r.std_ms)


# reproduce

@pytest.fixture(scope="module")
def tables(tmp_path_factory):
    out = tmp_path_factory.mktemp("figs")
    cfg = RunConfig()
    for t in ("fig3a", "fig3b", "fig5a"):
        reproduce(cfg, t, out)
    return out


def _col(header, rows, name):
    i = header.index(name)
    return np.array([float(r[i]) for r in rows])


def test_fig5a_skr_monotone_decreasing(tables):
    meta, header, rows = read_table(tables / "fig5a.csv")
    assert tuple(header) == SWEEP_COLUMNS
    assert list(_col(header, rows, "loss_db")) == [1.5, 3.5, 5.5, 7.5]
    skr = _col(header, rows, "skr_bps")
    assert np.all(np.diff(skr) < 0)


def _by_loss(path, loss):
    _, header, rows = read_table(path)
    sel = [r for r in rows if float(r[0]) == loss]
    return header, sel


@pytest.mark.parametrize("loss", [0.93, 20.64])
def test_fig3b_skr_falls_with_S_in_statistics_limited_regime(tables, loss):
    ha, ra = _by_loss(tables / "fig3a.csv", loss)
    hb, rb = _by_loss(tables / "fig3b.csv", loss)
    sig = _col(ha, ra, "sigma_tsec_ps")
    skr = _col(hb, rb, "skr_bps")
    k = int(np.argmin(sig))
    assert 0 < k < len(sig) - 1
    # beyond the optimum the per-sub-block statistics dominate
    assert np.all(np.diff(skr[k:]) <= 0)
    assert skr[k] > skr[-1]
    assert int(np.argmax(skr)) == k


def test_fig3a_interior_minimum_at_high_loss(tables):
    h, rows = _by_loss(tables / "fig3a.csv", 20.64)
    sig = _col(h, rows, "sigma_tsec_ps")
    k = int(np.argmin(sig))
    assert 0 < k < len(sig) - 1
    assert sig[0] > sig[k] and sig[-1] > sig[k]
    below = _col(h, rows, "below_s_min")
    S = _col(h, rows, "S")
    # the linearization flag switches off exactly once, at the S_min threshold
    assert np.all(np.diff(below) <= 0) and below[0] == 1 and below[-1] == 0
    assert S[np.argmin(below)] == 21


def test_tables_rows_and_metadata(tables):
    cfg = RunConfig()
    expected = {
        "fig3a.csv": (FIG3A_COLUMNS, len(cfg.sweep.S) * len(cfg.sweep.fig3_losses_db)),
        "fig3b.csv": (FIG3B_COLUMNS, len(cfg.sweep.S) * len(cfg.sweep.fig3_losses_db)),
        "fig5a.csv": (SWEEP_COLUMNS, len(cfg.sweep.loss_db)),
    }
    for name, (cols, n) in expected.items():
        meta, header, rows = read_table(tables / name)
        assert tuple(header) == cols
        assert len(rows) == n
        assert int(meta["rows"]) == n
        assert meta["config_sha256"] == config_hash(cfg)
        assert meta["seed"] == str(cfg.run.seed)
        assert meta["generator"].startswith("entsync ")


def test_csv_dialect(tables):
    raw = (tables / "fig5a.csv").read_bytes()
    assert b"\r" not in raw
    raw.decode("utf-8")
    assert raw.endswith(b"\n")


def test_write_table_roundtrip(tmp_path):
    n = write_table(tmp_path / "t.csv", ("a", "b"), [(1, 0.1), (2, math.nan)], {"k": "v"})
    meta, header, rows = read_table(tmp_path / "t.csv")
    assert n == 2 and meta == {"k": "v"} and header == ["a", "b"]
    assert rows == [["1", "0.1"], ["2", "nan"]]


def test_reproduce_rejects_unknown_target(tmp_path):
    with pytest.raises(ValueError):
        reproduce(RunConfig(), "fig9", tmp_path)


def _short_fig6():
    cfg = load_config(CONFIGS / "tabletop_7p5db.yaml")
    return replace(cfg, run=replace(cfg.run, duration_s=4))


@pytest.mark.parametrize("target", TARGETS)
def test_reproduce_byte_identical(target, tmp_path):
    cfg = _short_fig6() if target == "fig6" else RunConfig()
    first = reproduce(cfg, target, tmp_path / "a")
    second = reproduce(cfg, target, tmp_path / "b", workers=4)
    assert [p.name for p in first] == [p.name for p in second]
    for p, q in zip(first, second):
        assert p.read_bytes() == q.read_bytes()


def test_fig6_tables(tmp_path):
    cfg = _short_fig6()
    paths = reproduce(cfg, "fig6", tmp_path)
    meta, header, rows = read_table(paths[0])
    assert tuple(header) == STABILITY_COLUMNS and len(rows) == 4 and meta["rows"] == "4"
    meta, header, rows = read_table(paths[1])
    assert header == ["quantity", "value"]
    assert "drift_rms_ps" in [r[0] for r in rows]


# CLI

def test_cli_sweep_point(capsys):
    assert cli.main(["sweep", "--loss", "7.5"]) == 0
    assert '"sigma_tsec_ps"' in capsys.readouterr().out


def test_cli_reproduce_writes_run_dir(tmp_path):
    assert cli.main(["reproduce", "--target", "fig5a", "--out", str(tmp_path), "--seed", "9"]) == 0
    (run,) = tmp_path.iterdir()
    assert (run / "fig5a.csv").exists()
    assert load_config(run / "config.yaml").run.seed == 9
    assert run.name.split("-")[0] == config_hash(load_config(run / "config.yaml"))[:12]


def test_cli_sync(tmp_path, capsys):
    code = cli.main(["sync", "--config", str(CONFIGS / "tabletop_7p5db.yaml"),
                     "--duration", "3", "--out", str(tmp_path)])
    assert code == 0
    (run,) = tmp_path.iterdir()
    assert (run / "sync.csv").exists()
    assert "sync_error_rms_ps" in capsys.readouterr().out


def test_cli_simulate(tmp_path):
    assert cli.main(["simulate", "--config", str(CONFIGS / "reference.yaml"), "--duration", "1",
                     "--out", str(tmp_path), "--csv"]) == 0
    (run,) = tmp_path.iterdir()
    names = {p.name for p in run.iterdir()}
    assert {"stream_A.etts", "stream_B.etts", "pps_A.csv", "pps_B.csv", "stream_A.csv"} <= names


def test_cli_bench(tmp_path):
    assert cli.main(["bench", "--n-a", "1000", "--n-b", "1000", "--trials", "2",
                     "--out", str(tmp_path)]) == 0


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("source:\n  eta_A: 2.0\n")
    assert cli.main(["sweep", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "source.eta_A" in capsys.readouterr().err


def test_cli_runtime_error_exit_code(tmp_path):
    cfg = replace(_ideal_config(2), source=replace(_ideal_config().source, B_cps=0.0))
    path = tmp_path / "dark.yaml"
    save_config(cfg, path)
    assert cli.main(["reproduce", "--target", "fig6", "--config", str(path),
                     "--out", str(tmp_path / "o")]) == 3


def test_cli_bad_seed_rejected():
    with pytest.raises(SystemExit) as info:
        cli.main(["sweep", "--seed", "-4"])
    assert info.value.code == 2
