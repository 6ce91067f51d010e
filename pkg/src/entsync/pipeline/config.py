"""Run configuration: YAML in, validated dataclasses out, and back.

Keys are the model symbols transliterated to ASCII with a unit suffix.
Unknown keys and out-of-domain values raise :class:`ConfigError` naming the
dotted location of the offending key.
"""

from __future__ import annotations

import hashlib
import json
import math
import types
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from ..linkbudget import OpticalLink, TradeoffConfig, link_loss_db
from ..syncproto import HistConfig, SyncConfig
from ..timetags import ChannelState, ClockModel, SourceDetectorModel
from .scenario import ScenarioModel


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the key location."""


def _nonneg(*names):
    def check(obj, where):
        for n in names:
            v = getattr(obj, n)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"{where}.{n}: must be a finite number >= 0, got {v!r}")
    return check


def _unit(*names):
    def check(obj, where):
        for n in names:
            v = getattr(obj, n)
            if not 0 <= v <= 1:
                raise ConfigError(f"{where}.{n}: must lie in [0, 1], got {v!r}")
    return check


@dataclass
class SourceSection:
    B_cps: float = 1.0e6
    sigma_c_ps: float = 3.0
    sigma_det_ps: float = 45.0
    sigma_ttm_ps: float = 45.0
    eta_A: float = 0.72
    eta_B: float = 0.72
    DC_A_cps: float = 1000.0
    DC_B_cps: float = 1000.0
    e0: float = 0.01
    f: float = 1.09
    ttm_resolution_ps: int = 1
    sift_fraction: float = 0.5
    timing_arms: str = "both"

    def validate(self, where: str) -> None:
        _nonneg("B_cps", "sigma_c_ps", "sigma_det_ps", "sigma_ttm_ps", "DC_A_cps", "DC_B_cps")(self, where)
        _unit("eta_A", "eta_B", "e0")(self, where)
        if self.f < 1:
            raise ConfigError(f"{where}.f: must be >= 1, got {self.f!r}")
        if self.ttm_resolution_ps < 1:
            raise ConfigError(f"{where}.ttm_resolution_ps: must be >= 1")
        if not 0 < self.sift_fraction <= 1:
            raise ConfigError(f"{where}.sift_fraction: must lie in (0, 1]")
        if self.timing_arms not in ("both", "single"):
            raise ConfigError(f"{where}.timing_arms: must be 'both' or 'single'")


@dataclass
class ClockSection:
    offset_ps: float = 0.0
    eta_ps_per_s: float = 0.0
    gamma_ps_per_ms2: float = 0.0
    osc_frac_error: float = 0.0
    sigma_p_ps: float = 1000.0

    def validate(self, where: str) -> None:
        for n in ("offset_ps", "eta_ps_per_s", "gamma_ps_per_ms2", "osc_frac_error"):
            if not math.isfinite(getattr(self, n)):
                raise ConfigError(f"{where}.{n}: must be finite")
        _nonneg("sigma_p_ps")(self, where)


@dataclass
class ChannelSection:
    mode: str = "fixed"
    loss_db: float = 7.5
    distance_m: float = 200.0
    base_delay_ps: float = 35000.0
    delay_rate_ps_per_s: float = 300.0
    delay_accel_ps_per_ms2: float = 0.0

    def validate(self, where: str) -> None:
        if self.mode not in ("fixed", "geometric"):
            raise ConfigError(f"{where}.mode: must be 'fixed' or 'geometric', got {self.mode!r}")
        _nonneg("loss_db")(self, where)
        if not self.distance_m > 0:
            raise ConfigError(f"{where}.distance_m: must be > 0")
        for n in ("base_delay_ps", "delay_rate_ps_per_s", "delay_accel_ps_per_ms2"):
            if not math.isfinite(getattr(self, n)):
                raise ConfigError(f"{where}.{n}: must be finite")


@dataclass
class LinkSection:
    lambda_nm: float = 1550.0
    D_T_mm: float = 24.6
    D_R_mm: float = 24.6
    r0_m: float = 0.2
    theta_rad: float = 0.0
    theta_E_rad: float = 0.0
    tau0: float = 0.02
    sigma_T_rad: float = 0.0
    sigma_T_table: float = 6.0e6
    n0: float = 1.0
    SR: float | None = 1.0
    OPD_rms_nm: float = 0.0

    def validate(self, where: str) -> None:
        for n in ("lambda_nm", "D_T_mm", "D_R_mm", "r0_m"):
            if not getattr(self, n) > 0:
                raise ConfigError(f"{where}.{n}: must be > 0")
        _nonneg("tau0", "sigma_T_rad", "OPD_rms_nm")(self, where)
        for n in ("theta_rad", "theta_E_rad"):
            if not abs(getattr(self, n)) < math.pi / 2:
                raise ConfigError(f"{where}.{n}: must lie in (-pi/2, pi/2)")
        if self.SR is not None and not 0 < self.SR <= 1:
            raise ConfigError(f"{where}.SR: must lie in (0, 1] or be null")


@dataclass
class ProtocolSection:
    n_s: int = 1
    T_s_s: float = 1.0
    S: int | str = 20
    tau_w_policy: str = "fwhm"
    sigma_tsec_target_ps: float = 150.0
    gamma_ps_per_ms2: float = 0.3
    tsec_enabled: bool = True
    refine_passes: int = 1
    n_bins: int = 20000
    bin_width_ps: int = 50

    def validate(self, where: str) -> None:
        if self.n_s < 1:
            raise ConfigError(f"{where}.n_s: must be >= 1")
        if not self.T_s_s > 0:
            raise ConfigError(f"{where}.T_s_s: must be > 0")
        if isinstance(self.S, str):
            if self.S != "auto":
                raise ConfigError(f"{where}.S: must be a positive integer or 'auto'")
        elif self.S < 1:
            raise ConfigError(f"{where}.S: must be >= 1")
        if self.tau_w_policy not in ("fwhm", "wide"):
            raise ConfigError(f"{where}.tau_w_policy: must be 'fwhm' or 'wide'")
        if not self.sigma_tsec_target_ps > 0:
            raise ConfigError(f"{where}.sigma_tsec_target_ps: must be > 0")
        if self.refine_passes < 0:
            raise ConfigError(f"{where}.refine_passes: must be >= 0")
        if self.n_bins < 1 or self.bin_width_ps < 1:
            raise ConfigError(f"{where}: n_bins and bin_width_ps must be >= 1")


@dataclass
class RunSection:
    duration_s: int = 100
    seed: int = 20240601
    out_dir: str = "runs"
    workers: int = 1
    tag_outcomes: bool = False

    def validate(self, where: str) -> None:
        if self.duration_s < 1:
            raise ConfigError(f"{where}.duration_s: must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"{where}.seed: must be an unsigned 64-bit integer")
        if self.workers < 1:
            raise ConfigError(f"{where}.workers: must be >= 1")


@dataclass
class SweepSection:
    loss_db: list[float] = field(default_factory=lambda: [1.5, 3.5, 5.5, 7.5])
    S: list[int] = field(default_factory=lambda: list(range(1, 101)))
    fig3_losses_db: list[float] = field(default_factory=lambda: [0.93, 20.64])

    def validate(self, where: str) -> None:
        if not self.loss_db or any(not (math.isfinite(v) and v >= 0) for v in self.loss_db):
            raise ConfigError(f"{where}.loss_db: must be a non-empty list of losses >= 0")
        if not self.S or any(s < 1 for s in self.S):
            raise ConfigError(f"{where}.S: must be a non-empty list of integers >= 1")
        if not self.fig3_losses_db:
            raise ConfigError(f"{where}.fig3_losses_db: must be non-empty")


@dataclass
class RunConfig:
    source: SourceSection = field(default_factory=SourceSection)
    clock_A: ClockSection = field(default_factory=lambda: ClockSection(
        offset_ps=3.7e6, osc_frac_error=1.0e-6))
    clock_B: ClockSection = field(default_factory=lambda: ClockSection(
        offset_ps=-12.3e6, osc_frac_error=-0.7e-6))
    channel: ChannelSection = field(default_factory=ChannelSection)
    link: LinkSection = field(default_factory=LinkSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    run: RunSection = field(default_factory=RunSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def validate(self) -> None:
        for f in fields(self):
            getattr(self, f.name).validate(f.name)

    # conversions into the library's model types

    def optical_link(self) -> OpticalLink:
        lk = self.link
        return OpticalLink(
            distance_m=self.channel.distance_m,
            wavelength_m=lk.lambda_nm * 1e-9,
            tx_aperture_m=lk.D_T_mm * 1e-3,
            rx_aperture_m=lk.D_R_mm * 1e-3,
            fried_param_m=lk.r0_m,
            zenith_angle_rad=lk.theta_rad,
            elevation_angle_rad=lk.theta_E_rad,
            optical_depth=lk.tau0,
            pointing_sigma_rad=lk.sigma_T_rad,
            opd_rms_m=lk.OPD_rms_nm * 1e-9,
            strehl_ratio=lk.SR,
        )

    def loss_db(self) -> float:
        if self.channel.mode == "geometric":
            return link_loss_db(self.optical_link())
        return self.channel.loss_db

    def source_model(self, brightness: float | None = None) -> SourceDetectorModel:
        s = self.source
        return SourceDetectorModel(
            brightness_cps=s.B_cps if brightness is None else brightness,
            coherence_sigma_ps=s.sigma_c_ps,
            det_sigma_ps=s.sigma_det_ps,
            ttm_sigma_ps=s.sigma_ttm_ps,
            eta_a=s.eta_A,
            eta_b=s.eta_B,
            dc_a_cps=s.DC_A_cps,
            dc_b_cps=s.DC_B_cps,
            e0=s.e0,
            ttm_resolution_ps=s.ttm_resolution_ps,
        )

    @staticmethod
    def _clock(c: ClockSection) -> ClockModel:
        return ClockModel(c.offset_ps, c.eta_ps_per_s, c.gamma_ps_per_ms2, c.osc_frac_error, c.sigma_p_ps)

    def channel_state(self) -> ChannelState:
        c = self.channel
        return ChannelState(c.base_delay_ps, c.delay_rate_ps_per_s, c.delay_accel_ps_per_ms2, self.loss_db())

    def scenario_model(self, seed: int | None = None, duration_s: int | None = None,
                       brightness: float | None = None) -> ScenarioModel:
        return ScenarioModel(
            self.source_model(brightness),
            self._clock(self.clock_A),
            self._clock(self.clock_B),
            self.channel_state(),
            int(self.run.duration_s if duration_s is None else duration_s),
            int(self.run.seed if seed is None else seed),
            int(self.protocol.n_s),
            bool(self.run.tag_outcomes),
        )

    def sync_config(self, **overrides: Any) -> SyncConfig:
        p = self.protocol
        s = self.source
        kw: dict[str, Any] = dict(
            n_window_s=p.n_s,
            block_s=p.T_s_s,
            subblocks=None if p.S == "auto" else int(p.S),
            window_policy=p.tau_w_policy,
            sigma_tsec_target_ps=p.sigma_tsec_target_ps,
            drift_accel_ps_per_ms2=p.gamma_ps_per_ms2,
            tsec_enabled=p.tsec_enabled,
            refine_passes=p.refine_passes,
            hist=HistConfig(p.n_bins, p.bin_width_ps),
            sigma_det_ps=math.hypot(s.sigma_det_ps, s.sigma_ttm_ps),
            pps_sigma_a_ps=self.clock_A.sigma_p_ps,
            pps_sigma_b_ps=self.clock_B.sigma_p_ps,
        )
        kw.update(overrides)
        return SyncConfig(**kw)

    def tradeoff_config(self) -> TradeoffConfig:
        p = self.protocol
        return TradeoffConfig(
            source=self.source_model(),
            link=self.optical_link(),
            f=self.source.f,
            sift_fraction=self.source.sift_fraction,
            pps_sigma_a_ps=self.clock_A.sigma_p_ps,
            pps_sigma_b_ps=self.clock_B.sigma_p_ps,
            window_n_s=float(p.n_s),
            block_s=p.T_s_s,
            drift_accel_ps_per_ms2=p.gamma_ps_per_ms2,
            delta_eta_ps=p.sigma_tsec_target_ps / math.sqrt(3.0),
            subblocks=20 if p.S == "auto" else int(p.S),
            window_factor=1.0 if p.tau_w_policy == "fwhm" else 1.2,
            timing_arms=self.source.timing_arms,
        )


def _coerce(value: Any, hint: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[-1] if errors else f"{where}: invalid value {value!r}")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return [_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported type {hint!r}")


def _build(base, data: Any, where: str):
    """Overlay a mapping on a dataclass instance, so absent keys keep its defaults."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    cls = type(base)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{where}.{key}: unknown key" if where else f"{key}: unknown key")
    kw = {}
    for name, value in data.items():
        loc = f"{where}.{name}" if where else name
        hint = hints[name]
        if isinstance(hint, type) and hasattr(hint, "__dataclass_fields__"):
            kw[name] = _build(getattr(base, name), value if value is not None else {}, loc)
        else:
            kw[name] = _coerce(value, hint, loc)
    return replace(base, **kw)


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig(), data or {}, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML syntax error: {exc}") from exc
    return from_dict(data or {})


def to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


class _Dumper(yaml.SafeDumper):
    """Block mappings with inline lists."""


_Dumper.add_representer(
    list, lambda d, v: d.represent_sequence("tag:yaml.org,2002:seq", v, flow_style=True)
)


def dump_config(cfg: RunConfig) -> str:
    return yaml.dump(to_dict(cfg), Dumper=_Dumper, sort_keys=False, width=100)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
