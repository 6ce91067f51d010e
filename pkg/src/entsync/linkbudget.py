"""Free-space link efficiency, accidental coincidences, QBER and key rate.

SI units on the link side (metres, radians). Timing quantities are in ps
except inside :func:`accidental_rate`, which converts to seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import bisect
from scipy.special import erf

from .correlation import FWHM_PER_SIGMA
from .syncproto import min_subblocks, ppsta_variance
from .timetags import PS_PER_MS, PS_PER_S, SourceDetectorModel

PS_TO_S = 1.0 / PS_PER_S


class UndefinedRateError(ZeroDivisionError):
    """QBER requested for a point with no coincidences at all."""


@dataclass(frozen=True)
class OpticalLink:
    distance_m: float = 200.0
    wavelength_m: float = 1550e-9
    tx_aperture_m: float = 24.6e-3
    rx_aperture_m: float = 24.6e-3
    fried_param_m: float = 0.2
    zenith_angle_rad: float = 0.0
    elevation_angle_rad: float = 0.0
    optical_depth: float = 0.02
    pointing_sigma_rad: float = 0.0
    opd_rms_m: float = 0.0
    strehl_ratio: float | None = None

    def __post_init__(self) -> None:
        for name in ("distance_m", "wavelength_m", "tx_aperture_m", "rx_aperture_m", "fried_param_m"):
            v = getattr(self, name)
            if not v > 0:
                raise ValueError(f"{name} must be > 0, got {v!r}")
        for name in ("optical_depth", "pointing_sigma_rad", "opd_rms_m"):
            v = getattr(self, name)
            if not v >= 0:
                raise ValueError(f"{name} must be >= 0, got {v!r}")
        for name in ("zenith_angle_rad", "elevation_angle_rad"):
            v = getattr(self, name)
            if not abs(v) < math.pi / 2:
                raise ValueError(f"{name} must lie in (-pi/2, pi/2), got {v!r}")
        if self.strehl_ratio is not None and not 0 < self.strehl_ratio <= 1:
            raise ValueError("strehl_ratio must lie in (0, 1]")

    def at(self, distance_m: float) -> OpticalLink:
        return replace(self, distance_m=float(distance_m))


def total_timing_uncertainty(
    sigma_c: float,
    sigma_det: float,
    sigma_ttm: float,
    sigma_sync: float,
    arms: str = "both",
) -> float:
    """Coincidence timing width dT in ps.

    ``arms="both"`` counts the detector and TTM jitter of both detections;
    ``arms="single"`` uses one of each.
    """
    for v in (sigma_c, sigma_det, sigma_ttm, sigma_sync):
        if v < 0:
            raise ValueError("timing contributions must be >= 0")
    m = {"both": 2.0, "single": 1.0}[arms]
    sigma_j2 = sigma_c**2 + m * sigma_det**2 + m * sigma_ttm**2
    return math.sqrt(sigma_j2 + sigma_sync**2)


def diffraction_waist(link: OpticalLink) -> float:
    """Turbulence-broadened diffraction waist at the receiver (m)."""
    sec = 1.0 / math.cos(link.zenith_angle_rad)
    turb = (1.0 + 0.83 * sec * (link.tx_aperture_m / link.fried_param_m) ** (5.0 / 3.0)) ** (3.0 / 5.0)
    return link.distance_m * link.wavelength_m / (math.pi * 0.316 * link.tx_aperture_m) * turb


def effective_waist(omega_l: float, sigma_point: float, distance_m: float) -> float:
    return math.sqrt(omega_l**2 + (sigma_point * distance_m) ** 2)


def strehl(opd_rms_m: float, wavelength_m: float) -> float:
    return math.exp(-((2.0 * math.pi * opd_rms_m / wavelength_m) ** 2))


def link_efficiency(link: OpticalLink) -> float:
    """Channel transmittance: Strehl x atmosphere x aperture capture."""
    w0 = effective_waist(diffraction_waist(link), link.pointing_sigma_rad, link.distance_m)
    sr = link.strehl_ratio if link.strehl_ratio is not None else strehl(link.opd_rms_m, link.wavelength_m)
    atm = math.exp(-link.optical_depth / math.cos(link.elevation_angle_rad))
    capture = -math.expm1(-0.5 * (link.rx_aperture_m / w0) ** 2)
    return sr * atm * capture


def link_loss_db(link: OpticalLink) -> float:
    return -10.0 * math.log10(link_efficiency(link))


def distance_for_loss(
    loss_db: float, link: OpticalLink, xtol: float = 0.1, lo: float = 1e-3, hi: float = 1e6
) -> float:
    """Invert the monotone loss(l) by bisection."""
    def f(l: float) -> float:
        return link_loss_db(link.at(l)) - loss_db

    if f(lo) > 0 or f(hi) < 0:
        raise ValueError(f"loss {loss_db} dB is outside [{lo}, {hi}] m for this link")
    return float(bisect(f, lo, hi, xtol=xtol))


def window_capture(tau_w_ps: float, delta_t_ps: float) -> float:
    """Fraction of a Gaussian peak of std dT inside a window of full width tau_w."""
    if delta_t_ps == 0:
        return 1.0
    return float(erf(tau_w_ps / (2.0 * math.sqrt(2.0) * delta_t_ps)))


def accidental_rate(
    B: float, eta_a: float, eta_b: float, dc_a: float, dc_b: float, delta_t_ps: float
) -> float:
    """gamma_T in cps, (B eta_A + 2 DC_A)(B eta_B + 2 DC_B) dT."""
    return (B * eta_a + 2.0 * dc_a) * (B * eta_b + 2.0 * dc_b) * delta_t_ps * PS_TO_S


def qber(B: float, eta_a: float, eta_b: float, e0: float, gamma_t: float, capture: float) -> float:
    signal = capture * B * eta_a * eta_b
    den = signal + gamma_t
    if den <= 0:
        raise UndefinedRateError("no signal and no accidental coincidences")
    return (signal * e0 + gamma_t / 2.0) / den


def binary_entropy(x):
    """H2 in bits; exact 0 at the endpoints."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any((arr < 0) | (arr > 1)):
        raise ValueError("binary entropy needs x in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -arr * np.log2(arr) - (1.0 - arr) * np.log2(1.0 - arr)
    h = np.where((arr == 0) | (arr == 1), 0.0, h)
    return float(h) if h.ndim == 0 else h


def secret_key_rate(q_a: float, e: float, f: float) -> float:
    if q_a < 0:
        raise ValueError("Q_A must be >= 0")
    return max(0.0, q_a * (1.0 - (1.0 + f) * binary_entropy(e)))


@dataclass(frozen=True)
class RateModel:
    brightness_cps: float
    eta_a: float
    eta_b: float
    dc_a_cps: float = 1000.0
    dc_b_cps: float = 1000.0
    e0: float = 0.01
    f: float = 1.09
    window_capture: float = 1.0
    sift_fraction: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.window_capture <= 1.0:
            raise ValueError("window_capture must lie in [0, 1]")
        if not self.f >= 1.0:
            raise ValueError("error-correction inefficiency f must be >= 1")
        if not 0.0 < self.sift_fraction <= 1.0:
            raise ValueError("sift_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class LinkBudgetReport:
    loss_db: float
    distance_m: float
    sigma_tsec_ps: float
    delta_t_ps: float
    window_capture: float
    signal_cps: float
    gamma_cps: float
    qber: float
    q_a_cps: float
    skr_bps: float


def evaluate_rates(
    rates: RateModel,
    delta_t_ps: float,
    loss_db: float = math.nan,
    distance_m: float = math.nan,
    sigma_tsec_ps: float = math.nan,
) -> LinkBudgetReport:
    """gamma_T -> E -> R at one operating point."""
    g = accidental_rate(
        rates.brightness_cps, rates.eta_a, rates.eta_b, rates.dc_a_cps, rates.dc_b_cps, delta_t_ps
    )
    e = qber(rates.brightness_cps, rates.eta_a, rates.eta_b, rates.e0, g, rates.window_capture)
    signal = rates.window_capture * rates.brightness_cps * rates.eta_a * rates.eta_b
    q_a = rates.sift_fraction * (signal + g)
    return LinkBudgetReport(
        loss_db, distance_m, sigma_tsec_ps, delta_t_ps, rates.window_capture,
        signal, g, e, q_a, secret_key_rate(q_a, e, rates.f),
    )


@dataclass(frozen=True)
class TradeoffConfig:
    """Inputs of the sub-block / loss trade-off model."""

    source: SourceDetectorModel = field(default_factory=SourceDetectorModel)
    link: OpticalLink = field(default_factory=OpticalLink)
    f: float = 1.09
    sift_fraction: float = 0.5
    pps_sigma_a_ps: float = 1000.0
    pps_sigma_b_ps: float = 1000.0
    window_n_s: float = 1.0
    eps_prop_ps: float = 0.0
    block_s: float = 1.0
    drift_accel_ps_per_ms2: float = 0.3
    delta_eta_ps: float = 150.0 / math.sqrt(3.0)
    subblocks: int = 20
    window_factor: float = 1.0
    timing_arms: str = "both"


@dataclass(frozen=True)
class TradeoffPoint:
    loss_db: float
    distance_m: float
    S: int
    pairs_per_subblock: float
    sigma_mu_ps: float
    penalty_ps: float
    sigma_tsec_ps: float
    below_s_min: bool
    report: LinkBudgetReport


SWEEP_COLUMNS = ("loss_db", "distance_m", "sigma_tsec_ps", "delta_t_ps", "gamma_cps", "qber", "skr_bps")
SUBBLOCK_COLUMNS = (
    "loss_db", "S", "pairs_per_subblock", "sigma_mu_ps", "penalty_ps", "sigma_tsec_ps",
    "below_s_min", "delta_t_ps", "gamma_cps", "qber", "skr_bps",
)


def tradeoff_point(cfg: TradeoffConfig, loss_db: float, S: int, distance_m: float | None = None) -> TradeoffPoint:
    """Compose the variance models with the rate formulas at (loss, S).

    Sub-block means average the PPS-TA residual over the captured pairs;
    the alpha-average of the interpolation weights (1-a)^2 + a^2 is 2/3.
    A chord error gamma*dtau^2/8 adds in quadrature as the drift penalty.
    """
    src = cfg.source
    eta_b = src.eta_b * 10.0 ** (-loss_db / 10.0)
    arm_sigma = math.hypot(src.det_sigma_ps, src.ttm_sigma_ps)
    dt0 = total_timing_uncertainty(src.coherence_sigma_ps, src.det_sigma_ps, src.ttm_sigma_ps, 0.0, cfg.timing_arms)
    cap0 = window_capture(cfg.window_factor * FWHM_PER_SIGMA * dt0, dt0)
    pairs = src.brightness_cps * src.eta_a * eta_b * cfg.block_s * cap0
    n_s = pairs / S
    s2_ppsta = ppsta_variance(
        arm_sigma, cfg.pps_sigma_a_ps, cfg.pps_sigma_b_ps, cfg.window_n_s, 0.5, cfg.eps_prop_ps
    ).sigma2_ppsta
    s2_mu = (2.0 / 3.0) * s2_ppsta / n_s if n_s > 0 else math.inf
    dtau_ps = cfg.block_s * PS_PER_S / S
    s2_ts = (arm_sigma / dtau_ps) ** 2
    dtau_ms = dtau_ps / PS_PER_MS
    penalty = abs(cfg.drift_accel_ps_per_ms2) * dtau_ms**2 / 8.0
    sigma_tsec = math.sqrt(s2_ts + s2_mu + penalty**2)
    s_min = min_subblocks(cfg.block_s * 1e3, cfg.drift_accel_ps_per_ms2, cfg.delta_eta_ps)

    dt = total_timing_uncertainty(
        src.coherence_sigma_ps, src.det_sigma_ps, src.ttm_sigma_ps, sigma_tsec, cfg.timing_arms
    )
    cap = window_capture(cfg.window_factor * FWHM_PER_SIGMA * dt, dt)
    rates = RateModel(src.brightness_cps, src.eta_a, eta_b, src.dc_a_cps, src.dc_b_cps, src.e0,
                      cfg.f, cap, cfg.sift_fraction)
    if distance_m is None:
        try:
            distance_m = distance_for_loss(loss_db, cfg.link)
        except ValueError:
            distance_m = math.nan
    report = evaluate_rates(rates, dt, loss_db, distance_m, sigma_tsec)
    return TradeoffPoint(
        loss_db, distance_m, int(S), n_s, math.sqrt(s2_mu), penalty, sigma_tsec,
        S < math.ceil(s_min), report,
    )


def skr_vs_loss_curve(cfg: TradeoffConfig, loss_sweep) -> list[TradeoffPoint]:
    return [tradeoff_point(cfg, float(l), cfg.subblocks) for l in loss_sweep]


def skr_vs_subblocks(cfg: TradeoffConfig, S_sweep, losses=(0.93, 20.64)) -> list[TradeoffPoint]:
    out = []
    for loss in losses:
        try:
            d = distance_for_loss(float(loss), cfg.link)
        except ValueError:
            d = math.nan
        out.extend(tradeoff_point(cfg, float(loss), int(S), d) for S in S_sweep)
    return out


def loss_row(p: TradeoffPoint) -> tuple:
    r = p.report
    return (p.loss_db, p.distance_m, p.sigma_tsec_ps, r.delta_t_ps, r.gamma_cps, r.qber, r.skr_bps)


def subblock_row(p: TradeoffPoint) -> tuple:
    r = p.report
    return (
        p.loss_db, p.S, p.pairs_per_subblock, p.sigma_mu_ps, p.penalty_ps, p.sigma_tsec_ps,
        int(p.below_s_min), r.delta_t_ps, r.gamma_cps, r.qber, r.skr_bps,
    )
