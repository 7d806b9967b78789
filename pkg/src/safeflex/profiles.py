"""Synthetic hourly price and load profiles.

Stands in for market and feeder measurements: a day-ahead-like flexibility
price, a three-level time-of-use tariff, residential background loads on every
bus and commercial building demand at the agent buses.  Background loads are
scaled so the most loaded hour of the dataset (with all devices idle) reaches a
chosen minimum feeder voltage.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .der import FleetSpec
from .grid import InjectionProfile, NetworkModel, solve_power_flow

log = logging.getLogger(__name__)

HOURS_PER_DAY = 24
# seasonal period in days; a whole number of weeks keeps noise-free data exactly periodic
SEASON_DAYS = 364


@dataclass(frozen=True)
class SyntheticProfileSpec:
    years: int = 2
    start: str = "2023-01-02 00:00"
    # background (residential) load shape, as multipliers of the nominal bus load
    night_level: float = 0.45
    morning_peak: float = 0.25
    morning_hour: float = 8.0
    evening_peak: float = 0.55
    evening_hour: float = 19.5
    weekend_factor: float = 0.93
    seasonal_amplitude: float = 0.08
    seasonal_peak_day: int = 0
    noise: float = 0.03
    # commercial building demand
    building_peak_kw: float = 120.0
    building_floor_frac: float = 0.5
    building_power_factor: float = 0.95
    # voltage calibration of background load (None keeps nominal scaling)
    min_voltage_pu: float | None = 0.953
    # flexibility price, EUR/kWh
    flex_base: float = 0.08
    flex_morning: float = 0.03
    flex_evening: float = 0.09
    flex_midday_dip: float = 0.02
    flex_weekend: float = -0.01
    flex_seasonal: float = 0.015
    flex_noise: float = 0.012
    # time-of-use tariff, EUR/kWh
    tou_offpeak: float = 0.10
    tou_shoulder: float = 0.15
    tou_peak: float = 0.25
    peak_hours: tuple[int, int] = (17, 21)
    offpeak_hours: tuple[int, int] = (23, 7)

    def __post_init__(self):
        if self.years < 1:
            raise ValueError("years must be >= 1")
        if not 0 < self.building_floor_frac <= 1:
            raise ValueError("building_floor_frac must lie in (0, 1]")
        if self.noise < 0 or self.flex_noise < 0:
            raise ValueError("noise levels must be non-negative")


@dataclass
class ProfileData:
    timestamps: pd.DatetimeIndex
    lambda_flex: np.ndarray
    lambda_buy: np.ndarray
    active_kw: np.ndarray
    reactive_kvar: np.ndarray
    load_scale: float = 1.0

    @property
    def n_steps(self) -> int:
        return len(self.timestamps)


def tou_tariff(hours: np.ndarray, spec: SyntheticProfileSpec) -> np.ndarray:
    hours = np.asarray(hours) % 24
    p0, p1 = spec.peak_hours
    o0, o1 = spec.offpeak_hours
    out = np.full(hours.shape, spec.tou_shoulder, dtype=float)
    out[(hours >= o0) | (hours < o1)] = spec.tou_offpeak
    out[(hours >= p0) & (hours < p1)] = spec.tou_peak
    return out


def _bump(h: np.ndarray, center: float, width: float) -> np.ndarray:
    # circular distance so the evening bump wraps past midnight smoothly
    d = np.minimum(np.abs(h - center), 24 - np.abs(h - center))
    return np.exp(-0.5 * (d / width) ** 2)


def _ar1(rng: np.random.Generator, n: int, sigma: float, phi: float = 0.7, size: int | None = None) -> np.ndarray:
    shape = (n,) if size is None else (n, size)
    eps = rng.normal(0.0, sigma * np.sqrt(1 - phi * phi), size=shape)
    out = np.empty(shape)
    out[0] = rng.normal(0.0, sigma, size=shape[1:]) if size else rng.normal(0.0, sigma)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + eps[t]
    return out


def _bisect_scale(net: NetworkModel, bg_p, bg_q, bld_p, bld_q, target: float) -> float:
    def min_v(scale: float) -> float:
        inj = InjectionProfile(scale * bg_p + bld_p, scale * bg_q + bld_q)
        return float(np.sqrt(solve_power_flow(net, inj).v_sq_pu.min()))

    if min_v(0.0) < target:
        raise ValueError("building demand alone already breaches the target voltage")
    lo, hi = 0.0, 1.0
    while min_v(hi) > target:
        lo, hi = hi, 2 * hi
        if hi > 64:
            raise ValueError("cannot reach the target voltage by scaling background load")
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if min_v(mid) > target:
            lo = mid
        else:
            hi = mid
    return lo


def _calibrate_scale(net: NetworkModel, bg_p, bg_q, bld_p, bld_q, target: float, screen: int = 400) -> float:
    """Largest background scale keeping every hour at or above ``target``.

    Bisects on the most heavily loaded hours first and confirms on the full set.
    """
    total = bg_p.sum(axis=1) + bld_p.sum(axis=1)
    idx = np.sort(np.argsort(total)[-screen:])
    scale = _bisect_scale(net, bg_p[idx], bg_q[idx], bld_p[idx], bld_q[idx], target)
    full = solve_power_flow(net, InjectionProfile(scale * bg_p + bld_p, scale * bg_q + bld_q))
    if np.sqrt(full.v_sq_pu.min()) < target - 1e-9:
        scale = _bisect_scale(net, bg_p, bg_q, bld_p, bld_q, target)
    return scale


def generate_profiles(net: NetworkModel, fleet: FleetSpec, spec: SyntheticProfileSpec, seed: int) -> ProfileData:
    rng = np.random.default_rng(seed)
    n_days = 365 * spec.years
    n = n_days * HOURS_PER_DAY
    ts = pd.date_range(spec.start, periods=n, freq="h", tz="UTC")
    t = np.arange(n)
    hour = (t % 24).astype(float)
    day = t // 24
    weekend = (day % 7) >= 5
    season = np.cos(2 * np.pi * (day - spec.seasonal_peak_day) / SEASON_DAYS)

    daily = spec.night_level + spec.morning_peak * _bump(hour, spec.morning_hour, 1.5) + spec.evening_peak * _bump(hour, spec.evening_hour, 2.2)
    daily = daily / daily.max()
    bg_shape = daily * np.where(weekend, spec.weekend_factor, 1.0) * (1 + spec.seasonal_amplitude * season)

    nom_p = np.asarray(net.nominal_p_kw if net.nominal_p_kw is not None else np.zeros(net.n_bus), dtype=float).copy()
    nom_q = np.asarray(net.nominal_q_kvar if net.nominal_q_kvar is not None else np.zeros(net.n_bus), dtype=float).copy()
    agent_buses = fleet.buses
    nom_p[agent_buses] = 0.0
    nom_q[agent_buses] = 0.0
    nom_p[net.slack_bus] = 0.0
    nom_q[net.slack_bus] = 0.0
    bus_noise = _ar1(rng, n, spec.noise, size=net.n_bus) if spec.noise > 0 else np.zeros((n, net.n_bus))
    mult = bg_shape[:, None] * (1 + bus_noise)
    # cap noise excursions at the noise-free annual maximum so calibration holds for every hour
    mult = np.clip(mult, 0.05, bg_shape.max())
    bg_p = mult * nom_p
    bg_q = mult * nom_q

    # commercial building: plateau during working hours, reduced at weekends
    work = 1 / (1 + np.exp(-(hour - 7.5) * 2.0)) * 1 / (1 + np.exp((hour - 18.5) * 2.0))
    bld_shape = work * np.where(weekend, 0.6, 1.0) * (1 + 0.5 * spec.seasonal_amplitude * season)
    b_noise = _ar1(rng, n, spec.noise, size=len(agent_buses)) if spec.noise > 0 else np.zeros((n, len(agent_buses)))
    bld_p = np.zeros((n, net.n_bus))
    bld_q = np.zeros((n, net.n_bus))
    tan_phi = np.tan(np.arccos(spec.building_power_factor))
    for k, agent in enumerate(fleet.agents):
        floor = max(spec.building_floor_frac * spec.building_peak_kw, 2.0 * agent.building.p_dr_max_kw)
        if floor <= agent.building.p_dr_max_kw:
            raise ValueError("building floor must exceed the DR capacity")
        d = floor + (spec.building_peak_kw - floor) * bld_shape * (1 + b_noise[:, k])
        d = np.clip(d, floor, None)
        bld_p[:, agent.bus] = d
        bld_q[:, agent.bus] = d * tan_phi

    scale = 1.0
    if spec.min_voltage_pu is not None:
        scale = _calibrate_scale(net, bg_p, bg_q, bld_p, bld_q, spec.min_voltage_pu)
        log.info("background load scaled by %.4f to reach %.4f pu", scale, spec.min_voltage_pu)

    flex = (
        spec.flex_base
        + spec.flex_morning * _bump(hour, 8.0, 1.5)
        + spec.flex_evening * _bump(hour, 19.0, 1.8)
        - spec.flex_midday_dip * _bump(hour, 13.5, 2.0)
        + spec.flex_weekend * weekend
        + spec.flex_seasonal * season
    )
    if spec.flex_noise > 0:
        flex = flex + _ar1(rng, n, spec.flex_noise)
    flex = np.clip(flex, 0.005, None)

    return ProfileData(
        timestamps=ts,
        lambda_flex=np.round(flex, 6),
        lambda_buy=tou_tariff(hour, spec),
        active_kw=np.round(scale * bg_p + bld_p, 6),
        reactive_kvar=np.round(scale * bg_q + bld_q, 6),
        load_scale=scale,
    )


def write_profiles(data: ProfileData, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamps = data.timestamps.strftime("%Y-%m-%dT%H:%M:%SZ")
    prices = pd.DataFrame({"timestamp": stamps, "lambda_flex": data.lambda_flex, "lambda_buy": data.lambda_buy})
    n, nb = data.active_kw.shape
    loads = pd.DataFrame(
        {
            "timestamp": np.repeat(np.asarray(stamps), nb),
            "bus_id": np.tile(np.arange(nb), n),
            "active_kw": data.active_kw.ravel(),
            "reactive_kvar": data.reactive_kvar.ravel(),
        }
    )
    p_path, l_path = out / "prices.csv", out / "loads.csv"
    prices.to_csv(p_path, index=False, float_format="%.6f", lineterminator="\n")
    loads.to_csv(l_path, index=False, float_format="%.6f", lineterminator="\n")
    return p_path, l_path


def spec_to_dict(spec: SyntheticProfileSpec) -> dict:
    d = asdict(spec)
    d["peak_hours"] = list(spec.peak_hours)
    d["offpeak_hours"] = list(spec.offpeak_hours)
    return d


def spec_from_dict(doc: dict) -> SyntheticProfileSpec:
    doc = dict(doc)
    for key in ("peak_hours", "offpeak_hours"):
        if key in doc:
            doc[key] = tuple(int(v) for v in doc[key])
    return SyntheticProfileSpec(**doc)
