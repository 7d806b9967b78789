"""Storage and demand-response device models.

Actions arrive normalised: ``alpha_dr`` in [0, 1] is the used fraction of the
building's reduction capacity, ``alpha_ess`` in [-1, 1] charges when positive
and discharges when negative.  Storage clamps at its energy bounds by scaling
the power so the energy lands exactly on the bound.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from .grid import _read_structured

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EssParams:
    p_ch_max_kw: float = 5.0
    p_dis_max_kw: float = 5.0
    e_min_kwh: float = 0.0
    e_max_kwh: float = 25.0
    eta_ch: float = 0.9
    eta_dis: float = 0.9

    def __post_init__(self):
        if not 0 <= self.e_min_kwh < self.e_max_kwh:
            raise ValueError("need 0 <= e_min < e_max")
        if self.p_ch_max_kw <= 0 or self.p_dis_max_kw <= 0:
            raise ValueError("rated powers must be positive")
        if not (0 < self.eta_ch <= 1 and 0 < self.eta_dis <= 1):
            raise ValueError("efficiencies must lie in (0, 1]")


@dataclass
class EssState:
    energy_kwh: float


@dataclass(frozen=True)
class BuildingParams:
    p_dr_max_kw: float = 5.0
    h_frac: float = 0.5
    lambda_dr_eur_per_kwh: float = 0.01

    def __post_init__(self):
        if self.p_dr_max_kw < 0:
            raise ValueError("p_dr_max_kw must be non-negative")
        if not 0 <= self.h_frac <= 1:
            raise ValueError("h_frac must lie in [0, 1]")


@dataclass
class DrLedger:
    cumulative_reduction_kwh: float = 0.0

    def record(self, p_dr_kw: float, dt_h: float = 1.0) -> None:
        self.cumulative_reduction_kwh += p_dr_kw * dt_h

    def reset(self) -> None:
        self.cumulative_reduction_kwh = 0.0


@dataclass
class ClampCounter:
    """Counts out-of-range actions that had to be clamped."""

    count: int = 0


_clamps = ClampCounter()


def clamp_count() -> int:
    return _clamps.count


def _clip(value: float, lo: float, hi: float) -> float:
    if value < lo or value > hi or value != value:
        _clamps.count += 1
        log.debug("clamped action %r into [%g, %g]", value, lo, hi)
        if value != value:
            return 0.0
        return min(max(value, lo), hi)
    return value


def denormalize_actions(
    alpha_dr: float,
    alpha_ess: float,
    building: BuildingParams,
    ess: EssParams,
) -> tuple[float, float, float]:
    """Map normalised actions to ``(p_dr_kw, p_ch_kw, p_dis_kw)``."""
    a_dr = _clip(float(alpha_dr), 0.0, 1.0)
    a_ess = _clip(float(alpha_ess), -1.0, 1.0)
    p_dr = a_dr * building.p_dr_max_kw
    if a_ess > 0:
        return p_dr, a_ess * ess.p_ch_max_kw, 0.0
    if a_ess < 0:
        return p_dr, 0.0, -a_ess * ess.p_dis_max_kw
    return p_dr, 0.0, 0.0


def step_ess(
    state: EssState,
    p_ch_kw: float,
    p_dis_kw: float,
    dt_h: float,
    params: EssParams,
) -> tuple[EssState, float, float]:
    """Advance stored energy one step; returns the new state and the applied powers."""
    if dt_h <= 0:
        raise ValueError("dt_h must be positive")
    if p_ch_kw > 0 and p_dis_kw > 0:
        raise ValueError("simultaneous charge and discharge")
    p_ch = min(max(p_ch_kw, 0.0), params.p_ch_max_kw)
    p_dis = min(max(p_dis_kw, 0.0), params.p_dis_max_kw)
    e = state.energy_kwh
    e_next = e + dt_h * (params.eta_ch * p_ch - p_dis / params.eta_dis)
    if e_next > params.e_max_kwh:
        p_ch = max(params.e_max_kwh - e, 0.0) / (dt_h * params.eta_ch)
        e_next = params.e_max_kwh
    elif e_next < params.e_min_kwh:
        p_dis = max(e - params.e_min_kwh, 0.0) * params.eta_dis / dt_h
        e_next = params.e_min_kwh
    return EssState(e_next), p_ch, p_dis


def ess_alpha_bounds(energy_kwh: float, dt_h: float, params: EssParams) -> tuple[float, float]:
    """Range of ``alpha_ess`` whose power is applied unclamped from ``energy_kwh``."""
    up = (params.e_max_kwh - energy_kwh) / (params.eta_ch * dt_h * params.p_ch_max_kw)
    down = (energy_kwh - params.e_min_kwh) * params.eta_dis / (dt_h * params.p_dis_max_kw)
    return -min(max(down, 0.0), 1.0), min(max(up, 0.0), 1.0)


def dr_budget_kwh(params: BuildingParams, horizon_len: int) -> float:
    return params.h_frac * horizon_len * params.p_dr_max_kw


def dr_budget_remaining(ledger: DrLedger, params: BuildingParams, horizon_len: int) -> float:
    return max(0.0, dr_budget_kwh(params, horizon_len) - ledger.cumulative_reduction_kwh)


def dr_overshoot(ledger: DrLedger, params: BuildingParams, horizon_len: int) -> float:
    return max(0.0, ledger.cumulative_reduction_kwh - dr_budget_kwh(params, horizon_len))


def end_of_horizon_soc_deficit(state: EssState, params: EssParams) -> float:
    return max(0.0, 0.5 * params.e_max_kwh - state.energy_kwh)


@dataclass(frozen=True)
class AgentSpec:
    """One controllable node: a building with its storage unit."""

    bus: int
    building: BuildingParams = field(default_factory=BuildingParams)
    ess: EssParams = field(default_factory=EssParams)


@dataclass(frozen=True)
class FleetSpec:
    agents: tuple[AgentSpec, ...]

    def __len__(self) -> int:
        return len(self.agents)

    @property
    def buses(self) -> list[int]:
        return [a.bus for a in self.agents]


def fleet_from_dict(doc: dict) -> FleetSpec:
    """Build a fleet from ``{"defaults": {...}, "agents": [{"bus": 4, ...}, ...]}``.

    Per-agent ``building`` / ``ess`` tables override the defaults key by key.
    """
    defaults = doc.get("defaults", {})
    d_build = dict(defaults.get("building", {}))
    d_ess = dict(defaults.get("ess", {}))
    agents = []
    seen = set()
    for entry in doc["agents"]:
        bus = int(entry["bus"])
        if bus in seen:
            raise ValueError(f"two agents at bus {bus}")
        seen.add(bus)
        building = BuildingParams(**{**d_build, **entry.get("building", {})})
        ess = EssParams(**{**d_ess, **entry.get("ess", {})})
        agents.append(AgentSpec(bus, building, ess))
    if not agents:
        raise ValueError("fleet has no agents")
    return FleetSpec(tuple(agents))


def load_fleet(path: str | Path) -> FleetSpec:
    return fleet_from_dict(_read_structured(Path(path)))
