"""Episodic multi-agent flexibility environment.

Each agent controls one building (demand reduction) and its battery.  A step
denormalises the joint action, advances the batteries, builds per-bus net
withdrawals, solves the exact power flow and pays every agent its local share
of the system net benefit minus its own constraint penalties.  Observations
are raw physical values; scaling to [0, 1] is the learner's job
(:class:`ObsScaler`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .der import (
    DrLedger,
    EssState,
    FleetSpec,
    denormalize_actions,
    dr_budget_kwh,
    dr_budget_remaining,
    dr_overshoot,
    end_of_horizon_soc_deficit,
    step_ess,
)
from .grid import (
    InjectionProfile,
    NetworkModel,
    PowerFlowError,
    PowerFlowSolution,
    ViolationReport,
    VoltageLimits,
    check_voltage_limits,
    solve_power_flow,
)

PRICE_COLUMNS = ("timestamp", "lambda_flex", "lambda_buy")
LOAD_COLUMNS = ("timestamp", "bus_id", "active_kw", "reactive_kvar")
# per-agent slots of the observation vector ahead of the price history
LOCAL_FIELDS = ("soc_kwh", "demand_kw", "reactive_kvar")


class ProfileError(ValueError):
    pass


class EpisodeAborted(RuntimeError):
    """Power flow failed mid-episode; the episode is counted as failed."""

    def __init__(self, message: str, step: int, residual: float):
        super().__init__(message)
        self.step = step
        self.residual = residual


@dataclass(frozen=True)
class PriceSeries:
    lambda_flex: np.ndarray
    lambda_buy: np.ndarray

    def __post_init__(self):
        if self.lambda_flex.shape != self.lambda_buy.shape:
            raise ProfileError("price series differ in length")
        if not (np.all(np.isfinite(self.lambda_flex)) and np.all(np.isfinite(self.lambda_buy))):
            raise ProfileError("prices must be finite")

    def __len__(self) -> int:
        return len(self.lambda_flex)


@dataclass(frozen=True)
class ExogenousProfiles:
    """Per-bus withdrawals; at agent buses ``active_kw`` is the building demand."""

    active_kw: np.ndarray
    reactive_kvar: np.ndarray
    agent_buses: tuple[int, ...]
    timestamps: tuple[str, ...] = ()

    @property
    def demand_kw(self) -> np.ndarray:
        return self.active_kw[:, list(self.agent_buses)]

    def __len__(self) -> int:
        return self.active_kw.shape[0]


def _validate_demand(exo: ExogenousProfiles, fleet: FleetSpec) -> None:
    d = exo.demand_kw
    if np.any(d < 0):
        raise ProfileError("building demand must be non-negative")
    for k, agent in enumerate(fleet.agents):
        bad = np.nonzero(d[:, k] <= agent.building.p_dr_max_kw)[0]
        if agent.building.p_dr_max_kw > 0 and bad.size:
            raise ProfileError(
                f"bus {agent.bus}: demand {d[bad[0], k]:.3f} kW at row {bad[0]} does not exceed "
                f"the DR capacity {agent.building.p_dr_max_kw} kW"
            )


def profiles_from_arrays(
    lambda_flex,
    lambda_buy,
    active_kw,
    reactive_kvar,
    fleet: FleetSpec,
    timestamps=(),
) -> tuple[PriceSeries, ExogenousProfiles]:
    prices = PriceSeries(np.asarray(lambda_flex, dtype=float), np.asarray(lambda_buy, dtype=float))
    exo = ExogenousProfiles(
        np.asarray(active_kw, dtype=float), np.asarray(reactive_kvar, dtype=float), tuple(fleet.buses), tuple(timestamps)
    )
    if len(exo) != len(prices):
        raise ProfileError(f"price rows ({len(prices)}) and load rows ({len(exo)}) differ")
    if not (np.all(np.isfinite(exo.active_kw)) and np.all(np.isfinite(exo.reactive_kvar))):
        raise ProfileError("loads must be finite")
    _validate_demand(exo, fleet)
    return prices, exo


def _read_csv(path: Path, columns: tuple[str, ...]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError as exc:
        raise ProfileError(f"{path}: file is empty") from exc
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ProfileError(f"{path}: missing column(s) {', '.join(missing)}")
    if df.empty:
        raise ProfileError(f"{path}: no data rows")
    if df[list(columns)].isna().any().any():
        raise ProfileError(f"{path}: contains NaN values")
    return df


def load_profiles(
    prices_csv: str | Path, loads_csv: str | Path, net: NetworkModel, fleet: FleetSpec
) -> tuple[PriceSeries, ExogenousProfiles]:
    """Read and cross-check the hourly price and load files."""
    prices = _read_csv(Path(prices_csv), PRICE_COLUMNS)
    loads = _read_csv(Path(loads_csv), LOAD_COLUMNS)
    stamps = prices["timestamp"].astype(str).to_numpy()
    if len(set(stamps)) != len(stamps):
        raise ProfileError("duplicate timestamps in price file")
    n = len(stamps)
    if len(loads) != n * net.n_bus:
        raise ProfileError(f"load file has {len(loads)} rows, expected {n} timestamps x {net.n_bus} buses")
    loads = loads.sort_values(["timestamp", "bus_id"], kind="stable")
    bus = loads["bus_id"].to_numpy().reshape(n, net.n_bus)
    if not np.array_equal(bus, np.broadcast_to(np.arange(net.n_bus), bus.shape)):
        raise ProfileError("every timestamp needs exactly one row per bus id")
    load_stamps = loads["timestamp"].astype(str).to_numpy().reshape(n, net.n_bus)[:, 0]
    order = np.argsort(stamps, kind="stable")
    if not np.array_equal(load_stamps, stamps[order]):
        raise ProfileError("load and price timestamps do not match")
    # loads were sorted by timestamp; put them back into price-file order
    inverse = np.empty(n, dtype=int)
    inverse[order] = np.arange(n)
    p = loads["active_kw"].to_numpy(dtype=float).reshape(n, net.n_bus)[inverse]
    q = loads["reactive_kvar"].to_numpy(dtype=float).reshape(n, net.n_bus)[inverse]
    return profiles_from_arrays(
        prices["lambda_flex"].to_numpy(float), prices["lambda_buy"].to_numpy(float), p, q, fleet, tuple(stamps)
    )


def voltage_penalty(v_trace, limits: VoltageLimits, kappa_v: float, per_step: bool = False) -> float:
    """Voltage-violation cost over one episode for one bus.

    The default form sums the signed excursions over the episode before taking
    the maximum; ``per_step`` takes the maximum per step and sums those instead.
    ``v_trace`` holds voltage magnitudes in pu.
    """
    if kappa_v == 0:
        return 0.0
    v = np.asarray(v_trace, dtype=float)
    if per_step:
        return float(kappa_v * np.sum(np.maximum(0.0, np.maximum(v - limits.v_max_pu, limits.v_min_pu - v))))
    return float(kappa_v * max(0.0, np.sum(v - limits.v_max_pu), np.sum(limits.v_min_pu - v)))


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 24
    dt_h: float = 1.0
    history_len: int = 24
    initial_soc_frac: float = 0.5
    kappa_dr: float = 10.0
    kappa_ess: float = 10.0
    kappa_v: float = 0.0
    per_step_voltage_penalty: bool = False
    slack_v_pu: float = 1.0
    test_days: int = 7

    def __post_init__(self):
        if self.horizon < 1 or self.history_len < 1:
            raise ValueError("horizon and history_len must be positive")
        if min(self.kappa_dr, self.kappa_ess, self.kappa_v) < 0:
            raise ValueError("penalty coefficients must be non-negative")
        if not 0 <= self.initial_soc_frac <= 1:
            raise ValueError("initial_soc_frac must lie in [0, 1]")


@dataclass
class StepOutcome:
    rewards: np.ndarray
    local_revenue: np.ndarray
    global_reward: float
    penalties: dict[str, np.ndarray]
    solution: PowerFlowSolution
    violations: ViolationReport
    observations: np.ndarray
    state: np.ndarray
    applied_actions: np.ndarray
    powers: dict[str, np.ndarray]
    done: bool
    # purchase cost of the building demand itself; no action can change it
    exogenous_cost: np.ndarray | None = None


def global_reward(outcome: StepOutcome) -> float:
    return outcome.global_reward


def local_revenue(lam_flex, lam_buy, lam_dr, p_dr, p_ch, p_dis, demand):
    """Revenue minus purchase and DR cost for each building/battery pair."""
    return lam_flex * (p_dr + p_dis) - lam_buy * (p_ch + demand - p_dr) - lam_dr * p_dr


@dataclass
class _EpisodeState:
    start: int
    t: int
    energy: np.ndarray
    ledgers: list[DrLedger]
    v_trace: list[np.ndarray] = field(default_factory=list)


class FlexibilityEnv:
    def __init__(
        self,
        net: NetworkModel,
        fleet: FleetSpec,
        prices: PriceSeries,
        profiles: ExogenousProfiles,
        config: EnvConfig = EnvConfig(),
    ):
        if len(prices) != len(profiles):
            raise ProfileError("price and load series differ in length")
        if len(prices) < config.horizon:
            raise ProfileError(f"profiles hold {len(prices)} steps, shorter than the horizon {config.horizon}")
        self.net = net
        self.fleet = fleet
        self.prices = prices
        self.profiles = profiles
        self.config = config
        self.n_agents = len(fleet)
        self.buses = np.array(fleet.buses)
        self._p_dr_max = np.array([a.building.p_dr_max_kw for a in fleet.agents])
        self._lam_dr = np.array([a.building.lambda_dr_eur_per_kwh for a in fleet.agents])
        self._ep: _EpisodeState | None = None

    # -- data layout -------------------------------------------------------
    @property
    def n_days(self) -> int:
        return len(self.prices) // self.config.horizon

    @property
    def train_days(self) -> np.ndarray:
        return np.arange(max(self.n_days - self.config.test_days, 1))

    @property
    def test_days(self) -> np.ndarray:
        return np.arange(max(self.n_days - self.config.test_days, 0), self.n_days)

    @property
    def obs_dim(self) -> int:
        return len(LOCAL_FIELDS) + self.config.history_len + 2

    @property
    def state_dim(self) -> int:
        return 4 * self.n_agents + self.config.history_len + 1

    @property
    def budget_kwh(self) -> np.ndarray:
        return np.array([dr_budget_kwh(a.building, self.config.horizon) for a in self.fleet.agents])

    # -- episode -----------------------------------------------------------
    def reset(self, day: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
        """Start an episode on ``day`` (or a random training day drawn from ``rng``)."""
        if day is None:
            rng = rng if rng is not None else np.random.default_rng()
            day = int(rng.choice(self.train_days))
        start = int(day) * self.config.horizon
        if day < 0 or start + self.config.horizon > len(self.prices):
            raise ProfileError(f"day {day} does not fit inside the profiles")
        energy = np.array([self.config.initial_soc_frac * a.ess.e_max_kwh for a in self.fleet.agents])
        energy = np.maximum(energy, [a.ess.e_min_kwh for a in self.fleet.agents])
        self._ep = _EpisodeState(start, 0, energy, [DrLedger() for _ in self.fleet.agents])
        return self.observations()

    @property
    def t(self) -> int:
        return self._require().t

    @property
    def row(self) -> int:
        ep = self._require()
        return ep.start + min(ep.t, self.config.horizon - 1)

    @property
    def energy(self) -> np.ndarray:
        return self._require().energy.copy()

    def _require(self) -> _EpisodeState:
        if self._ep is None:
            raise RuntimeError("call reset() first")
        return self._ep

    def _price_history(self, row: int) -> np.ndarray:
        h = self.config.history_len
        lo = row - h + 1
        # backfilled from the data where it exists, zero before the first record
        out = np.zeros(h)
        seg = self.prices.lambda_flex[max(lo, 0) : row + 1]
        out[h - len(seg) :] = seg
        return out

    def budget_remaining(self) -> np.ndarray:
        ep = self._require()
        return np.array(
            [dr_budget_remaining(led, a.building, self.config.horizon) for led, a in zip(ep.ledgers, self.fleet.agents)]
        )

    def observations(self) -> np.ndarray:
        """Per-agent raw observations, shape ``(n_agents, obs_dim)``."""
        ep = self._require()
        row = self.row
        hist = self._price_history(row)
        d = self.profiles.active_kw[row, self.buses]
        q = self.profiles.reactive_kvar[row, self.buses]
        budget = self.budget_remaining()
        obs = np.empty((self.n_agents, self.obs_dim))
        obs[:, 0] = ep.energy
        obs[:, 1] = d
        obs[:, 2] = q
        obs[:, 3 : 3 + self.config.history_len] = hist
        obs[:, -2] = ep.t
        obs[:, -1] = budget
        return obs

    def global_state(self, obs: np.ndarray | None = None) -> np.ndarray:
        """Critic input: per-agent (soc, demand, q, budget) then the shared price history and time."""
        obs = self.observations() if obs is None else obs
        return state_from_observations(obs, self.config.history_len)

    def base_injection(self) -> InjectionProfile:
        """Withdrawals of the current step with every device idle."""
        row = self.row
        return InjectionProfile(self.profiles.active_kw[row].copy(), self.profiles.reactive_kvar[row].copy())

    def step(self, actions) -> StepOutcome:
        ep = self._require()
        cfg = self.config
        if ep.t >= cfg.horizon:
            raise RuntimeError("episode is over; call reset()")
        a = np.asarray(actions, dtype=float).reshape(self.n_agents, 2)
        row = ep.start + ep.t
        lam_f = self.prices.lambda_flex[row]
        lam_b = self.prices.lambda_buy[row]
        demand = self.profiles.active_kw[row, self.buses]

        p_dr = np.zeros(self.n_agents)
        p_ch = np.zeros(self.n_agents)
        p_dis = np.zeros(self.n_agents)
        pen_dr = np.zeros(self.n_agents)
        new_energy = ep.energy.copy()
        for k, agent in enumerate(self.fleet.agents):
            dr, ch, dis = denormalize_actions(a[k, 0], a[k, 1], agent.building, agent.ess)
            state, ch, dis = step_ess(EssState(ep.energy[k]), ch, dis, cfg.dt_h, agent.ess)
            before = dr_overshoot(ep.ledgers[k], agent.building, cfg.horizon)
            ep.ledgers[k].record(dr, cfg.dt_h)
            after = dr_overshoot(ep.ledgers[k], agent.building, cfg.horizon)
            pen_dr[k] = cfg.kappa_dr * (after - before)
            p_dr[k], p_ch[k], p_dis[k] = dr, ch, dis
            new_energy[k] = state.energy_kwh

        p = self.profiles.active_kw[row].copy()
        p[self.buses] += -p_dr + p_ch - p_dis
        inj = InjectionProfile(p, self.profiles.reactive_kvar[row].copy())
        try:
            sol = solve_power_flow(self.net, inj, slack_v_pu=cfg.slack_v_pu)
        except PowerFlowError as exc:
            self._ep = None
            raise EpisodeAborted(f"power flow failed at step {ep.t} of day starting row {ep.start}: {exc}", ep.t, exc.residual) from exc

        ep.energy = new_energy
        ep.t += 1
        done = ep.t == cfg.horizon
        v_agent = np.sqrt(sol.v_sq_pu[self.buses])
        ep.v_trace.append(v_agent)

        revenue = local_revenue(lam_f, lam_b, self._lam_dr, p_dr * cfg.dt_h, p_ch * cfg.dt_h, p_dis * cfg.dt_h, demand * cfg.dt_h)
        pen_ess = np.zeros(self.n_agents)
        pen_v = np.zeros(self.n_agents)
        lim = self.net.limits
        if cfg.kappa_v > 0 and cfg.per_step_voltage_penalty:
            pen_v = np.array([voltage_penalty([v], lim, cfg.kappa_v, per_step=True) for v in v_agent])
        if done:
            pen_ess = cfg.kappa_ess * np.array(
                [end_of_horizon_soc_deficit(EssState(e), ag.ess) for e, ag in zip(ep.energy, self.fleet.agents)]
            )
            if cfg.kappa_v > 0 and not cfg.per_step_voltage_penalty:
                trace = np.array(ep.v_trace)
                pen_v = np.array([voltage_penalty(trace[:, k], lim, cfg.kappa_v) for k in range(self.n_agents)])

        applied = np.column_stack(
            [
                np.divide(p_dr, self._p_dr_max, out=np.zeros_like(p_dr), where=self._p_dr_max > 0),
                p_ch / np.array([ag.ess.p_ch_max_kw for ag in self.fleet.agents])
                - p_dis / np.array([ag.ess.p_dis_max_kw for ag in self.fleet.agents]),
            ]
        )
        obs = self.observations()
        return StepOutcome(
            rewards=revenue - pen_dr - pen_ess - pen_v,
            local_revenue=revenue,
            global_reward=float(revenue.sum()),
            penalties={"dr": pen_dr, "ess": pen_ess, "voltage": pen_v},
            solution=sol,
            violations=check_voltage_limits(sol, lim),
            observations=obs,
            state=state_from_observations(obs, cfg.history_len),
            applied_actions=applied,
            powers={"p_dr": p_dr, "p_ch": p_ch, "p_dis": p_dis, "energy": ep.energy.copy()},
            done=done,
            exogenous_cost=lam_b * demand * cfg.dt_h,
        )


def state_from_observations(obs: np.ndarray, history_len: int) -> np.ndarray:
    """Global state from stacked agent observations (works on leading batch axes)."""
    per_agent = np.concatenate([obs[..., :3], obs[..., -1:]], axis=-1)
    lead = obs.shape[:-2]
    shared = obs[..., 0, 3 : 3 + history_len + 1]
    return np.concatenate([per_agent.reshape(lead + (-1,)), shared], axis=-1)


@dataclass
class ObsScaler:
    """Min-max scaling to [0, 1] with bounds taken from the data."""

    low: np.ndarray
    high: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        span = np.where(self.high > self.low, self.high - self.low, 1.0)
        return (np.asarray(x) - self.low) / span

    @classmethod
    def for_env(cls, env: FlexibilityEnv) -> tuple[ObsScaler, ObsScaler]:
        """Scalers for agent observations (stacked per agent) and the global state."""
        cfg = env.config
        n = env.n_agents
        d = env.profiles.active_kw[:, env.buses]
        q = env.profiles.reactive_kvar[:, env.buses]
        lf = env.prices.lambda_flex
        p_lo, p_hi = min(0.0, float(lf.min())), float(lf.max())
        e_lo = np.array([a.ess.e_min_kwh for a in env.fleet.agents])
        e_hi = np.array([a.ess.e_max_kwh for a in env.fleet.agents])
        budget = env.budget_kwh
        lo = np.zeros((n, env.obs_dim))
        hi = np.zeros((n, env.obs_dim))
        lo[:, 0], hi[:, 0] = e_lo, e_hi
        lo[:, 1], hi[:, 1] = d.min(axis=0), d.max(axis=0)
        lo[:, 2], hi[:, 2] = q.min(axis=0), q.max(axis=0)
        lo[:, 3 : 3 + cfg.history_len], hi[:, 3 : 3 + cfg.history_len] = p_lo, p_hi
        lo[:, -2], hi[:, -2] = 0.0, cfg.horizon
        lo[:, -1], hi[:, -1] = 0.0, budget
        return cls(lo, hi), cls(state_from_observations(lo, cfg.history_len), state_from_observations(hi, cfg.history_len))

    def to_dict(self) -> dict:
        return {"low": self.low.tolist(), "high": self.high.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> ObsScaler:
        return cls(np.array(doc["low"], dtype=float), np.array(doc["high"], dtype=float))
