"""Multi-agent actor-critic training with an optional safety projection.

Centralised critics see the global state and the joint action; each actor
sees only its own observation.  Every agent keeps two critics and bootstraps
from the smaller target estimate.  Without the safety layer the agents learn
from a reward that carries the voltage-violation penalty instead.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .env import EpisodeAborted, FlexibilityEnv, ObsScaler, voltage_penalty
from .nn import Adam, Mlp, clip_grad_norm, soft_update
from .safety import RELAXED, SafetyLayer

log = logging.getLogger(__name__)

__all__ = [
    "TrainingConfig",
    "Agent",
    "Transition",
    "ReplayBuffer",
    "select_actions",
    "random_actions",
    "soc_potential",
    "train_episode",
    "train",
    "evaluate",
    "env_config_for",
    "rollout",
    "Learner",
    "voltage_penalty",
    "EvaluationReport",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class TrainingConfig:
    gamma: float = 0.99
    batch: int = 32
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    tau: float = 0.05
    episodes: int = 1000
    hidden: tuple[int, ...] = (64, 64)
    noise_start: float = 0.3
    noise_end: float = 0.02
    noise_decay_episodes: int = 600
    warmup: int = 1000
    buffer_capacity: int = 100_000
    kappa_v: float = 1.0
    kappa_dr: float = 10.0
    kappa_ess: float = 10.0
    safety: bool = True
    twin_critics: bool = True
    store_raw_action: bool = False
    noise_after_projection: bool = False
    per_step_voltage_penalty: bool = False
    reward_scale: float = 0.1
    drop_exogenous_cost: bool = True
    actor_init_scale: float = 1e-3
    preact_penalty: float = 0.1
    critic_grad_clip: float = 10.0
    random_warmup: bool = True
    soc_shaping: bool = True

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if min(self.kappa_v, self.kappa_dr, self.kappa_ess) < 0:
            raise ValueError("penalty coefficients must be non-negative")
        if self.batch < 1 or self.warmup < self.batch:
            raise ValueError("warm-up must hold at least one batch")

    def noise_at(self, episode: int) -> float:
        """Exploration scale, decaying linearly and then held."""
        if self.noise_decay_episodes <= 0:
            return self.noise_end
        frac = min(episode / self.noise_decay_episodes, 1.0)
        return self.noise_start + frac * (self.noise_end - self.noise_start)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> TrainingConfig:
        doc = dict(doc)
        if "hidden" in doc:
            doc["hidden"] = tuple(int(h) for h in doc["hidden"])
        return cls(**doc)


class Agent:
    def __init__(self, obs_dim: int, state_dim: int, n_actions_total: int, cfg: TrainingConfig, rng: np.random.Generator):
        hidden = list(cfg.hidden)
        self.actor = Mlp([obs_dim, *hidden, 2], "relu", ["sigmoid", "tanh"], rng, out_init_scale=cfg.actor_init_scale)
        n_crit = 2 if cfg.twin_critics else 1
        self.critics = [Mlp([state_dim + n_actions_total, *hidden, 1], "relu", "identity", rng) for _ in range(n_crit)]
        self.actor_target = self.actor.copy()
        self.critic_targets = [c.copy() for c in self.critics]
        self.actor_opt = Adam(self.actor.parameters(), lr=cfg.lr_actor)
        self.critic_opts = [Adam(c.parameters(), lr=cfg.lr_critic) for c in self.critics]

    def act(self, obs: np.ndarray) -> np.ndarray:
        return self.actor.predict(obs)


@dataclass
class Transition:
    state: np.ndarray
    obs: np.ndarray
    action: np.ndarray
    rewards: np.ndarray
    next_state: np.ndarray
    next_obs: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer of scaled transitions."""

    def __init__(self, capacity: int, state_dim: int, n_agents: int, obs_dim: int, min_fill: int = 1):
        self.capacity = capacity
        self.min_fill = max(min_fill, 1)
        self.state = np.zeros((capacity, state_dim))
        self.next_state = np.zeros((capacity, state_dim))
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.next_obs = np.zeros((capacity, n_agents, obs_dim))
        self.action = np.zeros((capacity, 2 * n_agents))
        self.rewards = np.zeros((capacity, n_agents))
        self.done = np.zeros(capacity)
        self.size = 0
        self._next = 0

    def __len__(self) -> int:
        return self.size

    def add(self, tr: Transition) -> None:
        i = self._next
        self.state[i] = tr.state
        self.next_state[i] = tr.next_state
        self.obs[i] = tr.obs
        self.next_obs[i] = tr.next_obs
        self.action[i] = np.ravel(tr.action)
        self.rewards[i] = tr.rewards
        self.done[i] = float(tr.done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        if self.size < self.min_fill:
            raise RuntimeError(f"buffer holds {self.size} transitions, needs {self.min_fill} before sampling")
        if batch > self.size:
            raise ValueError("batch larger than buffer contents")
        return rng.choice(self.size, size=batch, replace=False)

    def sample(self, batch: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        idx = self.sample_indices(batch, rng)
        return {
            "state": self.state[idx],
            "obs": self.obs[idx],
            "action": self.action[idx],
            "rewards": self.rewards[idx],
            "next_state": self.next_state[idx],
            "next_obs": self.next_obs[idx],
            "done": self.done[idx],
        }


def clip_actions(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out[..., 0] = np.clip(out[..., 0], 0.0, 1.0)
    out[..., 1] = np.clip(out[..., 1], -1.0, 1.0)
    return out


def select_actions(agents: list[Agent], obs_scaled: np.ndarray, noise_scale: float, rng: np.random.Generator) -> np.ndarray:
    """Policy outputs plus Gaussian exploration noise, clipped to the action ranges; shape ``(n_agents, 2)``."""
    a = np.stack([ag.act(o) for ag, o in zip(agents, obs_scaled)])
    if noise_scale > 0:
        a = a + rng.normal(0.0, noise_scale, size=a.shape)
    return clip_actions(a)


class Learner:
    """Agents, optimisers, replay and the per-step update."""

    def __init__(self, env: FlexibilityEnv, cfg: TrainingConfig, seed: int):
        self.cfg = cfg
        self.n_agents = env.n_agents
        self.rng = np.random.default_rng(seed)
        self.obs_scaler, self.state_scaler = ObsScaler.for_env(env)
        init_rng = np.random.default_rng(self.rng.integers(2**63))
        self.agents = [Agent(env.obs_dim, env.state_dim, 2 * env.n_agents, cfg, init_rng) for _ in range(env.n_agents)]
        self.buffer = ReplayBuffer(cfg.buffer_capacity, env.state_dim, env.n_agents, env.obs_dim, cfg.warmup)
        self.updates = 0

    def update(self) -> dict[str, float]:
        cfg = self.cfg
        b = self.buffer.sample(cfg.batch, self.rng)
        n = self.n_agents
        B = cfg.batch
        next_a = np.concatenate([ag.actor_target.predict(b["next_obs"][:, j]) for j, ag in enumerate(self.agents)], axis=1)
        x_next = np.concatenate([b["next_state"], next_a], axis=1)
        x_now = np.concatenate([b["state"], b["action"]], axis=1)
        not_done = 1.0 - b["done"]
        critic_loss = 0.0
        for i, ag in enumerate(self.agents):
            q_next = np.min(np.stack([c.predict(x_next)[:, 0] for c in ag.critic_targets]), axis=0)
            y = b["rewards"][:, i] + cfg.gamma * not_done * q_next
            for c, opt in zip(ag.critics, ag.critic_opts):
                q = c.forward(x_now)[:, 0]
                err = q - y
                critic_loss += float(np.mean(err**2))
                grads, _ = c.backward(x_now, (2.0 / B) * err[:, None])
                if cfg.critic_grad_clip > 0:
                    grads = clip_grad_norm(grads, cfg.critic_grad_clip)
                opt.step(grads)
        # actors: deterministic policy gradient through the first critic
        for i, ag in enumerate(self.agents):
            o_i = b["obs"][:, i]
            a_i = ag.actor.forward(o_i)
            joint = b["action"].copy()
            joint[:, 2 * i : 2 * i + 2] = a_i
            x = np.concatenate([b["state"], joint], axis=1)
            critic = ag.critics[0]
            critic.forward(x)
            _, g_in = critic.backward(x, np.full((B, 1), -1.0 / B))
            g_a = g_in[:, -2 * n :][:, 2 * i : 2 * i + 2]
            g_pre = (2.0 * cfg.preact_penalty / B) * ag.actor.last_pre_activation if cfg.preact_penalty > 0 else None
            grads, _ = ag.actor.backward(o_i, g_a, g_pre)
            ag.actor_opt.step(grads)
        for ag in self.agents:
            soft_update(ag.actor_target.parameters(), ag.actor.parameters(), cfg.tau)
            for t, c in zip(ag.critic_targets, ag.critics):
                soft_update(t.parameters(), c.parameters(), cfg.tau)
        self.updates += 1
        return {"critic_loss": critic_loss / (n * len(self.agents[0].critics))}


@dataclass
class EpisodeMetrics:
    episode: int
    day: int
    ret: float
    violation_cost: float
    projections: int
    violations: int
    noise: float
    relaxed: int = 0
    failed: bool = False

    def row(self) -> dict:
        return {
            "episode": self.episode,
            "return": f"{self.ret:.6f}",
            "violation_cost": f"{self.violation_cost:.8f}",
            "projections": self.projections,
            "violations": self.violations,
            "relaxed": self.relaxed,
            "failed": int(self.failed),
            "day": self.day,
            "noise": f"{self.noise:.6f}",
        }


METRIC_COLUMNS = ["episode", "return", "violation_cost", "projections", "violations", "relaxed", "failed", "day", "noise"]


def random_actions(n_agents: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws over the full action ranges, used while the replay buffer warms up."""
    return np.stack([rng.uniform(0.0, 1.0, n_agents), rng.uniform(-1.0, 1.0, n_agents)], axis=1)


def soc_potential(env: FlexibilityEnv, energy: np.ndarray, kappa_ess: float) -> np.ndarray:
    """Per-agent shaping potential: minus the penalty the current SOC would draw at the horizon end."""
    target = np.array([0.5 * a.ess.e_max_kwh for a in env.fleet.agents])
    return -kappa_ess * np.maximum(0.0, target - energy)


def _propose(learner: Learner, env: FlexibilityEnv, obs: np.ndarray, noise: float, safety: SafetyLayer | None):
    """Proposed and applied joint actions for one step, plus the projection result."""
    cfg = learner.cfg
    obs_s = learner.obs_scaler(obs)
    if cfg.random_warmup and len(learner.buffer) < cfg.warmup:
        a = random_actions(env.n_agents, learner.rng)
        if safety is None:
            return a, a, None
        safe, res = safety.filter(env.base_injection(), a, env.energy)
        return a, safe, res
    if safety is None:
        a = select_actions(learner.agents, obs_s, noise, learner.rng)
        return a, a, None
    if cfg.noise_after_projection:
        a = select_actions(learner.agents, obs_s, 0.0, learner.rng)
        safe, res = safety.filter(env.base_injection(), a, env.energy)
        if noise > 0:
            safe = clip_actions(safe + learner.rng.normal(0.0, noise, size=safe.shape))
        return a, safe, res
    a = select_actions(learner.agents, obs_s, noise, learner.rng)
    safe, res = safety.filter(env.base_injection(), a, env.energy)
    return a, safe, res


def train_episode(
    env: FlexibilityEnv,
    learner: Learner,
    safety: SafetyLayer | None,
    episode: int,
    day: int | None = None,
) -> EpisodeMetrics:
    cfg = learner.cfg
    noise = cfg.noise_at(episode)
    if day is None:
        day = int(learner.rng.choice(env.train_days))
    obs = env.reset(day)
    state = env.global_state(obs)
    ret, projections, relaxed, violations = 0.0, 0, 0, 0
    v_trace = []
    try:
        for _ in range(env.config.horizon):
            phi = soc_potential(env, env.energy, cfg.kappa_ess)
            raw, applied, res = _propose(learner, env, obs, noise, safety)
            if res is not None and (res.voltage_active or res.status == RELAXED):
                projections += 1
                relaxed += int(res.status == RELAXED)
            out = env.step(applied)
            ret += float(out.rewards.sum())
            violations += out.violations.count
            v_trace.append(np.sqrt(out.solution.v_sq_pu[env.buses]))
            r_learn = out.rewards + (out.exogenous_cost if cfg.drop_exogenous_cost else 0.0)
            if cfg.soc_shaping:
                # potential-based shaping leaves the optimal policy unchanged; the terminal potential is zero
                phi_next = 0.0 if out.done else soc_potential(env, out.powers["energy"], cfg.kappa_ess)
                r_learn = r_learn + cfg.gamma * phi_next - phi
            stored = raw if cfg.store_raw_action else out.applied_actions
            learner.buffer.add(
                Transition(
                    learner.state_scaler(state),
                    learner.obs_scaler(obs),
                    stored,
                    cfg.reward_scale * r_learn,
                    learner.state_scaler(out.state),
                    learner.obs_scaler(out.observations),
                    out.done,
                )
            )
            if len(learner.buffer) >= cfg.warmup:
                learner.update()
            obs, state = out.observations, out.state
    except EpisodeAborted as exc:
        log.warning("episode %d aborted: %s", episode, exc)
        return EpisodeMetrics(episode, day, ret, float("nan"), projections, violations, noise, relaxed, failed=True)
    trace = np.array(v_trace)
    lim = env.net.limits
    kv = cfg.kappa_v if cfg.kappa_v > 0 else 1.0
    cost = sum(
        voltage_penalty(trace[:, k], lim, kv, per_step=cfg.per_step_voltage_penalty) for k in range(env.n_agents)
    ) / env.config.horizon
    return EpisodeMetrics(episode, day, ret, cost, projections, violations, noise, relaxed)


@dataclass
class TrainResult:
    learner: Learner
    metrics: list[EpisodeMetrics]


def write_metrics(metrics: list[EpisodeMetrics], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for m in metrics:
            w.writerow(m.row())


def train(
    env: FlexibilityEnv,
    cfg: TrainingConfig,
    seed: int,
    safety: SafetyLayer | None = None,
    progress_every: int = 0,
) -> TrainResult:
    """Run ``cfg.episodes`` training episodes.  The environment must carry the
    matching penalty coefficients (see :func:`env_config_for`)."""
    if cfg.safety and safety is None:
        raise ValueError("safety is enabled but no safety layer was given")
    learner = Learner(env, cfg, seed)
    layer = safety if cfg.safety else None
    metrics = []
    for ep in range(cfg.episodes):
        m = train_episode(env, learner, layer, ep)
        metrics.append(m)
        if progress_every and (ep + 1) % progress_every == 0:
            recent = metrics[-progress_every:]
            log.info(
                "episode %d  mean return %.2f  projections %d  violations %d",
                ep + 1,
                np.mean([r.ret for r in recent]),
                sum(r.projections for r in recent),
                sum(r.violations for r in recent),
            )
    return TrainResult(learner, metrics)


def env_config_for(base, cfg: TrainingConfig):
    """Environment settings implied by a training configuration."""
    return replace(
        base,
        kappa_dr=cfg.kappa_dr,
        kappa_ess=cfg.kappa_ess,
        kappa_v=0.0 if cfg.safety else cfg.kappa_v,
        per_step_voltage_penalty=cfg.per_step_voltage_penalty,
    )


@dataclass
class EvaluationReport:
    days: list[int]
    returns: list[float]
    net_benefit: list[float]
    violations: int
    projections: int
    failed: int
    end_soc_kwh: np.ndarray  # (days, agents)
    cumulative_dr_kwh: np.ndarray  # (days, agents)
    traces: list[dict] = field(default_factory=list)

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns)) if self.returns else float("nan")

    @property
    def total_net_benefit(self) -> float:
        return float(np.sum(self.net_benefit))

    def summary(self) -> dict:
        return {
            "days": self.days,
            "mean_return": self.mean_return,
            "total_net_benefit": self.total_net_benefit,
            "violations": self.violations,
            "projections": self.projections,
            "failed": self.failed,
            "min_end_soc_kwh": float(self.end_soc_kwh.min()) if self.end_soc_kwh.size else float("nan"),
            "max_cumulative_dr_kwh": float(self.cumulative_dr_kwh.max()) if self.cumulative_dr_kwh.size else float("nan"),
        }


TRACE_COLUMNS = [
    "day", "t", "agent", "bus", "alpha_dr", "alpha_ess", "p_dr_kw", "p_ch_kw", "p_dis_kw",
    "soc_kwh", "v_bus_pu", "v_min_pu", "lambda_flex", "lambda_buy", "status",
]  # fmt: skip


def rollout(env: FlexibilityEnv, policy, days, safety: SafetyLayer | None = None) -> EvaluationReport:
    """Run a deterministic policy ``policy(env, obs) -> (n_agents, 2)`` over whole days."""
    returns, benefit, end_soc, cum_dr, traces = [], [], [], [], []
    violations = projections = failed = 0
    for day in days:
        obs = env.reset(int(day))
        ret = nb = 0.0
        dr = np.zeros(env.n_agents)
        try:
            for _ in range(env.config.horizon):
                t, row = env.t, env.row
                a = np.asarray(policy(env, obs), dtype=float).reshape(env.n_agents, 2)
                status = "none"
                if safety is not None:
                    a, res = safety.filter(env.base_injection(), a, env.energy)
                    status = res.status
                    if res.voltage_active or res.status == RELAXED:
                        projections += 1
                out = env.step(a)
                ret += float(out.rewards.sum())
                nb += out.global_reward
                violations += out.violations.count
                dr += out.powers["p_dr"] * env.config.dt_h
                v = np.sqrt(out.solution.v_sq_pu)
                for k in range(env.n_agents):
                    traces.append(
                        {
                            "day": int(day),
                            "t": t,
                            "agent": k,
                            "bus": int(env.buses[k]),
                            "alpha_dr": float(out.applied_actions[k, 0]),
                            "alpha_ess": float(out.applied_actions[k, 1]),
                            "p_dr_kw": float(out.powers["p_dr"][k]),
                            "p_ch_kw": float(out.powers["p_ch"][k]),
                            "p_dis_kw": float(out.powers["p_dis"][k]),
                            "soc_kwh": float(out.powers["energy"][k]),
                            "v_bus_pu": float(v[env.buses[k]]),
                            "v_min_pu": float(v.min()),
                            "lambda_flex": float(env.prices.lambda_flex[row]),
                            "lambda_buy": float(env.prices.lambda_buy[row]),
                            "status": status,
                        }
                    )
                obs = out.observations
        except EpisodeAborted as exc:
            log.warning("evaluation day %d aborted: %s", day, exc)
            failed += 1
            continue
        returns.append(ret)
        benefit.append(nb)
        end_soc.append(out.powers["energy"].copy())
        cum_dr.append(dr)
    return EvaluationReport(
        [int(d) for d in days], returns, benefit, violations, projections, failed,
        np.array(end_soc), np.array(cum_dr), traces,
    )  # fmt: skip


def evaluate(learner: Learner, env: FlexibilityEnv, days=None, safety: SafetyLayer | None = None) -> EvaluationReport:
    """Noise-free rollout of the learned actors (test week by default)."""
    days = env.test_days if days is None else days

    def policy(_env, obs):
        return select_actions(learner.agents, learner.obs_scaler(obs), 0.0, learner.rng)

    return rollout(env, policy, days, safety)


def write_traces(report: EvaluationReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in report.traces:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def save_checkpoint(learner: Learner, path: str | Path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for i, ag in enumerate(learner.agents):
        ag.actor.save(out / f"agent{i}_actor.json")
        ag.actor_target.save(out / f"agent{i}_actor_target.json")
        for k, (c, t) in enumerate(zip(ag.critics, ag.critic_targets)):
            c.save(out / f"agent{i}_critic{k}.json")
            t.save(out / f"agent{i}_critic{k}_target.json")
    meta = {
        "format": "safeflex-checkpoint",
        "version": 1,
        "n_agents": learner.n_agents,
        "config": learner.cfg.to_dict(),
        "obs_scaler": learner.obs_scaler.to_dict(),
        "state_scaler": learner.state_scaler.to_dict(),
        "rng_state": learner.rng.bit_generator.state,
        "updates": learner.updates,
    }
    (out / "checkpoint.json").write_text(json.dumps(meta, indent=1, default=int))


def load_checkpoint(path: str | Path, env: FlexibilityEnv) -> Learner:
    src = Path(path)
    meta_path = src / "checkpoint.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no checkpoint in {src}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != "safeflex-checkpoint" or meta.get("version") != 1:
        raise ValueError("unrecognised checkpoint format")
    cfg = TrainingConfig.from_dict(meta["config"])
    learner = Learner(env, cfg, 0)
    if meta["n_agents"] != learner.n_agents:
        raise ValueError("checkpoint was trained for a different fleet")
    for i, ag in enumerate(learner.agents):
        ag.actor = Mlp.load(src / f"agent{i}_actor.json")
        ag.actor_target = Mlp.load(src / f"agent{i}_actor_target.json")
        ag.critics = [Mlp.load(src / f"agent{i}_critic{k}.json") for k in range(len(ag.critics))]
        ag.critic_targets = [Mlp.load(src / f"agent{i}_critic{k}_target.json") for k in range(len(ag.critics))]
    learner.obs_scaler = ObsScaler.from_dict(meta["obs_scaler"])
    learner.state_scaler = ObsScaler.from_dict(meta["state_scaler"])
    learner.rng.bit_generator.state = meta["rng_state"]
    learner.updates = int(meta["updates"])
    return learner
