"""Perfect-foresight dispatch benchmark.

For one episode the whole price and load trajectory is known in advance, so
the best joint schedule of demand reduction and battery power is a linear
program once voltages are linearised (the branch-flow model without the loss
term).  The optimum is then replayed through the exact power flow and any
limit violations caused by the linearisation are reported.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix, vstack

from .der import FleetSpec, dr_budget_kwh
from .grid import InjectionProfile, NetworkModel, VoltageLimits, check_voltage_limits, solve_power_flow

log = logging.getLogger(__name__)


class OracleError(RuntimeError):
    pass


@dataclass
class DispatchProblem:
    net: NetworkModel
    fleet: FleetSpec
    lambda_flex: np.ndarray  # (T,)
    lambda_buy: np.ndarray  # (T,)
    active_kw: np.ndarray  # (T, n_bus); building demand at agent buses
    reactive_kvar: np.ndarray  # (T, n_bus)
    initial_energy_kwh: np.ndarray  # (n_agents,)
    limits: VoltageLimits | None = None
    margin_pu: float = 0.0
    dt_h: float = 1.0
    slack_v_pu: float = 1.0

    def __post_init__(self):
        self.lambda_flex = np.asarray(self.lambda_flex, dtype=float)
        self.lambda_buy = np.asarray(self.lambda_buy, dtype=float)
        self.active_kw = np.atleast_2d(np.asarray(self.active_kw, dtype=float))
        self.reactive_kvar = np.atleast_2d(np.asarray(self.reactive_kvar, dtype=float))
        self.initial_energy_kwh = np.asarray(self.initial_energy_kwh, dtype=float)
        T = len(self.lambda_flex)
        if T == 0:
            raise ValueError("empty horizon")
        if self.lambda_buy.shape != (T,) or self.active_kw.shape != (T, self.net.n_bus):
            raise ValueError("price and load data do not cover the horizon")
        if self.reactive_kvar.shape != self.active_kw.shape:
            raise ValueError("reactive profile shape mismatch")
        if self.initial_energy_kwh.shape != (len(self.fleet),):
            raise ValueError("one initial energy per agent required")
        if self.limits is None:
            self.limits = self.net.limits

    @property
    def horizon(self) -> int:
        return len(self.lambda_flex)

    @property
    def demand_kw(self) -> np.ndarray:
        return self.active_kw[:, self.fleet.buses]


@dataclass
class DispatchSolution:
    p_dr_kw: np.ndarray  # (T, n_agents)
    p_ch_kw: np.ndarray
    p_dis_kw: np.ndarray
    energy_kwh: np.ndarray  # (T + 1, n_agents), row 0 is the initial state
    objective: float
    duality_gap: float
    kkt: dict[str, float]
    exact_violations: int
    exact_max_excess_pu: float
    linearisation_error_pu: float
    simultaneous_steps: int
    status: str = "optimal"
    extra: dict = field(default_factory=dict)

    def as_actions(self, fleet: FleetSpec) -> np.ndarray:
        """Normalised actions ``(T, n_agents, 2)`` that reproduce this schedule."""
        p_dr_max = np.array([a.building.p_dr_max_kw for a in fleet.agents])
        ch = np.array([a.ess.p_ch_max_kw for a in fleet.agents])
        dis = np.array([a.ess.p_dis_max_kw for a in fleet.agents])
        a_dr = np.divide(self.p_dr_kw, p_dr_max, out=np.zeros_like(self.p_dr_kw), where=p_dr_max > 0)
        return np.stack([np.clip(a_dr, 0, 1), np.clip(self.p_ch_kw / ch - self.p_dis_kw / dis, -1, 1)], axis=-1)


def linear_voltage_sensitivity(net: NetworkModel) -> tuple[np.ndarray, np.ndarray]:
    """``dv/dp`` and ``dv/dq`` (pu^2 per kW / kvar of withdrawal), loss term dropped."""
    path = net.path_lines.astype(float)  # (bus, line)
    sub = net.subtree_buses.astype(float)  # (line, bus)
    sp = -2.0 * (path * net.r) @ sub / net.kw_per_pu
    sq = -2.0 * (path * net.x) @ sub / net.kw_per_pu
    return sp, sq


def _index(T: int, n: int):
    """Variable layout: blocks of (T, n) for p_dr, p_ch, p_dis, then energy (T, n)."""
    size = T * n

    def block(k):
        return np.arange(k * size, (k + 1) * size).reshape(T, n)

    return block(0), block(1), block(2), block(3), 4 * size


def solve_opf_hindsight(problem: DispatchProblem, tol: float = 1e-7, voltage_constraints: bool = True) -> DispatchSolution:
    """Maximise the horizon net benefit subject to device, budget and linearised voltage limits."""
    net, fleet, T, dt = problem.net, problem.fleet, problem.horizon, problem.dt_h
    n = len(fleet)
    i_dr, i_ch, i_dis, i_e, nv = _index(T, n)
    buses = np.array(fleet.buses)
    lf, lb = problem.lambda_flex, problem.lambda_buy
    lam_dr = np.array([a.building.lambda_dr_eur_per_kwh for a in fleet.agents])

    # linprog minimises, so negate the benefit
    c = np.zeros(nv)
    c[i_dr] = -(lf[:, None] + lb[:, None] - lam_dr[None, :]) * dt
    c[i_dis] = -lf[:, None] * dt
    c[i_ch] = lb[:, None] * dt
    constant = -float(np.sum(lb[:, None] * problem.demand_kw * dt))

    lo = np.zeros(nv)
    hi = np.zeros(nv)
    hi[i_dr] = [a.building.p_dr_max_kw for a in fleet.agents]
    hi[i_ch] = [a.ess.p_ch_max_kw for a in fleet.agents]
    hi[i_dis] = [a.ess.p_dis_max_kw for a in fleet.agents]
    lo[i_e] = [a.ess.e_min_kwh for a in fleet.agents]
    hi[i_e] = [a.ess.e_max_kwh for a in fleet.agents]
    # end-of-horizon state of charge
    lo[i_e[-1]] = np.maximum(lo[i_e[-1]], [0.5 * a.ess.e_max_kwh for a in fleet.agents])
    if np.any(lo > hi):
        raise OracleError("device limits admit no state of charge at the horizon end")

    # storage dynamics: e_t - e_{t-1} - dt*(eta_ch*p_ch - p_dis/eta_dis) = 0
    eta_c = np.array([a.ess.eta_ch for a in fleet.agents])
    eta_d = np.array([a.ess.eta_dis for a in fleet.agents])
    rows, cols, vals = [], [], []
    b_eq = np.zeros(T * n)
    r = np.arange(T * n).reshape(T, n)
    for t in range(T):
        rows += [r[t], r[t], r[t]]
        cols += [i_e[t], i_ch[t], i_dis[t]]
        vals += [np.ones(n), -dt * eta_c, dt / eta_d]
        if t > 0:
            rows.append(r[t])
            cols.append(i_e[t - 1])
            vals.append(-np.ones(n))
        else:
            b_eq[r[0]] = problem.initial_energy_kwh
    A_eq = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(T * n, nv)).tocsr()

    ub_blocks, b_ub = [], []
    # cumulative reduction budget
    budget = np.array([dr_budget_kwh(a.building, T) for a in fleet.agents])
    bud = coo_matrix((np.full(T * n, dt), (np.tile(np.arange(n), T), i_dr.ravel())), shape=(n, nv))
    ub_blocks.append(bud)
    b_ub.append(budget)
    # one battery action per step: charge and discharge share the rated power
    ch_max = np.tile(hi[i_ch[0]], T)
    dis_max = np.tile(hi[i_dis[0]], T)
    hull = coo_matrix(
        (np.concatenate([1.0 / ch_max, 1.0 / dis_max]),
         (np.tile(np.arange(T * n), 2), np.concatenate([i_ch.ravel(), i_dis.ravel()]))),
        shape=(T * n, nv),
    )  # fmt: skip
    ub_blocks.append(hull)
    b_ub.append(np.ones(T * n))

    sp, sq = linear_voltage_sensitivity(net)
    p_base = problem.active_kw.copy()
    p_base[:, net.slack_bus] = 0.0
    q_base = problem.reactive_kvar.copy()
    q_base[:, net.slack_bus] = 0.0
    v_base = problem.slack_v_pu**2 + p_base @ sp.T + q_base @ sq.T  # (T, n_bus)
    if voltage_constraints:
        v_lo, v_hi = problem.limits.squared(problem.margin_pu)
        mask = np.arange(net.n_bus) != net.slack_bus
        S = sp[mask][:, buses]  # (m, n): withdrawal sensitivity at agent buses
        m = S.shape[0]
        vr, vc, vv = [], [], []
        for t in range(T):
            base_row = t * m + np.arange(m)
            for k in range(n):
                # withdrawal = -p_dr + p_ch - p_dis
                for idx, sign in ((i_dr[t, k], -1.0), (i_ch[t, k], 1.0), (i_dis[t, k], -1.0)):
                    vr.append(base_row)
                    vc.append(np.full(m, idx))
                    vv.append(sign * S[:, k])
        G = coo_matrix((np.concatenate(vv), (np.concatenate(vr), np.concatenate(vc))), shape=(T * m, nv)).tocsr()
        vb = v_base[:, mask].ravel()
        ub_blocks += [G, -G]
        b_ub += [v_hi - vb, vb - v_lo]
    A_ub = vstack(ub_blocks).tocsr()
    b_ub_v = np.concatenate(b_ub)
    res = linprog(
        c,
        A_ub=A_ub,
        b_ub=b_ub_v,
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=np.column_stack([lo, hi]),
        method="highs",
        options={"primal_feasibility_tolerance": tol, "dual_feasibility_tolerance": tol},
    )
    if res.status == 2:
        raise OracleError("dispatch problem is infeasible")
    if res.status != 0:
        raise OracleError(f"solver failed: {res.message}")
    x = res.x
    kkt, gap = _kkt_report(c, A_ub, b_ub_v, A_eq, b_eq, lo, hi, res)

    p_dr, p_ch, p_dis = x[i_dr], x[i_ch], x[i_dis]
    energy = np.vstack([problem.initial_energy_kwh, x[i_e]])
    objective = float(-res.fun + constant)

    # exact re-verification of the optimal schedule
    p = problem.active_kw.copy()
    p[:, buses] += -p_dr + p_ch - p_dis
    exact = solve_power_flow(net, InjectionProfile(p, problem.reactive_kvar), slack_v_pu=problem.slack_v_pu)
    viol = check_voltage_limits(exact, problem.limits)
    p_lin = p.copy()
    p_lin[:, net.slack_bus] = 0.0
    v_lin = problem.slack_v_pu**2 + p_lin @ sp.T + q_base @ sq.T
    lin_err = float(np.max(np.abs(np.sqrt(v_lin) - np.sqrt(exact.v_sq_pu))))
    simultaneous = int(np.sum((p_ch > 1e-6) & (p_dis > 1e-6)))
    if simultaneous:
        log.warning("%d device-steps charge and discharge at once", simultaneous)
    return DispatchSolution(
        p_dr_kw=p_dr,
        p_ch_kw=p_ch,
        p_dis_kw=p_dis,
        energy_kwh=energy,
        objective=objective,
        duality_gap=gap,
        kkt=kkt,
        exact_violations=viol.count,
        exact_max_excess_pu=viol.max_excess_pu,
        linearisation_error_pu=lin_err,
        simultaneous_steps=simultaneous,
    )


def _kkt_report(c, A_ub, b_ub, A_eq, b_eq, lo, hi, res) -> tuple[dict[str, float], float]:
    """Residuals of the LP optimality conditions from the solver's marginals.

    For ``min c.x`` the marginals are sensitivities of the optimum to each
    right-hand side, so stationarity reads
    ``c = A_ub^T y_ub + A_eq^T y_eq + z_lo + z_hi`` with ``y_ub, z_hi <= 0 <= z_lo``.
    """
    x = res.x
    y_ub = res.ineqlin.marginals
    y_eq = res.eqlin.marginals
    z_lo = res.lower.marginals
    z_hi = res.upper.marginals
    stat = c - A_ub.T @ y_ub - A_eq.T @ y_eq - z_lo - z_hi
    slack_ub = b_ub - A_ub @ x
    report = {
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "primal_ub": float(max(0.0, -slack_ub.min(initial=0.0))),
        "primal_eq": float(np.max(np.abs(A_eq @ x - b_eq), initial=0.0)),
        "primal_bounds": float(max(0.0, np.max(lo - x, initial=0.0), np.max(x - hi, initial=0.0))),
        "dual_sign": float(max(0.0, np.max(y_ub, initial=0.0), -np.min(z_lo, initial=0.0), np.max(z_hi, initial=0.0))),
        "complementarity": float(
            max(
                np.max(np.abs(y_ub * slack_ub), initial=0.0),
                np.max(np.abs(z_lo * (x - lo)), initial=0.0),
                np.max(np.abs(z_hi * (hi - x)), initial=0.0),
            )
        ),
    }
    dual_obj = float(b_ub @ y_ub + b_eq @ y_eq + lo @ z_lo + hi @ z_hi)
    gap = abs(float(c @ x) - dual_obj) / max(1.0, abs(float(c @ x)))
    return report, gap


@dataclass
class GapReport:
    j_opf: float
    j_policy: float
    gap_pct: float
    defined: bool
    j_zero: float | None = None
    margin_captured: float | None = None

    def to_dict(self) -> dict:
        return {
            "j_opf": self.j_opf,
            "j_policy": self.j_policy,
            "gap_pct": self.gap_pct,
            "defined": self.defined,
            "j_zero": self.j_zero,
            "margin_captured": self.margin_captured,
        }


def compare_to_policy(j_opf: float, j_policy: float, j_zero: float | None = None, eps: float = 1e-9) -> GapReport:
    """Relative shortfall of a policy's net benefit against the oracle, in percent.

    With ``j_zero`` (the do-nothing benefit) the share of the oracle's
    improvement over doing nothing that the policy captured is reported too.
    """
    defined = abs(j_opf) > eps
    gap = 100.0 * (j_opf - j_policy) / abs(j_opf) if defined else float("nan")
    captured = None
    if j_zero is not None and abs(j_opf - j_zero) > eps:
        captured = (j_policy - j_zero) / (j_opf - j_zero)
    return GapReport(j_opf, j_policy, gap, defined, j_zero, captured)


def write_solution_csv(solutions: list[tuple[int, DispatchSolution]], fleet: FleetSpec, path: str | Path) -> None:
    """One row per day, step and device."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "t", "agent", "bus", "p_dr_kw", "p_ch_kw", "p_dis_kw", "soc_kwh"])
        for day, sol in solutions:
            for t in range(sol.p_dr_kw.shape[0]):
                for k, agent in enumerate(fleet.agents):
                    w.writerow(
                        [day, t, k, agent.bus]
                        + [f"{v:.6f}" for v in (sol.p_dr_kw[t, k], sol.p_ch_kw[t, k], sol.p_dis_kw[t, k], sol.energy_kwh[t + 1, k])]
                    )
