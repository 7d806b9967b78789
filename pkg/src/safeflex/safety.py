"""Safety projection of joint actions onto the predicted voltage-safe polytope.

Solves ``min ||x - a||^2`` subject to ``lo <= A x + b <= hi`` and box bounds
with a dual active-set method (Goldfarb-Idnani) specialised to an identity
Hessian.  When no action satisfies every predicted bound the smallest uniform
relaxation is found by linear programming and the projection is repeated
against the relaxed bounds.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, nnls

from .der import FleetSpec, ess_alpha_bounds
from .grid import InjectionProfile, VoltageLimits
from .regressor import LinearVoltageModel, action_affine_map

log = logging.getLogger(__name__)

UNCHANGED = "unchanged"
PROJECTED = "projected"
RELAXED = "infeasible-relaxed"


@dataclass
class ProjectionProblem:
    proposed: np.ndarray
    A: np.ndarray
    b: np.ndarray
    v_sq_lo: np.ndarray
    v_sq_hi: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray

    def __post_init__(self):
        self.proposed = np.asarray(self.proposed, dtype=float).ravel()
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n_out, n = self.A.shape
        self.b = np.broadcast_to(np.asarray(self.b, dtype=float), (n_out,)).copy()
        self.v_sq_lo = np.broadcast_to(np.asarray(self.v_sq_lo, dtype=float), (n_out,)).copy()
        self.v_sq_hi = np.broadcast_to(np.asarray(self.v_sq_hi, dtype=float), (n_out,)).copy()
        self.box_lo = np.broadcast_to(np.asarray(self.box_lo, dtype=float), (n,)).copy()
        self.box_hi = np.broadcast_to(np.asarray(self.box_hi, dtype=float), (n,)).copy()
        if self.proposed.shape != (n,):
            raise ValueError("proposed action length does not match the affine map")
        if np.any(self.box_lo > self.box_hi):
            raise ValueError("empty box")
        if np.any(self.v_sq_lo > self.v_sq_hi):
            raise ValueError("lower voltage bound above upper bound")

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def constraints(self, relax: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked ``G x <= h`` with unit-norm rows and a kind code per row.

        Kinds: 0 upper voltage, 1 lower voltage, 2 box upper, 3 box lower.
        ``relax`` widens both squared-voltage bounds.  Voltage rows whose
        sensitivity is all zero are dropped when they hold and kept (and
        reported infeasible by the solver) when they do not.
        """
        n = self.dim
        g = [self.A, -self.A, np.eye(n), -np.eye(n)]
        h = [self.v_sq_hi + relax - self.b, self.b - self.v_sq_lo + relax, self.box_hi, -self.box_lo]
        kind = [np.zeros(len(self.b), int), np.ones(len(self.b), int), np.full(n, 2), np.full(n, 3)]
        G, H, K = np.vstack(g), np.concatenate(h), np.concatenate(kind)
        norms = np.linalg.norm(G, axis=1)
        zero = norms <= 1e-14
        keep = ~zero | (H < 0)
        norms = np.where(zero, 1.0, norms)
        return (G / norms[:, None])[keep], (H / norms)[keep], K[keep]

    def predicted(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x + self.b

    def max_violation(self, x: np.ndarray) -> float:
        v = self.predicted(x)
        return float(max(0.0, np.max(v - self.v_sq_hi, initial=0.0), np.max(self.v_sq_lo - v, initial=0.0)))


@dataclass
class ProjectionResult:
    action: np.ndarray
    active: list[int]
    multipliers: np.ndarray
    objective: float
    status: str
    relaxation: float = 0.0
    iterations: int = 0
    active_kinds: list[int] = field(default_factory=list)

    @property
    def voltage_active(self) -> bool:
        return any(k in (0, 1) for k in self.active_kinds)


class InfeasibleProjection(RuntimeError):
    pass


def _active_set_qp(a: np.ndarray, G: np.ndarray, h: np.ndarray, tol: float, max_iter: int = 500):
    """Dual active-set QP for ``min 1/2 ||x - a||^2  s.t.  G x <= h``.

    Returns ``(x, active indices, multipliers, iterations)``; raises
    :class:`InfeasibleProjection` when the constraint set is empty.
    """
    x = a.copy()
    active: list[int] = []
    u = np.zeros(0)
    for it in range(1, max_iter + 1):
        slack = G @ x - h
        if active:
            slack[active] = -np.inf
        p = int(np.argmax(slack)) if slack.size else -1
        if p < 0 or slack[p] <= tol:
            return x, active, u, it
        # constraint p written as n.x >= c with n = -G[p], c = -h[p]
        n_p = -G[p]
        u_p = 0.0
        while True:
            if active:
                N = -G[active].T
                q, r = np.linalg.qr(N)
                rank_ok = np.all(np.abs(np.diag(r)) > 1e-12)
                if not rank_ok:
                    raise InfeasibleProjection("degenerate active set")
                z = n_p - q @ (q.T @ n_p)
                rr = np.linalg.solve(r, q.T @ n_p)
            else:
                z = n_p.copy()
                rr = np.zeros(0)
            # blocking step from dropping an active constraint
            t2, drop = np.inf, -1
            for j, rj in enumerate(rr):
                if rj > 1e-14:
                    ratio = u[j] / rj
                    if ratio < t2:
                        t2, drop = ratio, j
            zz = float(z @ z)
            viol = -(h[p]) - float(n_p @ x)  # c_p - n_p.x, positive while violated
            t1 = viol / zz if zz > 1e-14 else np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                raise InfeasibleProjection(f"constraint {p} cannot be satisfied")
            t = min(t1, t2)
            if np.isfinite(t1):
                x = x + t * z
            u = u - t * rr
            u_p += t
            if t1 <= t2:
                active.append(p)
                u = np.append(u, u_p)
                break
            del active[drop]
            u = np.delete(u, drop)
    raise InfeasibleProjection(f"no convergence in {max_iter} iterations")


def _least_violation(problem: ProjectionProblem) -> float:
    """Smallest uniform widening of the squared-voltage bounds that admits a box action."""
    n, m = problem.dim, len(problem.b)
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A_ub = np.vstack(
        [
            np.hstack([problem.A, -np.ones((m, 1))]),
            np.hstack([-problem.A, -np.ones((m, 1))]),
        ]
    )
    b_ub = np.concatenate([problem.v_sq_hi - problem.b, problem.b - problem.v_sq_lo])
    bounds = list(zip(problem.box_lo, problem.box_hi)) + [(0.0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise InfeasibleProjection(f"least-violation LP failed: {res.message}")
    return float(res.x[-1])


def project(problem: ProjectionProblem, tol: float = 1e-8) -> ProjectionResult:
    a = problem.proposed
    G, h, kind = problem.constraints()
    if np.all(G @ a - h <= tol):
        return ProjectionResult(a.copy(), [], np.zeros(0), 0.0, UNCHANGED)
    try:
        x, active, u, it = _active_set_qp(a, G, h, tol)
        status, relax = PROJECTED, 0.0
    except InfeasibleProjection:
        relax = _least_violation(problem)
        # a hair of extra room keeps the relaxed polytope non-degenerate
        relax_eff = relax + max(tol, 1e-12)
        G, h, kind = problem.constraints(relax_eff)
        x, active, u, it = _active_set_qp(a, G, h, tol)
        status = RELAXED
        log.debug("projection relaxed by %.3e pu^2", relax)
    x = np.minimum(np.maximum(x, problem.box_lo), problem.box_hi)
    d = x - a
    return ProjectionResult(x, list(active), u, float(d @ d), status, relax, it, [int(kind[i]) for i in active])


@dataclass
class KktReport:
    ok: bool
    stationarity: float
    primal: float
    dual: float
    complementarity: float


def verify_kkt(problem: ProjectionProblem, result: ProjectionResult, tol: float = 1e-8) -> KktReport:
    """Check the optimality conditions of a projection result.

    Multipliers are re-derived by non-negative least squares over all
    constraints that are tight at the returned point, so the certificate does
    not trust the solver's own bookkeeping.
    """
    relax = result.relaxation + max(tol, 1e-12) if result.status == RELAXED else 0.0
    G, h, _ = problem.constraints(relax)
    x, a = result.action, problem.proposed
    r = G @ x - h
    primal = float(max(0.0, r.max(initial=0.0)))
    tight = np.nonzero(r >= -max(10 * tol, 1e-9))[0]
    grad = x - a  # stationarity: (x - a) + G_tight^T mu = 0, mu >= 0
    if tight.size:
        mu, _ = nnls(G[tight].T, -grad, maxiter=50 * max(len(tight), 1))
        stat = float(np.linalg.norm(grad + G[tight].T @ mu, ord=np.inf))
        comp = float(np.max(np.abs(mu * r[tight]), initial=0.0))
    else:
        mu = np.zeros(0)
        stat = float(np.linalg.norm(grad, ord=np.inf))
        comp = 0.0
    dual = float(max(0.0, -mu.min(initial=0.0)))
    ok = max(stat, primal, dual, comp) <= tol
    return KktReport(bool(ok), stat, primal, dual, comp)


def build_problem(
    model: LinearVoltageModel,
    base: InjectionProfile,
    proposed,
    fleet: FleetSpec,
    limits: VoltageLimits,
    margin_pu: float = 0.005,
    energy_kwh=None,
    dt_h: float = 1.0,
) -> ProjectionProblem:
    """Bind the surrogate to the current operating point.

    The battery coordinate of each agent stays on the sign branch of its
    proposal (charge for ``alpha >= 0``), which keeps the surrogate exactly
    affine.  With ``energy_kwh`` given, the box is also cut to the range the
    battery can deliver without clamping.
    """
    a = np.asarray(proposed, dtype=float).ravel()
    n_ag = len(fleet)
    if a.shape != (2 * n_ag,):
        raise ValueError(f"expected {2 * n_ag} action entries, got {a.size}")
    signs = np.where(a[1::2] < 0, -1, 1)
    A, b = action_affine_map(model, base, fleet, signs)
    lo_sq, hi_sq = limits.squared(margin_pu)
    box_lo = np.zeros(2 * n_ag)
    box_hi = np.ones(2 * n_ag)
    for k, agent in enumerate(fleet.agents):
        lo_e, hi_e = (-1.0, 1.0)
        if energy_kwh is not None:
            lo_e, hi_e = ess_alpha_bounds(float(energy_kwh[k]), dt_h, agent.ess)
        if signs[k] >= 0:
            box_lo[2 * k + 1], box_hi[2 * k + 1] = 0.0, hi_e
        else:
            box_lo[2 * k + 1], box_hi[2 * k + 1] = lo_e, 0.0
    return ProjectionProblem(a, A, b, np.full(len(b), lo_sq), np.full(len(b), hi_sq), box_lo, box_hi)


class SafetyLayer:
    """Per-step action filter used inside the training and evaluation loops."""

    def __init__(
        self,
        model: LinearVoltageModel,
        fleet: FleetSpec,
        limits: VoltageLimits,
        margin_pu: float = 0.005,
        tol: float = 1e-8,
        dt_h: float = 1.0,
    ):
        self.model = model
        self.fleet = fleet
        self.limits = limits
        self.margin_pu = margin_pu
        self.tol = tol
        self.dt_h = dt_h
        self.diag_log = logging.getLogger("safeflex.safety.diag")

    def filter(self, base: InjectionProfile, actions: np.ndarray, energy_kwh=None) -> tuple[np.ndarray, ProjectionResult]:
        shape = np.shape(actions)
        problem = build_problem(
            self.model, base, actions, self.fleet, self.limits, self.margin_pu, energy_kwh, self.dt_h
        )
        result = project(problem, self.tol)
        if self.diag_log.isEnabledFor(logging.DEBUG):
            self.diag_log.debug(json.dumps(diagnostic(problem, result)))
        return result.action.reshape(shape), result


def diagnostic(problem: ProjectionProblem, result: ProjectionResult) -> dict:
    v = problem.predicted(result.action)
    slack = np.minimum(problem.v_sq_hi - v, v - problem.v_sq_lo)
    return {
        "status": result.status,
        "distance": float(np.sqrt(result.objective)),
        "active_set_size": len(result.active),
        "max_predicted_slack": float(slack.min()),
    }
