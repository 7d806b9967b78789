"""Radial distribution feeders and the branch-flow (DistFlow) power flow.

The solver works on squared voltages ``v`` and squared currents ``l`` and is
exact for radial networks: the backward sweep accumulates sending-end flows
(including series losses ``r * l``) over each subtree, the forward sweep
walks voltage drops down from the slack bus.  All arrays may carry leading
batch dimensions so thousands of scenarios can be solved in one call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

__all__ = [
    "Bus",
    "Line",
    "VoltageLimits",
    "InjectionProfile",
    "PowerFlowSolution",
    "ViolationReport",
    "NetworkModel",
    "NetworkError",
    "PowerFlowError",
    "load_network",
    "network_from_dict",
    "bundled_network_path",
    "branch_residuals",
    "solve_power_flow",
    "check_voltage_limits",
]


class NetworkError(ValueError):
    """Raised for malformed or non-radial network descriptors."""


class PowerFlowError(RuntimeError):
    """The sweep did not converge; ``residual`` holds the last voltage update."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class Bus:
    id: int
    parent_line: int | None = None


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    resistance_pu: float
    reactance_pu: float

    def __post_init__(self):
        if self.resistance_pu < 0 or self.reactance_pu < 0:
            raise NetworkError(f"negative impedance on line {self.from_bus}-{self.to_bus}")


@dataclass(frozen=True)
class VoltageLimits:
    v_min_pu: float = 0.95
    v_max_pu: float = 1.05

    def __post_init__(self):
        if not 0 < self.v_min_pu < self.v_max_pu:
            raise ValueError(f"need 0 < v_min < v_max, got {self.v_min_pu}, {self.v_max_pu}")

    def squared(self, margin_pu: float = 0.0) -> tuple[float, float]:
        """Squared-voltage bounds tightened by ``margin_pu`` on both sides."""
        if margin_pu < 0:
            raise ValueError("margin must be non-negative")
        lo = self.v_min_pu + margin_pu
        hi = self.v_max_pu - margin_pu
        if lo >= hi:
            raise ValueError("margin leaves an empty voltage band")
        return lo * lo, hi * hi


@dataclass
class InjectionProfile:
    """Per-bus net withdrawal; positive active_kw means consumption."""

    active_kw: np.ndarray
    reactive_kvar: np.ndarray

    def __post_init__(self):
        self.active_kw = np.asarray(self.active_kw, dtype=float)
        self.reactive_kvar = np.asarray(self.reactive_kvar, dtype=float)
        if self.active_kw.shape != self.reactive_kvar.shape:
            raise ValueError("active and reactive profiles differ in shape")


@dataclass
class PowerFlowSolution:
    v_sq_pu: np.ndarray
    line_p_kw: np.ndarray
    line_q_kvar: np.ndarray
    line_i_sq: np.ndarray
    iterations: int = 0
    max_residual: float = 0.0

    @property
    def v_pu(self) -> np.ndarray:
        return np.sqrt(self.v_sq_pu)


@dataclass(frozen=True)
class ViolationReport:
    count: int
    max_excess_pu: float


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Immutable radial feeder.  Lines are stored oriented away from the slack bus."""

    n_bus: int
    lines: tuple[Line, ...]
    slack_bus: int = 0
    base_kv: float = 12.66
    base_mva: float = 1.0
    limits: VoltageLimits = field(default_factory=VoltageLimits)
    nominal_p_kw: np.ndarray | None = None
    nominal_q_kvar: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.base_kv <= 0 or self.base_mva <= 0:
            raise NetworkError("base voltage and base power must be positive")
        if len(self.lines) != self.n_bus - 1:
            raise NetworkError(
                f"a radial network on {self.n_bus} buses needs {self.n_bus - 1} lines, got {len(self.lines)}"
            )
        if not 0 <= self.slack_bus < self.n_bus:
            raise NetworkError(f"slack bus {self.slack_bus} out of range")
        # touch the topology once so construction fails early on bad input
        self._parent_line  # noqa: B018

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def kw_per_pu(self) -> float:
        return self.base_mva * 1000.0

    @property
    def z_base_ohm(self) -> float:
        return self.base_kv**2 / self.base_mva

    @cached_property
    def r(self) -> np.ndarray:
        return np.array([ln.resistance_pu for ln in self.lines])

    @cached_property
    def x(self) -> np.ndarray:
        return np.array([ln.reactance_pu for ln in self.lines])

    @cached_property
    def from_bus(self) -> np.ndarray:
        return np.array([ln.from_bus for ln in self.lines], dtype=int)

    @cached_property
    def to_bus(self) -> np.ndarray:
        return np.array([ln.to_bus for ln in self.lines], dtype=int)

    @cached_property
    def _parent_line(self) -> np.ndarray:
        parent = np.full(self.n_bus, -1, dtype=int)
        for k, ln in enumerate(self.lines):
            if ln.to_bus == self.slack_bus or parent[ln.to_bus] != -1:
                raise NetworkError(f"bus {ln.to_bus} fed twice: lines are not a tree oriented from the slack")
            parent[ln.to_bus] = k
        # every bus must reach the slack by following parents
        for b in range(self.n_bus):
            seen = 0
            cur = b
            while cur != self.slack_bus:
                k = parent[cur]
                if k < 0:
                    raise NetworkError(f"bus {b} is not connected to the slack bus")
                cur = self.lines[k].from_bus
                seen += 1
                if seen > self.n_bus:
                    raise NetworkError("cycle detected")
        return parent

    @property
    def buses(self) -> list[Bus]:
        return [Bus(b, None if b == self.slack_bus else int(self._parent_line[b])) for b in range(self.n_bus)]

    @cached_property
    def path_lines(self) -> np.ndarray:
        """(n_bus, n_line) indicator: line k lies on the path slack -> bus."""
        m = np.zeros((self.n_bus, self.n_line))
        for b in range(self.n_bus):
            cur = b
            while cur != self.slack_bus:
                k = self._parent_line[cur]
                m[b, k] = 1.0
                cur = self.lines[k].from_bus
        return m

    @cached_property
    def subtree_buses(self) -> np.ndarray:
        """(n_line, n_bus) indicator: bus lies downstream of line k (inclusive of its to-bus)."""
        return np.ascontiguousarray(self.path_lines.T)

    @cached_property
    def subtree_lines(self) -> np.ndarray:
        """(n_line, n_line) indicator: line j is line k or lies downstream of it."""
        return np.ascontiguousarray(self.path_lines[self.to_bus].T)

    def children(self, bus: int) -> list[int]:
        return [ln.to_bus for ln in self.lines if ln.from_bus == bus]

    def zero_injection(self) -> InjectionProfile:
        return InjectionProfile(np.zeros(self.n_bus), np.zeros(self.n_bus))

    def nominal_injection(self, scale: float = 1.0) -> InjectionProfile:
        if self.nominal_p_kw is None:
            return self.zero_injection()
        return InjectionProfile(scale * self.nominal_p_kw, scale * self.nominal_q_kvar)


def _orient(n_bus: int, slack: int, edges: Sequence[tuple[int, int, float, float]]) -> tuple[Line, ...]:
    adj: dict[int, list[int]] = {b: [] for b in range(n_bus)}
    for k, (a, b, _, _) in enumerate(edges):
        adj[a].append(k)
        adj[b].append(k)
    seen = {slack}
    order: list[Line] = []
    stack = [slack]
    used = set()
    while stack:
        bus = stack.pop(0)
        for k in adj[bus]:
            if k in used:
                continue
            used.add(k)
            a, b, r, x = edges[k]
            other = b if a == bus else a
            if other in seen:
                raise NetworkError(f"cycle detected through line {a}-{b}")
            seen.add(other)
            order.append(Line(bus, other, r, x))
            stack.append(other)
    if len(seen) != n_bus:
        missing = sorted(set(range(n_bus)) - seen)
        raise NetworkError(f"disconnected buses: {missing}")
    return tuple(order)


def network_from_dict(doc: Mapping[str, Any]) -> NetworkModel:
    base_kv = float(doc.get("base_kv", 0.0))
    base_mva = float(doc.get("base_mva", 1.0))
    if base_kv <= 0:
        raise NetworkError("base_kv must be positive")
    if base_mva <= 0:
        raise NetworkError("base_mva must be positive")
    buses = doc["buses"]
    ids = sorted(int(b["id"]) if isinstance(b, Mapping) else int(b) for b in buses)
    if ids != list(range(len(ids))):
        raise NetworkError("bus ids must be contiguous 0..N-1")
    n_bus = len(ids)
    slack = int(doc.get("slack_bus", 0))
    z_base = base_kv**2 / base_mva

    edges = []
    pairs = set()
    for ln in doc["lines"]:
        a, b = int(ln["from"]), int(ln["to"])
        if a == b:
            raise NetworkError(f"self-loop at bus {a}")
        if not (0 <= a < n_bus and 0 <= b < n_bus):
            raise NetworkError(f"line {a}-{b} references an unknown bus")
        key = (min(a, b), max(a, b))
        if key in pairs:
            raise NetworkError(f"duplicate line {a}-{b}")
        pairs.add(key)
        if "r_ohm" in ln:
            r, x = float(ln["r_ohm"]) / z_base, float(ln["x_ohm"]) / z_base
        else:
            r, x = float(ln["r_pu"]), float(ln["x_pu"])
        if r < 0 or x < 0:
            raise NetworkError(f"negative impedance on line {a}-{b}")
        edges.append((a, b, r, x))
    if len(edges) != n_bus - 1:
        # a connected graph with more edges than a tree must contain a loop
        if len(edges) > n_bus - 1:
            raise NetworkError(f"cycle detected: {len(edges)} lines for {n_bus} buses")
        raise NetworkError(f"disconnected network: {len(edges)} lines for {n_bus} buses")
    lines = _orient(n_bus, slack, edges)

    p = np.zeros(n_bus)
    q = np.zeros(n_bus)
    for b in buses:
        if isinstance(b, Mapping):
            p[int(b["id"])] = float(b.get("p_kw", 0.0))
            q[int(b["id"])] = float(b.get("q_kvar", 0.0))
    limits = VoltageLimits(float(doc.get("v_min_pu", 0.95)), float(doc.get("v_max_pu", 1.05)))
    return NetworkModel(n_bus, lines, slack, base_kv, base_mva, limits, p, q, str(doc.get("name", "")))


def _read_structured(path: Path) -> dict:
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def load_network(path: str | Path) -> NetworkModel:
    """Read a JSON or TOML feeder descriptor (impedances in ohms or pu)."""
    return network_from_dict(_read_structured(Path(path)))


def bundled_network_path(name: str = "ieee33") -> Path:
    return Path(__file__).parent / "data" / f"{name}.json"


def solve_power_flow(
    net: NetworkModel,
    inj: InjectionProfile,
    slack_v_pu: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> PowerFlowSolution:
    """Backward/forward sweep on the branch-flow equations.

    ``inj`` arrays may have shape ``(n_bus,)`` or ``(batch, n_bus)``.  Raises
    :class:`PowerFlowError` when the voltage update does not fall below ``tol``
    within ``max_iter`` sweeps (typically a collapse under extreme loading).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    p = inj.active_kw / net.kw_per_pu
    q = inj.reactive_kvar / net.kw_per_pu
    if p.shape[-1] != net.n_bus:
        raise ValueError(f"injection has {p.shape[-1]} entries, network has {net.n_bus} buses")
    p = p.copy()
    q = q.copy()
    p[..., net.slack_bus] = 0.0
    q[..., net.slack_bus] = 0.0

    r, x = net.r, net.x
    z2 = r * r + x * x
    sub_b = net.subtree_buses.T
    sub_l = net.subtree_lines.T
    path = net.path_lines.T
    fb = net.from_bus
    v0 = slack_v_pu * slack_v_pu

    p_load = p @ sub_b
    q_load = q @ sub_b
    batch_shape = p.shape[:-1]
    ell = np.zeros(batch_shape + (net.n_line,))
    v = np.full(batch_shape + (net.n_bus,), v0)
    big_p, big_q = p_load, q_load
    delta = np.inf
    for it in range(1, max_iter + 1):
        big_p = p_load + (r * ell) @ sub_l
        big_q = q_load + (x * ell) @ sub_l
        v_new = v0 - (2.0 * (r * big_p + x * big_q) - z2 * ell) @ path
        if not np.all(np.isfinite(v_new)) or np.any(v_new <= 0):
            raise PowerFlowError("voltage collapse during sweep", float("inf"), it)
        ell_new = (big_p**2 + big_q**2) / v_new[..., fb]
        delta = max(float(np.max(np.abs(v_new - v), initial=0.0)), float(np.max(np.abs(ell_new - ell), initial=0.0)))
        v, ell = v_new, ell_new
        if delta <= tol * 1e-2:
            break
    else:
        raise PowerFlowError(f"sweep did not converge in {max_iter} iterations (last update {delta:.3e})", delta, max_iter)

    # one more pass so P, Q and v are all consistent with the final currents
    big_p = p_load + (r * ell) @ sub_l
    big_q = q_load + (x * ell) @ sub_l
    v = v0 - (2.0 * (r * big_p + x * big_q) - z2 * ell) @ path
    resid = np.abs(big_p**2 + big_q**2 - ell * v[..., fb])
    return PowerFlowSolution(
        v_sq_pu=v,
        line_p_kw=big_p * net.kw_per_pu,
        line_q_kvar=big_q * net.kw_per_pu,
        line_i_sq=ell,
        iterations=it,
        max_residual=float(np.max(resid, initial=0.0)),
    )


def branch_residuals(net: NetworkModel, inj: InjectionProfile, sol: PowerFlowSolution, slack_v_pu: float = 1.0) -> dict[str, float]:
    """Max absolute residual of every branch-flow equation, in pu."""
    p = inj.active_kw / net.kw_per_pu
    q = inj.reactive_kvar / net.kw_per_pu
    p = np.where(np.arange(net.n_bus) == net.slack_bus, 0.0, p)
    q = np.where(np.arange(net.n_bus) == net.slack_bus, 0.0, q)
    big_p = sol.line_p_kw / net.kw_per_pu
    big_q = sol.line_q_kvar / net.kw_per_pu
    ell = sol.line_i_sq
    v = sol.v_sq_pu
    fb, tb = net.from_bus, net.to_bus
    # node balance at every non-slack bus: inflow minus series loss feeds the load and children
    out_inc = np.zeros((net.n_line, net.n_bus))
    out_inc[np.arange(net.n_line), fb] = 1.0
    in_inc = np.zeros((net.n_line, net.n_bus))
    in_inc[np.arange(net.n_line), tb] = 1.0
    # inflow minus series loss feeds the bus load and the outgoing lines
    bal_p_all = (big_p - net.r * ell) @ in_inc - big_p @ out_inc - p
    bal_q_all = (big_q - net.x * ell) @ in_inc - big_q @ out_inc - q
    mask = np.arange(net.n_bus) != net.slack_bus
    bal_p = bal_p_all[..., mask]
    bal_q = bal_q_all[..., mask]
    drop = v[..., tb] - (v[..., fb] - 2 * (net.r * big_p + net.x * big_q) + (net.r**2 + net.x**2) * ell)
    curr = big_p**2 + big_q**2 - ell * v[..., fb]
    return {
        "active_balance": float(np.max(np.abs(bal_p), initial=0.0)),
        "reactive_balance": float(np.max(np.abs(bal_q), initial=0.0)),
        "voltage_drop": float(np.max(np.abs(drop), initial=0.0)),
        "current": float(np.max(np.abs(curr), initial=0.0)),
        "slack": float(np.max(np.abs(v[..., net.slack_bus] - slack_v_pu**2))),
    }


def check_voltage_limits(sol: PowerFlowSolution | np.ndarray, lim: VoltageLimits) -> ViolationReport:
    """Count bus voltages (magnitudes) outside ``lim``; batch entries are all counted."""
    v_sq = sol.v_sq_pu if isinstance(sol, PowerFlowSolution) else np.asarray(sol)
    mag = np.sqrt(v_sq)
    excess = np.maximum(np.maximum(mag - lim.v_max_pu, lim.v_min_pu - mag), 0.0)
    bad = excess > 0
    return ViolationReport(int(np.count_nonzero(bad)), float(np.max(excess, initial=0.0)) if bad.any() else 0.0)
