"""Reference implementations used only by the tests.

Each one is written independently of the package code it checks: a polar
Newton-Raphson AC solver, the closed-form two-bus voltage, brute-force grid
search and Dykstra's method for projections, exhaustive enumeration for the
dispatch LP and central finite differences for gradients.
"""

from __future__ import annotations

import itertools

import numpy as np


def newton_raphson_voltages(n_bus, lines, slack, p_pu, q_pu, slack_v=1.0, tol=1e-12, max_iter=50):
    """Bus voltage magnitudes from the full AC equations.

    ``lines`` holds ``(from, to, r_pu, x_pu)``; ``p_pu``/``q_pu`` are withdrawals.
    """
    y = np.zeros((n_bus, n_bus), dtype=complex)
    for a, b, r, x in lines:
        g = 1.0 / complex(r, x)
        y[a, a] += g
        y[b, b] += g
        y[a, b] -= g
        y[b, a] -= g
    pq = [i for i in range(n_bus) if i != slack]
    vm = np.ones(n_bus)
    vm[slack] = slack_v
    va = np.zeros(n_bus)
    p_spec = -np.asarray(p_pu, dtype=float)
    q_spec = -np.asarray(q_pu, dtype=float)
    for _ in range(max_iter):
        v = vm * np.exp(1j * va)
        s = v * np.conj(y @ v)
        mismatch = np.concatenate([p_spec[pq] - s.real[pq], q_spec[pq] - s.imag[pq]])
        if np.max(np.abs(mismatch)) < tol:
            break
        jac = _polar_jacobian(y, vm, va, pq)
        dx = np.linalg.solve(jac, mismatch)
        k = len(pq)
        va[pq] += dx[:k]
        vm[pq] += dx[k:]
    else:
        raise RuntimeError("Newton-Raphson did not converge")
    return vm


def _polar_jacobian(y, vm, va, pq):
    v = vm * np.exp(1j * va)
    i = y @ v
    diag_v = np.diag(v)
    diag_i = np.diag(i)
    diag_vn = np.diag(v / vm)
    ds_dva = 1j * diag_v @ np.conj(diag_i - y @ diag_v)
    ds_dvm = diag_v @ np.conj(y @ diag_vn) + np.conj(diag_i) @ diag_vn
    rows = np.ix_(pq, pq)
    top = np.hstack([ds_dva.real[rows], ds_dvm.real[rows]])
    bottom = np.hstack([ds_dva.imag[rows], ds_dvm.imag[rows]])
    return np.vstack([top, bottom])


def two_bus_voltage_sq(r, x, p, q, v0=1.0):
    """Downstream squared voltage of a single line feeding a PQ load.

    Eliminating the current from the branch equations leaves the quadratic
    ``w**2 - (v0**2 - 2(rp + xq)) w + (r**2 + x**2)(p**2 + q**2) = 0`` in
    ``w = |V1|**2``; the larger root is the operating point.
    """
    b = v0 * v0 - 2.0 * (r * p + x * q)
    c = (r * r + x * x) * (p * p + q * q)
    return 0.5 * (b + np.sqrt(b * b - 4.0 * c))


def two_bus_fixed_point(r, x, p, q, v0=1.0, iters=200):
    """The same operating point by plain fixed-point iteration on the current."""
    ell = 0.0
    w = v0 * v0
    for _ in range(iters):
        big_p, big_q = p + r * ell, q + x * ell
        w = v0 * v0 - 2 * (r * big_p + x * big_q) + (r * r + x * x) * ell
        ell = (big_p**2 + big_q**2) / (v0 * v0)
    return w


def _scan(a, G, h, lo, hi, step):
    xs = np.arange(lo[0], hi[0] + step / 2, step)
    ys = np.arange(lo[1], hi[1] + step / 2, step)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    ok = np.all(pts @ G.T <= h + 1e-12, axis=1)
    if not ok.any():
        return None
    pts = pts[ok]
    return pts[np.argmin(np.sum((pts - a) ** 2, axis=1))]


def grid_search_projection(a, G, h, lo, hi, step=1e-3, refine=3):
    """Nearest feasible point of a 2-D polytope by scanning a dense grid.

    A tilted face lets the nearest feasible grid point drift along it, so the
    scan is repeated on a finer grid around the coarse optimum.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    best = _scan(a, G, h, lo, hi, step)
    for _ in range(refine if best is not None else 0):
        win = 20 * step
        step /= 10
        best = _scan(a, G, h, np.maximum(lo, best - win), np.minimum(hi, best + win), step)
    return best


def dykstra_projection(a, G, h, iters=200_000, tol=1e-12):
    """Projection onto an intersection of half-spaces ``G x <= h`` by Dykstra's method."""
    x = np.asarray(a, dtype=float).copy()
    m = len(h)
    corr = np.zeros((m, len(x)))
    norms = np.sum(G * G, axis=1)
    for _ in range(iters):
        prev = x.copy()
        for i in range(m):
            z = x + corr[i]
            excess = G[i] @ z - h[i]
            new = z - (max(excess, 0.0) / norms[i]) * G[i]
            corr[i] = z - new
            x = new
        if np.max(np.abs(x - prev)) < tol:
            break
    return x


def enumerate_dispatch(levels, n_steps, payoff, feasible):
    """Best total payoff over every sequence of per-step actions drawn from ``levels``.

    ``payoff(seq)`` and ``feasible(seq)`` receive a tuple of per-step actions.
    """
    best, best_seq = -np.inf, None
    for seq in itertools.product(levels, repeat=n_steps):
        if feasible(seq):
            val = payoff(seq)
            if val > best:
                best, best_seq = val, seq
    return best, best_seq


def finite_difference(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` with respect to array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        up = f()
        x[idx] = old - eps
        down = f()
        x[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad
