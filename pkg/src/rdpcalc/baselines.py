"""Independent reference computations used to validate the RDP solvers.

* :func:`blahut_arimoto_rd` -- the distortion-only rate, by the classic
  alternating scheme with the slope chosen to meet the budget exactly.
* :func:`exact_wasserstein` -- optimal transport by the transportation
  simplex (north-west corner start, u-v potentials, stepping-stone pivots).
* :func:`brute_force_rdp` -- exhaustive search over 2x2 channels, and an
  exponential-cone program for 3x3 channels.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._logmath import lse, safe_log
from .core import (ConfigurationError, CostMatrix, DiscreteSource, DistortionMatrix,
                   DomainError, InfeasibleError, NumericError, PerceptionMeasure,
                   _unwrap, perception_kl)
from .rootfind import MonotoneRootProblem, solve_monotone_root


@dataclass(frozen=True)
class OracleConfig:
    """Search parameters for :func:`brute_force_rdp`.

    ``grid_resolution`` is the coarse step of the 2x2 grid; each of the
    ``refine_rounds`` zooms in by 10x around the incumbent. ``restarts`` and
    ``tol`` apply to the 3x3 program (solver restarts with perturbed
    budgets are not needed for a convex program, so ``restarts`` only
    bounds the number of solver fallbacks tried).
    """

    grid_resolution: float = 1e-3
    refine_rounds: int = 8
    restarts: int = 3
    tol: float = 1e-9

    def __post_init__(self):
        if not 0 < self.grid_resolution <= 0.5:
            raise ConfigurationError("grid_resolution must lie in (0, 0.5]")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be at least 1")
        if self.refine_rounds < 0:
            raise ConfigurationError("refine_rounds must be non-negative")
        if not self.tol > 0:
            raise ConfigurationError("tol must be positive")


# --------------------------------------------------------------------------
# Blahut-Arimoto


def _p_and_d(p, d):
    p = np.asarray(_unwrap(p, "p"), dtype=float)
    d = np.asarray(_unwrap(d, "d"), dtype=float)
    if d.ndim != 2 or d.shape[0] != p.size:
        raise DomainError("distortion matrix must have one row per source letter")
    return p, d


def _slope_for_budget(p, logr, d, D, lam0, tol):
    """``lam >= 0`` with ``sum_i p_i E_{w_i}[d] = D`` for ``w_i ~ r exp(-lam d_i)``."""
    logd = safe_log(d)

    def h(lam):
        z = logr[None, :] - lam * d
        return lse(np.log(p) + lse(z + logd, axis=1) - lse(z, axis=1)) - math.log(D)

    return solve_monotone_root(MonotoneRootProblem(h), x0=lam0, tol=tol)


def _mixture_weights(K, p, r0, mu_final: float = 1e-15, max_newton: int = 100):
    """``argmin_r -sum_i p_i log (K r)_i`` over the simplex.

    Log-barrier path following: for ``mu = 1e-3, 1e-4, ..., mu_final`` the
    barrier problem ``- sum p log(Kr) - mu sum log r`` is solved by Newton
    steps in relative coordinates ``dr = r * u``, which keeps the columns
    that leave the support (``r_j ~ mu``) well scaled. The objective error
    at the end is about ``N * mu_final``.
    """
    n = K.shape[1]
    r = 0.9 * r0 + 0.1 / n
    r /= r.sum()
    mu = 1e-3

    def phi(x, mu):
        Kx = K @ x
        if np.any(Kx <= 0) or np.any(x <= 0):
            return np.inf
        return -float(p @ np.log(Kx)) - mu * float(np.sum(np.log(x)))

    sqp = np.sqrt(p)
    A = np.zeros((n + 1, n + 1))
    while True:
        for _ in range(max_newton):
            Kr = K @ r
            gs = -(K.T @ (p / Kr)) * r - mu
            W = K * r[None, :] * (sqp / Kr)[:, None]
            A[:n, :n] = W.T @ W + mu * np.eye(n)
            A[:n, n] = A[n, :n] = r
            A[n, n] = 0.0
            u = np.linalg.solve(A, np.r_[-gs, 0.0])[:n]
            dec = -float(gs @ u)
            if dec < 1e-14:
                break
            t = 1.0
            if np.any(u < 0):
                t = min(1.0, 0.99 * float(np.min(-1.0 / u[u < 0])))
            f0 = phi(r, mu)
            while phi(r * (1 + t * u), mu) > f0 - 1e-4 * t * dec and t > 1e-12:
                t *= 0.5
            r = r * (1 + t * u)
            r /= r.sum()
        if mu <= mu_final:
            return r
        mu *= 0.1


def _rd_dual_polish(p, d, D, r0):
    """Exact ``R(D)`` from the dual ``max_lam [-lam D + min_r -sum p log sum r e^{-lam d}]``.

    The inner minimum is a mixture-weight problem (solved by
    :func:`_mixture_weights`); the outer maximum is the root of
    ``E_lam[d] = D``, found by bisection on the bracketed slope.
    """
    shift = d.min(axis=1, keepdims=True)

    def inner(lam, r):
        K = np.exp(-lam * (d - shift))
        r = _mixture_weights(K, p, r)
        Kr = K @ r
        w = K * r[None, :] / Kr[:, None]
        lower = -float(p @ np.log(Kr)) + lam * float(p @ shift[:, 0]) - lam * D
        return r, w, float(p @ np.sum(w * d, axis=1)), lower

    lo, hi = 0.0, 1.0
    r = r0
    while True:
        r, w, E, lower = inner(hi, r)
        if E <= D:
            break
        lo, hi = hi, 2 * hi
        if hi > 1e8:
            raise NumericError("slope bracket for the distortion budget not found")
    for _ in range(200):
        lam = 0.5 * (lo + hi)
        if not lo < lam < hi:
            break
        r, w, E, lower = inner(lam, r)
        if E > D:
            lo = lam
        else:
            hi = lam
        if hi - lo <= 1e-13 * max(1.0, hi):
            break
    r, w, E, lower = inner(hi, r)   # hi keeps the channel feasible
    q = p @ w
    joint = p[:, None] * w
    pos = joint > 0
    upper = float(np.sum(np.where(pos, joint * np.log(np.where(pos, w, 1.0)
                                                       / np.where(pos, q[None, :], 1.0)), 0.0)))
    return upper, lower, hi, q


def blahut_arimoto_rd(p, d, D: float, tol: float = 1e-12, max_iter: int = 300,
                      polish: bool = True, return_details: bool = False):
    """Rate-distortion function ``R(D)`` in nats.

    Each iteration picks the slope ``lam`` so that the channel
    ``w_ij ~ r_j exp(-lam d_ij)`` spends exactly ``D``, then sets
    ``r = p^T w``. Iteration stops once the mutual information of the
    current channel (an upper bound) and the classic slope lower bound

        -lam D - sum_i p_i log sum_j r_j exp(-lam d_ij) - max_j log c_j

    agree to ``tol``.

    When the optimal output distribution has zero entries the iteration
    converges sublinearly and the gap stalls. With ``polish`` the result is
    then finished by solving the dual exactly (slope bisection around a
    barrier Newton solve for the output weights), warm-started from the
    last iterate.

    Parameters
    ----------
    p : array_like, shape (M,)
    d : array_like, shape (M, N)
    D : float
        Distortion budget. Budgets at or above ``min_j sum_i p_i d_ij`` have
        rate zero.
    """
    p, d = _p_and_d(p, d)
    if D < 0:
        raise InfeasibleError("distortion budget must be non-negative")
    d_min = float(p @ d.min(axis=1))
    if D <= d_min:
        raise InfeasibleError(f"D={D} is not above the minimum distortion {d_min}")
    if D >= float(np.min(p @ d)):
        return (0.0, {"lam": 0.0, "iters": 0, "gap": 0.0}) if return_details else 0.0

    n = d.shape[1]
    logp = np.log(p)
    logr = np.full(n, -math.log(n))
    lam = 0.0
    gap = np.inf
    upper = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        lam = _slope_for_budget(p, logr, d, D, lam, 1e-14)
        z = logr[None, :] - lam * d
        logZ = lse(z, axis=1)
        logw = z - logZ[:, None]
        logq = lse(logp[:, None] + logw, axis=0)
        w = np.exp(logw)
        joint = p[:, None] * w
        pos = joint > 0
        upper = float(np.sum(np.where(pos, joint * (logw - logq[None, :]), 0.0)))
        # c_j = sum_i p_i exp(-lam d_ij) / Z_i
        logc = lse(logp[:, None] - lam * d - logZ[:, None], axis=0)
        lower = -lam * D - float(p @ logZ) - float(np.max(logc))
        gap = upper - lower
        if not math.isfinite(gap):
            raise NumericError("non-finite Blahut-Arimoto bound")
        logr = logq
        if gap <= tol:
            break
    r = np.exp(logr)
    if gap > tol and polish:
        upper, lower, lam, r = _rd_dual_polish(p, d, D, r)
        gap = upper - lower
    rate = max(upper, 0.0)
    if return_details:
        return rate, {"lam": lam, "iters": it, "gap": gap, "r": r}
    return rate


# --------------------------------------------------------------------------
# exact optimal transport


def _tree_path(basis, m, n, i0, j0):
    """Cells on the basis-tree path from row ``i0`` to column ``j0``."""
    adj = [[] for _ in range(m + n)]
    for (i, j) in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    parent = {i0: None}
    queue = deque([i0])
    target = m + j0
    while queue:
        u = queue.popleft()
        if u == target:
            break
        for v in adj[u]:
            if v not in parent:
                parent[v] = u
                queue.append(v)
    path = []
    u = target
    while parent[u] is not None:
        v = parent[u]
        path.append((v, u - m) if v < m else (u, v - m))
        u = v
    return path  # ordered from column j0 back to row i0


def _potentials(basis, c, m, n):
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    by_row = [[] for _ in range(m)]
    by_col = [[] for _ in range(n)]
    for (i, j) in basis:
        by_row[i].append(j)
        by_col[j].append(i)
    u[0] = 0.0
    queue = deque([("r", 0)])
    while queue:
        kind, k = queue.popleft()
        if kind == "r":
            for j in by_row[k]:
                if np.isnan(v[j]):
                    v[j] = c[k, j] - u[k]
                    queue.append(("c", j))
        else:
            for i in by_col[k]:
                if np.isnan(u[i]):
                    u[i] = c[i, k] - v[k]
                    queue.append(("r", i))
    return u, v


def transport_plan(p, r, c, tol: float = 1e-12, max_pivots: Optional[int] = None):
    """Optimal plan and value of ``min <Pi, c>`` over couplings of ``p`` and ``r``."""
    p = np.asarray(_unwrap(p, "p"), dtype=float)
    r = np.asarray(_unwrap(r, "r"), dtype=float)
    c = np.asarray(_unwrap(c, "c"), dtype=float)
    m, n = p.size, r.size
    if c.shape != (m, n):
        raise DomainError("cost matrix shape does not match the marginals")
    if np.any(p < 0) or np.any(r < 0):
        raise DomainError("marginals must be non-negative")
    if abs(p.sum() - r.sum()) > 1e-9 or abs(p.sum() - 1.0) > 1e-9:
        raise DomainError("marginals must both sum to one")

    # north-west corner: a staircase of m + n - 1 cells, a spanning tree
    x = np.zeros((m, n))
    s, t = p.copy(), r.copy()
    basis = []
    i = j = 0
    while i < m and j < n:
        amt = min(s[i], t[j])
        x[i, j] = amt
        basis.append((i, j))
        down = s[i] <= t[j]
        s[i] -= amt
        t[j] -= amt
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif down:
            i += 1
        else:
            j += 1
    basis_set = set(basis)

    scale = max(1.0, float(np.abs(c).max()))
    limit = max_pivots if max_pivots is not None else 50 * (m + n) ** 2
    degenerate_run = 0
    for _ in range(limit):
        u, v = _potentials(basis_set, c, m, n)
        red = c - u[:, None] - v[None, :]
        if degenerate_run > m + n:
            # Bland's rule: first improving cell, guards against cycling
            cand = np.argwhere(red < -tol * scale)
            if cand.size == 0:
                break
            ei, ej = map(int, cand[0])
        else:
            ei, ej = map(int, np.unravel_index(np.argmin(red), red.shape))
            if red[ei, ej] >= -tol * scale:
                break
        path = _tree_path(basis_set, m, n, ei, ej)
        # cycle: (ei,ej) gets +, then the path cells alternate -, +, ...
        minus = path[0::2]
        plus = path[1::2]
        theta = min(x[cell] for cell in minus)
        leave = min((cell for cell in minus if x[cell] == theta))
        degenerate_run = degenerate_run + 1 if theta == 0 else 0
        x[ei, ej] += theta
        for cell in minus:
            x[cell] -= theta
        for cell in plus:
            x[cell] += theta
        x[leave] = 0.0
        basis_set.discard(leave)
        basis_set.add((ei, ej))
    else:
        raise NumericError("transportation simplex hit the pivot limit")
    x = np.maximum(x, 0.0)
    return x, math.fsum((x * c).ravel())


def exact_wasserstein(p, r, c, tol: float = 1e-12) -> float:
    """Exact optimal transport cost between ``p`` and ``r`` under cost ``c``.

    No entropic smoothing is involved, so the value is suitable for
    measuring the bias of regularized solutions.
    """
    return transport_plan(p, r, c, tol=tol)[1]


# --------------------------------------------------------------------------
# brute-force RDP


def _perception_2x2(perception: PerceptionMeasure, p, q):
    """Perception of output marginals ``q`` (shape (..., 2)) against ``p``."""
    if perception.kind == "kl":
        with np.errstate(divide="ignore"):
            return np.sum(p * (np.log(p) - np.log(q)), axis=-1)
    if perception.kind == "tv":
        return 0.5 * np.abs(q - p).sum(axis=-1)
    c = perception.cost.c
    # one free coupling entry pi00; the objective is linear in it
    lo = np.maximum(0.0, p[0] + q[..., 0] - 1.0)
    hi = np.minimum(p[0], q[..., 0])

    def cost(a):
        return (a * c[0, 0] + (p[0] - a) * c[0, 1] + (q[..., 0] - a) * c[1, 0]
                + (1.0 - p[0] - q[..., 0] + a) * c[1, 1])

    return np.minimum(cost(lo), cost(hi))


def _grid_eval(p, d, perception, D, P, a, b):
    """MI, feasibility on the grid of channels ``[[1-a, a], [b, 1-b]]``."""
    A, B = np.meshgrid(a, b, indexing="ij")
    w = np.empty(A.shape + (2, 2))
    w[..., 0, 0], w[..., 0, 1] = 1 - A, A
    w[..., 1, 0], w[..., 1, 1] = B, 1 - B
    joint = p[:, None] * w
    q = joint.sum(axis=-2)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(joint > 0, joint * np.log(w / q[..., None, :]), 0.0)
    mi = terms.sum(axis=(-2, -1))
    dist = np.sum(joint * d, axis=(-2, -1))
    perc = _perception_2x2(perception, p, q)
    feasible = (dist <= D) & (perc <= P)
    return A, B, np.where(feasible, mi, np.inf)


def _brute_2x2(p, d, perception, D, P, cfg):
    h = cfg.grid_resolution
    a = b = np.linspace(0.0, 1.0, int(round(1.0 / h)) + 1)
    A, B, val = _grid_eval(p, d, perception, D, P, a, b)
    k = int(np.argmin(val))  # ties: first in lexicographic (a, b) order
    if not np.isfinite(val.flat[k]):
        raise InfeasibleError("no feasible channel on the oracle grid")
    best = (float(val.flat[k]), float(A.flat[k]), float(B.flat[k]))
    for _ in range(cfg.refine_rounds):
        step = h / 10
        # re-center at this scale while the window keeps finding better points;
        # near a corner of the feasible set the optimum can drift many windows
        for _ in range(50):
            a = np.clip(best[1] + np.arange(-100, 101) * step, 0.0, 1.0)
            b = np.clip(best[2] + np.arange(-100, 101) * step, 0.0, 1.0)
            A, B, val = _grid_eval(p, d, perception, D, P, a, b)
            k = int(np.argmin(val))
            if not val.flat[k] < best[0]:
                break
            best = (float(val.flat[k]), float(A.flat[k]), float(B.flat[k]))
        h = step
    a, b = best[1], best[2]
    return max(best[0], 0.0), np.array([[1 - a, a], [b, 1 - b]])


def _convex_program(p, d, perception, D, P, cfg):
    import cvxpy as cp

    m, n = d.shape
    w = cp.Variable((m, n), nonneg=True)
    q = p @ w
    joint = cp.multiply(p[:, None], w)
    outer = cp.multiply(p[:, None], cp.vstack([q] * m))
    cons = [cp.sum(w, axis=1) == 1, cp.sum(cp.multiply(joint, d)) <= D]
    if perception.kind == "kl":
        pos = p > 0
        cons.append(cp.sum(cp.multiply(p[pos], cp.log(q[pos]))) >= float(p[pos] @ np.log(p[pos])) - P)
    elif perception.kind == "tv":
        cons.append(0.5 * cp.norm1(q - p) <= P)
    else:
        pi = cp.Variable((m, n), nonneg=True)
        cons += [cp.sum(pi, axis=1) == p, cp.sum(pi, axis=0) == q,
                 cp.sum(cp.multiply(pi, perception.cost.c)) <= P]
    prob = cp.Problem(cp.Minimize(cp.sum(cp.rel_entr(joint, outer))), cons)
    solvers = [s for s in ("CLARABEL", "SCS") if s in cp.installed_solvers()][:cfg.restarts]
    for solver in solvers:
        try:
            kwargs = ({"tol_gap_abs": cfg.tol, "tol_gap_rel": cfg.tol, "tol_feas": cfg.tol}
                      if solver == "CLARABEL" else {"eps": cfg.tol})
            prob.solve(solver=solver, **kwargs)
        except cp.error.SolverError:
            continue
        if prob.status == cp.OPTIMAL:
            wv = np.clip(w.value, 0.0, None)
            return max(float(prob.value), 0.0), wv / wv.sum(axis=1, keepdims=True)
        if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            raise InfeasibleError("oracle program is infeasible")
    raise NumericError(f"oracle program did not solve (status {prob.status})")


def brute_force_rdp(p, d, perception: PerceptionMeasure, D: float, P: float,
                    cfg: OracleConfig = OracleConfig(), return_channel: bool = False):
    """Minimal mutual information over channels meeting both budgets.

    2x2 instances are searched on a dense grid of the two free channel
    entries with zoom refinement; the value is the best feasible grid point
    and hence an upper bound. 3x3 instances are solved as a convex
    exponential-cone program. With ``return_channel`` the optimal channel is
    returned alongside the rate.
    """
    p, d = _p_and_d(p, d)
    m, n = d.shape
    if m * (n - 1) > 8:
        raise ConfigurationError("brute-force oracle is limited to 3x3 channels")
    if perception.kind in ("kl", "tv") and m != n:
        raise DomainError(f"{perception.kind} perception needs M = N")
    if perception.kind == "wasserstein" and perception.cost.c.shape != (m, n):
        raise DomainError("cost matrix shape does not match the problem")
    if m == 2 and n == 2:
        rate, w = _brute_2x2(p, d, perception, D, P, cfg)
    else:
        rate, w = _convex_program(p, d, perception, D, P, cfg)
    return (rate, w) if return_channel else rate


# --------------------------------------------------------------------------
# random instances


def random_instance(rng: np.random.Generator, n: int, kind: str = "kl"):
    """A random ``n x n`` problem whose budgets are both likely to bind.

    Returns ``(source, d, D, P)``. ``D`` sits strictly between the least
    achievable distortion and the zero-rate threshold; ``P`` is a fraction
    of the perception of the distortion-only optimum.
    """
    p = rng.dirichlet(np.ones(n))
    p = np.maximum(p, 0.02)
    p /= p.sum()
    d = rng.uniform(0.0, 1.0, size=(n, n))
    np.fill_diagonal(d, 0.0)
    d_min = float(p @ d.min(axis=1))
    d_max = float(np.min(p @ d))
    D = d_min + rng.uniform(0.3, 0.7) * (d_max - d_min)
    _, info = blahut_arimoto_rd(p, d, D, tol=1e-10, return_details=True)
    q = np.maximum(info["r"], 1e-300)
    q /= q.sum()
    if kind == "kl":
        base = perception_kl(p, q)
    elif kind == "tv":
        base = 0.5 * np.abs(p - q).sum()
    else:
        raise ConfigurationError("random instances support kl and tv perception")
    P = rng.uniform(0.3, 0.7) * min(base, 1.0)
    return DiscreteSource.from_probs(p), DistortionMatrix(d), D, P
