"""Alternating primal-dual solver for the RDP function under KL perception.

The outer loop alternates the closed-form update ``r = p^T w`` with an inner
dual loop that solves the channel subproblem for fixed ``r``::

    min_w  sum_ij p_i w_ij log(w_ij / r_j)
    s.t.   rows of w sum to 1
           sum_ij p_i w_ij d_ij <= D                      (multiplier lam)
           sum_j p_j log(sum_i p_i w_ij) >= sum_j p_j log p_j - P   (gamma)

whose optimum has the form ``w_ij = r_j exp(a_j - lam d_ij - b_i/p_i - 1)``.
The inner loop is block-coordinate descent on the convex dual

    F(a, b, lam, gamma) = sum_ij p_i r_j exp(a_j - b_i/p_i - 1 - lam d_ij)
                          - gamma sum_j p_j log a_j + sum_i b_i
                          + gamma log gamma + (P - 1) gamma + D lam.

Here ``lam`` is the distortion multiplier and ``gamma`` the perception one.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._logmath import lse
from .core import (ChannelMatrix, ConfigurationError, ConvergenceTrace, DiscreteSource,
                   DistortionMatrix, DomainError, InfeasibleError, InnerLoopError,
                   NumericError, ReconstructionDist, RdpSolution, SolverConfig,
                   expected_distortion, mutual_information)
from .rootfind import MonotoneRootProblem, lambert_log, solve_monotone_root


@dataclass(frozen=True)
class KlProblem:
    source: DiscreteSource
    d: DistortionMatrix
    D: float
    P: float

    def __post_init__(self):
        n = self.source.size
        if self.d.d.shape != (n, n):
            raise DomainError("KL perception needs M = N and a square distortion matrix")
        if self.D < 0 or self.P < 0:
            raise InfeasibleError("budgets must be non-negative")
        d_min = float(self.source.p @ self.d.d.min(axis=1))
        if self.D <= d_min:
            raise InfeasibleError(
                f"distortion budget {self.D} is not above the minimum achievable {d_min}")

    @property
    def T(self) -> float:
        p = self.source.p
        return float(p @ np.log(p)) - self.P


@dataclass(frozen=True)
class KlDualState:
    a: np.ndarray
    b: np.ndarray
    gamma: float
    lam: float

    @property
    def perception_multiplier(self) -> float:
        return self.gamma

    @property
    def distortion_multiplier(self) -> float:
        return self.lam

    @classmethod
    def initial(cls, m: int, n: int) -> "KlDualState":
        return cls(np.ones(n), np.ones(m), 1.0, 1.0)


def update_r(p, w) -> ReconstructionDist:
    p = getattr(p, "p", p)
    w = getattr(w, "w", w)
    r = np.asarray(p) @ np.asarray(w)
    return ReconstructionDist(r / r.sum())


def _log_r(r):
    r = np.asarray(getattr(r, "r", r), dtype=float)
    if np.any(r <= 0):
        raise DomainError("the KL solver needs a strictly positive reconstruction distribution")
    return np.log(r)


def _log_S(logp, logr, d, u, lam):
    """``log S_j`` with ``S_j = sum_i p_i r_j exp(-lam d_ij - u_i - 1)``."""
    return logr + lse(logp[:, None] - lam * d - u[:, None] - 1.0, axis=0)


def _update_b(p, logr, d, a, lam):
    return p * lse(logr[None, :] + a[None, :] - lam * d - 1.0, axis=1)


def _a_of_gamma(gamma, logp, logS, tol):
    if gamma <= 0:
        return np.zeros_like(logS)
    return lambert_log(np.log(gamma) + logp - logS, tol=tol)


def _update_gamma(p, logp, logS, P, gamma0, cfg):
    """Minimize the dual jointly over ``(a, gamma)`` for fixed ``b, lam``.

    Stationarity in ``gamma`` is ``gamma = exp(sum_j p_j log a_j - P)``; with
    ``a_j(gamma)`` the Lambert root this becomes the decreasing equation
    ``sum_j p_j log(p_j / S_j) - sum_j p_j a_j(gamma) - P = 0``, which is
    zero-clamped when the perception constraint is slack.
    """
    if np.isinf(P):
        return 0.0, np.zeros_like(logS)
    base = float(p @ (logp - logS)) - P
    tol = cfg.root_tol

    def phi(g):
        return base - float(p @ _a_of_gamma(g, logp, logS, tol))

    def dphi(g):
        a = _a_of_gamma(g, logp, logS, tol)
        return -float(p @ (a / (1.0 + a))) / g

    gamma = solve_monotone_root(MonotoneRootProblem(phi, dphi), x0=gamma0,
                                tol=tol, max_iter=cfg.root_max_iter)
    return gamma, _a_of_gamma(gamma, logp, logS, tol)


def _row_softmax(logr, a, d, lam):
    x = logr[None, :] + a[None, :] - lam * d
    x = x - x.max(axis=1, keepdims=True)
    w = np.exp(x)
    return w / w.sum(axis=1, keepdims=True)


def _update_lam(p, logr, d, a, D, lam0, cfg):
    """Minimize the dual jointly over ``(b, lam)`` for fixed ``a``.

    For each ``lam`` the optimal ``b`` normalizes the rows, so the stationarity
    condition ``g(lam) = 0`` becomes "expected distortion of the row-normalized
    channel equals D". That expectation is decreasing in ``lam``; its log is
    solved, which keeps the residual scale-free.
    """
    def dist(lam):
        w = _row_softmax(logr, a, d, lam)
        e_row = np.sum(w * d, axis=1)
        return float(p @ e_row), w, e_row

    if dist(0.0)[0] <= D:
        return 0.0

    def h(lam):
        return np.log(dist(lam)[0]) - np.log(D)

    def dh(lam):
        e, w, e_row = dist(lam)
        var = np.sum(w * d * d, axis=1) - e_row ** 2
        return -float(p @ var) / e

    return solve_monotone_root(MonotoneRootProblem(h, dh), x0=lam0,
                               tol=cfg.root_tol, max_iter=cfg.root_max_iter)


def _sweep(problem, logr, state, cfg):
    p = problem.source.p
    logp = np.log(p)
    d = problem.d.d
    u = state.b / p
    # (1) perception potentials a_j for the current gamma
    logS = _log_S(logp, logr, d, u, state.lam)
    a = _a_of_gamma(state.gamma, logp, logS, cfg.root_tol)
    # (2) row normalization
    b = _update_b(p, logr, d, a, state.lam)
    u = b / p
    # (3) perception multiplier, with a re-solved alongside it
    logS = _log_S(logp, logr, d, u, state.lam)
    gamma, a = _update_gamma(p, logp, logS, problem.P, state.gamma, cfg)
    # (4) distortion multiplier, with b re-normalized alongside it
    lam = _update_lam(p, logr, d, a, problem.D, state.lam, cfg)
    b = _update_b(p, logr, d, a, lam)
    new = KlDualState(a, b, gamma, lam)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))
            and np.isfinite(gamma) and np.isfinite(lam)):
        raise NumericError("non-finite dual variable in KL inner sweep")
    if max(gamma, lam) > cfg.multiplier_cap:
        raise InfeasibleError(
            f"multiplier blow-up (gamma={gamma:.3g}, lambda={lam:.3g}); budgets look infeasible")
    return new


def _reduced_dual(p, logr, d, P, D, a, gamma, lam):
    """Dual objective with ``b`` eliminated (rows normalized), up to a constant."""
    val = float(p @ lse(logr[None, :] + a[None, :] - lam * d, axis=1)) + D * lam
    if gamma > 0:
        val += gamma * (np.log(gamma) + P - 1.0) - gamma * float(p @ np.log(a))
    return val


def _newton_step(problem, logr, state, cfg):
    """One damped Newton step on the reduced dual over the active multipliers.

    The coordinate cycle alone crawls when the two constraints pull on
    nearly the same direction of the channel; a joint step over
    ``(a, gamma, lam)`` removes that zigzag. Only multipliers that the cycle
    left positive take part, so the zero-clamping stays with the root finders.
    """
    if state.gamma <= 0:
        return state
    p = problem.source.p
    d = problem.d.d
    P, D = problem.P, problem.D
    a, gamma, lam = state.a, state.gamma, state.lam
    n = a.size
    use_lam = lam > 0

    w = _row_softmax(logr, a, d, lam)
    q = p @ w
    e_row = np.sum(w * d, axis=1)
    g = [q - gamma * p / a, [np.log(gamma) - float(p @ np.log(a)) + P]]
    h_aa = np.diag(q + gamma * p / a ** 2) - (w.T * p) @ w
    h_ag = -p / a
    k = n + 1 + int(use_lam)
    H = np.zeros((k, k))
    H[:n, :n] = h_aa
    H[:n, n] = H[n, :n] = h_ag
    H[n, n] = 1.0 / gamma
    if use_lam:
        g.append([D - float(p @ e_row)])
        h_al = -np.sum(p[:, None] * w * (d - e_row[:, None]), axis=0)
        H[:n, n + 1] = H[n + 1, :n] = h_al
        H[n + 1, n + 1] = float(p @ (np.sum(w * d * d, axis=1) - e_row ** 2))
    g = np.concatenate(g)
    try:
        step = -np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return state
    if not np.all(np.isfinite(step)):
        return state

    f0 = _reduced_dual(p, logr, d, P, D, a, gamma, lam)
    slope = float(g @ step)
    if slope >= 0:
        return state
    t = 1.0
    for _ in range(60):
        a_n = a + t * step[:n]
        g_n = gamma + t * step[n]
        l_n = lam + t * step[n + 1] if use_lam else lam
        if np.all(a_n > 0) and g_n > 0 and l_n >= 0:
            f1 = _reduced_dual(p, logr, d, P, D, a_n, g_n, l_n)
            # near the optimum the decrease drowns in rounding; accept tiny steps
            if f1 <= f0 + 1e-4 * t * slope or t * np.max(np.abs(step)) < 1e-9:
                b = _update_b(p, logr, d, a_n, l_n)
                return KlDualState(a_n, b, g_n, l_n)
        t *= 0.5
    return state


def _dual_change(old, new, p, d_max):
    return max(np.max(np.abs(new.a - old.a)),
               np.max(np.abs((new.b - old.b) / p)),
               abs(new.gamma - old.gamma),
               abs(new.lam - old.lam) * max(1.0, d_max))


def _run_inner(problem, r, state, cfg):
    logr = _log_r(r)
    p = problem.source.p
    d = problem.d.d
    d_max = float(d.max())
    sweeps = 0
    for sweeps in range(1, cfg.max_inner + 1):
        try:
            new = _sweep(problem, logr, state, cfg)
            new = _newton_step(problem, logr, new, cfg)
        except NumericError as exc:
            raise NumericError(f"inner sweep {sweeps}: {exc}") from exc
        change = _dual_change(state, new, p, d_max)
        state = new
        if change < cfg.tol_inner:
            break
    # close with a row normalization so the reconstructed channel is stochastic
    b = _update_b(p, logr, d, state.a, state.lam)
    return replace(state, b=b), sweeps


def kl_inner_loop(problem: KlProblem, r, state: KlDualState,
                  cfg: SolverConfig = SolverConfig()) -> KlDualState:
    """Cycle the a, b, gamma, lambda updates until the duals stop moving."""
    return _run_inner(problem, r, state, cfg)[0]


def _log_w(r, state, problem):
    p = problem.source.p
    return (_log_r(r)[None, :] + state.a[None, :] - state.lam * problem.d.d
            - (state.b / p)[:, None] - 1.0)


def _perception_log(p, logw):
    """``KL(p || p^T w)`` from the log channel; tail masses may underflow in ``w``."""
    logw = logw - lse(logw, axis=1)[:, None]
    logq = lse(np.log(p)[:, None] + logw, axis=0)
    return float(p @ (np.log(p) - logq))


def reconstruct_w(r, state: KlDualState, problem: KlProblem) -> ChannelMatrix:
    w = np.exp(_log_w(r, state, problem))
    dev = np.max(np.abs(w.sum(axis=1) - 1.0))
    if not dev <= 1e-6:
        raise InnerLoopError(f"channel rows off by {dev:.3g}; inner loop not converged")
    return ChannelMatrix(w / w.sum(axis=1, keepdims=True))


def _kkt_residual(x, problem, logd):
    """Joint optimality system in ``(log q, log gamma, lam)`` and its Jacobian.

    At an optimum with both constraints active the channel is
    ``w_ij = q_j exp(a_j - lam d_ij) / Z_i`` with ``a_j = gamma p_j / q_j``, and

        log sum_i p_i exp(a_j - lam d_ij) / Z_i = 0       (q is the output marginal)
        log sum_ij p_i w_ij d_ij - log D = 0
        sum_j p_j log q_j - T = 0

    Working with ``log q`` and ``log gamma`` keeps columns whose mass is far
    below the double range representable.
    """
    p = problem.source.p
    d = problem.d.d
    logp = np.log(p)
    n = p.size
    t, lg, lam = x[:n], x[n], x[n + 1]
    a = np.exp(lg + logp - t)
    X = t[None, :] + a[None, :] - lam * d
    logZ = lse(X, axis=1)
    rho = np.exp(X - logZ[:, None])
    e_row = np.sum(rho * d, axis=1)
    a_row = rho @ a
    G = logp[:, None] + a[None, :] - lam * d - logZ[:, None]
    E = lse(G, axis=0)
    pi = np.exp(G - E[None, :])
    H = G + t[None, :] + logd
    ED = lse(H)
    mu = np.exp(H - ED)
    m_row = mu.sum(axis=1)

    F = np.concatenate([E, [ED - np.log(problem.D), float(p @ t) - problem.T]])
    J = np.zeros((n + 2, n + 2))
    J[:n, :n] = -np.diag(a) - (pi.T @ rho) * (1.0 - a)[None, :]
    J[:n, n] = a - pi.T @ a_row
    J[:n, n + 1] = pi.T @ e_row - np.sum(pi * d, axis=0)
    J[n, :n] = (1.0 - a) * (mu.sum(axis=0) - m_row @ rho)
    J[n, n] = float(np.sum(mu.sum(axis=0) * a) - m_row @ a_row)
    J[n, n + 1] = float(m_row @ e_row - np.sum(mu * d))
    J[n + 1, :n] = p
    return F, J, X - logZ[:, None]


def _kkt_polish(problem, logq, state, max_iter=50, tol=1e-12):
    """Damped Newton on the joint optimality system, from the alternating result.

    The alternating scheme converges sublinearly when the optimal output
    marginal has very small entries. Once both multipliers are positive the
    optimality system pins the solution down and Newton finishes it. Returns
    ``(log w, log q, gamma, lam)`` or None when the system does not solve.
    """
    if not (state.gamma > 0 and state.lam > 0 and np.isfinite(problem.P)):
        return None
    n = problem.source.size
    with np.errstate(divide="ignore"):
        logd = np.log(problem.d.d)
    x = np.concatenate([logq, [np.log(state.gamma), state.lam]])
    with np.errstate(over="ignore", invalid="ignore"):
        F, J, logw = _kkt_residual(x, problem, logd)
        merit = float(F @ F)
        for _ in range(max_iter):
            if not np.isfinite(merit):
                return None
            if merit < tol ** 2:
                break
            try:
                step = np.linalg.solve(J, -F)
            except np.linalg.LinAlgError:
                return None
            s = 1.0
            while s > 1e-10:
                cand = _kkt_residual(x + s * step, problem, logd)
                m = float(cand[0] @ cand[0])
                if np.isfinite(m) and m < (1.0 - 1e-4 * s) * merit:
                    break
                s *= 0.5
            else:
                return None
            x = x + s * step
            F, J, logw = cand
            merit = m
        else:
            return None
    if not (np.isfinite(merit) and merit < tol ** 2 and x[n + 1] > 0):
        return None
    return logw, x[:n], float(np.exp(x[n])), float(x[n + 1])


def solve_kl(problem: KlProblem, cfg: SolverConfig = SolverConfig(),
             r0=None, state0: KlDualState | None = None) -> RdpSolution:
    """Compute ``R(D, P)`` with KL perception.

    Starts from uniform ``r`` and unit duals unless a warm start is given.
    The trace records ``f(w^n, r^n)``, the objective with the ``r`` that
    produced ``w^n``; it is non-increasing and tends to the rate.
    """
    if not isinstance(cfg, SolverConfig):
        raise ConfigurationError("cfg must be a SolverConfig")
    p = problem.source.p
    n = problem.d.d.shape[1]
    r = ReconstructionDist(np.full(n, 1.0 / n)) if r0 is None else ReconstructionDist(r0)
    state = KlDualState.initial(p.size, n) if state0 is None else state0
    trace = ConvergenceTrace()
    converged = False
    w = None
    for it in range(1, cfg.max_outer + 1):
        if w is not None:
            r = update_r(p, w)
            if np.any(r.r == 0):
                # an underflowed tail entry; keep it at the smallest normal double
                floored = np.maximum(r.r, np.finfo(float).tiny)
                r = ReconstructionDist(floored / floored.sum())
        state, sweeps = _run_inner(problem, r, state, cfg)
        w = reconstruct_w(r, state, problem)
        f = mutual_information(p, w, r)
        dist = expected_distortion(p, w, problem.d)
        perc = _perception_log(p, _log_w(r, state, problem))
        trace.append(f, dist, perc, sweeps)
        if it > 1 and abs(trace.objective[-2] - f) < cfg.tol_outer:
            converged = True
            break

    r_out = update_r(p, w)
    rate = mutual_information(p, w, r_out)
    dist = expected_distortion(p, w, problem.d)
    logw = _log_w(r, state, problem)
    perc = _perception_log(p, logw)
    polished = False
    if cfg.polish:
        logq = lse(np.log(p)[:, None] + logw - lse(logw, axis=1)[:, None], axis=0)
        out = _kkt_polish(problem, logq, state)
        if out is not None:
            logw_n, logq_n, gamma, lam = out
            w_n = np.exp(logw_n)
            w_n = ChannelMatrix(w_n / w_n.sum(axis=1, keepdims=True))
            r_n = update_r(p, w_n)
            rate_n = mutual_information(p, w_n, r_n)
            dist_n = expected_distortion(p, w_n, problem.d)
            perc_n = _perception_log(p, logw_n)
            # keep the Newton point only if it is feasible and at least as good
            if (dist_n <= problem.D * (1 + 1e-12) and perc_n <= problem.P + 1e-12
                    and rate_n <= rate + 1e-15):
                a = np.exp(np.log(gamma) + np.log(p) - logq_n)
                state = KlDualState(a, _update_b(p, logq_n, problem.d.d, a, lam), gamma, lam)
                w, r_out, rate, dist, perc = w_n, r_n, rate_n, dist_n, perc_n
                polished = True
    feasible = dist <= problem.D + 1e-7 and perc <= problem.P + 1e-7
    return RdpSolution(
        rate_nats=max(rate, 0.0),
        w=w, r=r_out,
        duals={"distortion_multiplier": state.lam, "perception_multiplier": state.gamma,
               "a": state.a.tolist(), "b": state.b.tolist()},
        achieved_distortion=dist, achieved_perception=perc,
        trace=trace, converged=(converged or polished) and feasible)
