"""Alternating primal-dual solver for the RDP function under a transport cost.

The perception constraint ``W_c(p, r) <= P`` is lifted into a coupling
``Pi`` with row marginal ``p`` whose column marginal must match the output
marginal of the channel, ``sum_i p_i w_ij = sum_i Pi_ij``. With an entropy
term ``eps * sum Pi log Pi`` the channel/coupling subproblem for fixed ``r``
has the dual representation

    w_ij  = r_j exp(beta_j - gamma d_ij) phi_i
    Pi_ij = p_i phi_hat_i exp(-(beta_j + lam c_ij) / eps)

with ``gamma`` the distortion multiplier and ``lam`` the perception
multiplier. ``phi`` and ``phi_hat`` are kept as logarithms; every sum over
exponentials is a max-shifted log-sum-exp, since ``c / eps`` reaches 1e5 for
small ``eps``. Total variation is the 0/1 cost.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from ._logmath import lse, safe_log
from .core import (ChannelMatrix, ConfigurationError, ConvergenceTrace, CostMatrix,
                   Coupling, DiscreteSource, DistortionMatrix, DomainError,
                   InfeasibleError, InnerLoopError, NumericError, ReconstructionDist,
                   RdpSolution, SolverConfig, entropy_term, expected_distortion,
                   mutual_information)
from .kl_solver import update_r
from .rootfind import MonotoneRootProblem, solve_monotone_root

# KKT residual targeted after the regular inner stopping rule fires
_POLISH_TOL = 1e-13


@dataclass(frozen=True)
class OtProblem:
    source: DiscreteSource
    d: DistortionMatrix
    c: CostMatrix
    D: float
    P: float
    epsilon: float = 0.01

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        m = self.source.size
        if self.d.d.shape[0] != m or self.c.c.shape != self.d.d.shape:
            raise DomainError("distortion and cost matrices must both be M x N")
        if self.D < 0 or self.P < 0:
            raise InfeasibleError("budgets must be non-negative")
        d_min = float(self.source.p @ self.d.d.min(axis=1))
        if self.D <= d_min:
            raise InfeasibleError(
                f"distortion budget {self.D} is not above the minimum achievable {d_min}")

    def with_epsilon(self, epsilon: float) -> "OtProblem":
        return replace(self, epsilon=epsilon)


@dataclass(frozen=True)
class OtDualState:
    log_phi: np.ndarray
    log_phi_hat: np.ndarray
    beta: np.ndarray
    gamma: float
    lam: float

    @property
    def phi(self) -> np.ndarray:
        return np.exp(self.log_phi)

    @property
    def phi_hat(self) -> np.ndarray:
        return np.exp(self.log_phi_hat)

    @property
    def distortion_multiplier(self) -> float:
        return self.gamma

    @property
    def perception_multiplier(self) -> float:
        return self.lam

    @classmethod
    def initial(cls, m: int, n: int) -> "OtDualState":
        return cls(np.zeros(m), np.zeros(m), np.zeros(n), 0.0, 0.0)


def _logr(r):
    r = np.asarray(getattr(r, "r", r), dtype=float)
    if np.any(r < 0):
        raise DomainError("r must be non-negative")
    # exact iterates keep r > 0; an underflowed entry is treated as the
    # smallest normal double so that beta_j stays finite
    return np.log(np.maximum(r, np.finfo(float).tiny))


def _log_phi(logr, beta, gamma, d):
    out = -lse(logr[None, :] + beta[None, :] - gamma * d, axis=1)
    if not np.all(np.isfinite(out)):
        raise NumericError("row normalizer of w underflowed")
    return out


def _log_phi_hat(beta, lam, c, eps):
    out = -lse(-(beta[None, :] + lam * c) / eps, axis=1)
    if not np.all(np.isfinite(out)):
        raise NumericError("row normalizer of Pi underflowed")
    return out


def _beta(logp, logr, log_phi, log_phi_hat, gamma, lam, d, c, eps):
    num = lse(logp[:, None] + log_phi_hat[:, None] - lam * c / eps, axis=0)
    den = logr + lse(logp[:, None] + log_phi[:, None] - gamma * d, axis=0)
    if np.any(~np.isfinite(den)):
        raise NumericError("column normalizer of w underflowed")
    return eps / (1.0 + eps) * (num - den)


def update_phi(r, beta, gamma, problem: OtProblem) -> np.ndarray:
    """``phi_i = 1 / sum_j r_j exp(beta_j - gamma d_ij)``: rows of w sum to one."""
    return np.exp(_log_phi(_logr(r), np.asarray(beta, float), gamma, problem.d.d))


def update_phi_hat(beta, lam, problem: OtProblem) -> np.ndarray:
    """``phi_hat_i = 1 / sum_j exp(-(beta_j + lam c_ij) / eps)``.

    Normalizes each row of the coupling kernel to one; the source mass
    ``p_i`` is applied when the coupling is formed.
    """
    return np.exp(_log_phi_hat(np.asarray(beta, float), lam, problem.c.c, problem.epsilon))


def update_beta(r, phi, phi_hat, gamma, lam, problem: OtProblem) -> np.ndarray:
    """Shared potential that equates the column marginals of ``diag(p) w`` and ``Pi``."""
    logp = np.log(problem.source.p)
    return _beta(logp, _logr(r), safe_log(np.asarray(phi, float)),
                 safe_log(np.asarray(phi_hat, float)), gamma, lam,
                 problem.d.d, problem.c.c, problem.epsilon)


def _root_of_weighted_sum(logw, m, budget, x0, cfg, scale=1.0):
    """Root in ``x`` of ``sum exp(logw - x m / scale) m - budget`` (zero-clamped).

    Solved as the log of the sum against ``log(budget)``, which is finite for
    every ``x`` and has the same root.
    """
    logm = safe_log(m)
    base = logw + logm
    if budget > 0 and lse(base) <= np.log(budget):
        return 0.0
    if not np.any(m > 0):
        return 0.0
    if budget <= 0:
        raise InfeasibleError("zero budget needs an unbounded multiplier")
    k = m / scale

    def h(x):
        return lse(base - x * k) - np.log(budget)

    def dh(x):
        z = base - x * k
        wgt = np.exp(z - np.max(z))
        return -float(np.sum(wgt * k) / np.sum(wgt))

    return solve_monotone_root(MonotoneRootProblem(h, dh), x0=x0,
                               tol=cfg.root_tol, max_iter=cfg.root_max_iter)


def update_gamma_ot(r, phi, beta, problem: OtProblem, cfg: SolverConfig = SolverConfig(),
                    x0: float = 0.0) -> float:
    """Root of ``G(gamma) = sum_ij p_i r_j exp(beta_j - gamma d_ij) phi_i d_ij - D``."""
    logp = np.log(problem.source.p)
    log_phi = safe_log(np.asarray(phi, float))
    logw = logp[:, None] + log_phi[:, None] + (_logr(r) + np.asarray(beta, float))[None, :]
    return _root_of_weighted_sum(logw, problem.d.d, problem.D, x0, cfg)


def update_lambda_ot(phi_hat, beta, problem: OtProblem, cfg: SolverConfig = SolverConfig(),
                     x0: float = 0.0) -> float:
    """Root of ``F(lam) = sum_ij p_i phi_hat_i exp(-(beta_j + lam c_ij)/eps) c_ij - P``."""
    eps = problem.epsilon
    logp = np.log(problem.source.p)
    log_phi_hat = safe_log(np.asarray(phi_hat, float))
    logw = (logp + log_phi_hat)[:, None] - np.asarray(beta, float)[None, :] / eps
    return _root_of_weighted_sum(logw, problem.c.c, problem.P, x0, cfg, scale=eps)


def _log_w(logr, state, d):
    return logr[None, :] + state.beta[None, :] - state.gamma * d + state.log_phi[:, None]


def _log_pi(logp, state, c, eps):
    return logp[:, None] + state.log_phi_hat[:, None] - (state.beta[None, :] + state.lam * c) / eps


def _sweep(problem, logp, logr, state, cfg):
    d, c, eps = problem.d.d, problem.c.c, problem.epsilon
    log_phi = _log_phi(logr, state.beta, state.gamma, d)
    log_phi_hat = _log_phi_hat(state.beta, state.lam, c, eps)
    beta = _beta(logp, logr, log_phi, log_phi_hat, state.gamma, state.lam, d, c, eps)
    logw_g = logp[:, None] + log_phi[:, None] + (logr + beta)[None, :]
    gamma = _root_of_weighted_sum(logw_g, d, problem.D, state.gamma, cfg)
    logw_l = (logp + log_phi_hat)[:, None] - beta[None, :] / eps
    lam = _root_of_weighted_sum(logw_l, c, problem.P, state.lam, cfg, scale=eps)
    if not (np.all(np.isfinite(beta)) and np.isfinite(gamma) and np.isfinite(lam)):
        raise NumericError("non-finite dual variable in OT inner sweep")
    if max(gamma, lam) > cfg.multiplier_cap:
        raise InfeasibleError(
            f"multiplier blow-up (gamma={gamma:.3g}, lambda={lam:.3g}); budgets look infeasible")
    return OtDualState(log_phi, log_phi_hat, beta, gamma, lam)


def _reduced_dual(problem, logp, logr, beta, gamma, lam, need_hess=True):
    """Convex dual in ``(beta, gamma, lam)`` with both row normalizers eliminated.

    ``F = sum_i p_i lse_j(log r_j + beta_j - gamma d_ij)
          + eps sum_i p_i lse_j(-(beta_j + lam c_ij)/eps) + gamma D + lam P``
    """
    d, c, eps = problem.d.d, problem.c.c, problem.epsilon
    p = problem.source.p
    zw = logr[None, :] + beta[None, :] - gamma * d
    zp = -(beta[None, :] + lam * c) / eps
    lw, lp = lse(zw, axis=1), lse(zp, axis=1)
    val = float(p @ lw + eps * (p @ lp) + gamma * problem.D + lam * problem.P)
    if not need_hess:
        return val, None, None
    W = np.exp(zw - lw[:, None])
    Q = np.exp(zp - lp[:, None])
    Ed, Ec = np.sum(W * d, axis=1), np.sum(Q * c, axis=1)
    pW, pQ = p[:, None] * W, p[:, None] * Q
    grad = np.concatenate([pW.sum(0) - pQ.sum(0),
                           [problem.D - p @ Ed, problem.P - p @ Ec]])
    n = beta.size
    H = np.zeros((n + 2, n + 2))
    H[:n, :n] = (np.diag(pW.sum(0)) - W.T @ pW
                 + (np.diag(pQ.sum(0)) - Q.T @ pQ) / eps)
    hbg = -np.sum(pW * (d - Ed[:, None]), axis=0)
    hbl = np.sum(pQ * (c - Ec[:, None]), axis=0) / eps
    H[:n, n] = H[n, :n] = hbg
    H[:n, n + 1] = H[n + 1, :n] = hbl
    H[n, n] = p @ (np.sum(W * d * d, axis=1) - Ed ** 2)
    H[n + 1, n + 1] = p @ (np.sum(Q * c * c, axis=1) - Ec ** 2) / eps
    return val, grad, H


def _newton_step(problem, logp, logr, state):
    """One damped Newton step on the reduced dual; zero multipliers stay fixed."""
    beta, gamma, lam = state.beta, state.gamma, state.lam
    n = beta.size
    f0, g, H = _reduced_dual(problem, logp, logr, beta, gamma, lam)
    # columns with (numerically) no mass leave beta_j undetermined; hold them fixed
    mass = np.diag(H)[:n]
    live = mass > 1e-12 * mass.max()
    free = np.r_[live, gamma > 0, lam > 0]
    k = int(live.sum())
    Hf = H[np.ix_(free, free)].copy()
    # F is invariant to beta -> beta + t; pin that direction
    Hf[:k, :k] += np.outer(np.ones(k), np.ones(k)) * max(1.0, np.trace(Hf[:k, :k]) / k)
    try:
        step = np.zeros(n + 2)
        step[free] = -np.linalg.solve(Hf, g[free])
    except np.linalg.LinAlgError:
        return state
    if not np.all(np.isfinite(step)):
        return state
    slope = float(g @ step)
    if slope >= 0:
        return state
    t = 1.0
    for _ in range(40):
        nb = beta + t * step[:n]
        ng, nl = gamma + t * step[n], lam + t * step[n + 1]
        if ng >= 0 and nl >= 0:
            f1 = _reduced_dual(problem, logp, logr, nb, ng, nl, need_hess=False)[0]
            if f1 <= f0 + 1e-4 * t * slope or t * np.max(np.abs(step)) < 1e-12:
                if f1 > f0:
                    return state
                return replace(state, beta=nb, gamma=max(ng, 0.0), lam=max(nl, 0.0))
        t *= 0.5
    return state


def _kkt_residual(problem, logp, logr, state):
    """Marginal mismatch plus constraint violation or complementarity gap."""
    n = state.beta.size
    _, g, _ = _reduced_dual(problem, logp, logr, state.beta, state.gamma, state.lam)
    res = np.abs(g[:n]).max()
    for mult, slack in ((state.gamma, g[n]), (state.lam, g[n + 1])):
        res = max(res, abs(slack) if mult > 0 else max(-slack, 0.0))
    return float(res)


def _dual_change(old, new, eps, d_max, c_max):
    return max(np.max(np.abs(new.log_phi - old.log_phi)),
               np.max(np.abs(new.log_phi_hat - old.log_phi_hat)),
               np.max(np.abs(new.beta - old.beta)) * max(1.0, 1.0 / eps),
               abs(new.gamma - old.gamma) * max(1.0, d_max),
               abs(new.lam - old.lam) * max(1.0, c_max / eps))


def _run_inner(problem, r, state, cfg):
    logp = np.log(problem.source.p)
    logr = _logr(r)
    d_max, c_max = float(problem.d.d.max()), float(problem.c.c.max())
    sweeps = 0
    for sweeps in range(1, cfg.max_inner + 1):
        try:
            new = _sweep(problem, logp, logr, state, cfg)
        except NumericError as exc:
            raise NumericError(f"inner sweep {sweeps}: {exc}") from exc
        new = _newton_step(problem, logp, logr, new)
        change = _dual_change(state, new, problem.epsilon, d_max, c_max)
        state = new
        if change < cfg.tol_inner or _kkt_residual(problem, logp, logr, state) < cfg.tol_inner:
            break
    # a residual near tol_inner still moves g by ~1e-11, enough to break descent
    # at the 1e-12 level; Newton is quadratic here, so a few more steps are cheap
    res = _kkt_residual(problem, logp, logr, state)
    for _ in range(5):
        if res < _POLISH_TOL:
            break
        try:
            cand = _newton_step(problem, logp, logr, _sweep(problem, logp, logr, state, cfg))
        except NumericError:
            break
        cand_res = _kkt_residual(problem, logp, logr, cand)
        if not cand_res < res:
            break
        state, res = cand, cand_res
    # close with exact row normalizations of w and Pi
    state = replace(state,
                    log_phi=_log_phi(logr, state.beta, state.gamma, problem.d.d),
                    log_phi_hat=_log_phi_hat(state.beta, state.lam, problem.c.c,
                                             problem.epsilon))
    return state, sweeps


def ot_inner_loop(problem: OtProblem, r, state: OtDualState,
                  cfg: SolverConfig = SolverConfig()) -> OtDualState:
    """Cycle phi -> phi_hat -> beta -> gamma -> lambda until the duals settle."""
    return _run_inner(problem, r, state, cfg)[0]


def reconstruct_w_ot(r, state: OtDualState, problem: OtProblem) -> ChannelMatrix:
    w = np.exp(_log_w(_logr(r), state, problem.d.d))
    dev = np.max(np.abs(w.sum(axis=1) - 1.0))
    if not dev <= 1e-5:
        raise InnerLoopError(f"channel rows off by {dev:.3g}; inner loop not converged")
    return ChannelMatrix(w / w.sum(axis=1, keepdims=True))


def reconstruct_pi(state: OtDualState, problem: OtProblem) -> Coupling:
    p = problem.source.p
    pi = np.exp(_log_pi(np.log(p), state, problem.c.c, problem.epsilon))
    dev = np.max(np.abs(pi.sum(axis=1) - p))
    if not dev <= 1e-5:
        raise InnerLoopError(f"coupling rows off by {dev:.3g}; inner loop not converged")
    return Coupling(pi)


def _marginal_gap(p, w, pi):
    return float(np.max(np.abs(p @ w - pi.sum(axis=0))))


def solve_ot(problem: OtProblem, cfg: SolverConfig = SolverConfig(),
             r0=None, state0: Optional[OtDualState] = None) -> RdpSolution:
    """Compute the entropy-regularized RDP value under a transport-cost perception.

    ``rate_nats`` is the plain mutual information of the returned channel;
    ``regularized_objective`` adds ``eps * sum Pi log Pi``. The trace records
    ``g(w^n, Pi^n, r^n)``, which is non-increasing.
    """
    if not isinstance(cfg, SolverConfig):
        raise ConfigurationError("cfg must be a SolverConfig")
    p = problem.source.p
    m, n = problem.d.d.shape
    eps = problem.epsilon
    r = ReconstructionDist(np.full(n, 1.0 / n)) if r0 is None else ReconstructionDist(r0)
    state = OtDualState.initial(m, n) if state0 is None else state0
    trace = ConvergenceTrace()
    converged = False
    w = pi = None
    for it in range(1, cfg.max_outer + 1):
        if w is not None:
            r = update_r(p, w)
            if np.any(r.r == 0):
                floored = np.maximum(r.r, np.finfo(float).tiny)
                r = ReconstructionDist(floored / floored.sum())
        state, sweeps = _run_inner(problem, r, state, cfg)
        w = reconstruct_w_ot(r, state, problem)
        pi = reconstruct_pi(state, problem)
        g = mutual_information(p, w, r) + eps * entropy_term(pi)
        dist = expected_distortion(p, w, problem.d)
        perc = float(np.sum(pi.pi * problem.c.c))
        trace.append(g, dist, perc, sweeps)
        if it > 1 and abs(trace.objective[-2] - g) < cfg.tol_outer:
            converged = True
            break

    gap = _marginal_gap(p, w.w, pi.pi)
    if gap > 1e-5:
        raise InnerLoopError(f"coupling/channel marginal mismatch {gap:.3g}")
    r_out = update_r(p, w)
    rate = max(mutual_information(p, w, r_out), 0.0)
    dist = expected_distortion(p, w, problem.d)
    perc = float(np.sum(pi.pi * problem.c.c))
    feasible = (dist <= problem.D + 1e-7 and perc <= problem.P + 1e-7
                and gap <= cfg.tol_marginal)
    return RdpSolution(
        rate_nats=rate, w=w, r=r_out, pi=pi,
        duals={"distortion_multiplier": state.gamma, "perception_multiplier": state.lam,
               "log_phi": state.log_phi.tolist(), "log_phi_hat": state.log_phi_hat.tolist(),
               "beta": state.beta.tolist(), "epsilon": eps},
        achieved_distortion=dist, achieved_perception=perc,
        regularized_objective=rate + eps * entropy_term(pi),
        trace=trace, converged=converged and feasible)


def solve_ot_continuation(problem: OtProblem, epsilons: Sequence[float],
                          cfg: SolverConfig = SolverConfig()) -> RdpSolution:
    """Solve at each ``epsilon`` in turn, warm-starting ``r`` and the duals.

    The potentials ``beta`` and ``log phi_hat`` scale like ``1/eps`` inside
    the coupling, so they are carried over unchanged (the inner loop
    re-normalizes them immediately).
    """
    if not epsilons:
        raise ConfigurationError("need at least one epsilon")
    sol = None
    state = None
    for eps in epsilons:
        prob = problem.with_epsilon(eps)
        r0 = None if sol is None else sol.r.r
        sol = solve_ot(prob, cfg, r0=r0, state0=state)
        duals = sol.duals
        state = OtDualState(np.array(duals["log_phi"]), np.array(duals["log_phi_hat"]),
                            np.array(duals["beta"]), duals["distortion_multiplier"],
                            duals["perception_multiplier"])
    return sol
