"""Safeguarded 1-d root finding for the monotone dual subproblems.

Every multiplier update in the solvers reduces to the root of a continuous,
strictly decreasing function on ``[0, inf)``. Newton steps are taken only
when they stay inside a sign-change bracket; otherwise the bracket is
bisected. A function that is already non-positive at zero means the
corresponding constraint is slack, and the multiplier is exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import DivergenceError, DomainError, NumericError

BRACKET_LIMIT = 1e16


@dataclass(frozen=True)
class MonotoneRootProblem:
    f: Callable[[float], float]
    f_prime: Optional[Callable[[float], float]] = None


def _eval(f, x):
    fx = float(f(x))
    if not math.isfinite(fx):
        raise NumericError(f"non-finite function value {fx} at x={x!r}")
    return fx


def solve_monotone_root(problem, x0: float = 0.0, tol: float = 1e-12,
                        max_iter: int = 200) -> float:
    """Root of a decreasing function on the half-line, or 0 if ``f(0) <= 0``.

    ``problem`` is a :class:`MonotoneRootProblem` or a bare callable (then
    pure bisection is used). The returned ``x`` satisfies ``|f(x)| <= tol``
    unless the bracket collapses to adjacent floats first, in which case the
    endpoint with the smaller residual is returned.
    """
    if callable(problem) and not isinstance(problem, MonotoneRootProblem):
        problem = MonotoneRootProblem(problem)
    if tol <= 0:
        raise DomainError("tol must be positive")
    f, fp = problem.f, problem.f_prime

    f0 = _eval(f, 0.0)
    if f0 <= tol:
        return 0.0

    lo, flo = 0.0, f0
    hi = max(float(x0), 1.0)
    fhi = _eval(f, hi)
    while fhi > 0:
        if abs(fhi) <= tol:
            return hi
        lo, flo = hi, fhi
        if hi >= BRACKET_LIMIT:
            raise DivergenceError("no sign change found up to x = 1e16")
        hi = min(hi * 4.0, BRACKET_LIMIT)
        fhi = _eval(f, hi)
    if -fhi <= tol:
        return hi

    best, fbest = (lo, flo) if abs(flo) < abs(fhi) else (hi, fhi)
    x = float(x0) if lo < x0 < hi else 0.5 * (lo + hi)
    for _ in range(max_iter):
        fx = _eval(f, x)
        if abs(fx) < abs(fbest):
            best, fbest = x, fx
        if abs(fx) <= tol:
            return x
        if fx > 0:
            lo = x
        else:
            hi = x
        if hi - lo <= 4 * np.finfo(float).eps * max(abs(hi), 1e-300):
            break
        x_new = None
        if fp is not None:
            d = float(fp(x))
            if math.isfinite(d) and d < 0:
                x_new = x - fx / d
                if not lo < x_new < hi:
                    x_new = None
        x = 0.5 * (lo + hi) if x_new is None else x_new
    return best


def lambert_log(log_ratio, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Principal solution ``a > 0`` of ``a + log(a) = log_ratio`` (elementwise).

    Equivalent to ``a * exp(a) = exp(log_ratio)``; working with the log of the
    ratio keeps the solve finite when the ratio itself would overflow.
    The residual is relative: ``|a + log a - log_ratio| <= tol``.
    """
    L = np.asarray(log_ratio, dtype=float)
    if not np.all(np.isfinite(L)):
        raise NumericError("non-finite log-ratio in Lambert solve")
    # below e^-700 the root is the ratio itself to working precision
    L = np.maximum(L, -700.0)
    x = np.exp(np.minimum(L, 700.0))
    # W(x) >= x/(1+x) everywhere, and >= ln x - ln ln x once x >= e
    small = L <= 1.0
    lo = np.where(small, x / (1.0 + x), L - np.log(np.maximum(L, 1.0)))
    hi = np.where(L < 700.0, np.log1p(x), L)
    a = lo.copy()
    for _ in range(max_iter):
        u = a + np.log(a) - L
        if np.all(np.abs(u) <= tol):
            return a
        lo = np.where(u < 0, a, lo)
        hi = np.where(u > 0, a, hi)
        step = a * u / (a + 1.0)
        a_new = a - step
        bad = ~((a_new > lo) & (a_new < hi)) & (np.abs(u) > tol)
        a = np.where(bad, 0.5 * (lo + hi), np.where(np.abs(u) <= tol, a, a_new))
    return a


def solve_lambert_like(coef_a, coef_b, tol: float = 1e-12) -> np.ndarray:
    """Positive root of ``a * exp(a) = coef_a / coef_b`` (elementwise).

    This is the stationarity condition of the perception potential in the
    KL case, with ``coef_a = gamma * p_j`` and ``coef_b = S_j``.
    """
    coef_a = np.asarray(coef_a, dtype=float)
    coef_b = np.asarray(coef_b, dtype=float)
    if np.any(coef_a <= 0) or np.any(coef_b <= 0):
        raise DomainError("Lambert coefficients must be positive")
    out = lambert_log(np.log(coef_a) - np.log(coef_b), tol=tol)
    return out if out.ndim else float(out)
