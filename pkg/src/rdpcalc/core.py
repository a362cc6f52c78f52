"""Shared domain types and the functionals of the discrete RDP program.

All quantities are in nats. Arrays handed to the types below are copied and
frozen, so instances can be shared read-only between solver runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class RdpError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(RdpError, ValueError):
    """Inputs outside the mathematical domain of an operation."""


class ConfigurationError(RdpError, ValueError):
    """Invalid solver, preset or discretization parameters."""


class NumericError(RdpError, ArithmeticError):
    """A non-finite intermediate value appeared."""


class DivergenceError(NumericError):
    """A root could not be bracketed."""


class InfeasibleError(RdpError):
    """The distortion/perception budgets cannot be met."""


class InnerLoopError(RdpError):
    """The dual inner loop stopped before its primal residuals were small."""


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise DomainError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DiscreteSource:
    """Source distribution ``p`` over strictly increasing support ``points``.

    Atoms with zero mass are dropped, since the solvers divide by ``p_i``.
    """

    points: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=float)
        p = np.array(self.p, dtype=float)
        if points.shape != p.shape or p.ndim != 1:
            raise DomainError("points and p must be 1-d arrays of equal length")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise DomainError("probabilities must be finite and non-negative")
        keep = p > 0
        points, p = points[keep], p[keep]
        if p.size == 0:
            raise DomainError("source has no mass")
        if abs(p.sum() - 1.0) > 1e-12:
            raise DomainError(f"probabilities sum to {p.sum()!r}, not 1")
        if np.any(np.diff(points) <= 0):
            raise DomainError("support points must be strictly increasing")
        object.__setattr__(self, "points", _frozen(points, 1, "points"))
        object.__setattr__(self, "p", _frozen(p, 1, "p"))

    @classmethod
    def from_probs(cls, p, points=None) -> "DiscreteSource":
        p = np.asarray(p, dtype=float)
        if points is None:
            points = np.arange(p.size, dtype=float)
        return cls(points, p)

    @classmethod
    def bernoulli(cls, prob: float) -> "DiscreteSource":
        if not 0 < prob < 1:
            raise ConfigurationError("Bernoulli parameter must lie in (0, 1)")
        return cls(np.array([0.0, 1.0]), np.array([prob, 1.0 - prob]))

    @property
    def size(self) -> int:
        return self.p.size


@dataclass(frozen=True)
class ReconstructionDist:
    r: np.ndarray

    def __post_init__(self):
        r = _frozen(self.r, 1, "r")
        if np.any(r < 0) or abs(r.sum() - 1.0) > 1e-12:
            raise DomainError("r must lie on the probability simplex")
        object.__setattr__(self, "r", r)


@dataclass(frozen=True)
class ChannelMatrix:
    w: np.ndarray

    def __post_init__(self):
        w = _frozen(self.w, 2, "w")
        if np.any(w < 0):
            raise DomainError("channel entries must be non-negative")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-10:
            raise DomainError("channel rows must sum to 1")
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class DistortionMatrix:
    d: np.ndarray

    def __post_init__(self):
        d = _frozen(self.d, 2, "d")
        if np.any(d < 0):
            raise DomainError("distortions must be non-negative")
        object.__setattr__(self, "d", d)


@dataclass(frozen=True)
class CostMatrix:
    c: np.ndarray

    def __post_init__(self):
        c = _frozen(self.c, 2, "c")
        if np.any(c < 0):
            raise DomainError("transport costs must be non-negative")
        object.__setattr__(self, "c", c)

    @classmethod
    def tv(cls, n: int) -> "CostMatrix":
        """0/1 cost whose optimal transport value is the total variation."""
        return cls(1.0 - np.eye(n))


@dataclass(frozen=True)
class Coupling:
    pi: np.ndarray

    def __post_init__(self):
        pi = _frozen(self.pi, 2, "pi")
        if np.any(pi < 0):
            raise DomainError("coupling entries must be non-negative")
        object.__setattr__(self, "pi", pi)


@dataclass(frozen=True)
class PerceptionMeasure:
    """One of ``"kl"``, ``"tv"`` or ``"wasserstein"`` (the latter with a cost)."""

    kind: str
    cost: Optional[CostMatrix] = None

    def __post_init__(self):
        if self.kind not in ("kl", "tv", "wasserstein"):
            raise ConfigurationError(f"unknown perception measure {self.kind!r}")
        if self.kind == "wasserstein" and self.cost is None:
            raise ConfigurationError("wasserstein perception needs a cost matrix")

    def cost_matrix(self, m: int, n: int) -> CostMatrix:
        if self.kind == "tv":
            if m != n:
                raise DomainError("TV perception needs identical alphabets")
            return CostMatrix.tv(n)
        if self.kind == "wasserstein":
            if self.cost.c.shape != (m, n):
                raise DomainError("cost matrix shape does not match the problem")
            return self.cost
        raise DomainError("KL perception has no transport cost")


@dataclass(frozen=True)
class SolverConfig:
    tol_inner: float = 1e-10
    tol_outer: float = 1e-9
    max_inner: int = 500
    max_outer: int = 2000
    epsilon: float = 0.01
    root_tol: float = 1e-12
    root_max_iter: int = 200
    multiplier_cap: float = 1e12
    tol_marginal: float = 1e-8
    # finish the KL solver with a Newton solve of the joint optimality system
    polish: bool = True

    def __post_init__(self):
        if self.tol_inner <= 0 or self.tol_outer < 0 or self.root_tol <= 0:
            raise ConfigurationError("tolerances must be positive")
        if self.max_inner < 1 or self.max_outer < 1:
            raise ConfigurationError("iteration caps must be at least 1")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")


@dataclass
class ConvergenceTrace:
    """Per outer iteration: objective, distortion, perception, inner sweeps."""

    objective: list = field(default_factory=list)
    distortion: list = field(default_factory=list)
    perception: list = field(default_factory=list)
    inner_iters: list = field(default_factory=list)

    def append(self, objective, distortion, perception, inner_iters):
        self.objective.append(float(objective))
        self.distortion.append(float(distortion))
        self.perception.append(float(perception))
        self.inner_iters.append(int(inner_iters))

    def __len__(self):
        return len(self.objective)

    def descent_violations(self, slack: float = 1e-12) -> list:
        """Indices ``n`` with ``objective[n] > objective[n-1] + slack``."""
        f = np.asarray(self.objective)
        return [int(k) + 1 for k in np.nonzero(np.diff(f) > slack)[0]]

    def to_tsv(self) -> str:
        lines = ["iter\tobjective\tdistortion\tperception"]
        for k, (f, d, q) in enumerate(zip(self.objective, self.distortion, self.perception), 1):
            lines.append(f"{k}\t{f!r}\t{d!r}\t{q!r}")
        return "\n".join(lines) + "\n"


@dataclass
class RdpSolution:
    rate_nats: float
    w: ChannelMatrix
    r: ReconstructionDist
    duals: dict
    achieved_distortion: float
    achieved_perception: float
    trace: ConvergenceTrace
    converged: bool
    pi: Optional[Coupling] = None
    regularized_objective: Optional[float] = None

    @property
    def rate_bits(self) -> float:
        return self.rate_nats / np.log(2.0)

    @property
    def outer_iters(self) -> int:
        return len(self.trace)


def _check_channel(p, w):
    p = np.asarray(p, dtype=float)
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != p.size:
        raise DomainError(f"channel shape {w.shape} does not match source size {p.size}")
    return p, w


def _unwrap(x, attr):
    return getattr(x, attr) if hasattr(x, attr) else x


def mutual_information(p, w, r) -> float:
    """``sum_ij p_i w_ij (log w_ij - log r_j)`` with ``0 log 0 = 0``.

    With ``r`` equal to the output marginal this is ``I(X; Xhat)``; for any
    other ``r`` it is the relaxed objective that the alternating scheme
    descends on.
    """
    p, w = _check_channel(_unwrap(p, "p"), _unwrap(w, "w"))
    r = np.asarray(_unwrap(r, "r"), dtype=float)
    if r.size != w.shape[1]:
        raise DomainError("reconstruction distribution has the wrong length")
    joint = p[:, None] * w
    mass = joint.sum(axis=0)
    if np.any((r <= 0) & (mass > 0)):
        raise DomainError("r vanishes where the channel puts mass")
    pos = joint > 0
    ratio = np.where(pos, w, 1.0) / np.where(pos, r[None, :], 1.0)
    return float(np.sum(np.where(pos, joint * np.log(ratio), 0.0)))


def expected_distortion(p, w, d) -> float:
    p, w = _check_channel(_unwrap(p, "p"), _unwrap(w, "w"))
    d = np.asarray(_unwrap(d, "d"), dtype=float)
    if d.shape != w.shape:
        raise DomainError("distortion matrix shape does not match the channel")
    return float(np.sum(p[:, None] * w * d))


def perception_kl(p, r) -> float:
    """``KL(p || r)`` over a shared alphabet."""
    p = np.asarray(_unwrap(p, "p"), dtype=float)
    r = np.asarray(_unwrap(r, "r"), dtype=float)
    if p.shape != r.shape:
        raise DomainError("KL perception needs M = N")
    pos = p > 0
    if np.any(r[pos] <= 0):
        raise DomainError("r vanishes on the support of p")
    return float(np.sum(p[pos] * (np.log(p[pos]) - np.log(r[pos]))))


def perception_tv(p, r) -> float:
    p = np.asarray(_unwrap(p, "p"), dtype=float)
    r = np.asarray(_unwrap(r, "r"), dtype=float)
    if p.shape != r.shape:
        raise DomainError("TV perception needs M = N")
    return float(0.5 * np.abs(p - r).sum())


def output_marginal(p, w) -> np.ndarray:
    p, w = _check_channel(_unwrap(p, "p"), _unwrap(w, "w"))
    return p @ w


def entropy_term(pi) -> float:
    """``sum pi log pi`` (negative entropy, the regularizer's sign convention)."""
    pi = np.asarray(_unwrap(pi, "pi"), dtype=float)
    pos = pi > 0
    return float(np.sum(pi[pos] * np.log(pi[pos])))
