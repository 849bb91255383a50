"""Generalization bounds, labeling-cost trade-off and the optimal DPI fraction.

All big-O constants are 1; ``K`` weights the bound against the DPI cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class BoundParams:
    n: int
    lam: float
    alpha: float
    cap_fl: float
    cap_rp: float
    eps_fl: float = 0.0
    eps_rp: float = 0.0
    eps_pk: float = 0.0
    K: float = 1.0
    c_dpi: float = 1e-3

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must lie in (0, 1], got {self.lam}")
        if not 0.5 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0.5, 1], got {self.alpha}")
        if self.cap_fl <= 0 or self.cap_rp <= 0:
            raise ValueError("capacity measures must be positive")
        if min(self.eps_fl, self.eps_rp, self.eps_pk) < 0:
            raise ValueError("approximation errors must be >= 0")
        if self.K <= 0 or self.c_dpi <= 0:
            raise ValueError("K and c_dpi must be positive")

    def with_lambda(self, lam: float) -> "BoundParams":
        return replace(self, lam=lam)


def teacher_bound(p: BoundParams) -> float:
    """Flow-based classifier trained on n*lambda flows, fast 1/(n*lambda) rate."""
    return p.cap_fl / (p.n * p.lam) + p.eps_fl


def student_term(p: BoundParams) -> float:
    return p.cap_rp / p.n ** p.alpha + p.eps_rp


def teacher_term(p: BoundParams) -> float:
    return p.cap_fl / (p.n * p.lam) ** p.alpha + p.eps_fl


def _estimation(p: BoundParams, lam: float) -> float:
    la = lam ** p.alpha
    return (la * p.cap_rp + p.cap_fl) / (p.n ** p.alpha * la)


def fphtc_bound(p: BoundParams) -> float:
    return _estimation(p, p.lam) + p.eps_rp + p.eps_fl


def packet_bound(p: BoundParams) -> float:
    """Regular packet classifier on n*lambda true-labeled flows, slow square-root rate."""
    return p.cap_rp / math.sqrt(p.n * p.lam) + p.eps_pk


def total_cost(p: BoundParams, lam: float | None = None) -> float:
    lam = p.lam if lam is None else lam
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"lambda must lie in (0, 1], got {lam}")
    return p.K * _estimation(p, lam) + p.eps_rp + p.eps_fl + p.n * lam * p.c_dpi


def total_cost_grid(p: BoundParams, lams: np.ndarray) -> np.ndarray:
    la = np.asarray(lams, dtype=np.float64) ** p.alpha
    est = (la * p.cap_rp + p.cap_fl) / (p.n ** p.alpha * la)
    return p.K * est + p.eps_rp + p.eps_fl + p.n * np.asarray(lams) * p.c_dpi


@dataclass(frozen=True)
class OptimalLambda:
    value: float
    unclamped: float
    clamped: bool


def optimal_lambda(p: BoundParams) -> OptimalLambda:
    """Stationary point of total_cost in lambda, clamped to (0, 1]."""
    radicand = p.alpha * p.K * p.cap_fl / (p.n ** (1.0 + p.alpha) * p.c_dpi)
    raw = radicand ** (1.0 / (1.0 + p.alpha))
    if raw > 1.0:
        return OptimalLambda(1.0, raw, True)
    if raw <= 0.0:
        # underflow for extreme parameters; smallest positive double keeps (0, 1]
        return OptimalLambda(math.ulp(0.0), raw, True)
    return OptimalLambda(raw, raw, False)


def grid_argmin(p: BoundParams, points: int = 10_000) -> float:
    lams = np.arange(1, points + 1) / points
    return float(lams[int(np.argmin(total_cost_grid(p, lams)))])


@dataclass(frozen=True)
class Outperformance:
    fphtc_better: bool
    lhs: float
    rhs: float


def outperformance_check(p: BoundParams) -> Outperformance:
    lhs = fphtc_bound(p)
    rhs = packet_bound(p)
    return Outperformance(lhs <= rhs, lhs, rhs)


def sweep(p: BoundParams, points: int = 100) -> list[dict]:
    """Rows of (lambda, fphtc_bound, packet_bound, teacher_bound, total_cost) on a uniform grid."""
    rows = []
    for i in range(1, points + 1):
        q = p.with_lambda(i / points)
        rows.append({
            "lambda": q.lam,
            "fphtc_bound": fphtc_bound(q),
            "packet_bound": packet_bound(q),
            "teacher_bound": teacher_bound(q),
            "total_cost": total_cost(q),
        })
    return rows
