"""Numerical limit detection for geometric probing sequences.

Every refinement step downstream reduces to scalar or vector sequences
sampled along shrinking scales; this module decides Converged / Diverged /
Undetermined from the tail of such a sequence.  Divergence is deliberately
strict (monotone growth through the whole tail window past 1/limit_tol)
because it feeds Unsolvable certificates, while anything murky stays
Undetermined and merely taints the verdict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

Value = Union[float, np.ndarray]


@dataclass(frozen=True)
class LimitConfig:
    t0: float = 0.25
    beta: float = 0.5
    depth: int = 24
    limit_tol: float = 1e-6
    window: int = 4

    def __post_init__(self):
        if not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must be in (0,1), got {self.beta}")
        if not (self.depth >= self.window >= 2):
            raise ValueError(f"need depth >= window >= 2, got depth={self.depth} window={self.window}")
        if self.t0 <= 0:
            raise ValueError("t0 must be positive")

    def scales(self) -> np.ndarray:
        """Geometric probe scales t0 * beta^nu for nu = 0..depth."""
        return self.t0 * self.beta ** np.arange(self.depth + 1)


@dataclass(frozen=True)
class LimitResult:
    kind: str  # "converged" | "diverged" | "undetermined"
    value: Value | None = None
    achieved_tol: float = np.inf
    trend: float | None = None
    tail: tuple = ()
    late: bool = False  # converged only at the final window

    @property
    def converged(self) -> bool:
        return self.kind == "converged"

    @property
    def diverged(self) -> bool:
        return self.kind == "diverged"

    @property
    def undetermined(self) -> bool:
        return self.kind == "undetermined"


def _as_array(v) -> np.ndarray:
    return np.atleast_1d(np.asarray(v, dtype=np.float64))


def _pairwise_spread(tail: list[np.ndarray]) -> float:
    worst = 0.0
    for i in range(len(tail)):
        for j in range(i + 1, len(tail)):
            worst = max(worst, float(np.linalg.norm(tail[i] - tail[j])))
    return worst


def estimate_limit(seq: Union[Sequence, Callable[[int], Value]], cfg: LimitConfig) -> LimitResult:
    """Classify the limit of a scalar/vector sequence.

    ``seq`` is either an indexable/iterable of values for nu = 0..depth or a
    callable nu -> value.  Non-finite entries count as divergence evidence.
    """
    if callable(seq):
        values = [seq(nu) for nu in range(cfg.depth + 1)]
    else:
        values = list(seq)
    if not values:
        return LimitResult("undetermined", tail=())
    if all(isinstance(v, (int, float)) for v in values):
        return _estimate_limit_scalar([float(v) for v in values], cfg)
    arrs = [_as_array(v) for v in values]

    window = min(cfg.window, len(arrs))
    tail = arrs[-window:]
    tail_tuple = tuple(tuple(a.tolist()) for a in tail)

    mags = [float(np.linalg.norm(a)) for a in tail]
    if any(not np.isfinite(a).all() for a in tail):
        return LimitResult("diverged", trend=np.inf, tail=tail_tuple)

    if window < 2:
        return LimitResult("undetermined", tail=tail_tuple)

    spread = _pairwise_spread(tail)
    if spread <= cfg.limit_tol:
        mean = np.mean(np.stack(tail), axis=0)
        value = float(mean[0]) if mean.size == 1 else mean
        late = False
        if len(arrs) > window:
            prev = arrs[-window - 1:-1]
            late = _pairwise_spread(prev) > cfg.limit_tol
        return LimitResult("converged", value=value, achieved_tol=spread, late=late,
                           tail=tail_tuple)

    monotone = all(mags[i + 1] > mags[i] for i in range(len(mags) - 1))
    if monotone and mags[-1] > 1.0 / cfg.limit_tol:
        return LimitResult("diverged", trend=mags[-1], tail=tail_tuple)

    return LimitResult("undetermined", tail=tail_tuple)


def _estimate_limit_scalar(values: list[float], cfg: LimitConfig) -> LimitResult:
    """Scalar fast path: same contract as the general case."""
    window = min(cfg.window, len(values))
    tail = values[-window:]
    tail_tuple = tuple(tail)
    if any(not math.isfinite(a) for a in tail):
        return LimitResult("diverged", trend=np.inf, tail=tail_tuple)
    if window < 2:
        return LimitResult("undetermined", tail=tail_tuple)
    spread = max(tail) - min(tail)
    if spread <= cfg.limit_tol:
        late = False
        if len(values) > window:
            prev = values[-window - 1:-1]
            late = (max(prev) - min(prev)) > cfg.limit_tol
        return LimitResult("converged", value=sum(tail) / window,
                           achieved_tol=spread, late=late, tail=tail_tuple)
    mags = [abs(a) for a in tail]
    if all(mags[i + 1] > mags[i] for i in range(len(mags) - 1)) and mags[-1] > 1.0 / cfg.limit_tol:
        return LimitResult("diverged", trend=mags[-1], tail=tail_tuple)
    return LimitResult("undetermined", tail=tail_tuple)
