"""Dyadic cubes, Whitney decomposition of box \\ E1, and its partition of unity.

A dyadic cube enters the cover when its triple dilate clears the closed set
E1 by at least its own side length while its parent's does not.  Cubes that
would subdivide below ``min_side`` are kept as flagged truncated leaves: the
set E1 is only known as a finite sample, so geometry below that resolution
does not exist anyway.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class DyadicCube:
    """Axis-aligned dyadic sub-box of the root box.

    ``side`` is the longest edge (all edges equal for a cubic root).  The
    dilate has the same center and triple the half-widths.
    """

    level: int
    index: tuple[int, ...]
    lo: np.ndarray
    hi: np.ndarray
    truncated: bool = False

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    @property
    def side(self) -> float:
        return float(np.max(self.hi - self.lo))

    def dilate_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.center
        h = (self.hi - self.lo) / 2.0
        return c - 3.0 * h, c + 3.0 * h

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))


def _rect_dist(lo: np.ndarray, hi: np.ndarray, pts: np.ndarray) -> float:
    """Euclidean distance from a point set to an axis-aligned rectangle."""
    d = np.maximum(np.maximum(lo[None, :] - pts, pts - hi[None, :]), 0.0)
    return float(np.min(np.sqrt(np.sum(d * d, axis=1))))


@dataclass
class WhitneyCover:
    cubes: list[DyadicCube]
    e1: np.ndarray  # (m, n) sample of the closed set
    min_side: float
    box_lo: np.ndarray
    box_hi: np.ndarray

    def e1_distance(self, x) -> float:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return float(np.min(np.linalg.norm(self.e1[None, :, :] - x[:, None, :], axis=2)))

    def regular_cubes(self) -> list[DyadicCube]:
        return [q for q in self.cubes if not q.truncated]

    def cubes_at(self, x) -> list[int]:
        """Indices of cubes whose dilate contains x."""
        x = np.asarray(x, dtype=np.float64)
        out = []
        for i, q in enumerate(self.cubes):
            dlo, dhi = q.dilate_bounds()
            if np.all(x >= dlo) and np.all(x <= dhi):
                out.append(i)
        return out


def whitney_decompose(box: tuple[Sequence[float], Sequence[float]],
                      e1_samples: Sequence[Sequence[float]],
                      min_side: float) -> WhitneyCover:
    """All dyadic cubes Q with dist(Q*, E1) >= side(Q) whose parent fails the
    same bound, pruned at min_side (kept and flagged truncated).

    ``e1_samples`` is the finite sample realizing the distance oracle; it
    must be nonempty and inside the box.
    """
    lo = np.asarray(box[0], dtype=np.float64)
    hi = np.asarray(box[1], dtype=np.float64)
    E1 = np.atleast_2d(np.asarray(e1_samples, dtype=np.float64))
    if E1.shape[0] == 0:
        raise ValueError("E1 sample is empty")
    if E1.shape[1] != len(lo):
        raise ValueError("E1 sample dimension does not match the box")

    cubes: list[DyadicCube] = []

    def visit(level: int, index: tuple[int, ...], clo: np.ndarray, chi: np.ndarray):
        # Invariant: the parent (or root) failed the clearance test.
        c = (clo + chi) / 2.0
        h = (chi - clo) / 2.0
        side = float(np.max(chi - clo))
        d = _rect_dist(c - 3.0 * h, c + 3.0 * h, E1)
        if level > 0 and d >= side:
            cubes.append(DyadicCube(level, index, clo.copy(), chi.copy()))
            return
        if side <= min_side * (1 + 1e-12):
            if level > 0:
                cubes.append(DyadicCube(level, index, clo.copy(), chi.copy(), truncated=True))
            return
        n = len(clo)
        mid = c
        for mask in range(2 ** n):
            nlo = clo.copy()
            nhi = chi.copy()
            nidx = []
            for i in range(n):
                if (mask >> i) & 1:
                    nlo[i] = mid[i]
                    nidx.append(2 * index[i] + 1 if level > 0 else 1)
                else:
                    nhi[i] = mid[i]
                    nidx.append(2 * index[i] if level > 0 else 0)
            visit(level + 1, tuple(nidx), nlo, nhi)

    root_d = _rect_dist(*(lambda c, h: (c - 3 * h, c + 3 * h))((lo + hi) / 2, (hi - lo) / 2), E1)
    root_side = float(np.max(hi - lo))
    if root_d >= root_side:
        # E1 outside the tripled root: nothing to decompose against.
        raise ValueError("E1 sample does not meet the dilated box")
    visit(0, tuple(0 for _ in lo), lo.copy(), hi.copy())
    return WhitneyCover(cubes, E1, min_side, lo, hi)


def _hat(u: np.ndarray) -> float:
    """Tensor bump: 1 on the cube, linear falloff to 0 on the dilate boundary."""
    m = float(np.max(np.abs(u)))
    if m <= 0.5:
        return 1.0
    if m >= 1.5:
        return 0.0
    return 1.5 - m


def pou_eval(cover: WhitneyCover, x, e1_tol: float = 0.0) -> list[tuple[int, float]]:
    """Sparse partition-of-unity weights at x: list of (cube index, weight).

    Weights are nonnegative, vanish outside each cube's dilate, and sum to 1
    off E1; on E1 the list is empty (the partition is defined to vanish
    there).
    """
    x = np.asarray(x, dtype=np.float64)
    if cover.e1_distance(x) <= e1_tol:
        return []
    raw: list[tuple[int, float]] = []
    for i, q in enumerate(cover.cubes):
        delta = q.hi - q.lo
        u = (x - q.center) / delta
        w = _hat(u)
        if w > 0.0:
            raw.append((i, w))
    total = sum(w for _, w in raw)
    if total <= 0.0:
        return []
    return [(i, w / total) for i, w in raw]


def cover_geometry_report(cover: WhitneyCover, sample_points: np.ndarray | None = None) -> dict:
    """Measured Whitney constants: clearance ratio per cube and overlap counts."""
    ratios = []
    for q in cover.regular_cubes():
        dlo, dhi = q.dilate_bounds()
        d = _rect_dist(dlo, dhi, cover.e1)
        ratios.append(d / q.side)
    report = {
        "cube_count": len(cover.cubes),
        "truncated_count": sum(1 for q in cover.cubes if q.truncated),
        "min_clearance_ratio": min(ratios) if ratios else None,
        "max_clearance_ratio": max(ratios) if ratios else None,
    }
    if sample_points is not None:
        overlaps = []
        for x in sample_points:
            overlaps.append(len(cover.cubes_at(x)))
        report["max_overlap"] = max(overlaps) if overlaps else 0
    return report
