"""Affine subspaces of R^r in orthogonal normal form, plus normal clustering.

A fiber is Empty or ``v + span(basis)`` with ``v`` orthogonal to the span, so
``v`` is simultaneously the base point and the least-norm element.  Emptiness
is a value, never an exception: an empty fiber is a legitimate (and
certifying) refinement outcome.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

DEFAULT_RANK_TOL = 1e-9


@dataclass(frozen=True)
class LinearSubspace:
    """k-dimensional subspace of R^r given by a column-orthonormal basis."""

    r: int
    basis: np.ndarray  # (r, k), k may be 0

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=np.float64)
        if b.ndim != 2 or b.shape[0] != self.r:
            raise ValueError(f"basis shape {b.shape} incompatible with ambient dim {self.r}")
        object.__setattr__(self, "basis", b)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @staticmethod
    def full(r: int) -> "LinearSubspace":
        return LinearSubspace(r, np.eye(r))

    @staticmethod
    def zero(r: int) -> "LinearSubspace":
        return LinearSubspace(r, np.zeros((r, 0)))

    def project(self, w: np.ndarray) -> np.ndarray:
        """Orthogonal projection onto the subspace."""
        if self.dim == 0:
            return np.zeros(self.r)
        return self.basis @ (self.basis.T @ w)

    def orthonormal_complement(self) -> np.ndarray:
        """(r, r-k) orthonormal basis of the orthogonal complement."""
        k = self.dim
        if k == 0:
            return np.eye(self.r)
        if k == self.r:
            return np.zeros((self.r, 0))
        # Full QR of the basis; trailing columns span the complement.
        q, _ = np.linalg.qr(self.basis, mode="complete")
        return q[:, k:]


@dataclass(frozen=True)
class AffineFiber:
    """Affine subspace in normal form, or Empty.

    NonEmpty invariant: v is orthogonal to the direction space, so v is the
    least-norm point of the fiber.
    """

    r: int
    empty: bool
    v: np.ndarray | None = None
    dir: LinearSubspace | None = None

    @staticmethod
    def make_empty(r: int) -> "AffineFiber":
        return AffineFiber(r, True)

    @staticmethod
    def make(v, dir: LinearSubspace, rank_tol: float = DEFAULT_RANK_TOL) -> "AffineFiber":
        v = np.asarray(v, dtype=np.float64)
        # Re-orthogonalize v against the direction space; constructors may
        # pass any representative point.
        v = v - dir.project(v)
        return AffineFiber(dir.r, False, v, dir)

    @staticmethod
    def full(r: int) -> "AffineFiber":
        return AffineFiber(r, False, np.zeros(r), LinearSubspace.full(r))

    @staticmethod
    def point(v) -> "AffineFiber":
        v = np.asarray(v, dtype=np.float64)
        return AffineFiber(len(v), False, v, LinearSubspace.zero(len(v)))

    @property
    def dim(self) -> int:
        if self.empty:
            return -1
        return self.dir.dim

    @property
    def is_full(self) -> bool:
        return not self.empty and self.dir.dim == self.r

    def contains(self, w, tol: float = 1e-8) -> bool:
        return dist_point_fiber(w, self) <= tol

    def normal_frame(self) -> np.ndarray:
        """(r, r-k) orthonormal basis of directions perpendicular to the fiber."""
        if self.empty:
            raise ValueError("empty fiber has no normal frame")
        return self.dir.orthonormal_complement()

    def constraint_rows(self) -> list[tuple[np.ndarray, float]]:
        """Equations cutting out the fiber: rows (lambda, rhs) with lambda.w = rhs."""
        if self.empty:
            raise ValueError("empty fiber has no constraint rows")
        frame = self.normal_frame()
        return [(frame[:, j].copy(), float(frame[:, j] @ self.v)) for j in range(frame.shape[1])]


class ConstraintSystem:
    """A stack of affine equations lambda_i . w = rhs_i (possibly redundant)."""

    def __init__(self, r: int, rows: Sequence[tuple[Sequence[float], float]] = ()):
        self.r = r
        self.rows: list[tuple[np.ndarray, float]] = []
        for lam, rhs in rows:
            self.add(lam, rhs)

    def add(self, lam, rhs: float):
        lam = np.asarray(lam, dtype=np.float64)
        if lam.shape != (self.r,):
            raise ValueError(f"row has dimension {lam.shape}, ambient is {self.r}")
        self.rows.append((lam, float(rhs)))

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.rows:
            return np.zeros((0, self.r)), np.zeros(0)
        A = np.stack([lam for lam, _ in self.rows])
        b = np.array([rhs for _, rhs in self.rows])
        return A, b


def solve_constraints(cs: ConstraintSystem, rank_tol: float = DEFAULT_RANK_TOL,
                      noise: float = 0.0) -> AffineFiber:
    """Solution set of the system in normal form.

    The NonEmpty ``v`` is the least-norm solution.  ``noise`` raises the
    singular-value cutoff and the consistency threshold: rows estimated from
    probe limits carry that much uncertainty, and directions resolved below
    the noise floor would be artifacts.
    """
    A, b = cs.matrices()
    r = cs.r
    if A.shape[0] == 0:
        return AffineFiber.full(r)
    U, s, Vt = np.linalg.svd(A, full_matrices=True)
    smax = s[0] if len(s) else 0.0
    cutoff = max(rank_tol * smax, 3.0 * noise)
    rank = int(np.sum(s > cutoff))
    if rank == 0:
        scale = max(1.0, float(np.linalg.norm(b)))
        tol = max(rank_tol * scale, 10.0 * noise * scale)
        if np.linalg.norm(b) <= tol:
            return AffineFiber.full(r)
        return AffineFiber.make_empty(r)
    v = Vt[:rank].T @ ((U[:, :rank].T @ b) / s[:rank])
    residual = float(np.linalg.norm(A @ v - b))
    scale = max(1.0, float(np.linalg.norm(b)), smax * (1.0 + float(np.linalg.norm(v))))
    tol = max(rank_tol * scale, 10.0 * noise * (1.0 + float(np.linalg.norm(v)) + float(np.linalg.norm(b))))
    if residual > tol:
        return AffineFiber.make_empty(r)
    dir_basis = Vt[rank:].T if rank < r else np.zeros((r, 0))
    return AffineFiber.make(v, LinearSubspace(r, dir_basis))


def dist_point_fiber(lam, H: AffineFiber) -> float:
    """Euclidean distance from a point to the fiber; +inf for Empty."""
    if H.empty:
        return np.inf
    lam = np.asarray(lam, dtype=np.float64)
    d = lam - H.v
    return float(np.linalg.norm(d - H.dir.project(d)))


def project_point_fiber(lam, H: AffineFiber) -> np.ndarray:
    """Closest point of the fiber."""
    if H.empty:
        raise ValueError("cannot project onto an empty fiber")
    lam = np.asarray(lam, dtype=np.float64)
    d = lam - H.v
    return H.v + H.dir.project(d)


def least_norm_point(H: AffineFiber) -> np.ndarray:
    if H.empty:
        raise ValueError("empty fiber has no least-norm point")
    return H.v.copy()


def intersect(H1: AffineFiber, H2: AffineFiber,
              rank_tol: float = DEFAULT_RANK_TOL) -> AffineFiber:
    """Exact set intersection within tolerance; Empty propagates."""
    if H1.r != H2.r:
        raise ValueError("ambient dimensions differ")
    if H1.empty or H2.empty:
        return AffineFiber.make_empty(H1.r)
    cs = ConstraintSystem(H1.r)
    for lam, rhs in H1.constraint_rows():
        cs.add(lam, rhs)
    for lam, rhs in H2.constraint_rows():
        cs.add(lam, rhs)
    return solve_constraints(cs, rank_tol)


def fiber_distance(H1: AffineFiber, H2: AffineFiber) -> float:
    """Hausdorff-style gap used for stabilization checks.

    Zero iff the fibers agree (same dim, same affine hull within fp);
    infinite when exactly one is empty or dimensions differ.
    """
    if H1.empty and H2.empty:
        return 0.0
    if H1.empty or H2.empty:
        return np.inf
    if H1.dim != H2.dim:
        return np.inf
    gap = max(dist_point_fiber(H1.v, H2), dist_point_fiber(H2.v, H1))
    if H1.dim > 0:
        p1 = H1.dir.basis @ H1.dir.basis.T
        p2 = H2.dir.basis @ H2.dir.basis.T
        gap = max(gap, float(np.linalg.norm(p1 - p2, ord=2)))
    return gap


# ---------------------------------------------------------------------------
# Normal-direction tracking across scales


def sign_normalize(u: np.ndarray) -> np.ndarray:
    """Flip so the first significantly-nonzero coordinate is positive."""
    u = np.asarray(u, dtype=np.float64)
    thresh = 1e-7 * float(np.max(np.abs(u)) or 1.0)
    for c in u:
        if abs(c) > thresh:
            return u if c > 0 else -u
    return u


def _sign_dist(u, w) -> tuple[float, int]:
    """Distance up to sign; returns (distance, sign achieving it).

    Plain float math: ambient dimensions are tiny and this sits in the
    innermost probing loop.
    """
    dp = 0.0
    dm = 0.0
    for a, b in zip(u, w):
        dp += (a - b) * (a - b)
        dm += (a + b) * (a + b)
    return (math.sqrt(dp), 1) if dp <= dm else (math.sqrt(dm), -1)


@dataclass
class NormalChain:
    """One tracked normal direction: entries (scale index, unit vector tuple)."""

    entries: list[tuple[int, tuple[float, ...]]] = field(default_factory=list)

    @property
    def last_scale(self) -> int:
        return self.entries[-1][0]

    @property
    def last_vec(self) -> tuple[float, ...]:
        return self.entries[-1][1]

    def tail(self, window: int) -> list[tuple[int, tuple[float, ...]]]:
        return self.entries[-window:]


def chain_frames(frames: Sequence[Sequence], match_tol: float = 0.35) -> list[NormalChain]:
    """Greedy sign-invariant matching of per-scale normal frames into chains.

    Chains stay open across gaps (a direction may reappear after skipping
    scales, e.g. when an intermediate probe hits a full fiber).  Each chain
    accepts at most one vector per scale; leftovers start new chains.
    """
    chains: list[NormalChain] = []
    for k, frame in enumerate(frames):
        if not len(frame):
            continue
        vecs = [vec if type(vec) is tuple else tuple(float(c) for c in vec)
                for vec in frame]
        if not chains:
            for vec in vecs:
                chains.append(NormalChain([(k, vec)]))
            continue
        candidates = []
        for vi, vec in enumerate(vecs):
            for ci, chain in enumerate(chains):
                d, sign = _sign_dist(vec, chain.last_vec)
                if d <= match_tol:
                    candidates.append((d, ci, vi, sign))
        candidates.sort(key=lambda t: (t[0], t[1], t[2]))
        used_chains: set[int] = set()
        used_vecs: set[int] = set()
        for d, ci, vi, sign in candidates:
            if ci in used_chains or vi in used_vecs:
                continue
            vec = vecs[vi] if sign > 0 else tuple(-c for c in vecs[vi])
            chains[ci].entries.append((k, vec))
            used_chains.add(ci)
            used_vecs.add(vi)
        for vi, vec in enumerate(vecs):
            if vi not in used_vecs:
                chains.append(NormalChain([(k, vec)]))
    return chains


def tail_spread(vectors: Sequence[Sequence[float]]) -> float:
    """Max pairwise Euclidean distance (plain float math, tiny inputs)."""
    worst = 0.0
    m = len(vectors)
    for i in range(m):
        vi = vectors[i]
        for j in range(i + 1, m):
            vj = vectors[j]
            acc = 0.0
            for a, b in zip(vi, vj):
                acc += (a - b) * (a - b)
            if acc > worst:
                worst = acc
    return math.sqrt(worst)


class ClusterResult(NamedTuple):
    vectors: list[np.ndarray]
    dropped: int


def cluster_normals(tracks: Sequence[Sequence[np.ndarray]], limit_tol: float = 1e-6,
                    window: int = 4, match_tol: float = 0.35) -> ClusterResult:
    """Representatives of normal chains that persist and converge across scales.

    ``tracks[k]`` holds the (sign-normalized) unit normals observed at scale
    level k, coarsest first.  A chain counts as converged when it still has
    entries within the final ``window`` scale levels and its last ``window``
    entries are mutually within ``limit_tol``.  Chains that die out early or
    keep moving are dropped and counted.
    """
    nscales = len(tracks)
    chains = chain_frames(tracks, match_tol=match_tol)
    out: list[np.ndarray] = []
    dropped = 0
    for chain in chains:
        if len(chain.entries) < 2 or chain.last_scale < nscales - window:
            dropped += 1
            continue
        tail = [vec for _, vec in chain.tail(window)]
        if tail_spread(tail) > limit_tol:
            dropped += 1
            continue
        rep = np.mean(np.asarray(tail, dtype=np.float64), axis=0)
        norm = np.linalg.norm(rep)
        if norm > 0:
            rep = rep / norm
        out.append(sign_normalize(rep))
    return ClusterResult(out, dropped)
