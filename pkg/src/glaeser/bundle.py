"""Affine bundles over a sampled box and their iterated Glaeser refinement.

The refinement of a fiber H_x keeps exactly the points that stay close to all
nearby fibers.  Numerically we probe along a fixed set of rays at geometric
scales, track the normal directions of the probed fibers across scales
(chains), estimate the scalar limit ``lambda . v`` along each converged
chain, and intersect H_x with the resulting equations.  A diverged scalar
limit or an inconsistent system certifies an empty refined fiber.

Refined bundles exist as grid samples.  Probing them at arbitrary points is
resolved lazily: near samples that changed in the last refinement the fiber
is recomputed on demand from the previous level (levels 1 and 2 therefore
keep full probe-scale resolution); three levels deep and beyond, probes snap
to the nearest stored sample and consistency checks widen by the locally
observed fiber variation, since scales below the grid cell no longer exist.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence, Union

import numpy as np

from .affine import (
    DEFAULT_RANK_TOL,
    AffineFiber,
    LinearSubspace,
    NormalChain,
    chain_frames,
    fiber_distance,
    dist_point_fiber,
    tail_spread,
)
from .algebra import EvalDomainError, Expr, Poly, eval_expr, eval_expr_many, eval_poly_many
from .limits import LimitConfig, LimitResult, estimate_limit

# Probe rows below this in-fiber magnitude are numerically indistinct from
# zero (unit normals carry ~1e-15 arithmetic noise).
_SIGNIFICANCE_FLOOR = 1e-13


# ---------------------------------------------------------------------------
# Geometry of the domain


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if np.any(hi <= lo):
            raise ValueError("box is degenerate")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def n(self) -> int:
        return len(self.lo)

    def half_widths(self) -> np.ndarray:
        return (self.hi - self.lo) / 2.0

    def contains(self, y, tol: float = 1e-12) -> bool:
        y = np.asarray(y)
        return bool(np.all(y >= self.lo - tol) and np.all(y <= self.hi + tol))

    def exit_scale(self, x: np.ndarray, d: np.ndarray) -> float:
        """Largest t >= 0 with x + t d still inside the box."""
        t = np.inf
        for i in range(self.n):
            if d[i] > 0:
                t = min(t, (self.hi[i] - x[i]) / d[i])
            elif d[i] < 0:
                t = min(t, (self.lo[i] - x[i]) / d[i])
        return max(t, 0.0)


@dataclass(frozen=True)
class Grid:
    """Dyadic lattice of cell corners: (2^depth + 1) points per axis."""

    box: Box
    depth: int

    @property
    def n(self) -> int:
        return self.box.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (2 ** self.depth + 1,) * self.box.n

    @property
    def cell(self) -> np.ndarray:
        return (self.box.hi - self.box.lo) / (2 ** self.depth)

    @property
    def npoints(self) -> int:
        return int(np.prod(self.shape))

    @property
    def points(self) -> np.ndarray:
        cached = _grid_points_cache.get((id(self)))
        if cached is not None and cached[0] is self:
            return cached[1]
        axes = [np.linspace(self.box.lo[i], self.box.hi[i], 2 ** self.depth + 1)
                for i in range(self.n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        _grid_points_cache[id(self)] = (self, pts)
        return pts

    def nearest_index(self, y) -> int:
        y = np.asarray(y, dtype=np.float64)
        steps = np.rint((y - self.box.lo) / self.cell).astype(np.int64)
        steps = np.clip(steps, 0, 2 ** self.depth)
        flat = 0
        m = 2 ** self.depth + 1
        for i in range(self.n):
            flat = flat * m + steps[i]
        return int(flat)

    def index_to_point(self, idx: int) -> np.ndarray:
        return self.points[idx]


_grid_points_cache: dict[int, tuple[Grid, np.ndarray]] = {}


# ---------------------------------------------------------------------------
# Probe configuration


def build_directions(n: int, extra: Optional[Sequence[Sequence[float]]] = None) -> np.ndarray:
    """Default probe directions: +-axes and all diagonal sign patterns for
    n <= 4; axes plus 50 deterministic low-discrepancy directions above."""
    dirs: list[np.ndarray] = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        dirs.append(e.copy())
        dirs.append(-e)
    if n <= 4:
        for mask in range(2 ** n):
            d = np.array([1.0 if (mask >> i) & 1 == 0 else -1.0 for i in range(n)])
            dirs.append(d / math.sqrt(n))
    else:
        from scipy.stats import qmc
        from scipy.special import ndtri
        sampler = qmc.Sobol(d=n, scramble=False)
        raw = sampler.random(64)[8:58]
        gauss = ndtri(np.clip(raw, 1e-12, 1 - 1e-12))
        for row in gauss:
            norm = np.linalg.norm(row)
            if norm > 0:
                dirs.append(row / norm)
    if extra is not None:
        for row in extra:
            v = np.asarray(row, dtype=np.float64)
            norm = np.linalg.norm(v)
            if abs(norm - 1.0) > 1e-12:
                if norm == 0:
                    raise ValueError("zero probe direction")
                v = v / norm
            dirs.append(v)
    out: list[np.ndarray] = []
    for d in dirs:
        if not any(np.linalg.norm(d - o) <= 1e-12 for o in out):
            out.append(d)
    return np.stack(out)


@dataclass(frozen=True)
class ProbeConfig:
    directions: np.ndarray
    limit: LimitConfig
    match_tol: float = 0.35

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] == 0:
            raise ValueError("directions must be a nonempty (D, n) array")
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError("probe directions must be unit length")
        object.__setattr__(self, "directions", d)

    @staticmethod
    def default_for(box: Box, depth: int | None = None, limit_tol: float | None = None,
                    beta: float | None = None, t0: float | None = None,
                    extra_directions=None) -> "ProbeConfig":
        if t0 is None:
            t0 = float(np.min(box.half_widths())) / 4.0
        cfg = LimitConfig(
            t0=t0,
            beta=0.5 if beta is None else beta,
            depth=24 if depth is None else depth,
            limit_tol=1e-6 if limit_tol is None else limit_tol,
        )
        return ProbeConfig(build_directions(box.n, extra_directions), cfg)


# ---------------------------------------------------------------------------
# Fiber oracles


@dataclass
class ProbeSample:
    """Fiber data at one probe point, reduced to what refinement needs."""

    kind: str  # "affine" | "full" | "empty" | "undefined"
    v: np.ndarray | None = None
    normals: np.ndarray | None = None  # (k, r) row normals, orthonormal
    tainted: bool = False
    snapped: bool = False


class FiberOracle(Protocol):
    box: Box
    r: int

    def fiber(self, y: np.ndarray) -> AffineFiber: ...

    def probe(self, y: np.ndarray) -> ProbeSample: ...

    def probe_many(self, Y: np.ndarray) -> list[ProbeSample]: ...


def _sample_from_fiber(fiber: AffineFiber, tainted: bool = False,
                       snapped: bool = False) -> ProbeSample:
    if fiber.empty:
        return ProbeSample("empty", tainted=tainted, snapped=snapped)
    if fiber.is_full:
        return ProbeSample("full", v=fiber.v, normals=np.zeros((0, fiber.r)),
                           tainted=tainted, snapped=snapped)
    return ProbeSample("affine", v=fiber.v, normals=fiber.normal_frame().T,
                       tainted=tainted, snapped=snapped)


class OracleBase:
    """Mixin giving probe()/probe_many()/probe_ray() from fiber()."""

    def probe(self, y: np.ndarray) -> ProbeSample:
        try:
            return _sample_from_fiber(self.fiber(y))
        except EvalDomainError:
            return ProbeSample("undefined")

    def probe_many(self, Y: np.ndarray) -> list[ProbeSample]:
        return [self.probe(y) for y in np.asarray(Y, dtype=np.float64)]

    def probe_ray(self, Y: np.ndarray) -> list[tuple]:
        """Lightweight row view for the probing loop: per point a tuple
        (kind, v tuple | None, normals as list of tuples, tainted, snapped)."""
        out = []
        for s in self.probe_many(Y):
            v = None if s.v is None else tuple(s.v.tolist())
            normals = [] if s.normals is None else [tuple(row) for row in s.normals.tolist()]
            out.append((s.kind, v, normals, s.tainted, s.snapped))
        return out


@dataclass
class EquationBundle(OracleBase):
    """Closed-form bundle of the equation sum_i w_i f_i(x) = phi(x)."""

    f: list[Poly]
    phi: Expr
    box: Box

    def __post_init__(self):
        if not self.f:
            raise ValueError("need at least one polynomial")
        nv = self.f[0].nvars
        if any(p.nvars != nv for p in self.f):
            raise ValueError("all polynomials must share nvars")
        if nv != self.box.n:
            raise ValueError("box dimension does not match polynomial arity")

    @property
    def r(self) -> int:
        return len(self.f)

    @property
    def n(self) -> int:
        return self.f[0].nvars

    def f_values(self, Y: np.ndarray) -> np.ndarray:
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        return np.stack([eval_poly_many(p, Y) for p in self.f], axis=1)

    def fiber(self, y) -> AffineFiber:
        return equation_fiber(self, y)

    def probe_many(self, Y: np.ndarray) -> list[ProbeSample]:
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        F = self.f_values(Y)
        phi_vals, defined = eval_expr_many(self.phi, Y)
        s2 = np.sum(F * F, axis=1)
        out: list[ProbeSample] = []
        for i in range(Y.shape[0]):
            if not defined[i]:
                out.append(ProbeSample("undefined"))
            elif s2[i] == 0.0:
                if phi_vals[i] == 0.0:
                    out.append(ProbeSample("full", v=np.zeros(self.r),
                                           normals=np.zeros((0, self.r))))
                else:
                    out.append(ProbeSample("empty"))
            else:
                fi = F[i]
                v = (phi_vals[i] / s2[i]) * fi
                normal = fi / math.sqrt(s2[i])
                out.append(ProbeSample("affine", v=v, normals=normal[None, :]))
        return out

    def probe_ray(self, Y: np.ndarray) -> list[tuple]:
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        F = self.f_values(Y)
        phi_vals, defined = eval_expr_many(self.phi, Y)
        s2 = np.sum(F * F, axis=1)
        nonzero = s2 > 0.0
        safe = np.where(nonzero, s2, 1.0)
        V = (np.where(nonzero, phi_vals, 0.0) / safe)[:, None] * F
        N = F / np.sqrt(safe)[:, None]
        Vl = V.tolist()
        Nl = N.tolist()
        out: list[tuple] = []
        for i in range(Y.shape[0]):
            if not defined[i]:
                out.append(("undefined", None, (), False, False))
            elif not nonzero[i]:
                if phi_vals[i] == 0.0:
                    out.append(("full", None, (), False, False))
                else:
                    out.append(("empty", None, (), False, False))
            else:
                out.append(("affine", tuple(Vl[i]), (tuple(Nl[i]),), False, False))
        return out


def equation_fiber(b: EquationBundle, x) -> AffineFiber:
    """Solution set of sum_i w_i f_i(x) = phi(x) at one point.

    Full when all f_i vanish together with phi; Empty when they vanish but
    phi does not; otherwise the hyperplane with least-norm point
    phi(x) f(x) / |f(x)|^2.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (b.n,):
        raise ValueError(f"point has dimension {x.shape}, expected ({b.n},)")
    fvals = b.f_values(x[None, :])[0]
    phival = eval_expr(b.phi, x)  # raises EvalDomainError if undefined
    s2 = float(fvals @ fvals)
    if s2 == 0.0:
        if phival == 0.0:
            return AffineFiber.full(b.r)
        return AffineFiber.make_empty(b.r)
    v = (phival / s2) * fvals
    normal = fvals / math.sqrt(s2)
    q, _ = np.linalg.qr(np.concatenate([normal[:, None], np.eye(b.r)], axis=1))
    dir_basis = q[:, 1:b.r]
    return AffineFiber.make(v, LinearSubspace(b.r, dir_basis))


# ---------------------------------------------------------------------------
# Sampled bundles and level oracles


@dataclass
class SampledBundle:
    """One refinement level, sampled on a grid.

    ``changed`` flags points whose fiber moved relative to the previous
    level; the on-demand oracle only re-refines probe points near those.
    """

    grid: Grid
    fibers: list[AffineFiber]
    level: int
    base: FiberOracle
    probe_cfg: ProbeConfig
    rank_tol: float = DEFAULT_RANK_TOL
    previous: Optional["SampledBundle"] = None
    changed: np.ndarray | None = None
    taints: np.ndarray | None = None
    diagnostics: list[dict] = field(default_factory=list)
    empty_info: list[dict] = field(default_factory=list)

    def __post_init__(self):
        n = self.grid.npoints
        if self.changed is None:
            self.changed = np.zeros(n, dtype=bool)
        if self.taints is None:
            self.taints = np.zeros(n, dtype=bool)

    @property
    def r(self) -> int:
        return self.base.r

    @property
    def box(self) -> Box:
        return self.grid.box

    def fiber_at_index(self, idx: int) -> AffineFiber:
        return self.fibers[idx]

    def changed_points(self) -> np.ndarray:
        return self.grid.points[self.changed]

    def has_empty(self) -> bool:
        return any(f.empty for f in self.fibers)

    def empty_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.fibers) if f.empty]

    def oracle_view(self) -> "LevelOracle":
        return LevelOracle(self)

    def check_subbundle(self, tol: float = 1e-7) -> float:
        """Max violation of the subbundle property vs the previous level."""
        if self.previous is None:
            return 0.0
        worst = 0.0
        for i, f in enumerate(self.fibers):
            if f.empty:
                continue
            prev = self.previous.fibers[i]
            if prev.empty:
                worst = np.inf
                continue
            worst = max(worst, dist_point_fiber(f.v, prev))
            for j in range(f.dir.dim):
                w = f.v + f.dir.basis[:, j]
                worst = max(worst, dist_point_fiber(w, prev))
        return worst


class LevelOracle(OracleBase):
    """Fiber oracle for a refinement level at arbitrary points of the box.

    Level 1 recomputes fibers on demand near changed samples (full probe
    resolution); levels >= 2 return the nearest stored sample there.  Away
    from changed samples the fiber is inherited from the level below.
    """

    def __init__(self, bundle: SampledBundle):
        self.bundle = bundle
        self.box = bundle.box
        self.r = bundle.r
        self._rho = 1.5 * float(np.max(bundle.grid.cell))
        self._chain: list[SampledBundle] = []
        b: SampledBundle | None = bundle
        while b is not None:
            self._chain.append(b)
            b = b.previous
        self._chain.reverse()  # level 0 first
        self._changed_pts = [lvl.changed_points() for lvl in self._chain]
        self._memo: dict[tuple[int, bytes], tuple[AffineFiber, bool]] = {}

    def _near_changed(self, y: np.ndarray, li: int) -> bool:
        pts = self._changed_pts[li]
        if pts.shape[0] == 0:
            return False
        return bool(np.min(np.max(np.abs(pts - y[None, :]), axis=1)) <= self._rho)

    def _fiber_tainted(self, y: np.ndarray, li: int) -> tuple[AffineFiber, bool, bool]:
        """Fiber of level li at y; returns (fiber, tainted, snapped)."""
        if li == 0:
            return self.bundle.base.fiber(y), False, False
        lvl = self._chain[li]
        if not self._near_changed(y, li):
            return self._fiber_tainted(y, li - 1)
        if li == 1:
            key = (li, np.round(y, 12).tobytes())
            hit = self._memo.get(key)
            if hit is None:
                sub = LevelOracle(self._chain[0])
                out = refine_at(sub, y, self.bundle.probe_cfg, self.bundle.rank_tol)
                hit = (out.fiber, out.tainted)
                self._memo[key] = hit
            return hit[0], hit[1], False
        idx = self.bundle.grid.nearest_index(y)
        return lvl.fibers[idx], bool(lvl.taints[idx]), True

    def fiber(self, y) -> AffineFiber:
        y = np.asarray(y, dtype=np.float64)
        return self._fiber_tainted(y, len(self._chain) - 1)[0]

    def probe(self, y: np.ndarray) -> ProbeSample:
        y = np.asarray(y, dtype=np.float64)
        try:
            fiber, tainted, snapped = self._fiber_tainted(y, len(self._chain) - 1)
        except EvalDomainError:
            return ProbeSample("undefined")
        return _sample_from_fiber(fiber, tainted=tainted, snapped=snapped)

    def _walk_mask(self, Y: np.ndarray) -> np.ndarray:
        needs_walk = np.zeros(Y.shape[0], dtype=bool)
        for li in range(1, len(self._chain)):
            pts = self._changed_pts[li]
            if pts.shape[0] == 0:
                continue
            d = np.min(np.max(np.abs(pts[None, :, :] - Y[:, None, :]), axis=2), axis=1)
            needs_walk |= d <= self._rho
        return needs_walk

    def probe_many(self, Y: np.ndarray) -> list[ProbeSample]:
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        if len(self._chain) == 1:
            return self.bundle.base.probe_many(Y)
        # Fast path: points away from every changed set fall through to the
        # base closed form, which can be probed in one vectorized batch.
        needs_walk = self._walk_mask(Y)
        out: list[ProbeSample | None] = [None] * Y.shape[0]
        easy = ~needs_walk
        if np.any(easy):
            base_samples = self.bundle.base.probe_many(Y[easy])
            for pos, s in zip(np.nonzero(easy)[0], base_samples):
                out[pos] = s
        for pos in np.nonzero(needs_walk)[0]:
            out[pos] = self.probe(Y[pos])
        return out  # type: ignore[return-value]

    def probe_ray(self, Y: np.ndarray) -> list[tuple]:
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        base_ray = getattr(self.bundle.base, "probe_ray", None)
        if base_ray is None:
            return OracleBase.probe_ray(self, Y)
        if len(self._chain) == 1:
            return base_ray(Y)
        needs_walk = self._walk_mask(Y)
        out: list[tuple | None] = [None] * Y.shape[0]
        easy = ~needs_walk
        if np.any(easy):
            for pos, row in zip(np.nonzero(easy)[0], base_ray(Y[easy])):
                out[pos] = row
        for pos in np.nonzero(needs_walk)[0]:
            s = self.probe(Y[pos])
            v = None if s.v is None else tuple(s.v.tolist())
            normals = () if s.normals is None else tuple(tuple(r) for r in s.normals.tolist())
            out[pos] = (s.kind, v, normals, s.tainted, s.snapped)
        return out  # type: ignore[return-value]


def sample_bundle(oracle: FiberOracle, grid: Grid, probe_cfg: ProbeConfig,
                  rank_tol: float = DEFAULT_RANK_TOL) -> SampledBundle:
    """Level-0 snapshot of an oracle on the grid."""
    fibers = []
    for y in grid.points:
        fibers.append(oracle.fiber(y))
    return SampledBundle(grid, fibers, 0, oracle, probe_cfg, rank_tol)


# ---------------------------------------------------------------------------
# The refinement operator


@dataclass
class RefineOutcome:
    fiber: AffineFiber
    tainted: bool = False
    empty_reason: str | None = None  # "empty_fiber" | "diverged_limit" | None
    diagnostics: dict = field(default_factory=dict)


@dataclass
class _ChainConstraint:
    samples: list[tuple[np.ndarray, float]]  # (unit normal, scalar) per tail entry
    achieved: float
    snapped: bool


def _apply_chain(fiber: AffineFiber, con: _ChainConstraint, rank_tol: float,
                 slack: float) -> tuple[AffineFiber, bool]:
    """Intersect the fiber with one chain's limiting equation.

    The tail samples are kept as matched (normal, scalar) pairs and fitted
    jointly: any vector satisfying every probed constraint exactly (a locally
    constant true solution) then survives exactly, however small the
    constraint's component inside the fiber is.  The dimension-reducing pin
    is only performed when the joint fit explains the samples to a small
    fraction of their own scale; otherwise the constraint carries no usable
    information inside the fiber (its in-fiber coefficient is noise-order)
    and only consistency is checked.  Returns (fiber, consistent).
    """
    if fiber.empty:
        return fiber, True
    v, B = fiber.v, fiber.dir.basis
    U = np.stack([u for u, _ in con.samples])
    xi = np.array([s for _, s in con.samples])
    b = xi - U @ v
    ctol = max(rank_tol * (1.0 + float(np.linalg.norm(xi))),
               10.0 * con.achieved * (1.0 + float(np.linalg.norm(v))),
               2.0 * slack)
    consistent_asis = bool(np.max(np.abs(b), initial=0.0) <= ctol)
    if B.shape[1] == 0:
        return fiber, consistent_asis
    A = U @ B
    uu, ss, vvt = np.linalg.svd(A, full_matrices=False)
    if ss[0] <= _SIGNIFICANCE_FLOOR:
        return fiber, consistent_asis
    g = vvt[0]
    zeta = float(uu[:, 0] @ b) / float(ss[0])
    resid = float(np.max(np.abs(A @ (g * zeta) - b), initial=0.0))
    bscale = float(np.max(np.abs(b), initial=0.0))
    pin_tol = max(1e-12 * (1.0 + bscale), 1e-3 * bscale)
    if resid > pin_tol:
        # The fit leaves an O(1) fraction of the samples unexplained: the
        # scalar data cannot support a pin at this coefficient size.
        return fiber, consistent_asis
    new_v = v + B @ (g * zeta)
    q, _ = np.linalg.qr(np.concatenate([g[:, None], np.eye(B.shape[1])], axis=1))
    new_B = B @ q[:, 1:B.shape[1]]
    return AffineFiber.make(new_v, LinearSubspace(fiber.r, new_B)), True


def refine_at(B: FiberOracle, x, probe: ProbeConfig,
              rank_tol: float = DEFAULT_RANK_TOL,
              base_fiber: AffineFiber | None = None) -> RefineOutcome:
    """One Glaeser refinement step at a single point.

    Probes the bundle along rays clipped to the box, clusters the probed
    fibers' normals into chains across scales, estimates each converged
    chain's scalar limit, and intersects the point's own fiber with the
    resulting equations.  Empty is returned when a scalar limit diverges, a
    probed fiber is empty at the finest scales, or the system is
    inconsistent; an Undetermined limit only taints the result.
    """
    x = np.asarray(x, dtype=np.float64)
    fiber_x = B.fiber(x) if base_fiber is None else base_fiber
    diag: dict = {"chains": 0, "converged": 0, "dropped": 0, "undetermined": 0,
                  "max_achieved": 0.0, "finest_scale": None, "snapped": False,
                  "isolated_empty": 0}
    if fiber_x.empty:
        return RefineOutcome(AffineFiber.make_empty(B.r), empty_reason="empty_fiber",
                             diagnostics=diag)

    cfg = probe.limit
    all_scales = cfg.scales()
    window = cfg.window
    constraints: list[_ChainConstraint] = []
    tainted = False
    slack = 0.0
    finest = np.inf

    probe_ray = getattr(B, "probe_ray", None)
    for d in probe.directions:
        t_exit = B.box.exit_scale(x, d)
        usable = all_scales[all_scales <= t_exit * (1 + 1e-12)]
        if len(usable) == 0:
            continue
        Y = x[None, :] + usable[:, None] * d[None, :]
        if probe_ray is not None:
            rows = probe_ray(Y)
        else:
            rows = OracleBase.probe_ray(B, Y)
        m = len(usable)
        tail_lo = max(0, m - window)
        frames: list = []
        vlist: list[tuple[float, ...] | None] = []
        snapped_flags: list[bool] = []
        for k, (kind, v, normals, tnt, snp) in enumerate(rows):
            snapped_flags.append(snp)
            if kind == "empty":
                if k >= tail_lo:
                    diag["empty_witness"] = Y[k].tolist()
                    return RefineOutcome(AffineFiber.make_empty(B.r),
                                         empty_reason="empty_fiber", diagnostics=diag)
                diag["isolated_empty"] += 1
                frames.append(())
                vlist.append(None)
            elif kind in ("full", "undefined"):
                frames.append(())
                vlist.append(v)
            else:
                if tnt:
                    tainted = True
                frames.append(normals)
                vlist.append(v)
        finest = min(finest, float(usable[-1]))

        chains = chain_frames(frames, match_tol=probe.match_tol)
        diag["chains"] += len(chains)
        for chain in chains:
            if len(chain.entries) < 2 or chain.last_scale < m - window:
                diag["dropped"] += 1
                continue
            tail = chain.tail(window)
            if len(tail) < 2:
                diag["dropped"] += 1
                continue
            spread = tail_spread([vec for _, vec in tail])
            if spread > cfg.limit_tol:
                diag["dropped"] += 1
                continue
            svals = [math.fsum(a * b for a, b in zip(vec, vlist[k]))
                     for k, vec in chain.entries]
            res = estimate_limit(svals, cfg)
            if res.diverged:
                diag["diverged_direction"] = d.tolist()
                return RefineOutcome(AffineFiber.make_empty(B.r),
                                     empty_reason="diverged_limit", diagnostics=diag)
            if res.undetermined:
                diag["undetermined"] += 1
                tainted = True
                continue
            tail_n = min(window, len(chain.entries))
            pairs = [(np.asarray(vec), svals[len(svals) - tail_n + i])
                     for i, (k, vec) in enumerate(chain.entries[-tail_n:])]
            snapped_tail = any(snapped_flags[k] for k, _ in chain.entries[-tail_n:])
            if snapped_tail:
                diag["snapped"] = True
                vs = [np.asarray(vlist[k]) for k, _ in chain.entries[-tail_n:]]
                for a, bb in zip(vs, vs[1:]):
                    if np.linalg.norm(a - bb) > 0:
                        slack = max(slack, float(np.linalg.norm(a - bb)))
                if fiber_x.dim < fiber_x.r:
                    slack = max(slack, float(np.linalg.norm(vs[-1] - fiber_x.v)))
            achieved = max(spread, res.achieved_tol)
            diag["max_achieved"] = max(diag["max_achieved"], achieved)
            diag["converged"] += 1
            constraints.append(_ChainConstraint(pairs, achieved, snapped_tail))

    diag["finest_scale"] = None if not np.isfinite(finest) else finest
    out = fiber_x
    for con in constraints:
        out, ok = _apply_chain(out, con, rank_tol, slack if con.snapped else 0.0)
        if not ok:
            return RefineOutcome(AffineFiber.make_empty(B.r),
                                 empty_reason="empty_fiber", diagnostics=diag)
    return RefineOutcome(out, tainted=tainted, diagnostics=diag)


# ---------------------------------------------------------------------------
# Whole-grid refinement


def _parallel_map(fn: Callable, items: Sequence, threads: int):
    if threads == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    import concurrent.futures as cf
    import os
    workers = threads if threads > 0 else (os.cpu_count() or 1)
    with cf.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def refine(B: Union[FiberOracle, SampledBundle], grid: Grid | None = None,
           probe: ProbeConfig | None = None, rank_tol: float = DEFAULT_RANK_TOL,
           threads: int = 1) -> SampledBundle:
    """Refine at every grid point against an immutable snapshot.

    Accepts a raw fiber oracle (starts from its level-0 snapshot) or an
    already-refined SampledBundle.  Points far from every sample that changed
    in the previous step cannot be affected (no probe reaches a changed
    fiber) and are carried over unchanged.
    """
    if isinstance(B, SampledBundle):
        prev = B
        grid = B.grid
        probe = B.probe_cfg if probe is None else probe
        rank_tol = B.rank_tol
    else:
        if grid is None or probe is None:
            raise ValueError("grid and probe are required when refining a raw oracle")
        prev = sample_bundle(B, grid, probe, rank_tol)

    oracle = prev.oracle_view()
    level = prev.level + 1
    n = grid.npoints
    pts = grid.points

    if level == 1:
        candidates = np.arange(n)
    else:
        cpts = prev.changed_points()
        if cpts.shape[0] == 0:
            candidates = np.zeros(0, dtype=np.int64)
        else:
            margin = probe.limit.t0 + 3.0 * float(np.max(grid.cell))
            d = np.min(np.max(np.abs(cpts[None, :, :] - pts[:, None, :]), axis=2), axis=1)
            candidates = np.nonzero(d <= margin)[0]

    fibers: list[AffineFiber] = [prev.fibers[i] for i in range(n)]
    taints = prev.taints.copy()
    changed = np.zeros(n, dtype=bool)
    diags: list[dict] = [{"skipped": True} for _ in range(n)]
    empty_info: list[dict] = []

    def work(idx: int):
        return idx, refine_at(oracle, pts[idx], probe, rank_tol,
                              base_fiber=prev.fibers[idx])

    for idx, out in _parallel_map(work, list(candidates), threads):
        fibers[idx] = out.fiber
        taints[idx] = taints[idx] or out.tainted
        diags[idx] = out.diagnostics
        old = prev.fibers[idx]
        scale = 1.0
        if not old.empty:
            scale += float(np.linalg.norm(old.v))
        gap = fiber_distance(out.fiber, old)
        if gap > 100.0 * rank_tol * scale:
            changed[idx] = True
        if out.fiber.empty and not old.empty:
            empty_info.append({"index": idx, "point": pts[idx].tolist(),
                               "level": level, "reason": out.empty_reason or "empty_fiber"})

    return SampledBundle(grid, fibers, level, prev.base, probe, rank_tol,
                         previous=prev, changed=changed, taints=taints,
                         diagnostics=diags, empty_info=empty_info)


def iterate_refine(B: Union[FiberOracle, SampledBundle], grid: Grid | None = None,
                   probe: ProbeConfig | None = None, max_level: int | None = None,
                   rank_tol: float = DEFAULT_RANK_TOL, threads: int = 1,
                   stop_on_empty: bool = True) -> tuple[SampledBundle, int | None]:
    """Iterate refinement; stops when two consecutive levels agree everywhere
    (returns the first stable index) or when an empty fiber certifies
    unsolvability.  max_level defaults to 2r + 1, past which refinement
    cannot move (stabilization bound)."""
    if isinstance(B, SampledBundle):
        current = B
        probe = B.probe_cfg if probe is None else probe
    else:
        if grid is None or probe is None:
            raise ValueError("grid and probe are required when starting from an oracle")
        current = sample_bundle(B, grid, probe, rank_tol)
    if max_level is None:
        max_level = 2 * current.r + 1
    if max_level < 1:
        raise ValueError("max_level must be at least 1")

    if stop_on_empty and current.has_empty():
        for i in current.empty_indices():
            current.empty_info.append({"index": i, "point": current.grid.points[i].tolist(),
                                       "level": current.level, "reason": "empty_fiber"})
        return current, None

    while current.level < max_level:
        nxt = refine(current, probe=probe, threads=threads)
        if not np.any(nxt.changed):
            # Nothing moved: `current` was already stable.
            return nxt, current.level
        current = nxt
        if stop_on_empty and current.has_empty():
            return current, None
    return current, None


def bundle_norm(S: SampledBundle) -> float:
    """sup over grid points of the least-norm element; errors on empty fibers."""
    worst = 0.0
    for i, f in enumerate(S.fibers):
        if f.empty:
            raise ValueError(f"bundle has an empty fiber at index {i}")
        worst = max(worst, float(np.linalg.norm(f.v)))
    return worst
