"""End-to-end solver: pre-checks, iterated refinement, certificates, section.

A problem carries polynomials f_1..f_r, a closed-form phi, a box and grid,
probe and tolerance settings.  The verdict is Solvable (with a section and
residuals), Unsolvable (with a re-checkable certificate: a point and level
whose fiber refines to empty or whose probe limit diverges), or
Indeterminate (undetermined limits tainted the run, or the section failed
its residual bound).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .algebra import EvalDomainError, Expr, Poly, eval_expr_many, eval_poly_many
from .affine import DEFAULT_RANK_TOL
from .bundle import (
    Box,
    EquationBundle,
    Grid,
    ProbeConfig,
    SampledBundle,
    iterate_refine,
    refine_at,
    bundle_norm,
)
from .limits import LimitConfig, LimitResult, estimate_limit
from .section import SampledSection, build_section, section_residual, stratify


@dataclass
class Tolerances:
    rank_tol: float = DEFAULT_RANK_TOL
    residual_tol: float = 1e-6
    zero_tol: float = 1e-10


@dataclass
class Problem:
    vars: list[str]
    f: list[Poly]
    phi: Expr
    box: Box
    grid_depth: int = 4
    probe: ProbeConfig | None = None
    tolerances: Tolerances = field(default_factory=Tolerances)
    threads: int = 1

    def __post_init__(self):
        if len(self.f) < 1:
            raise ValueError("need at least one polynomial")
        if len(self.vars) != self.box.n:
            raise ValueError("variable count does not match the box dimension")
        if self.probe is None:
            self.probe = ProbeConfig.default_for(self.box)

    @property
    def r(self) -> int:
        return len(self.f)

    @property
    def n(self) -> int:
        return self.box.n

    def grid(self) -> Grid:
        return Grid(self.box, self.grid_depth)

    def bundle(self) -> EquationBundle:
        return EquationBundle(self.f, self.phi, self.box)


@dataclass
class Certificate:
    point: tuple
    level: int
    reason: str  # empty_fiber | diverged_limit | pointwise_test_failed
    reproduced: bool | None = None


@dataclass
class Solvable:
    section: SampledSection
    residual: dict
    norm_bound: dict
    diagnostics: dict = field(default_factory=dict)

    kind = "solvable"


@dataclass
class Unsolvable:
    certificate: Certificate
    diagnostics: dict = field(default_factory=dict)

    kind = "unsolvable"


@dataclass
class Indeterminate:
    diagnostics: dict = field(default_factory=dict)

    kind = "indeterminate"


Verdict = Solvable | Unsolvable | Indeterminate


# ---------------------------------------------------------------------------
# Common zero set


def find_zero_set(p: Problem) -> np.ndarray:
    """Grid samples of the common zero set, refined by one bisection pass.

    A point belongs when every |f_i| falls below zero_tol; each grid cell
    adjacent to a hit is split once and the midpoints retested.
    """
    grid = p.grid()
    pts = grid.points
    ztol = p.tolerances.zero_tol
    F = np.stack([np.abs(eval_poly_many(f, pts)) for f in p.f], axis=1)
    hits = np.all(F <= ztol, axis=1)
    samples = [pts[i] for i in np.nonzero(hits)[0]]
    # One bisection pass: midpoints of cells incident to hits.
    half = grid.cell / 2.0
    extra = []
    for x in samples:
        for mask in range(3 ** p.n):
            off = np.zeros(p.n)
            m = mask
            for i in range(p.n):
                off[i] = (m % 3 - 1) * half[i]
                m //= 3
            y = x + off
            if grid.box.contains(y):
                extra.append(y)
    if extra:
        Y = np.unique(np.round(np.stack(extra), 12), axis=0)
        FY = np.stack([np.abs(eval_poly_many(f, Y)) for f in p.f], axis=1)
        for i in np.nonzero(np.all(FY <= ztol, axis=1))[0]:
            samples.append(Y[i])
    if samples:
        return np.unique(np.round(np.stack(samples), 12), axis=0)
    return np.zeros((0, p.n))


# ---------------------------------------------------------------------------
# Pointwise certificates


def zero_limit_test(p: Problem, z) -> LimitResult:
    """Limit of phi / sum_i |f_i| along probe rays into z.

    Converged{0} means phi admits coefficients vanishing at z.  Rays are
    aggregated: every ray must converge, and the reported value is the
    largest ray limit in magnitude (so a nonzero value means "converged but
    not to zero").
    """
    z = np.asarray(z, dtype=np.float64)
    ztol = p.tolerances.zero_tol
    fz = np.array([abs(float(eval_poly_many(f, z[None, :])[0])) for f in p.f])
    if np.any(fz > ztol):
        raise ValueError(f"{tuple(z)} is not in the common zero set")
    bundle = p.bundle()
    cfg = p.probe.limit
    scales = cfg.scales()
    worst = 0.0
    worst_tol = 0.0
    late = False
    for d in p.probe.directions:
        t_exit = p.box.exit_scale(z, d)
        usable = scales[scales <= t_exit * (1 + 1e-12)]
        if len(usable) == 0:
            continue
        Y = z[None, :] + usable[:, None] * d[None, :]
        Fv = bundle.f_values(Y)
        phiv, defined = eval_expr_many(p.phi, Y)
        denom = np.sum(np.abs(Fv), axis=1)
        vals = []
        for k in range(len(usable)):
            if not defined[k] or denom[k] == 0.0:
                continue
            vals.append(float(phiv[k]) / float(denom[k]))
        res = estimate_limit(vals, cfg)
        if res.diverged:
            return res
        if res.undetermined:
            return res
        late = late or res.late
        if abs(res.value) > abs(worst):
            worst = float(res.value)
        worst_tol = max(worst_tol, res.achieved_tol)
    return LimitResult("converged", value=worst, achieved_tol=worst_tol, late=late)


@dataclass
class PointwiseResult:
    passed: bool
    witness: np.ndarray
    limit: LimitResult


def pointwise_test(p: Problem, pt) -> PointwiseResult:
    """Necessary condition at a point: phi = phi_p + sum_i c_i f_i with
    phi_p / sum |f_i| -> 0.

    The constants come from least squares over the two finest probe shells;
    the remainder is then pushed through the ray-limit test.
    """
    pt = np.asarray(pt, dtype=np.float64)
    bundle = p.bundle()
    cfg = p.probe.limit
    scales = cfg.scales()
    shell_scales = scales[-2:]
    rows = []
    rhs = []
    for d in p.probe.directions:
        t_exit = p.box.exit_scale(pt, d)
        for t in shell_scales:
            if t > t_exit * (1 + 1e-12):
                continue
            y = pt + t * d
            fv = bundle.f_values(y[None, :])[0]
            phiv, defined = eval_expr_many(p.phi, y[None, :])
            if not defined[0]:
                continue
            rows.append(fv)
            rhs.append(float(phiv[0]))
    if not rows:
        return PointwiseResult(False, np.zeros(p.r), LimitResult("undetermined"))
    A = np.stack(rows)
    b = np.array(rhs)
    c, *_ = np.linalg.lstsq(A, b, rcond=None)

    # Remainder limit along every ray.
    worst = 0.0
    for d in p.probe.directions:
        t_exit = p.box.exit_scale(pt, d)
        usable = scales[scales <= t_exit * (1 + 1e-12)]
        if len(usable) == 0:
            continue
        Y = pt[None, :] + usable[:, None] * d[None, :]
        Fv = bundle.f_values(Y)
        phiv, defined = eval_expr_many(p.phi, Y)
        denom = np.sum(np.abs(Fv), axis=1)
        vals = []
        for k in range(len(usable)):
            if not defined[k] or denom[k] == 0.0:
                continue
            vals.append((float(phiv[k]) - float(Fv[k] @ c)) / float(denom[k]))
        if not vals:
            continue
        res = estimate_limit(vals, cfg)
        if not res.converged:
            return PointwiseResult(False, c, res)
        worst = max(worst, abs(float(res.value)))
    passed = worst <= 10.0 * cfg.limit_tol
    return PointwiseResult(passed, c, LimitResult("converged", value=worst))


def wronskian_test(fs: Sequence, phi, sample_points: Sequence, trials: int = 64,
                   tol: float = 1e-9, seed: int = 0) -> bool:
    """Constant-coefficient membership: the (r+1)x(r+1) determinants of
    [f_i(z_j); phi(z_j)] over random point tuples must all vanish.

    ``fs`` and ``phi`` are callables on sample points; |det| is compared to
    tol times the product of row norms.
    """
    pts = list(sample_points)
    r = len(fs)
    if len(pts) < r + 1:
        raise ValueError(f"need at least {r + 1} sample points, got {len(pts)}")
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        chosen = rng.choice(len(pts), size=r + 1, replace=False)
        M = np.empty((r + 1, r + 1))
        for j, pi in enumerate(chosen):
            z = pts[pi]
            for i, f in enumerate(fs):
                M[i, j] = f(z)
            M[r, j] = phi(z)
        scale = float(np.prod(np.maximum(np.linalg.norm(M, axis=1), 1e-30)))
        if abs(float(np.linalg.det(M))) > tol * scale:
            return False
    return True


def finite_set_test(S: SampledBundle, pts: Sequence[int]) -> bool:
    """Joint feasibility over listed grid indices.

    Fibers over distinct base points decouple, so this reduces to per-point
    non-emptiness.
    """
    return all(not S.fibers[int(i)].empty for i in pts)


# ---------------------------------------------------------------------------
# The pipeline


def solve(p: Problem) -> Verdict:
    """Decide solvability of sum_i phi_i f_i = phi with continuous phi_i.

    Pipeline: validate phi on the grid, locate the common zero set, run the
    pointwise pre-check there, build and iterate the equation bundle's
    refinement, certify any empty fiber, otherwise stratify and build a
    section and verify its residual.
    """
    timings: dict[str, float] = {}
    t_start = time.perf_counter()
    grid = p.grid()
    bundle = p.bundle()

    phi_vals, defined = eval_expr_many(p.phi, grid.points)
    if not np.all(defined):
        bad = grid.points[np.nonzero(~defined)[0][0]]
        raise EvalDomainError(bad)
    timings["validate"] = time.perf_counter() - t_start

    diagnostics: dict = {"defaults": {
        "rank_tol": p.tolerances.rank_tol,
        "residual_tol": p.tolerances.residual_tol,
        "zero_tol": p.tolerances.zero_tol,
        "limit_tol": p.probe.limit.limit_tol,
        "probe_depth": p.probe.limit.depth,
        "probe_t0": p.probe.limit.t0,
        "probe_beta": p.probe.limit.beta,
        "grid_depth": p.grid_depth,
        "directions": len(p.probe.directions),
    }}

    # Pre-checks on the common zero set.
    t0 = time.perf_counter()
    zset = find_zero_set(p)
    diagnostics["zero_samples"] = int(zset.shape[0])
    pointwise_failures: list[np.ndarray] = []
    disagreements = 0
    for z in zset:
        res = pointwise_test(p, z)
        if not res.passed:
            pointwise_failures.append(z)
    confirmed: Optional[Certificate] = None
    for z in pointwise_failures:
        out = refine_at(bundle, z, p.probe, p.tolerances.rank_tol)
        if out.fiber.empty:
            confirmed = Certificate(tuple(float(c) for c in z), 1, "pointwise_test_failed")
            break
        disagreements += 1
    diagnostics["pointwise_failures"] = len(pointwise_failures)
    diagnostics["pointwise_disagreements"] = disagreements
    timings["prechecks"] = time.perf_counter() - t0

    if confirmed is not None:
        confirmed.reproduced = _recheck_certificate(p, confirmed)
        diagnostics["timings"] = timings
        return Unsolvable(confirmed, diagnostics)

    # Iterated refinement.
    t0 = time.perf_counter()
    stable, stab_index = iterate_refine(bundle, grid, p.probe,
                                        rank_tol=p.tolerances.rank_tol,
                                        threads=p.threads)
    timings["refine"] = time.perf_counter() - t0
    diagnostics["stabilization_index"] = stab_index
    diagnostics["final_level"] = stable.level
    diagnostics["taint_count"] = int(np.sum(stable.taints))
    finest = [d.get("finest_scale") for d in stable.diagnostics
              if isinstance(d, dict) and d.get("finest_scale")]
    diagnostics["finest_scale"] = min(finest) if finest else None

    if stable.has_empty():
        info = stable.empty_info[0] if stable.empty_info else None
        if info is None:
            idx = stable.empty_indices()[0]
            info = {"point": grid.points[idx].tolist(), "level": stable.level,
                    "reason": "empty_fiber"}
        cert = Certificate(tuple(info["point"]), int(info["level"]), str(info["reason"]))
        cert.reproduced = _recheck_certificate(p, cert, stable)
        diagnostics["timings"] = timings
        return Unsolvable(cert, diagnostics)

    if np.any(stable.taints):
        diagnostics["tainted_points"] = grid.points[stable.taints].tolist()
        diagnostics["timings"] = timings
        return Indeterminate(diagnostics)

    # Section construction and verification.
    t0 = time.perf_counter()
    section = build_section(stable, p.tolerances.rank_tol)
    res = section_residual(section, bundle)
    timings["section"] = time.perf_counter() - t0
    diagnostics["timings"] = timings

    sup_phi = float(np.max(np.abs(phi_vals), initial=0.0))
    bound = p.tolerances.residual_tol * (1.0 + sup_phi)
    eq_res = res["equation_residual"] if res["equation_residual"] is not None else np.inf
    if eq_res > bound or res["fiber_residual"] > bound:
        diagnostics["residual"] = res
        diagnostics["residual_bound"] = bound
        return Indeterminate(diagnostics)

    norm_bound = {"section_C": section.norm_bound, "bundle_norm": bundle_norm(stable)}
    return Solvable(section, res, norm_bound, diagnostics)


def _recheck_certificate(p: Problem, cert: Certificate,
                         stable: SampledBundle | None = None) -> bool:
    """Re-run the refinement chain at the certified point; the certificate
    stands only if emptiness reproduces."""
    x = np.asarray(cert.point, dtype=np.float64)
    bundle = p.bundle()
    if cert.level <= 1 or stable is None:
        out = refine_at(bundle, x, p.probe, p.tolerances.rank_tol)
        return out.fiber.empty
    # Replay against the stored level below the certificate.
    chain: list[SampledBundle] = []
    b: SampledBundle | None = stable
    while b is not None:
        chain.append(b)
        b = b.previous
    chain.reverse()
    below = chain[min(cert.level - 1, len(chain) - 1)]
    out = refine_at(below.oracle_view(), x, p.probe, p.tolerances.rank_tol)
    return out.fiber.empty
