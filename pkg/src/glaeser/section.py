"""Continuous sections of a stable sampled bundle.

Two constructions: a stratified Whitney recursion (peel off the lowest
stratum E1, solve shifted local problems on cube dilates, patch with the
Whitney partition of unity) and a Michael-style halving iteration (repeated
eps-approximate selections).  Both return values on the grid; both satisfy
the fiber constraints at every grid point by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .affine import AffineFiber, dist_point_fiber, project_point_fiber
from .bundle import FiberOracle, Grid, SampledBundle
from .whitney import WhitneyCover, pou_eval, whitney_decompose


@dataclass
class Strata:
    """Partition of the grid by fiber direction dimension."""

    dims: np.ndarray  # per grid point
    levels: dict[int, np.ndarray]  # k -> indices with dim k
    k_min: int

    @property
    def e1_indices(self) -> np.ndarray:
        return self.levels[self.k_min]

    @property
    def count(self) -> int:
        return len(self.levels)


def stratify(S: SampledBundle) -> Strata:
    """Group grid points by fiber dimension; errors on any empty fiber."""
    dims = np.empty(S.grid.npoints, dtype=np.int64)
    for i, f in enumerate(S.fibers):
        if f.empty:
            raise ValueError(f"cannot stratify: empty fiber at index {i}")
        dims[i] = f.dim
    levels = {int(k): np.nonzero(dims == k)[0] for k in np.unique(dims)}
    return Strata(dims, levels, int(min(levels)))


@dataclass
class SampledSection:
    grid: Grid
    values: np.ndarray  # (N, r)
    norm_bound: float = np.nan  # measured max|F| / sup|v|
    meta: dict = field(default_factory=dict)

    def value_at(self, idx: int) -> np.ndarray:
        return self.values[idx]


def _whitney_min_side(grid: Grid) -> float:
    return float(np.max(grid.cell))


def build_section(S: SampledBundle, rank_tol: float = 1e-9) -> SampledSection:
    """Section by stratified recursion.

    On the lowest stratum E1 the section equals the least-norm field v
    (continuous there for a stable bundle).  Off E1, Whitney cubes for E1
    carry local subproblems for the shifted bundle v(y) - P_y v(x_cube),
    which have strictly fewer strata; their solutions are patched with the
    Whitney partition of unity.  Truncated cubes (grid-resolution floor) are
    solved pointwise.
    """
    strata = stratify(S)
    grid = S.grid
    pts = grid.points
    fibers = S.fibers
    vtop = np.stack([f.v for f in fibers])

    def proj_perp(idx: int, w: np.ndarray) -> np.ndarray:
        """Projection onto the orthocomplement of the fiber direction at idx."""
        f = fibers[idx]
        if f.dir.dim == 0:
            return w
        return w - f.dir.project(w)

    max_depth = strata.count + 2

    def solve(indices: np.ndarray, vsub: dict[int, np.ndarray],
              region: tuple[np.ndarray, np.ndarray], depth: int) -> dict[int, np.ndarray]:
        dims = np.array([fibers[i].dim for i in indices])
        if (len(indices) <= 2 ** grid.n or depth > max_depth
                or np.all(dims == dims[0])):
            return {int(i): vsub[int(i)] for i in indices}
        kmin = int(dims.min())
        e1_idx = [int(i) for i, k in zip(indices, dims) if k == kmin]
        e1_pts = pts[e1_idx]
        cover = whitney_decompose((region[0], region[1]), e1_pts, _whitney_min_side(grid))

        # Per-cube subproblems on the dilate intersected with the region.
        sub_f: dict[int, dict[int, np.ndarray]] = {}
        bases: dict[int, np.ndarray] = {}
        for ci, q in enumerate(cover.cubes):
            dlo, dhi = q.dilate_bounds()
            dlo = np.maximum(dlo, region[0])
            dhi = np.minimum(dhi, region[1])
            inside = [int(i) for i in indices
                      if np.all(pts[i] >= dlo - 1e-12) and np.all(pts[i] <= dhi + 1e-12)]
            if not inside:
                continue
            # Base point: nearest E1 sample to the dilate center, lex tie-break.
            ctr = q.center
            d2 = np.sum((e1_pts - ctr[None, :]) ** 2, axis=1)
            best = np.lexsort((*(e1_pts[:, i] for i in reversed(range(grid.n))), d2))[0]
            base_idx = e1_idx[int(best)]
            s = vsub[base_idx]
            bases[ci] = s
            shifted = {i: vsub[i] - proj_perp(i, s) for i in inside}
            if q.truncated:
                sub_f[ci] = shifted  # resolution floor: pointwise
            else:
                sub_f[ci] = solve(np.array(inside), shifted, (dlo, dhi), depth + 1)

        out: dict[int, np.ndarray] = {}
        e1_set = set(e1_idx)
        for i in indices:
            i = int(i)
            if i in e1_set:
                out[i] = vsub[i]
                continue
            weights = pou_eval(cover, pts[i])
            acc = np.zeros(S.r)
            total = 0.0
            for ci, w in weights:
                if ci in sub_f and i in sub_f[ci]:
                    acc += w * (sub_f[ci][i] + bases[ci])
                    total += w
            if total <= 0.0:
                out[i] = vsub[i]  # isolated point: fall back to least-norm
            else:
                out[i] = acc / total
        return out

    all_idx = np.arange(grid.npoints)
    v0 = {int(i): vtop[i] for i in all_idx}
    fmap = solve(all_idx, v0, (grid.box.lo.copy(), grid.box.hi.copy()), 1)
    values = np.stack([fmap[int(i)] for i in all_idx])

    sup_v = float(np.max(np.linalg.norm(vtop, axis=1), initial=0.0))
    max_f = float(np.max(np.linalg.norm(values, axis=1), initial=0.0))
    norm_bound = max_f / sup_v if sup_v > 0 else (0.0 if max_f == 0 else np.inf)

    meta = {"sup_v": sup_v, "max_F": max_f,
            "strata": {int(k): len(vv) for k, vv in strata.levels.items()}}
    meta["edge_increment"] = _max_edge_increment(grid, values, strata)
    return SampledSection(grid, values, norm_bound, meta)


def _max_edge_increment(grid: Grid, values: np.ndarray, strata: Strata) -> float:
    """Largest jump of the section along grid edges away from E1 (continuity
    diagnostic; reported, not enforced)."""
    shape = grid.shape
    vals = values.reshape(shape + (-1,))
    e1_mask = np.zeros(grid.npoints, dtype=bool)
    e1_mask[strata.e1_indices] = True
    e1_mask = e1_mask.reshape(shape)
    worst = 0.0
    for axis in range(grid.n):
        a = [slice(None)] * grid.n
        b = [slice(None)] * grid.n
        a[axis] = slice(None, -1)
        b[axis] = slice(1, None)
        diff = np.linalg.norm(vals[tuple(b)] - vals[tuple(a)], axis=-1)
        off_e1 = ~(e1_mask[tuple(a)] | e1_mask[tuple(b)])
        if np.any(off_e1):
            worst = max(worst, float(np.max(diff[off_e1])))
    return worst


# ---------------------------------------------------------------------------
# Michael iteration


class HalvingError(RuntimeError):
    """The eps-selection failed to halve the shifted norm repeatedly; the
    bundle is not stable at grid resolution."""


def michael_section(S: SampledBundle, target_eps: float = 1e-6,
                    max_iter: int = 60) -> SampledSection:
    """Section by repeated eps-approximate continuous selection.

    Each round covers the grid by balls on which one corrective vector stays
    eps-close to every shifted fiber, blends the vectors with tent weights,
    and adds the blend to the running section; the shifted bundle norm halves
    every round by construction.
    """
    grid = S.grid
    pts = grid.points
    fibers = S.fibers
    n_pts = grid.npoints
    for i, f in enumerate(fibers):
        if f.empty:
            raise ValueError(f"cannot build a section: empty fiber at index {i}")

    F = np.zeros((n_pts, S.r))
    ratios: list[float] = []
    fails = 0

    def shifted_norms(Fc: np.ndarray) -> np.ndarray:
        return np.array([dist_point_fiber(Fc[i], fibers[i]) for i in range(n_pts)])

    norms = shifted_norms(F)
    norm0 = float(np.max(norms))
    prev = norm0
    iters = 0
    while prev > target_eps and iters < max_iter:
        eps = prev / 2.0
        # Corrective vectors: shortest step from F into each fiber.
        W = np.stack([project_point_fiber(F[i], fibers[i]) - F[i] for i in range(n_pts)])
        # dist(F[j] + W[i], H_j) for all pairs, grouped to keep it vectorized.
        targets = np.stack([project_point_fiber(F[j], fibers[j]) for j in range(n_pts)])
        # residual of candidate i at point j: |(I - P_j)(F_j + W_i - v_j)|
        ok = np.zeros((n_pts, n_pts), dtype=bool)
        for j in range(n_pts):
            f = fibers[j]
            d = (F[j][None, :] + W) - f.v[None, :]
            if f.dir.dim > 0:
                d = d - (d @ f.dir.basis) @ f.dir.basis.T
            ok[:, j] = np.linalg.norm(d, axis=1) <= eps * (1 + 1e-12)
        dist2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        radii = np.empty(n_pts)
        for i in range(n_pts):
            bad = ~ok[i]
            bad[i] = False
            if np.any(bad):
                radii[i] = max(0.0, float(np.sqrt(np.min(dist2[i][bad]))) * 0.999)
            else:
                radii[i] = float(np.sqrt(np.max(dist2[i])))
        # Greedy cover by balls B(x_i, r_i/2) (tents die at r_i).
        order = np.lexsort((np.arange(n_pts), -radii))
        covered = np.zeros(n_pts, dtype=bool)
        centers: list[int] = []
        for i in order:
            if covered.all():
                break
            inside = dist2[i] <= (radii[i] / 2.0) ** 2
            if np.any(inside & ~covered) or not covered[i]:
                centers.append(int(i))
                covered |= inside
                covered[i] = True
        # Tent weights: 1 inside r/2, 0 at r.
        G = np.zeros((n_pts, S.r))
        wsum = np.zeros(n_pts)
        for i in centers:
            r = radii[i]
            d = np.sqrt(dist2[i])
            if r <= 0:
                w = (d == 0).astype(float)
            else:
                w = np.clip(2.0 - 2.0 * d / r, 0.0, 1.0)
            G += w[:, None] * W[i][None, :]
            wsum += w
        wsum = np.where(wsum <= 0, 1.0, wsum)
        F = F + G / wsum[:, None]
        norms = shifted_norms(F)
        cur = float(np.max(norms))
        ratios.append(cur / prev if prev > 0 else 0.0)
        if prev > 0 and cur > 0.5 * prev * (1 + 1e-9):
            fails += 1
            if fails >= 3:
                raise HalvingError(
                    f"halving failed {fails} times (norm {cur:.3e} vs {prev:.3e})")
        else:
            fails = 0
        prev = cur
        iters += 1

    meta = {"iterations": iters, "ratios": ratios, "initial_norm": norm0,
            "final_norm": prev}
    sup_v = float(np.max([np.linalg.norm(f.v) for f in fibers], initial=0.0))
    max_f = float(np.max(np.linalg.norm(F, axis=1), initial=0.0))
    nb = max_f / sup_v if sup_v > 0 else (0.0 if max_f == 0 else np.inf)
    return SampledSection(grid, F, nb, meta)


# ---------------------------------------------------------------------------
# Residuals


def section_residual(F: SampledSection, B: FiberOracle) -> dict:
    """Sup distance of the section to the level-0 fibers (the true
    constraint), plus the raw equation residual when the oracle exposes it."""
    grid = F.grid
    fiber_sup = 0.0
    eq_sup = 0.0
    has_eq = hasattr(B, "f_values") and hasattr(B, "phi")
    if has_eq:
        from .algebra import eval_expr_many
        Fv = B.f_values(grid.points)
        phi_vals, defined = eval_expr_many(B.phi, grid.points)
    for i, x in enumerate(grid.points):
        fiber = B.fiber(x)
        fiber_sup = max(fiber_sup, dist_point_fiber(F.values[i], fiber))
        if has_eq and defined[i]:
            eq_sup = max(eq_sup, abs(float(Fv[i] @ F.values[i]) - float(phi_vals[i])))
    return {"fiber_residual": fiber_sup, "equation_residual": eq_sup if has_eq else None}
