"""Command-line front end: problem files in, verdicts / sections / dumps out.

Problem files are JSON; reports are JSON on stdout.  Exit codes: 0 solvable,
1 unsolvable, 2 indeterminate, 3 any error (bad file, bad schema, undefined
phi on the grid, bad flag).
"""

from __future__ import annotations

import csv
import json
import os
import sys
import time
from dataclasses import dataclass

import click
import numpy as np

from .algebra import EvalDomainError, ParseError, parse_expr, parse_poly
from .bundle import Box, Grid, ProbeConfig, iterate_refine, sample_bundle
from .limits import LimitConfig
from .section import stratify
from .solver import Indeterminate, Problem, Solvable, Tolerances, Unsolvable, solve
from .whitney import cover_geometry_report, whitney_decompose


class ProblemFileError(ValueError):
    pass


_TOLERANCE_KEYS = {"rank_tol", "residual_tol", "zero_tol"}
_PROBE_KEYS = {"directions", "depth", "beta", "limit_tol", "t0"}


def load_problem(path: str, grid_depth: int | None = None, probe_depth: int | None = None,
                 limit_tol: float | None = None, residual_tol: float | None = None,
                 threads: int | None = None) -> Problem:
    """Parse and validate a problem file, filling defaults for omitted keys."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ProblemFileError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ProblemFileError(f"malformed JSON in {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ProblemFileError("problem file must be a JSON object")

    for key in ("vars", "f", "phi", "box"):
        if key not in doc:
            raise ProblemFileError(f"missing required key {key!r}")
    vars_ = doc["vars"]
    if (not isinstance(vars_, list) or not vars_
            or not all(isinstance(v, str) for v in vars_)):
        raise ProblemFileError("'vars' must be a nonempty list of names")
    if not isinstance(doc["f"], list) or not doc["f"]:
        raise ProblemFileError("'f' must be a nonempty list of polynomial strings")
    box_doc = doc["box"]
    if not isinstance(box_doc, dict) or "lo" not in box_doc or "hi" not in box_doc:
        raise ProblemFileError("'box' must be an object with 'lo' and 'hi'")
    lo = box_doc["lo"]
    hi = box_doc["hi"]
    if len(lo) != len(vars_) or len(hi) != len(vars_):
        raise ProblemFileError("box bounds must match the number of variables")

    try:
        f = [parse_poly(s, vars_) for s in doc["f"]]
        phi = parse_expr(doc["phi"], vars_)
    except ParseError as e:
        raise ProblemFileError(f"parse error: {e}") from e

    try:
        box = Box(np.array(lo, dtype=float), np.array(hi, dtype=float))
    except ValueError as e:
        raise ProblemFileError(str(e)) from e

    tol_doc = doc.get("tolerances", {})
    if not isinstance(tol_doc, dict) or not set(tol_doc) <= _TOLERANCE_KEYS:
        raise ProblemFileError(f"'tolerances' keys must be among {sorted(_TOLERANCE_KEYS)}")
    tols = Tolerances(**{k: float(v) for k, v in tol_doc.items()})
    if residual_tol is not None:
        tols.residual_tol = residual_tol

    probe_doc = doc.get("probe", {})
    if not isinstance(probe_doc, dict) or not set(probe_doc) <= _PROBE_KEYS:
        raise ProblemFileError(f"'probe' keys must be among {sorted(_PROBE_KEYS)}")
    depth = probe_depth if probe_depth is not None else probe_doc.get("depth")
    ltol = limit_tol if limit_tol is not None else probe_doc.get("limit_tol")
    probe = ProbeConfig.default_for(
        box,
        depth=int(depth) if depth is not None else None,
        limit_tol=float(ltol) if ltol is not None else None,
        beta=float(probe_doc["beta"]) if "beta" in probe_doc else None,
        t0=float(probe_doc["t0"]) if "t0" in probe_doc else None,
        extra_directions=probe_doc.get("directions"),
    )

    gdepth = grid_depth if grid_depth is not None else int(doc.get("grid_depth", 4))
    if threads is None:
        threads = int(os.environ.get("GLAESER_THREADS", "1") or 1)
    return Problem(vars=vars_, f=f, phi=phi, box=box, grid_depth=gdepth,
                   probe=probe, tolerances=tols, threads=threads)


def _report(problem: Problem, verdict, extras: dict | None = None) -> dict:
    rep: dict = {
        "verdict": verdict.kind,
        "defaults": verdict.diagnostics.get("defaults", {}),
        "diagnostics": {k: v for k, v in verdict.diagnostics.items()
                        if k not in ("defaults", "timings", "tainted_points")},
        "timings": verdict.diagnostics.get("timings", {}),
    }
    if isinstance(verdict, Unsolvable):
        rep["certificate"] = {
            "point": list(verdict.certificate.point),
            "level": verdict.certificate.level,
            "reason": verdict.certificate.reason,
            "reproduced": verdict.certificate.reproduced,
        }
    elif isinstance(verdict, Solvable):
        rep["section"] = {
            "residual": verdict.residual,
            "norm_bound": verdict.norm_bound,
            "sup_v": verdict.section.meta.get("sup_v"),
            "max_F": verdict.section.meta.get("max_F"),
            "strata": verdict.section.meta.get("strata"),
        }
    else:
        rep["tainted_points"] = verdict.diagnostics.get("tainted_points", [])
    if extras:
        rep.update(extras)
    return rep


def _emit(rep: dict):
    click.echo(json.dumps(rep, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON-serializable: {type(o)}")


def _exit_code(verdict) -> int:
    return {"solvable": 0, "unsolvable": 1, "indeterminate": 2}[verdict.kind]


_shared_options = [
    click.option("--grid-depth", type=int, default=None, help="Dyadic grid depth."),
    click.option("--probe-depth", type=int, default=None, help="Probe scale count."),
    click.option("--limit-tol", type=float, default=None, help="Limit convergence tolerance."),
    click.option("--residual-tol", type=float, default=None, help="Section residual bound."),
    click.option("--threads", type=int, default=None,
                 help="Worker threads (0 = all cores); env GLAESER_THREADS as fallback."),
]


def _with_shared(fn):
    for opt in reversed(_shared_options):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Certify membership of phi in the continuous ideal (f_1, ..., f_r)."""


@main.command("check")
@click.argument("file", type=click.Path())
@_with_shared
def cmd_check(file, grid_depth, probe_depth, limit_tol, residual_tol, threads):
    """Run the solver and print the report (no section export)."""
    try:
        problem = load_problem(file, grid_depth, probe_depth, limit_tol, residual_tol, threads)
        verdict = solve(problem)
    except (ProblemFileError, EvalDomainError, ValueError) as e:
        click.echo(json.dumps({"error": str(e)}), err=False)
        sys.exit(3)
    _emit(_report(problem, verdict))
    sys.exit(_exit_code(verdict))


@main.command("solve")
@click.argument("file", type=click.Path())
@click.option("--out", "out_csv", type=click.Path(), required=True,
              help="CSV path for the section samples.")
@_with_shared
def cmd_solve(file, out_csv, grid_depth, probe_depth, limit_tol, residual_tol, threads):
    """Run the solver and export the section as CSV when solvable."""
    try:
        problem = load_problem(file, grid_depth, probe_depth, limit_tol, residual_tol, threads)
        verdict = solve(problem)
    except (ProblemFileError, EvalDomainError, ValueError) as e:
        click.echo(json.dumps({"error": str(e)}))
        sys.exit(3)
    if isinstance(verdict, Solvable):
        _write_section_csv(problem, verdict, out_csv)
        _emit(_report(problem, verdict, {"csv": out_csv}))
    else:
        _emit(_report(problem, verdict))
    sys.exit(_exit_code(verdict))


def _write_section_csv(problem: Problem, verdict: Solvable, path: str):
    from .algebra import eval_expr_many
    from .affine import dist_point_fiber

    grid = problem.grid()
    bundle = problem.bundle()
    pts = grid.points
    phi_vals, _ = eval_expr_many(problem.phi, pts)
    Fv = bundle.f_values(pts)
    vals = verdict.section.values
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = list(problem.vars) + ["phi"] + [f"Phi_{i+1}" for i in range(problem.r)]
        header += ["eq_residual", "fiber_residual"]
        w.writerow(header)
        for i in range(pts.shape[0]):
            eq_res = abs(float(Fv[i] @ vals[i]) - float(phi_vals[i]))
            fib_res = dist_point_fiber(vals[i], bundle.fiber(pts[i]))
            row = [repr(float(c)) for c in pts[i]]
            row.append(repr(float(phi_vals[i])))
            row += [repr(float(c)) for c in vals[i]]
            row += [repr(eq_res), repr(fib_res)]
            w.writerow(row)


@main.command("refine")
@click.argument("file", type=click.Path())
@click.option("--level", type=int, required=True, help="Refinement level to dump.")
@_with_shared
def cmd_refine(file, level, grid_depth, probe_depth, limit_tol, residual_tol, threads):
    """Dump per-point fiber diagnostics at the requested level."""
    try:
        problem = load_problem(file, grid_depth, probe_depth, limit_tol, residual_tol, threads)
        if level < 0 or level > 2 * problem.r + 1:
            raise ProblemFileError(f"level must be in 0..{2 * problem.r + 1}")
        grid = problem.grid()
        bundle = problem.bundle()
        if level == 0:
            sampled = sample_bundle(bundle, grid, problem.probe, problem.tolerances.rank_tol)
        else:
            sampled, _ = iterate_refine(bundle, grid, problem.probe, max_level=level,
                                        rank_tol=problem.tolerances.rank_tol,
                                        threads=problem.threads, stop_on_empty=False)
    except (ProblemFileError, EvalDomainError, ValueError) as e:
        click.echo(json.dumps({"error": str(e)}))
        sys.exit(3)
    rows = []
    for i, fiber in enumerate(sampled.fibers):
        entry = {
            "point": grid.points[i].tolist(),
            "level": sampled.level,
            "empty": fiber.empty,
            "dim": fiber.dim,
            "v": None if fiber.empty else fiber.v.tolist(),
            "taint": bool(sampled.taints[i]),
        }
        rows.append(entry)
    click.echo(json.dumps({"level": sampled.level, "fibers": rows}, sort_keys=True))
    sys.exit(0)


@main.command("whitney")
@click.argument("file", type=click.Path())
@_with_shared
def cmd_whitney(file, grid_depth, probe_depth, limit_tol, residual_tol, threads):
    """Dump the Whitney cubes for the detected lowest stratum."""
    try:
        problem = load_problem(file, grid_depth, probe_depth, limit_tol, residual_tol, threads)
        grid = problem.grid()
        bundle = problem.bundle()
        stable, _ = iterate_refine(bundle, grid, problem.probe,
                                   rank_tol=problem.tolerances.rank_tol,
                                   threads=problem.threads)
        if stable.has_empty():
            raise ProblemFileError("bundle has empty fibers; no stratification")
        strata = stratify(stable)
        e1_pts = grid.points[strata.e1_indices]
        cover = whitney_decompose((grid.box.lo, grid.box.hi), e1_pts,
                                  float(np.max(grid.cell)))
    except (ProblemFileError, EvalDomainError, ValueError) as e:
        click.echo(json.dumps({"error": str(e)}))
        sys.exit(3)
    cubes = [{
        "level": q.level,
        "index": list(q.index),
        "center": q.center.tolist(),
        "side": q.side,
        "truncated": q.truncated,
    } for q in cover.cubes]
    geo = cover_geometry_report(cover)
    click.echo(json.dumps({"e1_count": int(len(e1_pts)), "cubes": cubes,
                           "geometry": geo}, sort_keys=True))
    sys.exit(0)


if __name__ == "__main__":
    main()
