"""Decide whether a continuous function lies in the continuous-coefficient
ideal generated by polynomials f_1..f_r on a box, with numerical certificates.

The pipeline: build the affine constraint bundle of the equation
``sum_i w_i f_i(x) = phi(x)``, iterate its Glaeser refinement until it
stabilizes, certify emptiness (Unsolvable) or construct a continuous section
(Solvable) via a Whitney-cube stratified recursion or Michael iteration.
"""

from .algebra import Poly, Expr, parse_poly, parse_expr, eval_poly, eval_expr
from .affine import (
    LinearSubspace,
    AffineFiber,
    ConstraintSystem,
    solve_constraints,
    dist_point_fiber,
    least_norm_point,
    intersect,
    cluster_normals,
)
from .limits import LimitConfig, LimitResult, estimate_limit
from .bundle import (
    Grid,
    Box,
    EquationBundle,
    SampledBundle,
    ProbeConfig,
    equation_fiber,
    refine_at,
    refine,
    iterate_refine,
    bundle_norm,
)
from .whitney import DyadicCube, WhitneyCover, whitney_decompose, pou_eval
from .section import (
    Strata,
    SampledSection,
    stratify,
    build_section,
    michael_section,
    section_residual,
)
from .solver import (
    Problem,
    Verdict,
    Solvable,
    Unsolvable,
    Indeterminate,
    solve,
    zero_limit_test,
    pointwise_test,
    wronskian_test,
    finite_set_test,
)

__version__ = "0.1.0"

__all__ = [
    "Poly", "Expr", "parse_poly", "parse_expr", "eval_poly", "eval_expr",
    "LinearSubspace", "AffineFiber", "ConstraintSystem", "solve_constraints",
    "dist_point_fiber", "least_norm_point", "intersect", "cluster_normals",
    "LimitConfig", "LimitResult", "estimate_limit",
    "Grid", "Box", "EquationBundle", "SampledBundle", "ProbeConfig",
    "equation_fiber", "refine_at", "refine", "iterate_refine", "bundle_norm",
    "DyadicCube", "WhitneyCover", "whitney_decompose", "pou_eval",
    "Strata", "SampledSection", "stratify", "build_section",
    "michael_section", "section_residual",
    "Problem", "Verdict", "Solvable", "Unsolvable", "Indeterminate",
    "solve", "zero_limit_test", "pointwise_test", "wronskian_test",
    "finite_set_test",
]
