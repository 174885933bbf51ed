"""Damped Picard solve of the nonlinear homogenized problem.

The homogenized operator evaluates the effective tensor at the previous
iterate, so the natural linearization is the frozen-coefficient fixed point
u_next = (1 - theta) u + theta * LinSolve(a0(u, x), F(u, x)); no tensor
derivative is needed.  The initial guess is one extra linear solve with the
tensor frozen at the midpoint of the admissible range, which starts the
iteration basin-adjacent for the shipped problems.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .cell_problems import EffectiveTensorTable, default_cell_quadrature
from .errors import NonConvergenceError
from .fem import (
    SolverOptions,
    SparseSystem,
    assemble_load,
    assemble_stiffness,
    default_quadrature,
    element_quad_points,
    solve_dirichlet,
)
from .grids import CellGrid, MacroGrid, ScalarField, interpolate_values


@dataclass(frozen=True)
class PicardOptions:
    """Fixed-point controls: sup-norm increment tolerance, budget, damping."""

    tol: float = 1e-10
    max_iter: int = 100
    damping: float = 1.0
    initial: object = None  # None -> frozen-midpoint solve; scalar or nodal array

    def __post_init__(self):
        if self.tol <= 0.0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("need at least one iteration")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class PicardResult:
    iterations: int
    increments: list = field(default_factory=list)
    converged: bool = False

    @property
    def final_increment(self) -> float:
        return self.increments[-1] if self.increments else 0.0


def homogenized_source(model, u, x, cell_grid: CellGrid, quad=None) -> float:
    """Cell average of the source at a frozen macro state."""
    quad = quad or default_cell_quadrature(cell_grid.dim)
    pts = element_quad_points(cell_grid, quad)
    f_q = np.asarray(
        model.eval_f(u, x, pts.reshape(-1, cell_grid.dim)), dtype=float
    ).reshape(pts.shape[0], pts.shape[1])
    return float(np.einsum("eq,q->", f_q, quad.weights) * cell_grid.spacing**cell_grid.dim)


def picard_solve(assemble_fn, grid: MacroGrid, opts: PicardOptions,
                 cg_opts: SolverOptions, initial_values: np.ndarray):
    """Shared fixed-point driver: ``assemble_fn(u_values) -> (matrix, rhs)``.

    Returns the first iterate whose sup-norm increment drops below the
    tolerance, together with the increment history.
    """
    u_prev = np.asarray(initial_values, dtype=float).copy()
    result = PicardResult(iterations=0)
    for it in range(1, opts.max_iter + 1):
        mat, rhs = assemble_fn(u_prev)
        u_lin = solve_dirichlet(SparseSystem(mat, rhs), grid, 0.0, cg_opts)
        u_new = (1.0 - opts.damping) * u_prev + opts.damping * u_lin
        inc = float(np.max(np.abs(u_new - u_prev)))
        result.increments.append(inc)
        result.iterations = it
        u_prev = u_new
        if inc <= opts.tol:
            result.converged = True
            break
    if not result.converged:
        raise NonConvergenceError(
            f"Picard iteration did not converge in {opts.max_iter} steps "
            f"(last increment {result.final_increment:.3e}); consider smaller damping",
            residual=result.final_increment,
            iterations=result.iterations,
            history=result.increments,
        )
    tail = result.increments[1:]
    if any(b > a for a, b in zip(tail, tail[1:])):
        warnings.warn("Picard increments not monotone after the first iteration")
    return u_prev, result


def _initial_values(opts: PicardOptions, grid: MacroGrid, frozen_solve):
    if opts.initial is None:
        return frozen_solve()
    if np.isscalar(opts.initial):
        vals = np.full(grid.ndof, float(opts.initial))
        vals[grid.boundary_dofs()] = 0.0
        return vals
    vals = np.asarray(opts.initial, dtype=float)
    if vals.shape != (grid.ndof,):
        raise ValueError("initial guess length does not match the macro grid")
    return vals.copy()


def solve_homogenized(
    tensor_table: EffectiveTensorTable,
    model,
    macro_grid: MacroGrid,
    opts: PicardOptions = PicardOptions(),
    quad=None,
    cg_opts: SolverOptions = SolverOptions(),
):
    """Solve the homogenized problem with homogeneous Dirichlet data.

    The effective tensor and the cell-averaged source are interpolated from
    their parameter tables at every quadrature point of the current iterate.
    Emits a warning when the converged solution leaves the admissible range.
    """
    quad = quad or default_quadrature(macro_grid.dim)

    def assemble_at(u_values):
        def coeff_fn(pts):
            u_at = interpolate_values(macro_grid, u_values, pts)
            return tensor_table.interp(u_at, pts)

        def source_fn(pts):
            u_at = interpolate_values(macro_grid, u_values, pts)
            return tensor_table.interp_source(u_at, pts)

        mat = assemble_stiffness(macro_grid, coeff_fn, quad)
        rhs = assemble_load(macro_grid, quad, scalar_fn=source_fn)
        return mat, rhs

    def frozen_solve():
        u_mid = 0.5 * (model.u_lo + model.u_hi)
        mat, rhs = assemble_at(np.full(macro_grid.ndof, u_mid))
        return solve_dirichlet(SparseSystem(mat, rhs), macro_grid, 0.0, cg_opts)

    start = _initial_values(opts, macro_grid, frozen_solve)
    values, result = picard_solve(assemble_at, macro_grid, opts, cg_opts, start)

    interior = values[macro_grid.interior_dofs()]
    eps_range = 1e-12 * (model.u_hi - model.u_lo)
    if interior.size and (
        interior.min() <= model.u_lo - eps_range or interior.max() >= model.u_hi + eps_range
    ):
        warnings.warn(
            f"homogenized solution leaves the admissible range "
            f"[{model.u_lo}, {model.u_hi}]: [{interior.min():.6g}, {interior.max():.6g}]"
        )
    return ScalarField(macro_grid, values), result


def manufactured_residual(
    tensor_table: EffectiveTensorTable,
    candidate: ScalarField,
    source: ScalarField,
    quad=None,
    cg_opts: SolverOptions = SolverOptions(),
) -> float:
    """Euclidean norm of the interior weak residual at a candidate field.

    The operator is assembled with the tensor frozen at the candidate, the
    load comes from the supplied source field, and the residual is measured
    on the free (interior) equations only.
    """
    grid = candidate.grid
    if source.grid != grid:
        raise ValueError("candidate and source live on different grids")
    quad = quad or default_quadrature(grid.dim)

    def coeff_fn(pts):
        u_at = interpolate_values(grid, candidate.values, pts)
        return tensor_table.interp(u_at, pts)

    mat = assemble_stiffness(grid, coeff_fn, quad)
    rhs = assemble_load(
        grid, quad, scalar_fn=lambda pts: interpolate_values(grid, source.values, pts)
    )
    res = mat @ candidate.values - rhs
    return float(np.linalg.norm(res[grid.interior_dofs()]))
