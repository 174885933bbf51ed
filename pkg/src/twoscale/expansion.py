"""Second-order two-scale reconstruction and the resolved reference solve.

The reconstruction evaluates, at every fine node x, the slow fields (macro
solution and its finite-difference derivatives) and the fast corrector
fields at y = x / eps mod 1, and stacks them into

    u0(x)  +  eps * N_l(y) d_l u0  +  eps^2 * (M_kl d2_kl u0 + Q_k d_k u0 + R)

The fine grid always resolves the period: its spacing is eps / P with an
integer P >= 8, so the fast coordinate of a node is the exact rational
(i mod P) / P -- computed from indices, not by floating division, which
keeps corrector evaluation bias-free on lattices that share the cell grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cell_problems import CorrectorTable, corrector_field_names
from .errors import ConfigurationError
from .fem import SolverOptions, assemble_load, assemble_stiffness, default_quadrature
from .grids import (
    MacroGrid,
    ScalarField,
    fd_gradient,
    fd_hessian,
    interpolate_values,
)
from .macro import PicardOptions, _initial_values, picard_solve


def cells_per_period(fine_grid: MacroGrid, eps: float) -> int:
    """Fine cells per coefficient period; errors unless it is an integer >= 8."""
    p = fine_grid.cells_per_side * eps
    p_int = int(round(p))
    if abs(p - p_int) > 1e-9 or p_int < 8:
        raise ConfigurationError(
            f"fine grid ({fine_grid.cells_per_side} cells) does not resolve "
            f"eps={eps:g} with an integer period count >= 8 (got {p:g})"
        )
    return p_int


def fine_grid_for(eps: float, periods: int, dim: int) -> MacroGrid:
    """Fine grid with ``periods`` cells per eps-period (spacing eps/periods)."""
    if not 0.0 < eps < 1.0:
        raise ConfigurationError("eps must lie in (0, 1)")
    k = 1.0 / eps
    if abs(k - round(k)) > 1e-9:
        raise ConfigurationError(f"eps must be the reciprocal of an integer, got {eps}")
    grid = MacroGrid(dim=dim, cells_per_side=int(round(k)) * periods)
    cells_per_period(grid, eps)
    return grid


def fast_coordinates(fine_grid: MacroGrid, eps: float) -> np.ndarray:
    """y = x / eps mod 1 at every fine node, exact on the node lattice."""
    p = cells_per_period(fine_grid, eps)
    k = fine_grid.nodes_per_side
    idx_axes = [np.arange(k)] * fine_grid.dim
    grids = np.meshgrid(*idx_axes, indexing="ij")
    cols = [(g.reshape(-1) % p) / p for g in grids]
    return np.stack(cols, axis=-1)


@dataclass
class ExpansionField:
    """Layered two-scale reconstruction on a fine grid."""

    eps: float
    fine_grid: MacroGrid
    order: int
    u0: np.ndarray = field(repr=False)
    u1: np.ndarray = field(repr=False)
    u2: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.order not in (0, 1, 2):
            raise ValueError("truncation order must be 0, 1, or 2")
        cells_per_period(self.fine_grid, self.eps)

    def truncated(self, order: int | None = None) -> np.ndarray:
        order = self.order if order is None else order
        out = self.u0.copy()
        if order >= 1:
            out += self.eps * self.u1
        if order >= 2:
            out += self.eps**2 * self.u2
        return out

    @property
    def tilde(self) -> np.ndarray:
        return self.truncated()


@dataclass
class RemainderField:
    """Difference between the resolved solution and a reconstruction."""

    values: np.ndarray = field(repr=False)
    u_eps: ScalarField = field(repr=False)
    expansion: ExpansionField = field(repr=False)
    boundary_trace_max: float = 0.0


def reconstruct(
    u0_field: ScalarField,
    table: CorrectorTable,
    eps: float,
    fine_grid: MacroGrid,
    order: int = 2,
) -> ExpansionField:
    """Evaluate the two-scale layers at every fine node.

    Slow quantities come from interpolating the macro solution and its
    finite-difference gradient/Hessian; fast quantities from the corrector
    table interpolated in (u, x) and within the cell at y = x/eps mod 1.
    """
    macro_grid = u0_field.grid
    if not isinstance(macro_grid, MacroGrid):
        raise TypeError("u0 must live on a macro grid")
    x = fine_grid.node_coords()
    y = fast_coordinates(fine_grid, eps)
    dim = fine_grid.dim

    u0_f = interpolate_values(macro_grid, u0_field.values, x)
    grad_nodal = fd_gradient(u0_field)  # (macro ndof, dim)
    grad_f = np.stack(
        [interpolate_values(macro_grid, grad_nodal[:, d], x) for d in range(dim)],
        axis=-1,
    )
    hess_nodal = fd_hessian(u0_field)  # (macro ndof, dim, dim)
    hess_f = {}
    for k in range(dim):
        for l in range(k, dim):
            hess_f[(k, l)] = interpolate_values(
                macro_grid, hess_nodal[:, k, l], x
            )

    vals = table.interp_at(corrector_field_names(dim), u0_f, x, y)

    u1 = np.zeros_like(u0_f)
    for m in range(dim):
        u1 += vals[f"first_{m}"] * grad_f[:, m]

    u2 = vals["source"].copy()
    for k in range(dim):
        for l in range(k, dim):
            fac = 1.0 if k == l else 2.0
            u2 += fac * vals[f"hess_{k}{l}"] * hess_f[(k, l)]
    for k in range(dim):
        slow_k = vals[f"slow0_{k}"].copy()
        for m in range(dim):
            slow_k += vals[f"slowg_{k}{m}"] * grad_f[:, m]
        u2 += slow_k * grad_f[:, k]

    return ExpansionField(eps=eps, fine_grid=fine_grid, order=order, u0=u0_f, u1=u1, u2=u2)


def reconstruction_gradient(
    u0_field: ScalarField,
    table: CorrectorTable,
    eps: float,
    points: np.ndarray,
) -> np.ndarray:
    """Pointwise gradient of the first-order reconstruction u0 + eps*u1.

    Evaluated from the chain rule rather than by differencing nodal values:
    the fast derivative of the correctors is recovered on the periodic cell
    and the slow derivatives come from the macro finite-difference recovery,
    so no O(h) interpolant kinks or difference-quotient consistency errors
    of the oscillating layer leak into gradient-level error measurements.

        grad_k = d_k u0 + dN_l/dy_k d_l u0
               + eps * [ (dN_l/du d_k u0 + dN_l/dx_k) d_l u0 + N_l d2_kl u0 ]
    """
    macro_grid = u0_field.grid
    points = np.atleast_2d(np.asarray(points, dtype=float))
    dim = macro_grid.dim
    y = np.mod(points / eps, 1.0)

    u0_at = interpolate_values(macro_grid, u0_field.values, points)
    grad_nodal = fd_gradient(u0_field)
    g = np.stack(
        [interpolate_values(macro_grid, grad_nodal[:, d], points) for d in range(dim)],
        axis=-1,
    )
    hess_nodal = fd_hessian(u0_field)
    h = np.stack(
        [
            np.stack(
                [
                    interpolate_values(macro_grid, hess_nodal[:, k, l], points)
                    for l in range(dim)
                ],
                axis=-1,
            )
            for k in range(dim)
        ],
        axis=1,
    )  # (K, dim, dim)

    out = g.copy()
    for l in range(dim):
        name = f"first_{l}"
        n_l = table.interp_stack_at(table.fields[name], u0_at, points, y)
        dn_dy = table.gradient_stack(name)
        dn_du = table.interp_stack_at(
            table.parameter_derivative_stack(name, 0), u0_at, points, y
        )
        for k in range(dim):
            dy_k = table.interp_stack_at(dn_dy[:, :, k], u0_at, points, y)
            dx_k = table.interp_stack_at(
                table.parameter_derivative_stack(name, 1 + k), u0_at, points, y
            )
            out[:, k] += dy_k * g[:, l]
            out[:, k] += eps * ((dn_du * g[:, k] + dx_k) * g[:, l] + n_l * h[:, k, l])
    return out


def solve_fine(
    model,
    eps: float,
    fine_grid: MacroGrid,
    opts: PicardOptions = PicardOptions(),
    quad=None,
    cg_opts: SolverOptions = SolverOptions(),
    max_dofs: int = 2_000_000,
):
    """Resolved reference solve with oscillating data a(u, x, x/eps).

    Same fixed-point contract as the homogenized solve; refuses fine grids
    beyond ``max_dofs`` (refine eps or lower the period resolution instead
    of swapping).
    """
    cells_per_period(fine_grid, eps)
    if fine_grid.ndof > max_dofs:
        raise ConfigurationError(
            f"fine grid has {fine_grid.ndof} DOFs > cap {max_dofs}; "
            "reduce cells_per_period or use larger eps"
        )
    quad = quad or default_quadrature(fine_grid.dim)

    def wrap_fast(pts):
        return np.mod(pts / eps, 1.0)

    def assemble_at(u_values):
        def coeff_fn(pts):
            u_at = interpolate_values(fine_grid, u_values, pts)
            return model.eval_a(u_at, pts, wrap_fast(pts))

        def source_fn(pts):
            u_at = interpolate_values(fine_grid, u_values, pts)
            return model.eval_f(u_at, pts, wrap_fast(pts))

        mat = assemble_stiffness(fine_grid, coeff_fn, quad)
        rhs = assemble_load(fine_grid, quad, scalar_fn=source_fn)
        return mat, rhs

    def frozen_solve():
        from .fem import SparseSystem, solve_dirichlet

        u_mid = 0.5 * (model.u_lo + model.u_hi)
        mat, rhs = assemble_at(np.full(fine_grid.ndof, u_mid))
        return solve_dirichlet(SparseSystem(mat, rhs), fine_grid, 0.0, cg_opts)

    start = _initial_values(opts, fine_grid, frozen_solve)
    values, result = picard_solve(assemble_at, fine_grid, opts, cg_opts, start)
    return ScalarField(fine_grid, values), result


def remainder(u_eps: ScalarField, expansion: ExpansionField) -> RemainderField:
    """Nodal difference u_eps - tilde(u), with its boundary trace recorded.

    On the boundary the resolved solution vanishes, so the trace is exactly
    minus the reconstruction's boundary values -- an O(eps) quantity by
    construction.
    """
    if u_eps.grid != expansion.fine_grid:
        raise ValueError("remainder requires matching fine grids")
    values = u_eps.values - expansion.tilde
    bnd = u_eps.grid.boundary_dofs()
    trace = float(np.max(np.abs(values[bnd]))) if len(bnd) else 0.0
    return RemainderField(
        values=values, u_eps=u_eps, expansion=expansion, boundary_trace_max=trace
    )
