"""Structured tensor-product grids on the unit cell and the unit box.

Two mesh types cover everything the solvers need:

* ``CellGrid`` -- a uniform lattice on the periodicity cell Y = [0,1]^n whose
  opposite faces are identified, so a grid with m cells per side carries
  exactly m^n degrees of freedom.  Micro (cell) problems live here.
* ``MacroGrid`` -- a uniform lattice on the box [0,1]^n with Dirichlet nodes
  marked on the boundary.  Both the homogenized solve and the resolved
  fine-scale solve use this type (the fine grid is just a finer instance).

Grids are uniform, so interpolation and finite-difference derivative
recovery reduce to index arithmetic; everything here is pure and immutable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfDomainError


def corner_offsets(dim: int) -> np.ndarray:
    """Reference-element corner offsets, one row per local node.

    Order is fixed (last axis fastest) and shared with the Q1 basis in the
    assembly module, so local node c has reference coordinates
    ``corner_offsets(dim)[c]``.
    """
    return np.array(list(itertools.product((0, 1), repeat=dim)), dtype=int)


def _check_dim(dim):
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")


@dataclass(frozen=True)
class CellGrid:
    """Periodic uniform lattice on Y = [0,1]^n with opposite faces identified."""

    dim: int
    cells_per_side: int

    def __post_init__(self):
        _check_dim(self.dim)
        if self.cells_per_side < 2:
            raise ValueError("cell grid needs at least 2 cells per side")

    @property
    def spacing(self) -> float:
        return 1.0 / self.cells_per_side

    @property
    def ndof(self) -> int:
        return self.cells_per_side**self.dim

    @property
    def n_elements(self) -> int:
        return self.cells_per_side**self.dim

    def dof_coords(self) -> np.ndarray:
        """Coordinates of the representative nodes, shape (ndof, dim)."""
        m = self.cells_per_side
        axes = [np.arange(m) * self.spacing] * self.dim
        return _lattice_coords(axes)

    def wrap_multi_index(self, multi: np.ndarray) -> np.ndarray:
        """Map lattice multi-indices to representative DOF ids (faces folded)."""
        m = self.cells_per_side
        wrapped = np.mod(multi, m)
        return _ravel(wrapped, (m,) * self.dim)

    def element_dofs(self) -> np.ndarray:
        """Global DOF ids of each element's corners, shape (E, 2^dim).

        Corner columns follow :func:`corner_offsets`; indices on the far
        faces wrap around, which is exactly the periodic identification.
        """
        m = self.cells_per_side
        origins = _element_multi_indices(self.dim, m)
        offs = corner_offsets(self.dim)
        idx = origins[:, None, :] + offs[None, :, :]
        return self.wrap_multi_index(idx.reshape(-1, self.dim)).reshape(len(origins), -1)

    def element_origins(self) -> np.ndarray:
        return _element_multi_indices(self.dim, self.cells_per_side) * self.spacing


@dataclass(frozen=True)
class MacroGrid:
    """Uniform lattice on [0,1]^n with Dirichlet nodes on the boundary."""

    dim: int
    cells_per_side: int

    def __post_init__(self):
        _check_dim(self.dim)
        if self.cells_per_side < 2:
            raise ValueError("macro grid needs at least 2 cells per side")

    @property
    def spacing(self) -> float:
        return 1.0 / self.cells_per_side

    @property
    def nodes_per_side(self) -> int:
        return self.cells_per_side + 1

    @property
    def ndof(self) -> int:
        return self.nodes_per_side**self.dim

    @property
    def n_elements(self) -> int:
        return self.cells_per_side**self.dim

    def node_coords(self) -> np.ndarray:
        axes = [np.linspace(0.0, 1.0, self.nodes_per_side)] * self.dim
        return _lattice_coords(axes)

    def boundary_mask(self) -> np.ndarray:
        """Boolean mask over nodes: True where any coordinate index is 0 or m."""
        k = self.nodes_per_side
        grids = np.meshgrid(*[np.arange(k)] * self.dim, indexing="ij")
        mask = np.zeros((k,) * self.dim, dtype=bool)
        for g in grids:
            mask |= (g == 0) | (g == k - 1)
        return mask.reshape(-1)

    def boundary_dofs(self) -> np.ndarray:
        return np.nonzero(self.boundary_mask())[0]

    def interior_dofs(self) -> np.ndarray:
        return np.nonzero(~self.boundary_mask())[0]

    def element_dofs(self) -> np.ndarray:
        k = self.nodes_per_side
        origins = _element_multi_indices(self.dim, self.cells_per_side)
        offs = corner_offsets(self.dim)
        idx = origins[:, None, :] + offs[None, :, :]
        return _ravel(idx.reshape(-1, self.dim), (k,) * self.dim).reshape(len(origins), -1)

    def element_origins(self) -> np.ndarray:
        return _element_multi_indices(self.dim, self.cells_per_side) * self.spacing


@dataclass(frozen=True)
class ScalarField:
    """Nodal values attached to a grid (one value per representative DOF)."""

    grid: CellGrid | MacroGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.shape != (self.grid.ndof,):
            raise ValueError(
                f"field has {vals.shape} values, grid expects ({self.grid.ndof},)"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("field contains non-finite values")


def _lattice_coords(axes) -> np.ndarray:
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=-1)


def _element_multi_indices(dim, m) -> np.ndarray:
    axes = [np.arange(m)] * dim
    return _lattice_coords(axes).astype(int)


def _ravel(multi: np.ndarray, shape) -> np.ndarray:
    flat = multi[..., 0]
    for d in range(1, len(shape)):
        flat = flat * shape[d] + multi[..., d]
    return flat


def _cell_weights_and_corners(grid, points):
    """Shared bi/multilinear interpolation kernel.

    Returns (corner_ids, weights): integer array (K, 2^dim) of global DOF ids
    and matching weights summing to one per point.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != grid.dim:
        raise ValueError(f"points have dim {pts.shape[1]}, grid dim {grid.dim}")

    if isinstance(grid, CellGrid):
        m = grid.cells_per_side
        y = np.mod(pts, 1.0)
        t = y * m
        base = np.floor(t).astype(int)
        base = np.minimum(base, m - 1)  # guards t == m from rounding
        frac = t - base
        shape = (m,) * grid.dim
        wrap = True
    else:
        m = grid.cells_per_side
        tol = 1e-12
        if np.any(pts < -tol) or np.any(pts > 1.0 + tol):
            bad = pts[np.any((pts < -tol) | (pts > 1.0 + tol), axis=1)][0]
            raise OutOfDomainError(f"point {bad} outside [0,1]^{grid.dim}")
        t = np.clip(pts, 0.0, 1.0) * m
        base = np.minimum(np.floor(t).astype(int), m - 1)
        frac = t - base
        shape = (grid.nodes_per_side,) * grid.dim
        wrap = False

    offs = corner_offsets(grid.dim)
    n_corners = offs.shape[0]
    K = pts.shape[0]
    ids = np.empty((K, n_corners), dtype=int)
    wts = np.empty((K, n_corners), dtype=float)
    for c in range(n_corners):
        multi = base + offs[c]
        if wrap:
            multi = np.mod(multi, grid.cells_per_side)
        ids[:, c] = _ravel(multi, shape)
        w = np.ones(K)
        for d in range(grid.dim):
            w = w * (frac[:, d] if offs[c, d] else 1.0 - frac[:, d])
        wts[:, c] = w
    return ids, wts


def interpolate_values(grid, values: np.ndarray, points) -> np.ndarray:
    """Multilinear interpolation of nodal ``values`` at ``points`` (K, dim)."""
    ids, wts = _cell_weights_and_corners(grid, points)
    return np.sum(np.asarray(values)[ids] * wts, axis=1)


def interpolate(fld: ScalarField, point) -> float:
    """Evaluate a field at one point.

    Cell-grid fields are extended periodically (the point is reduced modulo
    one); macro-grid points must lie inside the box.
    """
    return float(interpolate_values(fld.grid, fld.values, np.atleast_2d(point))[0])


def periodic_fd_gradient(grid: CellGrid, values: np.ndarray) -> np.ndarray:
    """Nodal gradient of a cell-grid field by wrapped central differences.

    Second-order accurate everywhere (the lattice has no boundary once the
    faces are identified); used to evaluate fast-variable derivatives of
    correctors pointwise instead of through elementwise jumps.
    """
    if not isinstance(grid, CellGrid):
        raise TypeError("periodic_fd_gradient expects a cell grid")
    m = grid.cells_per_side
    arr = np.asarray(values, dtype=float).reshape((m,) * grid.dim)
    comps = [
        (np.roll(arr, -1, axis=d) - np.roll(arr, 1, axis=d)) / (2.0 * grid.spacing)
        for d in range(grid.dim)
    ]
    return np.stack([c.reshape(-1) for c in comps], axis=-1)


def fd_gradient(fld: ScalarField) -> np.ndarray:
    """Nodal gradient of a macro-grid field, shape (ndof, dim).

    Second-order central differences at interior nodes, second-order
    one-sided stencils on the boundary (exact for quadratics inside).
    """
    grid = fld.grid
    if not isinstance(grid, MacroGrid):
        raise TypeError("fd_gradient expects a macro-grid field")
    if grid.cells_per_side < 3:
        raise ValueError("fd_gradient needs at least 3 cells per side")
    k = grid.nodes_per_side
    arr = fld.values.reshape((k,) * grid.dim)
    comps = [
        np.gradient(arr, grid.spacing, axis=d, edge_order=2) for d in range(grid.dim)
    ]
    return np.stack([c.reshape(-1) for c in comps], axis=-1)


def fd_hessian(fld: ScalarField) -> np.ndarray:
    """Nodal Hessian of a macro-grid field, shape (ndof, dim, dim).

    Interior nodes use the 3-point second-difference (diagonal) and 4-point
    cross (mixed) stencils; boundary nodes copy the nearest interior value,
    which is adequate because second derivatives are only consumed away from
    the boundary layer.
    """
    grid = fld.grid
    if not isinstance(grid, MacroGrid):
        raise TypeError("fd_hessian expects a macro-grid field")
    if grid.cells_per_side < 4:
        raise ValueError("fd_hessian needs at least 4 cells per side")
    k = grid.nodes_per_side
    h = grid.spacing
    arr = fld.values.reshape((k,) * grid.dim)
    out = np.zeros((grid.dim, grid.dim) + arr.shape)

    for d in range(grid.dim):
        second = np.zeros_like(arr)
        sl_c = [slice(None)] * grid.dim
        sl_m = [slice(None)] * grid.dim
        sl_p = [slice(None)] * grid.dim
        sl_c[d], sl_m[d], sl_p[d] = slice(1, -1), slice(0, -2), slice(2, None)
        second[tuple(sl_c)] = (
            arr[tuple(sl_m)] - 2.0 * arr[tuple(sl_c)] + arr[tuple(sl_p)]
        ) / h**2
        out[d, d] = second

    if grid.dim == 2:
        cross = np.zeros_like(arr)
        cross[1:-1, 1:-1] = (
            arr[2:, 2:] - arr[2:, :-2] - arr[:-2, 2:] + arr[:-2, :-2]
        ) / (4.0 * h**2)
        out[0, 1] = cross
        out[1, 0] = cross

    # boundary values copied from the nearest interior node
    clamped = np.clip(np.arange(k), 1, k - 2)
    if grid.dim == 1:
        out = out[:, :, clamped]
    else:
        out = out[:, :, clamped[:, None], clamped[None, :]]
    return np.moveaxis(out.reshape(grid.dim, grid.dim, -1), -1, 0)
