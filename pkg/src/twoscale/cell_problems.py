"""Periodic cell problems, the effective tensor, and corrector tables.

For a frozen macro state (u, x) the microstructure enters through four
families of zero-mean periodic fields on the unit cell:

* first-order correctors  (one per direction) -- drive the oscillating part
  of the solution gradient and define the effective tensor;
* hessian correctors      (one per direction pair) -- multiply second
  derivatives of the macro solution in the second-order reconstruction;
* slow-variation correctors (one per direction) -- capture the drift of the
  cell data along the macro variables, including the nonlinear coupling
  through the u-derivative of the coefficient;
* a source corrector      -- driven by the mean-free part of the source.

Because the macro state is continuous, all of them are tabulated over a
small (u, x) parameter lattice and interpolated multilinearly.  The slow
correctors are affine in the macro gradient; the table stores the constant
piece and one field per gradient component so any macro gradient can be
recombined exactly at evaluation time.

The default cell quadrature is one midpoint per direction in 1-D and a
2x2 Gauss rule in 2-D.  Midpoint sampling matters in 1-D: the assembled
effective coefficient becomes a harmonic mean over point samples, i.e. a
periodic midpoint rule, which converges superalgebraically for smooth
periodic data, whereas two-point Gauss leaves an O(h^2) element-averaging
bias.  In 2-D a one-point rule would leave the bilinear hourglass mode
unresolved, so it is not an option there.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientModel
from .errors import ConfigurationError, PropertyViolationError
from .fem import (
    QuadratureRule,
    SolverOptions,
    SparseSystem,
    assemble_load_from_samples,
    assemble_stiffness,
    element_quad_points,
    field_gradients_at_quad,
    field_values_at_quad,
    rhs_constant_defect,
    solve_periodic_zero_mean,
)
from .grids import CellGrid, _cell_weights_and_corners


def default_cell_quadrature(dim: int, n_points: int | None = None) -> QuadratureRule:
    from .fem import default_quadrature

    return default_quadrature(dim, n_points)


# ---------------------------------------------------------------------------
# parameter grid and tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParameterGrid:
    """Sample lattice for the slow arguments (u, x) of the cell data."""

    u_samples: np.ndarray
    x_axes: tuple

    def __post_init__(self):
        u = np.asarray(self.u_samples, dtype=float)
        object.__setattr__(self, "u_samples", u)
        object.__setattr__(
            self, "x_axes", tuple(np.asarray(a, dtype=float) for a in self.x_axes)
        )
        if np.any(np.diff(u) <= 0.0):
            raise ConfigurationError("u_samples must be strictly increasing")
        for ax in self.x_axes:
            if np.any(np.diff(ax) <= 0.0):
                raise ConfigurationError("x sample axes must be strictly increasing")

    @property
    def dim(self) -> int:
        return len(self.x_axes)

    @property
    def axes(self) -> tuple:
        return (self.u_samples,) + self.x_axes

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def indices(self):
        return itertools.product(*[range(s) for s in self.shape])

    def ravel(self, multi) -> int:
        return int(np.ravel_multi_index(multi, self.shape))

    def coords(self, multi):
        u = float(self.u_samples[multi[0]])
        x = np.array([ax[i] for ax, i in zip(self.x_axes, multi[1:])])
        return u, x

    def index_of(self, u: float, x, tol: float = 1e-9):
        """Multi-index of an exact sample; raises when (u, x) is off-lattice."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        multi = []
        for ax, q in zip(self.axes, (u, *x)):
            hits = np.nonzero(np.abs(ax - q) <= tol)[0]
            if len(hits) == 0:
                raise ConfigurationError(f"value {q} is not a parameter sample")
            multi.append(int(hits[0]))
        return tuple(multi)


def default_parameter_grid(
    model: CoefficientModel,
    n_u: int = 5,
    n_x: int = 5,
    u_span=None,
) -> ParameterGrid:
    """Parameter lattice sized by what the model actually depends on.

    ``u_span`` restricts the u samples to the subrange the macro solution is
    expected to visit (still inside the admissible range); sampling only the
    visited range keeps the interpolation error in the effective tensor far
    below the scales being measured.
    """
    u_dep = model.u_dependent or model.source.u_dependent
    if u_span is None:
        lo, hi = model.u_lo, model.u_hi
    else:
        lo = max(model.u_lo, float(u_span[0]))
        hi = min(model.u_hi, float(u_span[1]))
        if not lo < hi:
            lo, hi = model.u_lo, model.u_hi
    if u_dep:
        u_samples = np.linspace(lo, hi, n_u)
    else:
        u_samples = np.array([0.5 * (lo + hi)])
    if model.x_dependent:
        x_axes = tuple(np.linspace(0.0, 1.0, n_x) for _ in range(model.dim))
    else:
        x_axes = tuple(np.array([0.5]) for _ in range(model.dim))
    return ParameterGrid(u_samples=u_samples, x_axes=x_axes)


def _axis_bracket(samples: np.ndarray, q: np.ndarray):
    """Per-query lower index and upper weight for 1-D linear interpolation."""
    if len(samples) == 1:
        zeros = np.zeros(len(q), dtype=int)
        return zeros, np.zeros(len(q))
    qc = np.clip(q, samples[0], samples[-1])
    i0 = np.clip(np.searchsorted(samples, qc, side="right") - 1, 0, len(samples) - 2)
    w1 = (qc - samples[i0]) / (samples[i0 + 1] - samples[i0])
    return i0, w1


def _param_corner_iter(pgrid: ParameterGrid, u: np.ndarray, x: np.ndarray):
    """Yield (flat_sample_index_array, weight_array) over parameter corners."""
    queries = [np.asarray(u, dtype=float)] + [x[:, d] for d in range(pgrid.dim)]
    brackets = [_axis_bracket(ax, q) for ax, q in zip(pgrid.axes, queries)]
    shape = pgrid.shape
    n_axes = len(shape)
    for combo in itertools.product((0, 1), repeat=n_axes):
        weight = np.ones(len(queries[0]))
        flat = np.zeros(len(queries[0]), dtype=int)
        skip = False
        for d, hi in enumerate(combo):
            i0, w1 = brackets[d]
            if hi and shape[d] == 1:
                skip = True
                break
            idx = i0 + hi
            weight = weight * (w1 if hi else 1.0 - w1)
            flat = flat * shape[d] + idx
        if skip or not np.any(weight):
            continue
        yield flat, weight


@dataclass
class BuildDiagnostics:
    """Aggregated solve health across a table build."""

    max_corrector_mean: float = 0.0
    max_rhs_defect: float = 0.0
    max_tensor_asymmetry: float = 0.0
    min_voigt_slack: float = np.inf
    min_reuss_slack: float = np.inf

    def absorb(self, other: "BuildDiagnostics"):
        self.max_corrector_mean = max(self.max_corrector_mean, other.max_corrector_mean)
        self.max_rhs_defect = max(self.max_rhs_defect, other.max_rhs_defect)
        self.max_tensor_asymmetry = max(
            self.max_tensor_asymmetry, other.max_tensor_asymmetry
        )
        self.min_voigt_slack = min(self.min_voigt_slack, other.min_voigt_slack)
        self.min_reuss_slack = min(self.min_reuss_slack, other.min_reuss_slack)

    def as_dict(self) -> dict:
        return {
            "max_corrector_mean": self.max_corrector_mean,
            "max_rhs_defect": self.max_rhs_defect,
            "max_tensor_asymmetry": self.max_tensor_asymmetry,
            "min_voigt_slack": self.min_voigt_slack,
            "min_reuss_slack": self.min_reuss_slack,
        }


def corrector_field_names(dim: int) -> list:
    names = [f"first_{m}" for m in range(dim)]
    names += [f"hess_{k}{l}" for k in range(dim) for l in range(k, dim)]
    names += [f"slow0_{k}" for k in range(dim)]
    names += [f"slowg_{k}{m}" for k in range(dim) for m in range(dim)]
    names.append("source")
    return names


@dataclass
class CorrectorSample:
    """Nodal corrector fields at (or interpolated between) parameter samples."""

    grid: CellGrid
    fields: dict

    def first(self, m: int) -> np.ndarray:
        return self.fields[f"first_{m}"]

    def hessian(self, k: int, l: int) -> np.ndarray:
        k, l = min(k, l), max(k, l)
        return self.fields[f"hess_{k}{l}"]

    def slow(self, k: int, grad_u0) -> np.ndarray:
        grad = np.asarray(grad_u0, dtype=float)
        out = self.fields[f"slow0_{k}"].copy()
        for m in range(self.grid.dim):
            out += grad[m] * self.fields[f"slowg_{k}{m}"]
        return out

    @property
    def source(self) -> np.ndarray:
        return self.fields["source"]


@dataclass
class CorrectorTable:
    """All corrector fields tabulated over the parameter lattice."""

    cell_grid: CellGrid
    param_grid: ParameterGrid
    fields: dict = field(repr=False)  # name -> (n_samples, ndof)
    diagnostics: BuildDiagnostics = field(default_factory=BuildDiagnostics)
    _derived: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.cell_grid.dim

    def gradient_stack(self, name: str) -> np.ndarray:
        """(n_samples, ndof, dim) of recovered fast-variable nodal gradients."""
        key = ("grad", name)
        if key not in self._derived:
            from .grids import periodic_fd_gradient

            stack = self.fields[name]
            self._derived[key] = np.stack(
                [periodic_fd_gradient(self.cell_grid, row) for row in stack], axis=0
            )
        return self._derived[key]

    def parameter_derivative_stack(self, name: str, axis: int) -> np.ndarray:
        """(n_samples, ndof) of d(field)/d(parameter axis) at every sample."""
        key = ("param", name, axis)
        if key not in self._derived:
            stack = self.fields[name]
            out = np.zeros_like(stack)
            samples_axis = self.param_grid.axes[axis]
            for flat, multi in enumerate(self.param_grid.indices()):
                for j, wgt in _fd_stencil(samples_axis, multi[axis]):
                    idx = list(multi)
                    idx[axis] = j
                    out[flat] += wgt * stack[self.param_grid.ravel(tuple(idx))]
            self._derived[key] = out
        return self._derived[key]

    def interp_stack_at(
        self, stack: np.ndarray, u: np.ndarray, x: np.ndarray, y: np.ndarray
    ) -> np.ndarray:
        """Interpolate one (n_samples, ndof) stack at many (u, x, y) triples."""
        ids, wts = _cell_weights_and_corners(self.cell_grid, y)
        out = np.zeros(len(ids))
        for flat, weight in _param_corner_iter(self.param_grid, u, x):
            acc = np.zeros(len(ids))
            for c in range(ids.shape[1]):
                acc += wts[:, c] * stack[flat, ids[:, c]]
            out += weight * acc
        return out

    def nodal(self, name: str, multi) -> np.ndarray:
        return self.fields[name][self.param_grid.ravel(multi)]

    def lookup(self, u: float, x) -> CorrectorSample:
        """Multilinear blend of the stored nodal fields at one (u, x)."""
        x_arr = np.atleast_2d(np.asarray(x, dtype=float))
        blended = {name: np.zeros(self.cell_grid.ndof) for name in self.fields}
        for flat, weight in _param_corner_iter(
            self.param_grid, np.array([u]), x_arr
        ):
            w = float(weight[0])
            s = int(flat[0])
            if w == 0.0:
                continue
            for name, stack in self.fields.items():
                blended[name] += w * stack[s]
        return CorrectorSample(grid=self.cell_grid, fields=blended)

    def interp_at(self, names, u: np.ndarray, x: np.ndarray, y: np.ndarray) -> dict:
        """Evaluate chosen fields at many (u, x, y) triples at once.

        Interpolates multilinearly both across the parameter lattice and
        within the cell; the cost per field is a handful of vectorized
        gathers.  Returns name -> (K,).
        """
        ids, wts = _cell_weights_and_corners(self.cell_grid, y)
        out = {name: np.zeros(len(ids)) for name in names}
        for flat, weight in _param_corner_iter(self.param_grid, u, x):
            for name in names:
                stack = self.fields[name]
                acc = np.zeros(len(ids))
                for c in range(ids.shape[1]):
                    acc += wts[:, c] * stack[flat, ids[:, c]]
                out[name] += weight * acc
        return out


@dataclass
class EffectiveTensorTable:
    """Effective coefficient matrices (and source means) over the lattice."""

    param_grid: ParameterGrid
    values: np.ndarray = field(repr=False)  # (n_samples, dim, dim)
    source_means: np.ndarray = field(repr=False)  # (n_samples,)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def at(self, multi) -> np.ndarray:
        return self.values[self.param_grid.ravel(multi)]

    def interp(self, u, x) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((len(u), self.dim, self.dim))
        for flat, weight in _param_corner_iter(self.param_grid, u, x):
            out += weight[:, None, None] * self.values[flat]
        return out

    def interp_source(self, u, x) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(len(u))
        for flat, weight in _param_corner_iter(self.param_grid, u, x):
            out += weight * self.source_means[flat]
        return out

    def ellipticity(self) -> tuple:
        from .coefficients import _sym2_eigs

        eigs = _sym2_eigs(self.values)
        return float(eigs.min()), float(eigs.max())


# ---------------------------------------------------------------------------
# single-sample solves
# ---------------------------------------------------------------------------


def _cell_operator(model, u, x, grid, quad):
    return assemble_stiffness(grid, lambda pts: model.eval_a(u, x, pts), quad)


def _coeff_at_quad(model, u, x, grid, quad):
    pts = element_quad_points(grid, quad)
    flat = pts.reshape(-1, grid.dim)
    a = model.eval_a(u, x, flat)
    return pts, a.reshape(pts.shape[0], pts.shape[1], grid.dim, grid.dim)


def solve_first_correctors(
    model, u, x, grid: CellGrid, quad=None, opts=SolverOptions(), _shift=None,
    diagnostics: BuildDiagnostics | None = None,
):
    """First-order correctors, one zero-mean periodic field per direction.

    Direction m solves the periodic problem whose flux load is minus the
    m-th coefficient column, so that the corrected gradient e_m + grad(N_m)
    carries a divergence-free flux.
    """
    quad = quad or default_cell_quadrature(grid.dim)

    def wrap(pts):
        if _shift is None:
            return pts
        t = pts + _shift
        return np.where(t >= 1.0, t - 1.0, t)

    mat = assemble_stiffness(grid, lambda pts: model.eval_a(u, x, wrap(pts)), quad)
    pts = element_quad_points(grid, quad)
    flat = wrap(pts.reshape(-1, grid.dim))
    a_q = model.eval_a(u, x, flat).reshape(pts.shape[0], pts.shape[1], grid.dim, grid.dim)

    out = []
    for m in range(grid.dim):
        rhs = assemble_load_from_samples(grid, quad, flux_samples=-a_q[:, :, m, :])
        if diagnostics is not None:
            diagnostics.max_rhs_defect = max(
                diagnostics.max_rhs_defect, rhs_constant_defect(rhs, abs(mat).max())
            )
        sol = solve_periodic_zero_mean(SparseSystem(mat, rhs), opts)
        if diagnostics is not None:
            diagnostics.max_corrector_mean = max(
                diagnostics.max_corrector_mean, abs(float(sol.mean()))
            )
        out.append(sol)
    return out


def _voigt_reuss_directions(dim):
    dirs = [np.eye(dim)[i] for i in range(dim)]
    if dim == 2:
        dirs.append(np.array([1.0, 1.0]) / np.sqrt(2.0))
        dirs.append(np.array([1.0, -1.0]) / np.sqrt(2.0))
    return dirs


def effective_tensor(
    model, u, x, first_fields, grid: CellGrid, quad=None,
    diagnostics: BuildDiagnostics | None = None,
) -> np.ndarray:
    """Cell average of the corrected flux: a0[:, j] = int A (e_j + grad N_j).

    The result is symmetrized (the deviation is a solve-quality diagnostic)
    and checked against the arithmetic/harmonic-mean bounds in a few probe
    directions; a violation means a broken corrector solve, not a rounding
    issue, so it raises.
    """
    quad = quad or default_cell_quadrature(grid.dim)
    pts, a_q = _coeff_at_quad(model, u, x, grid, quad)
    w = quad.weights
    measure = grid.spacing**grid.dim
    dim = grid.dim

    a0 = np.zeros((dim, dim))
    for j in range(dim):
        grad_n = field_gradients_at_quad(grid, first_fields[j], quad)  # (E,Q,n)
        corrected = grad_n.copy()
        corrected[:, :, j] += 1.0
        flux = np.einsum("eqij,eqj->eqi", a_q, corrected)
        a0[:, j] = np.einsum("eqi,q->i", flux, w) * measure

    asym = float(np.max(np.abs(a0 - a0.T)))
    a0 = 0.5 * (a0 + a0.T)
    if diagnostics is not None:
        diagnostics.max_tensor_asymmetry = max(diagnostics.max_tensor_asymmetry, asym)

    tol = 1e-10 * max(1.0, float(np.abs(a_q).max()))
    for xi in _voigt_reuss_directions(dim):
        quad_form = np.einsum("i,eqij,j->eq", xi, a_q, xi)
        voigt = float(np.einsum("eq,q->", quad_form, w) * measure)
        reuss = 1.0 / float(np.einsum("eq,q->", 1.0 / quad_form, w) * measure)
        val = float(xi @ a0 @ xi)
        if diagnostics is not None:
            diagnostics.min_voigt_slack = min(diagnostics.min_voigt_slack, voigt - val)
            diagnostics.min_reuss_slack = min(diagnostics.min_reuss_slack, val - reuss)
        if val > voigt + tol or val < reuss - tol:
            raise PropertyViolationError(
                f"effective tensor escapes mean bounds in direction {xi}: "
                f"{reuss:.12g} <= {val:.12g} <= {voigt:.12g} fails"
            )

    from .coefficients import _sym2_eigs

    eigs = _sym2_eigs(a0[None])
    slack = 1e-6 * (model.ellipticity_upper - model.ellipticity_lower + 1.0)
    if eigs.min() < model.ellipticity_lower - slack or eigs.max() > model.ellipticity_upper + slack:
        raise PropertyViolationError(
            f"effective tensor eigenvalues {eigs.ravel()} escape "
            f"[{model.ellipticity_lower}, {model.ellipticity_upper}]"
        )
    return a0


def solve_hessian_correctors(
    model, u, x, first_fields, grid: CellGrid, quad=None, opts=SolverOptions(),
    diagnostics: BuildDiagnostics | None = None,
) -> dict:
    """Second-order correctors contracted against the macro Hessian.

    The raw problem is not symmetric in its two indices, but the pair only
    ever multiplies the symmetric Hessian, so the (k,l)/(l,k) solutions are
    averaged and stored once per unordered pair.
    """
    quad = quad or default_cell_quadrature(grid.dim)
    pts, a_q = _coeff_at_quad(model, u, x, grid, quad)
    w = quad.weights
    measure = grid.spacing**grid.dim
    dim = grid.dim
    mat = _cell_operator(model, u, x, grid, quad)

    n_at_q = [field_values_at_quad(grid, f, quad) for f in first_fields]
    gradn_at_q = [field_gradients_at_quad(grid, f, quad) for f in first_fields]

    raw = {}
    for k in range(dim):
        for l in range(dim):
            scal = a_q[:, :, k, l] + np.einsum(
                "eqm,eqm->eq", a_q[:, :, k, :], gradn_at_q[l]
            )
            scal = scal - np.einsum("eq,q->", scal, w) * measure
            flux = -n_at_q[l][:, :, None] * a_q[:, :, k, :]
            rhs = assemble_load_from_samples(grid, quad, scalar_samples=scal, flux_samples=flux)
            if diagnostics is not None:
                diagnostics.max_rhs_defect = max(
                    diagnostics.max_rhs_defect, rhs_constant_defect(rhs, abs(mat).max())
                )
            raw[(k, l)] = solve_periodic_zero_mean(SparseSystem(mat, rhs), opts)

    out = {}
    for k in range(dim):
        for l in range(k, dim):
            sym = 0.5 * (raw[(k, l)] + raw[(l, k)])
            sym -= sym.mean()
            if diagnostics is not None:
                diagnostics.max_corrector_mean = max(
                    diagnostics.max_corrector_mean, abs(float(sym.mean()))
                )
            out[(k, l)] = sym
    return out


def solve_source_corrector(
    model, u, x, grid: CellGrid, quad=None, opts=SolverOptions(),
    diagnostics: BuildDiagnostics | None = None,
):
    """Zero-mean periodic field driven by the mean-free part of the source.

    Returns (field, source_mean); the mean is reused as the homogenized
    right-hand side at this parameter sample.
    """
    quad = quad or default_cell_quadrature(grid.dim)
    pts = element_quad_points(grid, quad)
    f_q = np.asarray(
        model.eval_f(u, x, pts.reshape(-1, grid.dim)), dtype=float
    ).reshape(pts.shape[0], pts.shape[1])
    measure = grid.spacing**grid.dim
    fbar = float(np.einsum("eq,q->", f_q, quad.weights) * measure)
    mat = _cell_operator(model, u, x, grid, quad)
    rhs = assemble_load_from_samples(grid, quad, scalar_samples=f_q - fbar)
    if diagnostics is not None:
        diagnostics.max_rhs_defect = max(
            diagnostics.max_rhs_defect, rhs_constant_defect(rhs, abs(mat).max())
        )
    sol = solve_periodic_zero_mean(SparseSystem(mat, rhs), opts)
    if diagnostics is not None:
        diagnostics.max_corrector_mean = max(
            diagnostics.max_corrector_mean, abs(float(sol.mean()))
        )
    return sol, fbar


def _fd_stencil(samples: np.ndarray, i: int):
    """Second-order d/ds stencil on a uniform sample axis: [(index, weight)]."""
    n = len(samples)
    if n == 1:
        return []
    if n < 3:
        raise ConfigurationError("parameter axis needs 1 or >= 3 samples for FD")
    h = samples[1] - samples[0]
    if i == 0:
        return [(0, -1.5 / h), (1, 2.0 / h), (2, -0.5 / h)]
    if i == n - 1:
        return [(n - 3, 0.5 / h), (n - 2, -2.0 / h), (n - 1, 1.5 / h)]
    return [(i - 1, -0.5 / h), (i + 1, 0.5 / h)]


def _h_load(model, u, x, first_k, k, grid, quad):
    """Loads from the mean-free corrected flux h_ik = a_ik + (A grad N_k)_i.

    Returns an (dim, ndof) array, one scalar-source load per direction i.
    Subtracting the quadrature mean keeps each load orthogonal to constants
    to rounding.
    """
    pts, a_q = _coeff_at_quad(model, u, x, grid, quad)
    gradn = field_gradients_at_quad(grid, first_k, quad)
    measure = grid.spacing**grid.dim
    out = np.zeros((grid.dim, grid.ndof))
    for i in range(grid.dim):
        h_iq = a_q[:, :, i, k] + np.einsum("eqm,eqm->eq", a_q[:, :, i, :], gradn)
        h_iq = h_iq - np.einsum("eq,q->", h_iq, quad.weights) * measure
        out[i] = assemble_load_from_samples(grid, quad, scalar_samples=h_iq)
    return out


def _slow_rhs_pieces(model, pgrid, multi, first_stack, h_load_stack, grid, quad):
    """Per-sample ingredients for the slow-corrector right-hand sides.

    ``first_stack``: (n_samples, dim, ndof) first correctors at every sample;
    ``h_load_stack``: (n_samples, dim, dim, ndof) mean-free flux loads.
    Returns (mat, base_loads, grad_loads, flux_builder) where the rhs for a
    macro gradient g is base + sum_m g_m * grad_piece_m per direction k.
    """
    u, x = pgrid.coords(multi)
    dim = grid.dim
    quad = quad or default_cell_quadrature(dim)
    flat_center = pgrid.ravel(multi)
    mat = _cell_operator(model, u, x, grid, quad)
    pts, a_q = _coeff_at_quad(model, u, x, grid, quad)
    flat_pts = pts.reshape(-1, dim)
    da_q = model.eval_da_du(u, x, flat_pts).reshape(
        pts.shape[0], pts.shape[1], dim, dim
    )

    u_sten = _fd_stencil(pgrid.u_samples, multi[0])
    x_stens = [
        _fd_stencil(pgrid.x_axes[d], multi[1 + d]) for d in range(dim)
    ]

    def stacked_fd(stack, axis, stencil):
        out = np.zeros(stack.shape[1:])
        for j, wgt in stencil:
            idx = list(multi)
            idx[axis] = j
            out += wgt * stack[pgrid.ravel(tuple(idx))]
        return out

    dn_du = stacked_fd(first_stack, 0, u_sten)  # (dim, ndof)
    dn_dx = [stacked_fd(first_stack, 1 + d, x_stens[d]) for d in range(dim)]
    dload_dx = [stacked_fd(h_load_stack, 1 + d, x_stens[d]) for d in range(dim)]
    dload_du = stacked_fd(h_load_stack, 0, u_sten)  # (dim, dim, ndof)

    n_at_q = [
        field_values_at_quad(grid, first_stack[flat_center, m], quad) for m in range(dim)
    ]
    gradn_at_q = [
        field_gradients_at_quad(grid, first_stack[flat_center, m], quad)
        for m in range(dim)
    ]
    dn_du_at_q = [field_values_at_quad(grid, dn_du[m], quad) for m in range(dim)]
    dn_dx_at_q = [
        [field_values_at_quad(grid, dn_dx[d][m], quad) for m in range(dim)]
        for d in range(dim)
    ]

    def rhs_for(k, grad_u0):
        grad = np.asarray(grad_u0, dtype=float)
        # total macro derivative of the corrector: explicit part + chain rule
        v = np.stack(
            [
                dn_dx_at_q[l][k] + grad[l] * dn_du_at_q[k]
                for l in range(dim)
            ],
            axis=-1,
        )  # (E,Q,dim)
        u1_q = sum(grad[m] * n_at_q[m] for m in range(dim))
        a1_q = u1_q[:, :, None, None] * da_q
        flux = -(
            np.einsum("eqil,eql->eqi", a_q, v)
            + a1_q[:, :, :, k]
            + np.einsum("eqil,eql->eqi", a1_q, gradn_at_q[k])
        )
        rhs = assemble_load_from_samples(grid, quad, flux_samples=flux)
        for i in range(dim):
            rhs += dload_dx[i][i, k] + grad[i] * dload_du[i, k]
        return rhs

    return mat, rhs_for


def _negligible_load(rhs: np.ndarray, grid: CellGrid, model) -> bool:
    """Loads far below the physical load scale are zero, not data.

    Slow-corrector right-hand sides are finite differences of fields that
    are only known to solver tolerance; when the analytic load vanishes
    (parameter-independent correctors) the numeric residue is solver noise
    amplified by the sample spacing and must not be solved against or fed
    to the compatibility check.
    """
    reference = grid.spacing**grid.dim * np.sqrt(grid.ndof) * model.ellipticity_upper
    return float(np.linalg.norm(rhs)) <= 1e-6 * reference


def solve_slow_correctors(
    model,
    u,
    x,
    table: CorrectorTable,
    grad_u0,
    grid: CellGrid,
    quad=None,
    opts=SolverOptions(),
    diagnostics: BuildDiagnostics | None = None,
):
    """Slow-variation correctors at one parameter sample and macro gradient.

    Requires the first correctors at neighboring samples (finite differences
    along the parameter axes supply the macro derivatives of the cell data).
    """
    quad = quad or default_cell_quadrature(grid.dim)
    pgrid = table.param_grid
    multi = pgrid.index_of(u, x)
    dim = grid.dim
    if (model.u_dependent or model.source.u_dependent) and len(pgrid.u_samples) < 3:
        raise ConfigurationError("u-dependent model needs >= 3 u samples for FD")
    if model.x_dependent and any(len(ax) < 3 for ax in pgrid.x_axes):
        raise ConfigurationError("x-dependent model needs >= 3 x samples per axis")

    n_samples = pgrid.size
    first_stack = np.stack(
        [table.fields[f"first_{m}"] for m in range(dim)], axis=1
    )  # (S, dim, ndof)

    h_load_stack = np.zeros((n_samples, dim, dim, grid.ndof))
    needed = {pgrid.ravel(multi)}
    for axis in range(1 + dim):
        samples_axis = pgrid.axes[axis]
        for j, _ in _fd_stencil(samples_axis, multi[axis]):
            idx = list(multi)
            idx[axis] = j
            needed.add(pgrid.ravel(tuple(idx)))
    for flat in needed:
        m_idx = np.unravel_index(flat, pgrid.shape)
        uu, xx = pgrid.coords(m_idx)
        for k in range(dim):
            h_load_stack[flat, :, k, :] = _h_load(
                model, uu, xx, first_stack[flat, k], k, grid, quad
            )

    mat, rhs_for = _slow_rhs_pieces(
        model, pgrid, multi, first_stack, h_load_stack, grid, quad
    )
    out = []
    for k in range(dim):
        rhs = rhs_for(k, grad_u0)
        if _negligible_load(rhs, grid, model):
            out.append(np.zeros(grid.ndof))
            continue
        if diagnostics is not None:
            diagnostics.max_rhs_defect = max(
                diagnostics.max_rhs_defect, rhs_constant_defect(rhs, abs(mat).max())
            )
        sol = solve_periodic_zero_mean(SparseSystem(mat, rhs), opts)
        if diagnostics is not None:
            diagnostics.max_corrector_mean = max(
                diagnostics.max_corrector_mean, abs(float(sol.mean()))
            )
        out.append(sol)
    return out


# ---------------------------------------------------------------------------
# table build
# ---------------------------------------------------------------------------


def build_corrector_tables(
    model: CoefficientModel,
    pgrid: ParameterGrid,
    grid: CellGrid,
    quad: QuadratureRule | None = None,
    opts: SolverOptions = SolverOptions(),
    threads: int = 1,
):
    """Solve every cell problem at every parameter sample.

    Sample solves are independent and written to disjoint slots, so the
    result is bitwise identical for any thread count.  Returns the corrector
    table and the effective-tensor table (which also carries the cell mean
    of the source per sample).
    """
    dim = grid.dim
    quad = quad or default_cell_quadrature(dim)
    u_dep = model.u_dependent or model.source.u_dependent
    if u_dep and len(pgrid.u_samples) < 3:
        raise ConfigurationError(
            "u-dependent model needs at least 3 u samples (got "
            f"{len(pgrid.u_samples)})"
        )
    if not u_dep and len(pgrid.u_samples) != 1:
        raise ConfigurationError("u-independent model must use a single u sample")
    if model.x_dependent and any(len(ax) < 3 for ax in pgrid.x_axes):
        raise ConfigurationError("x-dependent model needs >= 3 x samples per axis")
    if not model.x_dependent and any(len(ax) != 1 for ax in pgrid.x_axes):
        raise ConfigurationError("x-independent model must use single x samples")
    if pgrid.dim != dim:
        raise ConfigurationError("parameter grid dimension mismatch")

    n_samples = pgrid.size
    multis = list(pgrid.indices())

    def sample_pass(multi):
        diag = BuildDiagnostics()
        u, x = pgrid.coords(multi)
        try:
            first = solve_first_correctors(
                model, u, x, grid, quad, opts, diagnostics=diag
            )
            a0 = effective_tensor(model, u, x, first, grid, quad, diagnostics=diag)
            hess = solve_hessian_correctors(
                model, u, x, first, grid, quad, opts, diagnostics=diag
            )
            source, fbar = solve_source_corrector(
                model, u, x, grid, quad, opts, diagnostics=diag
            )
            h_loads = np.stack(
                [_h_load(model, u, x, first[k], k, grid, quad) for k in range(dim)],
                axis=1,
            )  # (dim_i, dim_k, ndof)
        except Exception as exc:  # annotate with the failing sample
            raise type(exc)(f"sample (u={u:.6g}, x={x}) failed: {exc}") from exc
        return dict(
            first=first, a0=a0, hess=hess, source=source, fbar=fbar,
            h_loads=h_loads, diag=diag,
        )

    results = [None] * n_samples
    if threads > 1 and n_samples > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for flat, res in enumerate(pool.map(sample_pass, multis)):
                results[flat] = res
    else:
        for flat, multi in enumerate(multis):
            results[flat] = sample_pass(multi)

    ndof = grid.ndof
    fields = {name: np.zeros((n_samples, ndof)) for name in corrector_field_names(dim)}
    tensor_vals = np.zeros((n_samples, dim, dim))
    source_means = np.zeros(n_samples)
    diagnostics = BuildDiagnostics()
    for flat, res in enumerate(results):
        for m in range(dim):
            fields[f"first_{m}"][flat] = res["first"][m]
        for (k, l), v in res["hess"].items():
            fields[f"hess_{k}{l}"][flat] = v
        fields["source"][flat] = res["source"]
        tensor_vals[flat] = res["a0"]
        source_means[flat] = res["fbar"]
        diagnostics.absorb(res["diag"])

    # slow correctors: affine in the macro gradient, solved per unit context
    first_stack = np.stack(
        [fields[f"first_{m}"] for m in range(dim)], axis=1
    )
    h_load_stack = np.stack([res["h_loads"] for res in results], axis=0)

    def slow_pass(multi):
        diag = BuildDiagnostics()
        mat, rhs_for = _slow_rhs_pieces(
            model, pgrid, multi, first_stack, h_load_stack, grid, quad
        )
        zero = np.zeros(dim)
        base = []
        grad_pieces = []
        for k in range(dim):
            def solve_context(grad):
                rhs = rhs_for(k, grad)
                if _negligible_load(rhs, grid, model):
                    return np.zeros(grid.ndof)
                diag.max_rhs_defect = max(
                    diag.max_rhs_defect, rhs_constant_defect(rhs, abs(mat).max())
                )
                return solve_periodic_zero_mean(SparseSystem(mat, rhs), opts)

            q0 = solve_context(zero)
            base.append(q0)
            pieces = []
            for m in range(dim):
                qm = solve_context(np.eye(dim)[m])
                pieces.append(qm - q0)
            grad_pieces.append(pieces)
        return base, grad_pieces, diag

    slow_results = [None] * n_samples
    if threads > 1 and n_samples > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for flat, res in enumerate(pool.map(slow_pass, multis)):
                slow_results[flat] = res
    else:
        for flat, multi in enumerate(multis):
            slow_results[flat] = slow_pass(multi)

    for flat, (base, grad_pieces, diag) in enumerate(slow_results):
        for k in range(dim):
            fields[f"slow0_{k}"][flat] = base[k]
            for m in range(dim):
                fields[f"slowg_{k}{m}"][flat] = grad_pieces[k][m]
        diagnostics.absorb(diag)

    for name, stack in fields.items():
        mean = float(np.max(np.abs(stack.mean(axis=1))))
        diagnostics.max_corrector_mean = max(diagnostics.max_corrector_mean, mean)

    table = CorrectorTable(
        cell_grid=grid, param_grid=pgrid, fields=fields, diagnostics=diagnostics
    )
    tensors = EffectiveTensorTable(
        param_grid=pgrid, values=tensor_vals, source_means=source_means
    )
    return table, tensors


# ---------------------------------------------------------------------------
# translation invariance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TranslationReport:
    shift: np.ndarray
    reduced_shift: np.ndarray
    grid_aligned: bool
    discrepancy: float
    tolerance_hint: float


def check_translation_invariance(
    model, u, x, shift, grid: CellGrid, quad=None, opts=SolverOptions()
) -> TranslationReport:
    """Solve the cell problems on a shifted cell and compare.

    Shifting the cell is the same as shifting all periodic data, and the
    shifted solution must coincide with the periodic extension of the
    unshifted one.  For shifts that are whole multiples of the grid spacing
    the discrete problems are exact relabelings of each other, so the
    discrepancy is solver noise; other shifts incur O(h) interpolation
    error, reflected in the tolerance hint.
    """
    quad = quad or default_cell_quadrature(grid.dim)
    z = np.atleast_1d(np.asarray(shift, dtype=float))
    if z.shape != (grid.dim,):
        raise ValueError(f"shift must have {grid.dim} components")
    z_red = z - np.floor(z)

    reference = solve_first_correctors(model, u, x, grid, quad, opts)
    if np.all(z_red == 0.0):
        shifted = solve_first_correctors(model, u, x, grid, quad, opts)
        disc = max(
            float(np.max(np.abs(s - r))) for s, r in zip(shifted, reference)
        )
        return TranslationReport(z, z_red, True, disc, 10.0 * opts.tol)

    shifted = solve_first_correctors(
        model, u, x, grid, quad, opts, _shift=z_red
    )
    query = grid.dof_coords() + z_red
    query = np.where(query >= 1.0, query - 1.0, query)
    from .grids import interpolate_values

    disc = 0.0
    for s, r in zip(shifted, reference):
        ref_shifted = interpolate_values(grid, r, query)
        ref_shifted = ref_shifted - ref_shifted.mean()
        disc = max(disc, float(np.max(np.abs(s - ref_shifted))))

    steps = z_red * grid.cells_per_side
    aligned = bool(np.all(np.abs(steps - np.round(steps)) < 1e-12))
    hint = 10.0 * opts.tol if aligned else grid.spacing
    return TranslationReport(z, z_red, aligned, disc, hint)
