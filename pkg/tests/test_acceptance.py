"""Acceptance suite: every shipped claim at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS/FAIL line
per criterion.  The convergence studies use the exact experiment
configurations the package documents; the oracle values are recomputed here
with independent quadrature.
"""

import json
import time

import numpy as np
import pytest
from scipy.integrate import quad

from twoscale.analysis import antiderivative_lemma_1d
from twoscale.cell_problems import (
    build_corrector_tables,
    check_translation_invariance,
    default_parameter_grid,
    effective_tensor,
    solve_first_correctors,
)
from twoscale.cli import main, run_study
from twoscale.coefficients import (
    ConstantCoefficient,
    LayeredCoefficient,
    RosselandCoefficient,
    SeparatedCoefficient,
    SmoothPeriodicCoefficient,
)
from twoscale.config import load_config
from twoscale.grids import CellGrid


def _line(criterion, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"[acceptance] criterion {criterion:>2}: {status} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


EXPERIMENT_1 = {
    "problem": {
        "dim": 1,
        "coefficient": {"family": "SMOOTH_PERIODIC", "base": 2.0, "amplitude": 1.0},
        "source": {"family": "CONSTANT", "value": 1.0},
    },
    "discretization": {"m_x": 64, "m_c": 256, "cells_per_period": 16},
    "study": {"eps": ["1/8", "1/16", "1/32", "1/64"], "beta": 0.5},
}

EXPERIMENT_ROSSELAND = {
    "problem": {
        "dim": 1,
        "coefficient": {"family": "ROSSELAND", "k_base": 2.0, "k_amplitude": 1.0, "b": 0.1},
        "source": {"family": "CONSTANT", "value": 1.0},
        "u_range": [0.0, 1.0],
    },
    "discretization": {"m_x": 64, "m_c": 256, "cells_per_period": 16},
    "nonlinear": {"damping": 0.5},
    "study": {"eps": ["1/8", "1/16", "1/32", "1/64"]},
}

EXPERIMENT_2D = {
    "problem": {
        "dim": 2,
        "coefficient": {"family": "SMOOTH_PERIODIC", "base": 2.0, "amplitude": 1.0},
        "source": {"family": "CONSTANT", "value": 1.0},
    },
    "discretization": {"m_x": 32, "m_c": 64, "cells_per_period": 8},
    "study": {"eps": ["1/4", "1/8", "1/16"]},
}


@pytest.fixture(scope="module")
def experiment_1():
    t0 = time.monotonic()
    report = run_study(load_config(base=EXPERIMENT_1))
    return report, time.monotonic() - t0


@pytest.fixture(scope="module")
def experiment_rosseland():
    t0 = time.monotonic()
    report = run_study(load_config(base=EXPERIMENT_ROSSELAND))
    return report, time.monotonic() - t0


@pytest.fixture(scope="module")
def experiment_2d():
    t0 = time.monotonic()
    report = run_study(load_config(base=EXPERIMENT_2D))
    return report, time.monotonic() - t0


def test_c01_zero_order_linf_rate(experiment_1):
    report, runtime = experiment_1
    slope = report.fits["linf_order0"].slope
    _line(1, slope >= 0.9 and runtime <= 60.0,
          f"|u_eps - u0|_inf slope {slope:.3f} (>= 0.9), runtime {runtime:.1f}s (<= 60s)")


def test_c02_energy_rate(experiment_1):
    report, _ = experiment_1
    slope = report.fits["energy_diff"].slope
    _line(2, slope >= 0.9, f"energy difference slope {slope:.3f} (>= 0.9)")


def test_c03_interior_gradient_and_flux_rates(experiment_1):
    report, _ = experiment_1
    g = report.fits["grad_sup_order1"].slope
    f = report.fits["flux_sup_order1"].slope
    _line(3, g >= 0.9 and f >= 0.9,
          f"interior grad slope {g:.3f}, flux slope {f:.3f} (both >= 0.9)")


def test_c04_h1_rate(experiment_1):
    report, _ = experiment_1
    slope = report.fits["h1_order1"].slope
    _line(4, slope >= 0.45, f"H1 first-order slope {slope:.3f} (>= 0.45)")


def test_c05_holder_rate(experiment_1):
    report, _ = experiment_1
    slope = report.fits["holder_order2"].slope
    _line(5, slope >= 0.8, f"Hoelder(0.5) order-2 slope {slope:.3f} (>= 0.8)")


def test_c06_rosseland_zero_order_rate(experiment_rosseland):
    report, runtime = experiment_rosseland
    slope = report.fits["linf_order0"].slope
    iters = report.diagnostics["fine_picard_iterations"]
    converged = all(v >= 1 for v in iters.values())  # run_study raises otherwise
    _line(6, slope >= 0.8 and converged and runtime <= 300.0,
          f"nonlinear |u_eps - u0|_inf slope {slope:.3f} (>= 0.8), "
          f"picard iterations {iters}, runtime {runtime:.1f}s (<= 300s)")


def test_c07_two_dimensional_zero_order_rate(experiment_2d):
    report, runtime = experiment_2d
    slope = report.fits["linf_order0"].slope
    _line(7, slope >= 0.8 and runtime <= 600.0,
          f"2-D |u_eps - u0|_inf slope {slope:.3f} (>= 0.8), runtime {runtime:.1f}s (<= 600s)")


def test_c08_effective_tensor_oracles():
    inv_mean, _ = quad(lambda y: 1.0 / (2.0 + np.sin(2.0 * np.pi * y)), 0.0, 1.0,
                       epsabs=1e-13)
    oracle = 1.0 / inv_mean  # equals sqrt(3)
    model = SmoothPeriodicCoefficient(1, base=2.0, amplitude=1.0)
    grid = CellGrid(1, 512)
    fields = solve_first_correctors(model, 0.5, [0.5], grid)
    a0 = effective_tensor(model, 0.5, [0.5], fields, grid)
    err_1d = abs(a0[0, 0] - oracle)

    laminate = LayeredCoefficient(2, low=1.0, high=4.0, axis=0, width=0.0)
    vals = {}
    for m in (32, 64):
        g2 = CellGrid(2, m)
        f2 = solve_first_correctors(laminate, 0.5, [0.5, 0.5], g2)
        vals[m] = effective_tensor(laminate, 0.5, [0.5, 0.5], f2, g2)
    extrap = (4.0 * vals[64] - vals[32]) / 3.0
    err_2d = np.max(np.abs(extrap - np.diag([1.6, 2.5])))

    _line(8, err_1d <= 1e-6 and err_2d <= 1e-3,
          f"|a0 - sqrt(3)| = {err_1d:.2e} (<= 1e-6) at m_c=512; "
          f"laminate extrapolation error {err_2d:.2e} (<= 1e-3)")


def _shipped_family_tables():
    for model, m_c in [
        (ConstantCoefficient(1, matrix=[[2.0]]), 32),
        (ConstantCoefficient(2, matrix=[[2.0, 0.3], [0.3, 1.5]]), 8),
        (SmoothPeriodicCoefficient(1, base=2.0, amplitude=1.0), 64),
        (SmoothPeriodicCoefficient(2, base=2.0, amplitude=1.0), 16),
        (LayeredCoefficient(1, low=1.0, high=4.0, width=0.125), 64),
        (LayeredCoefficient(2, low=1.0, high=4.0, width=0.0), 16),
        (RosselandCoefficient(1, k_base=2.0, k_amplitude=1.0, b=0.1), 64),
        (RosselandCoefficient(2, k_base=2.0, k_amplitude=1.0, b=0.1), 16),
        (SeparatedCoefficient(1, mu0=1.0, mu_u2=1.0), 64),
        (SeparatedCoefficient(2, mu0=1.0, mu_u2=1.0), 16),
    ]:
        grid = CellGrid(model.dim, m_c)
        pgrid = default_parameter_grid(model, n_u=3, n_x=3)
        table, tensors = build_corrector_tables(model, pgrid, grid)
        yield model, table, tensors


def test_c09_voigt_reuss_bounds_all_families():
    worst_voigt = np.inf
    worst_reuss = np.inf
    families = []
    for model, table, _ in _shipped_family_tables():
        worst_voigt = min(worst_voigt, table.diagnostics.min_voigt_slack)
        worst_reuss = min(worst_reuss, table.diagnostics.min_reuss_slack)
        families.append(f"{model.family}{model.dim}d")
    ok = worst_voigt >= -1e-10 and worst_reuss >= -1e-10
    _line(9, ok,
          f"mean bounds hold on {len(families)} family/dim builds; worst slack "
          f"voigt {worst_voigt:.2e}, reuss {worst_reuss:.2e} (>= -1e-10)")


def test_c10_translation_invariance():
    cg_tol = 1e-10
    model = SmoothPeriodicCoefficient(1, base=2.0, amplitude=1.0)
    grid = CellGrid(1, 64)
    zero = check_translation_invariance(model, 0.5, [0.5], [0.0], grid)
    integer = check_translation_invariance(model, 0.5, [0.5], [2.0], grid)
    aligned = check_translation_invariance(model, 0.5, [0.5], [0.5], grid)
    aligned_fine = check_translation_invariance(model, 0.5, [0.5], [3.0 / 64.0], grid)

    model2 = SmoothPeriodicCoefficient(2, base=2.0, amplitude=1.0)
    grid2 = CellGrid(2, 32)
    aligned2 = check_translation_invariance(
        model2, 0.5, [0.5, 0.5], [0.5, 0.25], grid2
    )

    ok = (
        zero.discrepancy <= 1e-12
        and integer.discrepancy <= 1e-12
        and aligned.grid_aligned and aligned.discrepancy <= 10.0 * cg_tol
        and aligned_fine.grid_aligned and aligned_fine.discrepancy <= 10.0 * cg_tol
        and aligned2.grid_aligned and aligned2.discrepancy <= 10.0 * cg_tol
    )
    _line(10, ok,
          f"discrepancies: zero {zero.discrepancy:.1e}, integer {integer.discrepancy:.1e}"
          f" (<= 1e-12); aligned {aligned.discrepancy:.1e}, "
          f"{aligned_fine.discrepancy:.1e}, 2-D {aligned2.discrepancy:.1e} (<= 1e-9)")


def test_c11_antiderivative_lemma():
    result = antiderivative_lemma_1d(
        lambda x, y: np.sin(2.0 * np.pi * y),
        [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0],
    )
    slope_ok = abs(result.fit.slope - 1.0) <= 0.05
    rel_errs = [
        abs(n - eps / (2.0 * np.pi)) / (eps / (2.0 * np.pi))
        for eps, n in zip(result.eps, result.norms)
    ]
    _line(11, slope_ok and max(rel_errs) <= 0.02,
          f"decay slope {result.fit.slope:.4f} (1 +/- 0.05), worst closed-form "
          f"deviation {max(rel_errs) * 100:.2f}% (<= 2%)")


def test_c12_compatibility_and_mean_zero(experiment_1, experiment_rosseland, experiment_2d):
    worst_defect = 0.0
    worst_mean = 0.0
    for fixture in (experiment_1, experiment_rosseland, experiment_2d):
        diag = fixture[0].diagnostics["table"]
        worst_defect = max(worst_defect, diag["max_rhs_defect"])
        worst_mean = max(worst_mean, diag["max_corrector_mean"])
    ok = worst_defect <= 1e-8 and worst_mean <= 1e-12
    _line(12, ok,
          f"worst rhs constant defect {worst_defect:.2e} (<= 1e-8), worst "
          f"corrector mean {worst_mean:.2e} (<= 1e-12)")


def test_c13_thread_count_determinism(tmp_path):
    cfg_path = tmp_path / "exp1.json"
    cfg_path.write_text(json.dumps(EXPERIMENT_1))
    outputs = {}
    for threads in (1, 8):
        out = tmp_path / f"threads{threads}"
        code = main([
            "study", "--config", str(cfg_path), "--out", str(out),
            "--threads", str(threads),
        ])
        assert code == 0
        outputs[threads] = (
            (out / "report.csv").read_bytes(),
            (out / "report.json").read_bytes(),
        )
    ok = outputs[1] == outputs[8]
    _line(13, ok, "reports bitwise identical for --threads 1 and --threads 8")
