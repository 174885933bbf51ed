"""Command-line entry points and experiment orchestration.

Subcommands share one JSON config schema:

* ``cell``        solve the cell problems, emit corrector tables + tensor
* ``homogenize``  solve the homogenized problem, emit the macro solution
* ``reference``   resolved fine-scale solve for the first eps in the list
* ``study``       full pipeline: tables -> macro -> per-eps fine solves,
                  reconstructions, error norms, fitted rates
* ``lemma``       1-D oscillatory-antiderivative decay check
* ``invariance``  shifted-cell translation-invariance check

Reports contain no wall-clock or thread-count data, so identical configs
produce bitwise-identical report files at any parallelism level (timings go
to the MANIFEST, which is bookkeeping, not a result).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import traceback
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import (
    REPORT_COLUMNS,
    ErrorReport,
    antiderivative_lemma_1d,
    energy_difference,
    fit_rate,
    holder_seminorm,
    interior_gradient_sup,
    norm_h1,
    norm_linf,
)
from .cell_problems import (
    CorrectorTable,
    build_corrector_tables,
    check_translation_invariance,
    corrector_field_names,
    default_cell_quadrature,
    default_parameter_grid,
    effective_tensor,
    solve_first_correctors,
)
from .coefficients import RosselandCoefficient
from .config import ExperimentConfig, load_config
from .errors import (
    ConfigurationError,
    NonConvergenceError,
    PropertyViolationError,
)
from .expansion import fine_grid_for, reconstruct, reconstruction_gradient, remainder, solve_fine
from .fem import SolverOptions, SparseSystem, assemble_load, assemble_stiffness, gauss_rule, solve_dirichlet
from .grids import CellGrid, MacroGrid, ScalarField, fd_gradient, fd_hessian
from .macro import PicardOptions, homogenized_source, solve_homogenized


@dataclass
class ProblemSetup:
    cfg: ExperimentConfig
    model: object
    cell_grid: CellGrid
    macro_grid: MacroGrid
    cell_quad: object
    solve_quad_points: int
    cg_opts: SolverOptions
    picard_opts: PicardOptions


def build_setup(cfg: ExperimentConfig) -> ProblemSetup:
    model = cfg.build_model()
    disc = cfg.raw["discretization"]
    nl = cfg.raw["nonlinear"]
    explicit = disc["quad_points"]
    if explicit is not None:
        solve_points = int(explicit)
        cell_quad = gauss_rule(int(explicit), cfg.dim)
    else:
        cell_quad = default_cell_quadrature(cfg.dim)
        if cfg.dim == 1:
            solve_points = 1  # periodic midpoint superconvergence
        else:
            # cubic-in-u coefficients composed with the iterate earn a point
            solve_points = (
                3 if isinstance(model, RosselandCoefficient) and model.u_dependent else 2
            )
    return ProblemSetup(
        cfg=cfg,
        model=model,
        cell_grid=CellGrid(cfg.dim, disc["m_c"]),
        macro_grid=MacroGrid(cfg.dim, disc["m_x"]),
        cell_quad=cell_quad,
        solve_quad_points=solve_points,
        cg_opts=SolverOptions(),
        picard_opts=PicardOptions(
            tol=nl["tol"], max_iter=nl["max_iter"], damping=nl["damping"]
        ),
    )


def estimate_u_span(setup: ProblemSetup):
    """Range the macro solution will visit, from frozen linear solves.

    One solve each with the tensor frozen at the bottom, middle, and top of
    the admissible range; the hull of the three solutions (padded) brackets
    the nonlinear solution for the monotone-in-u families shipped here.
    Tables sampled only over the visited range keep the tensor interpolation
    error orders of magnitude below the eps signal being measured.
    """
    model = setup.model
    if not (model.u_dependent or model.source.u_dependent):
        return None
    x_c = np.full(model.dim, 0.5)
    quad = gauss_rule(2, setup.macro_grid.dim)
    lo, hi = np.inf, -np.inf
    for u_frozen in (model.u_lo, 0.5 * (model.u_lo + model.u_hi), model.u_hi):
        first = solve_first_correctors(
            model, u_frozen, x_c, setup.cell_grid, setup.cell_quad, setup.cg_opts
        )
        a0 = effective_tensor(
            model, u_frozen, x_c, first, setup.cell_grid, setup.cell_quad
        )
        fbar = homogenized_source(model, u_frozen, x_c, setup.cell_grid, setup.cell_quad)
        mat = assemble_stiffness(
            setup.macro_grid,
            lambda pts: np.broadcast_to(a0, (len(pts), model.dim, model.dim)),
            quad,
        )
        rhs = assemble_load(
            setup.macro_grid, quad, scalar_fn=lambda pts: np.full(len(pts), fbar)
        )
        provisional = solve_dirichlet(
            SparseSystem(mat, rhs), setup.macro_grid, 0.0, setup.cg_opts
        )
        lo = min(lo, float(provisional.min()))
        hi = max(hi, float(provisional.max()))
    pad = 0.25 * max(hi - lo, 1e-6)
    return (max(model.u_lo, lo - pad), min(model.u_hi, hi + pad))


def build_tables(setup: ProblemSetup, threads: int = 1, u_span=None):
    disc = setup.cfg.raw["discretization"]
    pgrid = default_parameter_grid(
        setup.model,
        n_u=disc["table_u_samples"],
        n_x=disc["table_x_samples"],
        u_span=u_span if u_span is not None else estimate_u_span(setup),
    )
    return build_corrector_tables(
        setup.model, pgrid, setup.cell_grid, setup.cell_quad, setup.cg_opts, threads
    )


def tables_and_macro_solution(setup: ProblemSetup, threads: int = 1):
    """Corrector tables plus the homogenized solve, span-checked.

    If the converged macro solution escapes the u range the tables sampled
    (possible when the tensor varies strongly in u and the frozen estimates
    bracket poorly), the tables are rebuilt once over the visited range and
    the solve repeated; clamped lookups would otherwise bias the tensor and
    leave a non-decaying error against the resolved solution.
    """
    table, tensors = build_tables(setup, threads)
    macro_quad = gauss_rule(setup.solve_quad_points, setup.cfg.dim)
    u0, pic = solve_homogenized(
        tensors, setup.model, setup.macro_grid, setup.picard_opts, macro_quad,
        setup.cg_opts,
    )
    u_samples = table.param_grid.u_samples
    if len(u_samples) > 1:
        span_lo, span_hi = float(u_samples[0]), float(u_samples[-1])
        width = span_hi - span_lo
        vals_lo, vals_hi = float(u0.values.min()), float(u0.values.max())
        if vals_lo < span_lo - 0.02 * width or vals_hi > span_hi + 0.02 * width:
            pad = 0.25 * max(vals_hi - vals_lo, 1e-6)
            span = (
                max(setup.model.u_lo, min(vals_lo, span_lo) - pad),
                min(setup.model.u_hi, max(vals_hi, span_hi) + pad),
            )
            table, tensors = build_tables(setup, threads, u_span=span)
            u0, pic = solve_homogenized(
                tensors, setup.model, setup.macro_grid, setup.picard_opts,
                macro_quad, setup.cg_opts,
            )
            u_samples = table.param_grid.u_samples
            if (
                u0.values.min() < u_samples[0] - 0.02 * width
                or u0.values.max() > u_samples[-1] + 0.02 * width
            ):
                warnings.warn(
                    "macro solution still escapes the sampled u range after "
                    "rebuilding the tables; tensor lookups are clamped"
                )
    return table, tensors, u0, pic


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------


def _fmt(value: float) -> str:
    return repr(float(value))


def write_field_csv(path: Path, grid, values, header_lines=()):
    coords = grid.dof_coords() if isinstance(grid, CellGrid) else grid.node_coords()
    cols = [f"x{d}" for d in range(grid.dim)] + ["value"]
    lines = [f"# {line}" for line in header_lines]
    lines.append(",".join(cols))
    for row, val in zip(coords, np.asarray(values)):
        lines.append(",".join(_fmt(c) for c in row) + "," + _fmt(val))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _study_property_checks(table: CorrectorTable) -> dict:
    diag = table.diagnostics
    return {
        "corrector_mean<=1e-12": diag.max_corrector_mean <= 1e-12,
        "rhs_defect<=1e-8": diag.max_rhs_defect <= 1e-8,
        "tensor_asymmetry<=1e-8": diag.max_tensor_asymmetry <= 1e-8,
        "voigt_slack>=-1e-10": diag.min_voigt_slack >= -1e-10,
        "reuss_slack>=-1e-10": diag.min_reuss_slack >= -1e-10,
    }


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def run_study(
    cfg: ExperimentConfig,
    threads: int = 1,
    out_dir: Path | None = None,
    check: bool = False,
):
    """Full pipeline; returns the ErrorReport (artifacts written if out_dir)."""
    stages = []
    outputs = []
    t_start = time.time()

    def finish_manifest(status, failed_stage=None, error=None):
        if out_dir is None:
            return
        payload = {
            "status": status,
            "stages": stages,
            "outputs": [str(p.name) for p in outputs],
            "runtime_seconds": time.time() - t_start,
            "threads": threads,
        }
        if failed_stage is not None:
            payload["failed_stage"] = failed_stage
            payload["error"] = str(error)
        write_json(out_dir / "MANIFEST.json", payload)

    stage = "setup"
    try:
        setup = build_setup(cfg)
        study = cfg.raw["study"]
        out_cfg = cfg.raw["output"]
        seed = int(out_cfg["seed"])
        formats = set(out_cfg["formats"])
        box = study["interior_box"]
        beta = float(study["beta"])
        orders = sorted(set(study["orders"]))
        disc = cfg.raw["discretization"]
        stages.append(stage)

        stage = "cell_tables_and_macro_solve"
        table, tensors, u0, pic0 = tables_and_macro_solution(setup, threads)
        grad0_nodal = fd_gradient(u0)
        hess0_max = float(np.max(np.abs(fd_hessian(u0))))
        stages.append(stage)

        if out_dir is not None:
            outputs.append(write_field_csv(out_dir / "u0.csv", u0.grid, u0.values))

        rows = []
        picard_iters = {}
        for eps in cfg.eps_list:
            stage = f"fine_solve eps=1/{round(1 / eps)}"
            fine_grid = fine_grid_for(eps, disc["cells_per_period"], cfg.dim)
            u_eps, pic = solve_fine(
                setup.model,
                eps,
                fine_grid,
                setup.picard_opts,
                gauss_rule(setup.solve_quad_points, cfg.dim),
                setup.cg_opts,
                disc["max_fine_dofs"],
            )
            picard_iters[f"1/{round(1 / eps)}"] = pic.iterations
            stages.append(stage)

            stage = f"errors eps=1/{round(1 / eps)}"
            exp = reconstruct(u0, table, eps, fine_grid, order=2)
            rem2 = remainder(u_eps, exp)
            z0 = ScalarField(fine_grid, u_eps.values - exp.truncated(0))
            z1 = ScalarField(fine_grid, u_eps.values - exp.truncated(1))
            z2 = ScalarField(fine_grid, rem2.values)

            def recon_grad1(points, _eps=eps):
                return reconstruction_gradient(u0, table, _eps, points)

            row = {
                "eps": eps,
                "linf_order0": norm_linf(z0),
                "linf_order1": norm_linf(z1),
                "linf_order2": norm_linf(z2),
                "energy_diff": energy_difference(
                    setup.model, u_eps, eps, tensors, u0,
                    fine_quad=gauss_rule(setup.solve_quad_points, cfg.dim),
                ),
                "h1_order1": norm_h1(z1),
                "grad_sup_order1": interior_gradient_sup(
                    u_eps, box, base_gradient=recon_grad1
                ),
                "flux_sup_order1": interior_gradient_sup(
                    u_eps, box, flux_mode=True, model=setup.model, eps=eps,
                    state=u_eps, base_gradient=recon_grad1,
                ),
                "holder_order2": holder_seminorm(z2, box, beta, seed=seed),
            }
            rows.append(row)
            if out_dir is not None:
                tag = f"1over{round(1 / eps)}"
                outputs.append(
                    write_field_csv(out_dir / f"u_eps_{tag}.csv", fine_grid, u_eps.values)
                )
                for order in orders:
                    outputs.append(
                        write_field_csv(
                            out_dir / f"reconstruction_order{order}_{tag}.csv",
                            fine_grid,
                            exp.truncated(order),
                        )
                    )
                outputs.append(
                    write_field_csv(out_dir / f"remainder_{tag}.csv", fine_grid, rem2.values)
                )
            stages.append(stage)

        stage = "rate_fit"
        # interpolating the macro solution to fine nodes leaves an
        # eps-independent value floor ~ h_x^2 |D^2 u0| / 8; the energy
        # evaluator avoids that floor (recovered macro gradient), so its
        # threshold is solver noise at the energy scale
        value_floor = max(
            10.0 * setup.cg_opts.tol * max(1.0, norm_linf(u0)),
            0.5 * setup.macro_grid.spacing**2 * hess0_max,
        )
        energy_scale = tensors.ellipticity()[1] * max(
            float(np.max(np.abs(grad0_nodal))) ** 2, 1e-12
        )
        floors = {col: value_floor for col in REPORT_COLUMNS[1:]}
        floors["energy_diff"] = 1e3 * setup.cg_opts.tol * max(energy_scale, 1e-9)
        fits = {}
        for col in REPORT_COLUMNS[1:]:
            pairs = [(row["eps"], row[col]) for row in rows if row[col] > floors[col]]
            # fewer than three resolvable values means the column is
            # discretization noise and its slope carries no information
            fits[col] = fit_rate(pairs) if len(pairs) >= 3 else None
        stages.append(stage)

        report = ErrorReport(
            rows=rows,
            fits=fits,
            seed=seed,
            config=cfg.effective(),
            diagnostics={
                "table": table.diagnostics.as_dict(),
                "noise_floor": floors,
                "macro_picard_iterations": pic0.iterations,
                "fine_picard_iterations": picard_iters,
                "tensor_ellipticity": list(tensors.ellipticity()),
            },
        )

        stage = "write_report"
        if out_dir is not None:
            if "csv" in formats:
                path = out_dir / "report.csv"
                path.write_text(report.to_csv_text())
                outputs.append(path)
            if "json" in formats:
                outputs.append(write_json(out_dir / "report.json", report.to_json_dict()))
        stages.append(stage)

        if check:
            stage = "property_checks"
            checks = _study_property_checks(table)
            failed = [name for name, ok in checks.items() if not ok]
            if failed:
                raise PropertyViolationError(f"acceptance properties violated: {failed}")
            stages.append(stage)

        finish_manifest("ok")
        return report
    except Exception as exc:
        finish_manifest("failed", failed_stage=stage, error=exc)
        raise


def run_cell(cfg: ExperimentConfig, threads: int, out_dir: Path):
    setup = build_setup(cfg)
    table, tensors = build_tables(setup, threads)
    pgrid = table.param_grid
    index = {"fields": {}, "samples": [], "grid": {
        "dim": cfg.dim, "cells_per_side": setup.cell_grid.cells_per_side,
    }}
    for flat, multi in enumerate(pgrid.indices()):
        u, x = pgrid.coords(multi)
        index["samples"].append({"index": flat, "u": u, "x": list(x)})
        for name in corrector_field_names(cfg.dim):
            fname = f"{name}_s{flat:03d}.csv"
            write_field_csv(
                out_dir / fname,
                setup.cell_grid,
                table.fields[name][flat],
                header_lines=[
                    f"field={name}",
                    f"u={_fmt(u)}",
                    "x=" + " ".join(_fmt(c) for c in x),
                    f"m_c={setup.cell_grid.cells_per_side} dim={cfg.dim}",
                ],
            )
            index["fields"].setdefault(name, []).append(fname)

    lines = ["sample,u," + ",".join(f"x{d}" for d in range(cfg.dim)) + ","
             + ",".join(f"a0_{i}{j}" for i in range(cfg.dim) for j in range(cfg.dim))]
    for flat, multi in enumerate(pgrid.indices()):
        u, x = pgrid.coords(multi)
        a0 = tensors.values[flat]
        lines.append(
            f"{flat}," + _fmt(u) + "," + ",".join(_fmt(c) for c in x) + ","
            + ",".join(_fmt(v) for v in a0.reshape(-1))
        )
    (out_dir / "a0.csv").write_text("\n".join(lines) + "\n")
    write_json(out_dir / "index.json", index)
    write_json(out_dir / "diagnostics.json", table.diagnostics.as_dict())
    return table, tensors


def run_homogenize(cfg: ExperimentConfig, threads: int, out_dir: Path):
    setup = build_setup(cfg)
    table, tensors, u0, pic = tables_and_macro_solution(setup, threads)
    write_field_csv(out_dir / "u0.csv", u0.grid, u0.values)
    write_json(out_dir / "homogenize.json", {
        "iterations": pic.iterations,
        "final_increment": pic.final_increment,
        "range": [float(u0.values.min()), float(u0.values.max())],
    })
    return u0


def run_reference(cfg: ExperimentConfig, threads: int, out_dir: Path):
    setup = build_setup(cfg)
    eps = cfg.eps_list[0]
    disc = cfg.raw["discretization"]
    fine_grid = fine_grid_for(eps, disc["cells_per_period"], cfg.dim)
    u_eps, pic = solve_fine(
        setup.model, eps, fine_grid, setup.picard_opts,
        gauss_rule(setup.solve_quad_points, cfg.dim), setup.cg_opts,
        disc["max_fine_dofs"],
    )
    tag = f"1over{round(1 / eps)}"
    write_field_csv(out_dir / f"u_eps_{tag}.csv", fine_grid, u_eps.values)
    write_json(out_dir / "reference.json", {
        "eps": eps,
        "iterations": pic.iterations,
        "final_increment": pic.final_increment,
    })
    return u_eps


def run_lemma(cfg: ExperimentConfig, out_dir: Path):
    lem = cfg.raw["lemma"]
    if cfg.dim != 1:
        raise ConfigurationError("the antiderivative check is 1-D only")
    amp, freq = float(lem["amplitude"]), int(lem["frequency"])
    factor = lem["x_factor"]
    if factor == "one":
        def g(x, y):
            return amp * np.sin(2.0 * np.pi * freq * y)
    elif factor == "bump":
        def g(x, y):
            return amp * (1.0 + x * (1.0 - x)) * np.sin(2.0 * np.pi * freq * y)
    else:
        raise ConfigurationError(f"unknown lemma.x_factor {factor!r}")
    p = np.inf if lem["p"] in ("inf", None) else float(lem["p"])
    from .config import parse_eps_list

    eps_values = parse_eps_list(lem["eps"])
    result = antiderivative_lemma_1d(g, eps_values, p=p, cells_per_period=lem["cells_per_period"])
    payload = {
        "eps": result.eps,
        "norms": result.norms,
        "p": "inf" if np.isinf(p) else p,
        "fit": result.fit.as_dict(),
    }
    write_json(out_dir / "lemma.json", payload)
    return result


def run_invariance(cfg: ExperimentConfig, out_dir: Path):
    setup = build_setup(cfg)
    inv = cfg.raw["invariance"]
    shift = np.asarray(inv["shift"], dtype=float)
    if shift.shape != (cfg.dim,):
        raise ConfigurationError("invariance.shift needs one entry per dimension")
    x = np.asarray(inv["x"], dtype=float)
    report = check_translation_invariance(
        setup.model, float(inv["u"]), x, shift, setup.cell_grid, setup.cell_quad, setup.cg_opts
    )
    payload = {
        "shift": list(report.shift),
        "reduced_shift": list(report.reduced_shift),
        "grid_aligned": report.grid_aligned,
        "discrepancy": report.discrepancy,
        "tolerance_hint": report.tolerance_hint,
    }
    write_json(out_dir / "invariance.json", payload)
    return report


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twoscale",
        description="Two-scale homogenization studies for oscillating-coefficient problems",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in [
        ("cell", "solve cell problems and emit corrector tables"),
        ("homogenize", "solve the homogenized macro problem"),
        ("reference", "resolved fine-scale solve for the first eps"),
        ("study", "full convergence study"),
        ("lemma", "1-D antiderivative decay check"),
        ("invariance", "shifted-cell invariance check"),
    ]:
        cmd = sub.add_parser(name, help=doc)
        cmd.add_argument("--config", required=True, help="path to the JSON config")
        cmd.add_argument("--out", default=None, help="output directory (default from config)")
        cmd.add_argument(
            "--override", action="append", default=[], metavar="KEY.PATH=VALUE",
            help="override a config entry (JSON-parsed value); repeatable",
        )
        cmd.add_argument(
            "--threads", type=int, default=None,
            help="worker threads (default: TWOSCALE_THREADS or 1); results are thread-count independent",
        )
        cmd.add_argument(
            "--check", action="store_true",
            help="verify acceptance properties after the run (exit 4 on violation)",
        )
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("TWOSCALE_THREADS", "1"))
    try:
        cfg = load_config(args.config, overrides=args.override)
        out_dir = Path(args.out or cfg.raw["output"]["directory"])
        out_dir.mkdir(parents=True, exist_ok=True)

        if args.command == "study":
            report = run_study(cfg, threads=threads, out_dir=out_dir, check=args.check)
            for name, fit in report.fits.items():
                slope = "not meaningful (noise floor)" if fit is None else f"{fit.slope:.3f}"
                print(f"{name}: slope {slope}")
        elif args.command == "cell":
            run_cell(cfg, threads, out_dir)
        elif args.command == "homogenize":
            run_homogenize(cfg, threads, out_dir)
        elif args.command == "reference":
            run_reference(cfg, threads, out_dir)
        elif args.command == "lemma":
            result = run_lemma(cfg, out_dir)
            print(f"antiderivative decay slope: {result.fit.slope:.4f}")
        elif args.command == "invariance":
            report = run_invariance(cfg, out_dir)
            print(
                f"translation discrepancy {report.discrepancy:.3e} "
                f"(aligned={report.grid_aligned}, hint {report.tolerance_hint:.1e})"
            )
        return 0
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NonConvergenceError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return 3
    except PropertyViolationError as exc:
        print(f"property violation: {exc}", file=sys.stderr)
        return 4
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
