"""Command-line interface.

Every subcommand loads the configuration (defaults if no file is given),
applies ``--set section.key=value`` overrides (flags win over file values),
runs, and writes its outputs plus a reproducibility manifest into the output
directory.  ``NLMC_OUTPUT_ROOT`` overrides the output root.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .basis import (assemble_upscaled, build_all_basis, export_basis,
                    export_upscaled_matrix, solve_coarse_linear)
from .config import ExperimentConfig, load_config, validate
from .downscaling import solve_coarse_nonlinear
from .experiments import (build_setup, export_plot_data, export_table_csv,
                          newton_config, run_convergence_study, run_test1, run_test2,
                          write_manifest)
from .fine_solver import (assemble_linear, conservation_residual, solve_linear,
                          solve_monotone, solve_two_phase, solve_unsaturated)
from .media import write_raster
from .spacetime import export_macro_series, build_spacetime_continua, solve_spacetime_coarse
from .mesh import SpaceTimePartition
from .surrogate import generate_dataset, read_dataset_csv, save_models, train, write_dataset_csv

_SECTION_KEYS = None


def _apply_overrides(cfg, pairs):
    from .config import _SECTIONS, _parse

    for pair in pairs or []:
        if "=" not in pair:
            raise SystemExit(f"--set expects section.key=value, got {pair!r}")
        lhs, value = pair.split("=", 1)
        if "." in lhs:
            _, key = lhs.split(".", 1)
        else:
            key = lhs
        known = {k for keys in _SECTIONS.values() for k in keys}
        if key not in known:
            raise SystemExit(f"unknown config key {key!r}")
        setattr(cfg, key, _parse(key, value))
    return cfg


def _load(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    _apply_overrides(cfg, args.set)
    validate(cfg)
    out = args.out or cfg.output_dir
    root = os.environ.get("NLMC_OUTPUT_ROOT")
    if root:
        out = os.path.join(root, out)
    return cfg, out


def _outdir(out, name):
    path = os.path.join(out, name)
    os.makedirs(path, exist_ok=True)
    return path


def cmd_solve_fine(args):
    cfg, out = _load(args)
    setup = build_setup(cfg)
    ncfg = newton_config(cfg)
    outdir = _outdir(out, "solve-fine")
    if args.problem == "linear":
        system = assemble_linear(setup.field, setup.source, bc="neumann", fine=setup.fine)
        u = solve_linear(system)
        write_raster(os.path.join(outdir, "u.txt"), u)
        _write_residuals(outdir, [conservation_residual(system, u)])
    elif args.problem == "monotone":
        X, Y = setup.fine.cell_centers()
        u = solve_monotone(setup.field, setup.law, (1.0 + X) * (2.0 - Y), ncfg,
                           fine=setup.fine)
        write_raster(os.path.join(outdir, "u.txt"), u)
    elif args.problem == "unsaturated":
        traj = solve_unsaturated(setup.constitutive, setup.field, setup.indicator,
                                 cfg.t_max / cfg.steps, cfg.steps, setup.source, ncfg)
        write_raster(os.path.join(outdir, "u_final.txt"), traj[-1])
    else:
        res = solve_two_phase(setup.constitutive, setup.field, setup.indicator,
                              cfg.t_max2 / cfg.steps2, cfg.steps2, setup.source)
        write_raster(os.path.join(outdir, "pressure_final.txt"), res.pressure[-1])
        write_raster(os.path.join(outdir, "saturation_final.txt"), res.saturation[-1])
        _write_residuals(outdir, res.water_balance)
    write_manifest(outdir, cfg)
    print(f"wrote {outdir}")


def _write_residuals(outdir, residuals):
    import csv

    with open(os.path.join(outdir, "conservation.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "residual"])
        for i, r in enumerate(residuals):
            writer.writerow([i, repr(float(r))])


def cmd_build_basis(args):
    cfg, out = _load(args)
    setup = build_setup(cfg)
    basis = build_all_basis(setup.space, setup.field, cfg.layers)
    outdir = _outdir(out, "build-basis")
    export_basis(basis, outdir)
    write_manifest(outdir, cfg)
    print(f"wrote {len(basis)} basis rasters to {outdir}")


def cmd_solve_nlmc(args):
    cfg, out = _load(args)
    setup = build_setup(cfg)
    basis = build_all_basis(setup.space, setup.field, cfg.layers)
    X, Y = setup.fine.cell_centers()
    src = (1.0 + X) * (2.0 - Y)
    system = assemble_upscaled(basis, setup.field, src)
    macro, u_ms = solve_coarse_linear(system)
    outdir = _outdir(out, "solve-nlmc")
    write_raster(os.path.join(outdir, "u_ms.txt"), u_ms)
    export_upscaled_matrix(os.path.join(outdir, "a_t.txt"), system)
    np.savetxt(os.path.join(outdir, "macro.txt"), macro.values)
    write_manifest(outdir, cfg)
    print(f"wrote {outdir}")


def cmd_solve_nonlinear(args):
    cfg, out = _load(args)
    setup = build_setup(cfg)
    X, Y = setup.fine.cell_centers()
    src = (1.0 + X) * (2.0 - Y)
    res = solve_coarse_nonlinear(setup.space, setup.field, setup.law, src,
                                 cfg.layers, setup.pou, newton_config(cfg))
    outdir = _outdir(out, "solve-nonlinear")
    write_raster(os.path.join(outdir, "u_ms.txt"), res.u_ms)
    np.savetxt(os.path.join(outdir, "macro.txt"), res.macro.values)
    write_manifest(outdir, cfg, extra={"residual_history": res.history})
    print(f"wrote {outdir}; outer residuals {['%.3e' % r for r in res.history]}")


def cmd_solve_spacetime(args):
    cfg, out = _load(args)
    setup = build_setup(cfg)
    partition = SpaceTimePartition.uniform(cfg.t_max, cfg.intervals, cfg.substeps,
                                           cfg.back_intervals)
    continua = build_spacetime_continua(partition, setup.space)
    mass = setup.constitutive.storage(setup.indicator)
    res = solve_spacetime_coarse(setup.space, setup.field, partition, setup.pou,
                                 setup.source, cfg.layers, mass,
                                 law=setup.law, config=newton_config(cfg),
                                 global_bc="neumann")
    outdir = _outdir(out, "solve-spacetime")
    export_macro_series(os.path.join(outdir, "macro.csv"), continua, res.macro)
    write_raster(os.path.join(outdir, "u_final.txt"), res.trajectory[-1])
    write_manifest(outdir, cfg)
    print(f"wrote {outdir}")


def cmd_gen_dataset(args):
    cfg, out = _load(args)
    setup = build_setup(cfg)
    ncfg = newton_config(cfg)
    traj = solve_unsaturated(setup.constitutive, setup.field, setup.indicator,
                             cfg.t_max / cfg.steps, cfg.steps, setup.source, ncfg)
    dataset = generate_dataset(setup.space, setup.field, setup.indicator,
                               setup.coupling, traj, setup.constitutive,
                               "unsaturated", stride=cfg.stride, config=ncfg)
    outdir = _outdir(out, "gen-dataset")
    write_dataset_csv(os.path.join(outdir, "dataset.csv"), dataset)
    write_manifest(outdir, cfg)
    print(f"wrote {len(dataset)} samples to {outdir}")


def cmd_train_surrogate(args):
    cfg, out = _load(args)
    dataset = read_dataset_csv(args.dataset)
    mode = "two_phase" if "t_w_nl" in dataset.target_names else "unsaturated"
    reg, report = train(dataset, mode, family=cfg.family, seed=cfg.split_seed)
    outdir = _outdir(out, "train-surrogate")
    save_models(os.path.join(outdir, "models.json"), reg)
    import json

    with open(os.path.join(outdir, "training_report.json"), "w", newline="\n") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_manifest(outdir, cfg)
    for cls, rep in sorted(report.items()):
        for tname, (mse, rmse, mae) in rep["per_target"].items():
            print(f"{cls} {tname}: MSE {mse:.4g} RMSE {100 * rmse:.3f}% MAE {100 * mae:.3f}%")


def cmd_run_test1(args):
    cfg, out = _load(args)
    outdir = _outdir(out, "test1")
    table, _ = run_test1(cfg, outdir=outdir)
    for row in table.rows:
        d = dict(zip(table.columns, row))
        print(f"step {d['step']}: e(nl) = {100 * d['e_nl']:.3f}%  e(up) = {100 * d['e_up']:.3f}%")


def cmd_run_test2(args):
    cfg, out = _load(args)
    outdir = _outdir(out, "test2")
    table, _ = run_test2(cfg, outdir=outdir)
    for row in table.rows:
        d = dict(zip(table.columns, row))
        print(f"step {d['step']}: e_p(nl) = {100 * d['e_p_nl']:.3f}%  e_p(up) = {100 * d['e_p_up']:.3f}%  "
              f"e_s(nl) = {100 * d['e_s_nl']:.3f}%  e_s(up) = {100 * d['e_s_up']:.3f}%")


def cmd_convergence(args):
    cfg, out = _load(args)
    nx = cfg.nx_coarse * cfg.ratio
    sizes = [int(s) for s in args.coarse_sizes.split(",")]
    layers = [int(m) for m in args.layers.split(",")]
    sweep = []
    for N in sizes:
        if nx % N:
            raise SystemExit(f"coarse size {N} does not divide the fine grid {nx}")
        for M in layers:
            sweep.append({"nx_coarse": N, "ny_coarse": N, "ratio": nx // N, "layers": M})
    table = run_convergence_study(cfg, sweep)
    outdir = _outdir(out, "convergence")
    export_table_csv(os.path.join(outdir, "study.csv"), table)
    runs = [(row[1], row[2], row[3]) for row in table.rows if row[0] == "run" and row[6] == "ok"]
    series = []
    for N in sizes:
        H = 1.0 / N
        pts = sorted((m, e) for h, m, e in runs if h == H)
        if pts:
            series.append({"label": f"H=1/{N}", "x": [p[0] for p in pts],
                           "y": [p[1] for p in pts], "log_y": True})
    export_plot_data(os.path.join(outdir, "decay.json"), series)
    write_manifest(outdir, cfg)
    for row in table.rows:
        print(dict(zip(table.columns, row)))


def main(argv=None):
    parser = argparse.ArgumentParser(prog="nlmc",
                                     description="Nonlocal multi-continuum upscaling toolkit")
    parser.add_argument("--config", "-c", help="configuration file (INI)")
    parser.add_argument("--out", "-o", help="output directory (default from config)")
    parser.add_argument("--set", "-s", action="append", metavar="KEY=VALUE",
                        help="override a config key (section.key=value or key=value)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-fine", help="fine-grid reference solve")
    p.add_argument("--problem", choices=["linear", "monotone", "unsaturated", "two-phase"],
                   default="unsaturated")
    p.set_defaults(func=cmd_solve_fine)
    sub.add_parser("build-basis", help="build multiscale basis functions").set_defaults(
        func=cmd_build_basis)
    sub.add_parser("solve-nlmc", help="linear multiscale solve").set_defaults(
        func=cmd_solve_nlmc)
    sub.add_parser("solve-nonlinear", help="nonlinear coarse solve").set_defaults(
        func=cmd_solve_nonlinear)
    sub.add_parser("solve-spacetime", help="space-time coarse solve").set_defaults(
        func=cmd_solve_spacetime)
    sub.add_parser("gen-dataset", help="generate the transmissibility dataset").set_defaults(
        func=cmd_gen_dataset)
    p = sub.add_parser("train-surrogate", help="train per-class regressors")
    p.add_argument("--dataset", required=True, help="dataset CSV")
    p.set_defaults(func=cmd_train_surrogate)
    sub.add_parser("run-test1", help="unsaturated-flow benchmark").set_defaults(
        func=cmd_run_test1)
    sub.add_parser("run-test2", help="two-phase-flow benchmark").set_defaults(
        func=cmd_run_test2)
    p = sub.add_parser("convergence", help="convergence and localization study")
    p.add_argument("--coarse-sizes", default="4,8", help="comma-separated coarse sizes")
    p.add_argument("--layers", default="1,2,3", help="comma-separated oversampling layers")
    p.set_defaults(func=cmd_convergence)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
