"""Experiment orchestration: problem assembly, studies, error metrics and exports.

Builds complete problem setups from a configuration, runs the two flow
benchmarks (unsaturated flow and two-phase flow) end to end, runs the
convergence and localization studies of the upscaling method, and writes all
outputs (tables, rasters, plot data, manifest) in deterministic text formats.
Reported coarse errors always compare plain coarse-cell means, while the
method-internal macro values are weighted continuum averages.
"""

from __future__ import annotations

import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_hash, config_text, save_config
from .continua import build_continua, export_layout
from .downscaling import solve_coarse_nonlinear
from .fine_solver import NewtonConfig, solve_monotone, solve_two_phase, solve_unsaturated
from .basis import energy_norm
from .media import (CoefficientField, ConstitutiveSet, FractureSet, MonotoneLaw,
                    compute_weights, generate_field, rasterize_fractures, read_fractures,
                    read_raster, write_raster)
from .mesh import build_grids, build_partition_of_unity
from .surrogate import (build_coupling_table, build_face_table, generate_dataset,
                        train, save_models, solve_coarse_with_surrogate,
                        baseline_upscale, write_dataset_csv)

__all__ = [
    "ResultTable",
    "ProblemSetup",
    "coarse_mean_error",
    "build_setup",
    "default_fractures",
    "dipole_source",
    "run_convergence_study",
    "run_test1",
    "run_test2",
    "export_table_csv",
    "read_table_csv",
    "export_plot_data",
    "read_plot_data",
    "write_manifest",
    "random_smooth_raster",
    "projection_ratio_scan",
]


class ResultTable:
    """Named columns, one dict-backed row per run; no missing cells allowed."""

    def __init__(self, columns):
        if len(set(columns)) != len(columns):
            raise ValueError("column names must be unique")
        self.columns = list(columns)
        self.rows = []

    def add(self, **row):
        missing = set(self.columns) - set(row)
        extra = set(row) - set(self.columns)
        if missing or extra:
            raise ValueError(f"row does not match columns (missing {missing}, extra {extra})")
        self.rows.append([row[c] for c in self.columns])

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def __len__(self):
        return len(self.rows)


def coarse_mean_error(u_fine_means, u_coarse):
    """Relative L2 error between coarse vectors, normalized by the reference."""
    ref = np.asarray(u_fine_means, dtype=float).ravel()
    val = np.asarray(u_coarse, dtype=float).ravel()
    if ref.shape != val.shape:
        raise ValueError("coarse vectors must have equal length")
    denom = float(np.sum(ref**2))
    if denom == 0.0:
        raise ValueError("zero reference vector, relative error undefined")
    return math.sqrt(float(np.sum((ref - val) ** 2)) / denom)


def default_fractures(k_frac):
    """Two-segment fracture layout used by the desk-scale benchmark runs.

    The free tips sit one fine cell short of a coarse face so both
    matrix-fracture and fracture-fracture face classes are populated on the
    default grids.
    """
    return FractureSet(segments=np.array([
        [0.09, 0.305, 0.617, 0.305],
        [0.66, 0.242, 0.66, 0.742],
    ]), k_frac=k_frac)


def dipole_source(fine, cfg):
    """Balanced source raster: value ``+q`` on one disc, ``-q`` on another.

    A zero radius marks single cells.  Symmetric centers give exactly
    balanced cell counts, which pure-Neumann compatibility requires.
    """
    f = np.zeros((fine.ny, fine.nx))
    X, Y = fine.cell_centers()
    for name, sign in (("inject_at", 1.0), ("produce_at", -1.0)):
        x, y = cfg.point(name)
        if cfg.source_radius > 0:
            mask = (X - x) ** 2 + (Y - y) ** 2 <= cfg.source_radius**2
            f[mask] += sign * cfg.source_q
        else:
            i = min(int(x / fine.hx), fine.nx - 1)
            j = min(int(y / fine.hy), fine.ny - 1)
            f[j, i] += sign * cfg.source_q
    return f


@dataclass
class ProblemSetup:
    """Everything a run needs, assembled from one configuration."""

    cfg: ExperimentConfig
    coarse: object
    fine: object
    base_field: CoefficientField
    field: CoefficientField
    indicator: np.ndarray
    pou: object
    weights: object
    space: object
    law: MonotoneLaw
    constitutive: ConstitutiveSet
    source: np.ndarray
    face_table: object = None
    coupling: object = None


def build_setup(cfg, fractured=True, k_frac=None, base_dir="."):
    """Assemble grids, media, weights and continua from a configuration."""
    coarse, fine = build_grids(cfg.nx_coarse, cfg.ny_coarse, cfg.ratio)
    if cfg.field_file:
        base = CoefficientField(read_raster(os.path.join(base_dir, cfg.field_file)),
                                provenance=f"file:{cfg.field_file}")
    else:
        base = generate_field(fine, cfg.field_seed, cfg.contrast, cfg.correlation_len)
        base = CoefficientField(base.values * cfg.field_scale, provenance=base.provenance)
    if fractured:
        kf = cfg.k_frac if k_frac is None else k_frac
        if cfg.fracture_file:
            fractures = read_fractures(os.path.join(base_dir, cfg.fracture_file), kf)
        else:
            fractures = default_fractures(kf)
    else:
        fractures = FractureSet.empty()
    indicator, field_ = rasterize_fractures(fractures, fine, base)
    pou = build_partition_of_unity(coarse)
    weights = compute_weights(field_, pou)
    space = build_continua(coarse, indicator, weights)
    law = MonotoneLaw.from_name(cfg.law_family, cfg.law_alpha)
    constitutive = ConstitutiveSet(a=cfg.rel_perm_a)
    setup = ProblemSetup(
        cfg=cfg, coarse=coarse, fine=fine, base_field=base, field=field_,
        indicator=indicator, pou=pou, weights=weights, space=space, law=law,
        constitutive=constitutive, source=dipole_source(fine, cfg),
    )
    setup.face_table = build_face_table(coarse, indicator)
    setup.coupling = build_coupling_table(space, setup.face_table)
    return setup


def newton_config(cfg):
    return NewtonConfig(atol=cfg.atol, rtol=cfg.rtol, max_iter=cfg.max_iter)


# ---------------------------------------------------------------------------
# convergence and localization study

def run_convergence_study(base_cfg, sweep, source_fn=None):
    """Energy errors of the nonlinear coarse solves over a (H, M) sweep.

    Every sweep entry overrides ``nx_coarse/ny_coarse/ratio/layers`` while the
    fine grid stays fixed, so all runs share one fine reference solution.
    Appends log-fit rows: the H-rate between successive coarse sizes at fixed
    M, and the localization decay slope over M at fixed H.
    """
    table = ResultTable(["kind", "H", "M", "energy_error", "value", "r2", "status"])
    fine_cache = {}
    results = []
    for over in sweep:
        cfg = ExperimentConfig(**{**base_cfg.__dict__, **over})
        if cfg.nx_coarse * cfg.ratio != base_cfg.nx_coarse * base_cfg.ratio:
            raise ValueError("sweep must preserve the fine grid")
        try:
            setup = build_setup(cfg, fractured=False)
            ncfg = newton_config(cfg)
            if source_fn is None:
                X, Y = setup.fine.cell_centers()
                src = (1.0 + X) * (2.0 - Y)
            else:
                src = source_fn(setup.fine)
            key = "fine"
            if key not in fine_cache:
                fine_cache[key] = solve_monotone(setup.field, setup.law, src, ncfg,
                                                 fine=setup.fine)
            u_fine = fine_cache[key]
            res = solve_coarse_nonlinear(setup.space, setup.field, setup.law, src,
                                         cfg.layers, setup.pou, ncfg)
            err = energy_norm(res.u_ms - u_fine, setup.weights, setup.fine)
            ref = energy_norm(u_fine, setup.weights, setup.fine)
            rel = err / ref
            H = 1.0 / cfg.nx_coarse
            table.add(kind="run", H=H, M=cfg.layers, energy_error=rel,
                      value="", r2="", status="ok")
            results.append((H, cfg.layers, rel))
        except Exception as exc:  # record the failure, keep sweeping
            table.add(kind="run", H=1.0 / cfg.nx_coarse, M=cfg.layers,
                      energy_error="", value="", r2="", status=f"failed: {exc}")
    _append_fits(table, results)
    return table


def _append_fits(table, results):
    by_M = {}
    by_H = {}
    for H, M, e in results:
        by_M.setdefault(M, []).append((H, e))
        by_H.setdefault(H, []).append((M, e))
    for M, pts in sorted(by_M.items()):
        pts = sorted(pts)
        for (H0, e0), (H1, e1) in zip(pts, pts[1:]):
            if e1 > 0:
                table.add(kind="h_rate", H=f"{H0:g}->{H1:g}", M=M, energy_error="",
                          value=e0 / e1, r2="", status="ok")
    for H, pts in sorted(by_H.items()):
        pts = sorted(pts)
        if len(pts) >= 3:
            M = np.array([p[0] for p in pts], dtype=float)
            loge = np.log([max(p[1], 1e-300) for p in pts])
            slope, intercept = np.polyfit(M, loge, 1)
            fitted = slope * M + intercept
            ss_res = float(np.sum((loge - fitted) ** 2))
            ss_tot = float(np.sum((loge - loge.mean()) ** 2))
            r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
            table.add(kind="m_decay", H=H, M=f"{int(M.min())}..{int(M.max())}",
                      energy_error="", value=math.exp(slope), r2=r2, status="ok")
    return table


# ---------------------------------------------------------------------------
# benchmark runs

def _snapshot_steps(steps):
    """Snapshot indices mirroring the reference run's 3/7 and final fractions."""
    mid = max(1, round(steps * 3 / 7))
    return sorted({mid, steps})


def run_test1(cfg, outdir=None):
    """Unsaturated-flow benchmark: fine reference, learned coarse model, baseline.

    Returns ``(table, artifacts)`` where the table holds the relative coarse
    mean errors of the learned (``nl``) and classical (``up``) coarse models
    at the snapshot steps.
    """
    setup = build_setup(cfg, fractured=True, k_frac=cfg.k_frac)
    ncfg = newton_config(cfg)
    dt = cfg.t_max / cfg.steps
    traj = solve_unsaturated(setup.constitutive, setup.field, setup.indicator,
                             dt, cfg.steps, setup.source, ncfg)
    dataset = generate_dataset(setup.space, setup.field, setup.indicator,
                               setup.coupling, traj, setup.constitutive,
                               "unsaturated", stride=cfg.stride, config=ncfg,
                               source=setup.source)
    reg, report = train(dataset, "unsaturated", family=cfg.family, seed=cfg.split_seed)
    nl = solve_coarse_with_surrogate(setup.space, setup.coupling, reg, setup.field,
                                     setup.indicator, setup.constitutive, dt,
                                     cfg.steps, setup.source, "unsaturated")
    up = baseline_upscale(setup.coarse, setup.face_table, setup.field, setup.indicator,
                          setup.constitutive, dt, cfg.steps, setup.source, "unsaturated")
    table = ResultTable(["step", "time", "e_nl", "e_up"])
    for m in _snapshot_steps(cfg.steps):
        ref = setup.coarse.cell_means(traj[m])
        table.add(step=m, time=m * dt, e_nl=coarse_mean_error(ref, nl[m]),
                  e_up=coarse_mean_error(ref, up[m]))
    artifacts = {"setup": setup, "trajectory": traj, "dataset": dataset,
                 "regressor": reg, "report": report, "nl": nl, "up": up}
    if outdir:
        _dump_test1(outdir, cfg, setup, traj, dataset, reg, report, nl, up, table)
    return table, artifacts


def run_test2(cfg, outdir=None):
    """Two-phase-flow benchmark: IMPES reference, learned coarse model, baseline."""
    setup = build_setup(cfg, fractured=True, k_frac=cfg.k_frac2)
    ncfg = newton_config(cfg)
    dt = cfg.t_max2 / cfg.steps2
    res = solve_two_phase(setup.constitutive, setup.field, setup.indicator,
                          dt, cfg.steps2, setup.source)
    traj = list(zip(res.pressure, res.saturation[1:]))
    dataset = generate_dataset(setup.space, setup.field, setup.indicator,
                               setup.coupling, [None] + traj, setup.constitutive,
                               "two_phase", stride=cfg.stride, config=ncfg,
                               source=setup.source)
    reg, report = train(dataset, "two_phase", family=cfg.family, seed=cfg.split_seed)
    nl_p, nl_s = solve_coarse_with_surrogate(setup.space, setup.coupling, reg,
                                             setup.field, setup.indicator,
                                             setup.constitutive, dt, cfg.steps2,
                                             setup.source, "two_phase")
    up_p, up_s = baseline_upscale(setup.coarse, setup.face_table, setup.field,
                                  setup.indicator, setup.constitutive, dt,
                                  cfg.steps2, setup.source, "two_phase")
    table = ResultTable(["step", "time", "e_p_nl", "e_p_up", "e_s_nl", "e_s_up"])
    for m in _snapshot_steps(cfg.steps2):
        ref_p = setup.coarse.cell_means(res.pressure[m - 1])
        ref_s = setup.coarse.cell_means(res.saturation[m])
        table.add(step=m, time=m * dt,
                  e_p_nl=coarse_mean_error(ref_p, nl_p[m - 1]),
                  e_p_up=coarse_mean_error(ref_p, up_p[m - 1]),
                  e_s_nl=coarse_mean_error(ref_s, nl_s[m]),
                  e_s_up=coarse_mean_error(ref_s, up_s[m]))
    artifacts = {"setup": setup, "result": res, "dataset": dataset, "regressor": reg,
                 "report": report, "nl": (nl_p, nl_s), "up": (up_p, up_s)}
    if outdir:
        os.makedirs(outdir, exist_ok=True)
        export_table_csv(os.path.join(outdir, "errors.csv"), table)
        write_raster(os.path.join(outdir, "saturation_fine_final.txt"), res.saturation[-1])
        write_raster(os.path.join(outdir, "pressure_fine_final.txt"), res.pressure[-1])
        write_raster(os.path.join(outdir, "saturation_nl_final.txt"), nl_s[-1])
        write_raster(os.path.join(outdir, "saturation_up_final.txt"), up_s[-1])
        write_dataset_csv(os.path.join(outdir, "dataset.csv"), dataset)
        save_models(os.path.join(outdir, "models.json"), reg)
        write_manifest(outdir, cfg)
    return table, artifacts


def _dump_test1(outdir, cfg, setup, traj, dataset, reg, report, nl, up, table):
    os.makedirs(outdir, exist_ok=True)
    export_table_csv(os.path.join(outdir, "errors.csv"), table)
    write_raster(os.path.join(outdir, "u_fine_final.txt"), traj[-1])
    write_raster(os.path.join(outdir, "u_fine_means_final.txt"),
                 setup.coarse.cell_means(traj[-1]))
    write_raster(os.path.join(outdir, "u_nl_final.txt"), nl[-1])
    write_raster(os.path.join(outdir, "u_up_final.txt"), up[-1])
    write_dataset_csv(os.path.join(outdir, "dataset.csv"), dataset)
    save_models(os.path.join(outdir, "models.json"), reg)
    export_layout(setup.space, os.path.join(outdir, "continua.csv"))
    with open(os.path.join(outdir, "training_report.json"), "w", newline="\n") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_manifest(outdir, cfg)


# ---------------------------------------------------------------------------
# exports

def export_table_csv(path, table):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(table.columns)
        for row in table.rows:
            writer.writerow([_cell_text(v) for v in row])


def _cell_text(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_table_csv(path):
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        table = ResultTable(header)
        for row in reader:
            table.add(**dict(zip(header, row)))
    return table


def export_plot_data(path, series):
    """Plot-data file: labeled (x, y) series with per-series log-scale flags."""
    payload = {"series": [
        {"label": s["label"], "x": [float(v) for v in s["x"]],
         "y": [float(v) for v in s["y"]], "log_y": bool(s.get("log_y", False))}
        for s in series
    ]}
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_plot_data(path):
    with open(path) as fh:
        return json.load(fh)["series"]


def write_manifest(outdir, cfg, extra=None):
    """Reproducibility manifest: config hash and text, versions, seeds.

    Deliberately carries no timestamps so identical runs are byte-identical.
    """
    manifest = {
        "config_hash": config_hash(cfg),
        "config": config_text(cfg),
        "versions": {
            "nlmc": __version__,
            "numpy": np.__version__,
            "scipy": __import__("scipy").__version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
        },
        "seeds": {"field_seed": cfg.field_seed, "split_seed": cfg.split_seed,
                  "seed": cfg.seed},
    }
    if extra:
        manifest.update(extra)
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "manifest.json"), "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    save_config(cfg, os.path.join(outdir, "config.ini"))


# ---------------------------------------------------------------------------
# diagnostics used by the assumption scans

def random_smooth_raster(fine, rng, n_modes=4):
    """Random low-frequency Fourier raster (zero mean trigonometric modes)."""
    X, Y = fine.cell_centers()
    out = np.zeros_like(X)
    for kx in range(1, n_modes + 1):
        for ky in range(1, n_modes + 1):
            out += rng.normal() / (kx * ky) * np.sin(math.pi * kx * X) * np.sin(math.pi * ky * Y)
    return out


def projection_ratio_scan(space, weights, fine, n_samples=20, seed=3):
    """Observed ``|(I - P)v|_s / |v|_a`` over random smooth rasters."""
    from .basis import energy_norm as a_norm, s_norm
    from .continua import project

    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(n_samples):
        v = random_smooth_raster(fine, rng)
        _, pv = project(space, v)
        ratios.append(s_norm(v - pv, weights, fine) / a_norm(v, weights, fine))
    return np.array(ratios)
