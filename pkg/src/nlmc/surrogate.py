"""Nonlinear transmissibilities, the learning dataset, regressors and coarse solvers.

The learned coarse model is a multi-continuum finite-volume model: its
unknowns are the plain means of the continua (matrix subregion and fracture
components per coarse cell), coupled through *coupling sites*.  A site is
either a continuum pair meeting across an interior coarse face or the
matrix-fracture exchange inside one cell.  Each site carries a nonlinear
transmissibility: the member fine-face flux from a constrained local solve on
the site's one-layer-oversampled patch, divided by the continuum mean
difference.  The patch rim carries Dirichlet data interpolated from the
coarse cell-mean field, so the oversampled neighborhood's means inform every
target; the constraints pin the continuum means of the site's host cells.
When a pair's mean difference is small against the neighborhood variation,
the linearized unit-difference response replaces the ill-conditioned ratio.

Four per-class regressors (horizontal and vertical matrix-matrix,
matrix-fracture, fracture-fracture) learn the map from local material data
and coarse means to these transmissibilities.  The coarse solvers step the
multi-continuum model with any transmissibility provider: the trained
surrogate or direct local solves.  The classical baseline is deliberately a
single-continuum model: linearized flow-based face transmissibilities with
the nonlinearity applied pointwise at the coarse means.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fine_solver import (LinearFaceFlux, NewtonConfig, NonlinearSolveError,
                          RelPermFaceFlux, TpfaOperator)

__all__ = [
    "CLASS_NAMES",
    "Face",
    "CouplingSite",
    "CouplingTable",
    "Dataset",
    "RidgeModel",
    "KnnModel",
    "PerClassRegressor",
    "SurrogateProvider",
    "ExactProvider",
    "BaselineProvider",
    "metrics",
    "mse_per_sample",
    "build_face_table",
    "build_coupling_table",
    "cell_state_means",
    "continuum_means",
    "baseline_upscale_transmissibility",
    "compute_transmissibility",
    "generate_dataset",
    "train",
    "save_models",
    "load_models",
    "write_dataset_csv",
    "read_dataset_csv",
    "solve_multicontinuum_unsaturated",
    "solve_multicontinuum_two_phase",
    "solve_singlecontinuum_unsaturated",
    "solve_singlecontinuum_two_phase",
    "solve_coarse_with_surrogate",
    "baseline_upscale",
]

CLASS_NAMES = ("mm_h", "mm_v", "mf", "ff")


# ---------------------------------------------------------------------------
# metrics (summed squared error, relative RMSE and relative MAE)

def metrics(y_true, y_pred):
    """Return ``(MSE, RMSE, MAE)``: summed squared error and relative errors.

    ``MSE`` is the plain sum of squared deviations; ``RMSE`` and ``MAE`` are
    normalized by the reference magnitudes and undefined for all-zero
    references.
    """
    y = np.asarray(y_true, dtype=float).ravel()
    p = np.asarray(y_pred, dtype=float).ravel()
    if y.size != p.size or y.size < 1:
        raise ValueError("metrics need equal-length, nonempty inputs")
    sq = float(np.sum((y - p) ** 2))
    ref_sq = float(np.sum(y**2))
    ref_abs = float(np.sum(np.abs(y)))
    if ref_sq == 0.0 or ref_abs == 0.0:
        raise ValueError("relative metrics undefined for an all-zero reference")
    return sq, math.sqrt(sq / ref_sq), float(np.sum(np.abs(y - p))) / ref_abs


def mse_per_sample(y_true, y_pred):
    """Per-sample mean of squared deviations (companion to the summed form)."""
    y = np.asarray(y_true, dtype=float).ravel()
    p = np.asarray(y_pred, dtype=float).ravel()
    return float(np.mean((y - p) ** 2))


# ---------------------------------------------------------------------------
# faces and coupling sites

@dataclass(frozen=True)
class Face:
    """One interior coarse face with its class tag and pair patch box."""

    orientation: str  # "v": between x-neighbors, "h": between y-neighbors
    cell_a: int
    cell_b: int
    cls: str
    box: tuple  # (cx0, cx1, cy0, cy1) of the one-layer oversampled pair patch


@dataclass(frozen=True)
class CouplingSite:
    """A continuum pair exchanging mass: across a coarse face or inside a cell.

    ``fine_faces`` lists the member fine faces as index arrays
    ``(rows_a, cols_a, rows_b, cols_b, orientation)`` with flux counted
    positive from side ``a`` to side ``b``.
    """

    cls: str
    pos_a: int
    pos_b: int
    box: tuple
    face_index: int = -1  # owning interior coarse face, -1 for intra-cell sites
    cell: int = -1  # owning cell for intra-cell exchange sites
    fine_faces: tuple = ()


class FaceTable:
    """All interior coarse faces in deterministic order (vertical then horizontal)."""

    def __init__(self, coarse, faces):
        self.coarse = coarse
        self.faces = faces

    def __len__(self):
        return len(self.faces)

    def by_class(self):
        out = {c: [] for c in CLASS_NAMES}
        for i, f in enumerate(self.faces):
            out[f.cls].append(i)
        return out


def _face_strips(coarse, orientation, cell_a):
    """Fine index arrays of the two cell strips adjacent to the interface."""
    r = coarse.ratio
    cxa, cya = coarse.cell_xy(cell_a)
    if orientation == "v":
        X = (cxa + 1) * r
        rows = np.arange(cya * r, (cya + 1) * r)
        return (rows, np.full(r, X - 1)), (rows, np.full(r, X))
    Y = (cya + 1) * r
    cols = np.arange(cxa * r, (cxa + 1) * r)
    return (np.full(r, Y - 1), cols), (np.full(r, Y), cols)


def _pair_box(coarse, cells):
    xs = [coarse.cell_xy(c)[0] for c in cells]
    ys = [coarse.cell_xy(c)[1] for c in cells]
    return (max(0, min(xs) - 1), min(coarse.Nx - 1, max(xs) + 1),
            max(0, min(ys) - 1), min(coarse.Ny - 1, max(ys) + 1))


def build_face_table(coarse, fracture_indicator):
    """Classify every interior coarse face by the continua adjacent across it.

    A face is fracture-fracture if fracture cells touch it on both sides,
    matrix-fracture if on exactly one side, else matrix-matrix split by
    orientation.  This partitions the interior faces into the four classes.
    """
    frac = np.asarray(fracture_indicator, dtype=bool)
    faces = []
    for cy in range(coarse.Ny):
        for cx in range(coarse.Nx - 1):
            faces.append(_classify(coarse, frac, "v",
                                   coarse.cell_id(cx, cy), coarse.cell_id(cx + 1, cy)))
    for cy in range(coarse.Ny - 1):
        for cx in range(coarse.Nx):
            faces.append(_classify(coarse, frac, "h",
                                   coarse.cell_id(cx, cy), coarse.cell_id(cx, cy + 1)))
    return FaceTable(coarse, faces)


def _classify(coarse, frac, orientation, a, b):
    strip_a, strip_b = _face_strips(coarse, orientation, a)
    fa = bool(frac[strip_a].any())
    fb = bool(frac[strip_b].any())
    if fa and fb:
        cls = "ff"
    elif fa or fb:
        cls = "mf"
    else:
        cls = "mm_v" if orientation == "v" else "mm_h"
    return Face(orientation, a, b, cls, _pair_box(coarse, (a, b)))


class CouplingTable:
    """Faces plus the continuum-pair coupling sites of the coarse model."""

    def __init__(self, space, face_table, sites):
        self.space = space
        self.face_table = face_table
        self.sites = sites

    def __len__(self):
        return len(self.sites)

    def by_class(self):
        out = {c: [] for c in CLASS_NAMES}
        for i, s in enumerate(self.sites):
            out[s.cls].append(i)
        return out


def _continuum_of(space, cell):
    """Map fine cells of one coarse cell to their continuum position."""
    lookup = {}
    for pos in space.in_cell(cell):
        fn = space.functions[pos]
        for j, i in zip(fn.rows, fn.cols):
            lookup[(j, i)] = pos
    return lookup


def build_coupling_table(space, face_table):
    """Enumerate the continuum-pair coupling sites of the multi-continuum model.

    Across every interior face, member fine faces are grouped by the pair of
    continua they connect, giving one site per present pair (matrix-matrix,
    matrix-fracture, fracture-fracture).  Inside every fractured cell, the
    fine faces between the matrix and each fracture component give one
    exchange site per component.  The deterministic order is: face sites in
    face order, then intra-cell exchange sites in cell order.
    """
    coarse = face_table.coarse
    lookup = {c: _continuum_of(space, c) for c in range(coarse.n_cells)}
    sites = []
    for fi, face in enumerate(face_table.faces):
        strip_a, strip_b = _face_strips(coarse, face.orientation, face.cell_a)
        la, lb = lookup[face.cell_a], lookup[face.cell_b]
        groups = {}
        for (ja, ia), (jb, ib) in zip(zip(*strip_a), zip(*strip_b)):
            pa, pb = la[(ja, ia)], lb[(jb, ib)]
            groups.setdefault((pa, pb), []).append((ja, ia, jb, ib))
        for (pa, pb), members in sorted(groups.items()):
            ka = space.functions[pa].kind
            kb = space.functions[pb].kind
            if ka == "matrix" and kb == "matrix":
                cls = "mm_v" if face.orientation == "v" else "mm_h"
            elif ka == "fracture" and kb == "fracture":
                cls = "ff"
            else:
                cls = "mf"
            m = np.array(members)
            sites.append(CouplingSite(
                cls=cls, pos_a=pa, pos_b=pb, box=face.box, face_index=fi,
                fine_faces=(m[:, 0], m[:, 1], m[:, 2], m[:, 3], face.orientation),
            ))
    # intra-cell matrix-fracture exchange, one site per fracture component
    for c in range(coarse.n_cells):
        positions = space.in_cell(c)
        if len(positions) < 2:
            continue
        kinds = {p: space.functions[p].kind for p in positions}
        lc = lookup[c]
        sy, sx = coarse.cell_slices(c)
        groups = {}
        for j in range(sy.start, sy.stop):
            for i in range(sx.start, sx.stop):
                for dj, di, orient in ((0, 1, "v"), (1, 0, "h")):
                    jn, im = j + dj, i + di
                    if jn >= sy.stop or im >= sx.stop:
                        continue
                    pa, pb = lc[(j, i)], lc[(jn, im)]
                    if pa == pb:
                        continue
                    # canonical order: matrix side first (flux matrix -> fracture)
                    if kinds[pa] == "fracture":
                        groups.setdefault((pb, pa), []).append((jn, im, j, i, orient))
                    else:
                        groups.setdefault((pa, pb), []).append((j, i, jn, im, orient))
        cx, cy = coarse.cell_xy(c)
        box = (max(0, cx - 1), min(coarse.Nx - 1, cx + 1),
               max(0, cy - 1), min(coarse.Ny - 1, cy + 1))
        for (pa, pb), members in sorted(groups.items()):
            sites.append(CouplingSite(
                cls="mf", pos_a=pa, pos_b=pb, box=box, cell=c,
                fine_faces=(np.array([m[0] for m in members]),
                            np.array([m[1] for m in members]),
                            np.array([m[2] for m in members]),
                            np.array([m[3] for m in members]),
                            np.array([m[4] for m in members])),
            ))
    return CouplingTable(space, face_table, sites)


# ---------------------------------------------------------------------------
# state handling

def continuum_means(space, raster):
    """Plain (volume) means of a fine raster on every continuum."""
    r = np.asarray(raster)
    return np.array([float(r[fn.rows, fn.cols].mean()) for fn in space.functions])


def cell_state_means(space, values):
    """Coarse cell-mean raster from continuum means (volume-weighted recombination)."""
    coarse = space.coarse
    out = np.zeros(coarse.n_cells)
    vol = np.zeros(coarse.n_cells)
    for pos, fn in enumerate(space.functions):
        out[fn.cell] += values[pos] * fn.size
        vol[fn.cell] += fn.size
    return (out / vol).reshape(coarse.Ny, coarse.Nx)


# ---------------------------------------------------------------------------
# local transmissibility solves

def _mean_interpolator(coarse, means):
    """Bilinear interpolant of a coarse mean raster, clamped at the domain edge."""
    Hx, Hy = coarse.Hx, coarse.Hy
    m = np.asarray(means, dtype=float)

    def interp(x, y):
        gx = np.clip(np.asarray(x) / Hx - 0.5, 0.0, coarse.Nx - 1.0)
        gy = np.clip(np.asarray(y) / Hy - 0.5, 0.0, coarse.Ny - 1.0)
        ix = np.clip(gx.astype(int), 0, max(coarse.Nx - 2, 0))
        iy = np.clip(gy.astype(int), 0, max(coarse.Ny - 2, 0))
        tx = gx - ix if coarse.Nx > 1 else np.zeros_like(gx)
        ty = gy - iy if coarse.Ny > 1 else np.zeros_like(gy)
        ix1 = np.minimum(ix + 1, coarse.Nx - 1)
        iy1 = np.minimum(iy + 1, coarse.Ny - 1)
        return ((1 - tx) * (1 - ty) * m[iy, ix] + tx * (1 - ty) * m[iy, ix1]
                + (1 - tx) * ty * m[iy1, ix] + tx * ty * m[iy1, ix1])

    return interp


def _patch_pieces(coarse, field, box):
    r = coarse.ratio
    cx0, cx1, cy0, cy1 = box
    sy = slice(cy0 * r, (cy1 + 1) * r)
    sx = slice(cx0 * r, (cx1 + 1) * r)
    return sy, sx, field.values[sy, sx]


def _patch_operator_with_rim(coarse, field, box, interp, global_bc="neumann"):
    """Patch operator whose truncation rim carries interpolated Dirichlet data.

    Sides on the domain boundary inherit the global boundary condition:
    no-flux for the flow tests, homogeneous Dirichlet for the model problem.
    """
    fine = coarse.fine
    sy, sx, k = _patch_pieces(coarse, field, box)
    cx0, cx1, cy0, cy1 = box
    on_domain = (cx0 == 0, cx1 == coarse.Nx - 1, cy0 == 0, cy1 == coarse.Ny - 1)
    inherit = global_bc == "dirichlet"
    sides = tuple((inherit if on else True) for on in on_domain)
    xs = (np.arange(sx.start, sx.stop) + 0.5) * fine.hx
    ys = (np.arange(sy.start, sy.stop) + 0.5) * fine.hy
    # Dirichlet data lives on the patch boundary itself (half-cell distance)
    ghost = {
        "left": (np.full(ys.size, xs[0] - fine.hx / 2), ys),
        "right": (np.full(ys.size, xs[-1] + fine.hx / 2), ys),
        "bottom": (xs, np.full(xs.size, ys[0] - fine.hy / 2)),
        "top": (xs, np.full(xs.size, ys[-1] + fine.hy / 2)),
    }
    values = {}
    for side, on, use in zip(("left", "right", "bottom", "top"), on_domain, sides):
        if not use:
            continue
        values[side] = 0.0 if on else interp(*ghost[side])
    op = TpfaOperator(k, fine.hx, fine.hy, sides, values)
    return op, sy, sx


@dataclass(frozen=True)
class _ScaledField:
    """Raster wrapper with the same ``values`` attribute as a coefficient field."""

    values: np.ndarray


def _continuum_constraints(space, positions, box, ratio):
    """Plain-mean constraint rows of the given continua on patch unknowns."""
    cx0, cx1, cy0, cy1 = box
    width = (cx1 - cx0 + 1) * ratio
    height = (cy1 - cy0 + 1) * ratio
    rows, cols, vals = [], [], []
    for r, pos in enumerate(positions):
        fn = space.functions[pos]
        loc = (fn.rows - cy0 * ratio) * width + (fn.cols - cx0 * ratio)
        rows.append(np.full(loc.size, r))
        cols.append(loc)
        vals.append(np.full(loc.size, 1.0 / loc.size))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(positions), height * width))


def _solve_linear_patch(op, B, targets, model, b=0.0, mass=None):
    """One KKT solve of the affine constrained patch; returns (u, multipliers)."""
    rhs = np.concatenate([np.broadcast_to(b, (op.n,)) - op.apply(np.zeros(op.n), model),
                          targets])
    J = op.matrix(model)
    if mass is not None:
        J = J + sp.diags(mass)
    kkt = sp.bmat([[J, B.T], [B, None]], format="csc")
    sol = splu(kkt).solve(rhs)
    return sol[:op.n], sol[op.n:]


def _site_flux(coarse, site, op, sy, sx, u_patch, model, fw=None, s_patch=None):
    """Signed member-face flux (a -> b) of a site; optionally the water part."""
    rows_a, cols_a, rows_b, cols_b, orient = site.fine_faces
    ja, ia = rows_a - sy.start, cols_a - sx.start
    jb, ib = rows_b - sy.start, cols_b - sx.start
    U = u_patch.reshape(op.ny, op.nx)
    hx, hy = coarse.fine.hx, coarse.fine.hy
    if isinstance(orient, str):
        geom = hy / hx if orient == "v" else hx / hy
        d = hx if orient == "v" else hy
        geom = np.full(ja.size, geom)
        dd = np.full(ja.size, d)
    else:
        geom = np.where(orient == "v", hy / hx, hx / hy)
        dd = np.where(orient == "v", hx, hy)
    q = model.flux(U[ja, ia], U[jb, ib], op.k[ja, ia], op.k[jb, ib], geom, dd)
    total = float(np.sum(q))
    if fw is None:
        return total
    s_up = np.where(q >= 0, s_patch[ja, ia], s_patch[jb, ib])
    return total, float(np.sum(fw(s_up) * q))


class _SiteGroup:
    """Sites sharing one local solve: all pairs of a face, or of one cell."""

    def __init__(self, key, site_indices, box, host_cells):
        self.key = key
        self.site_indices = site_indices
        self.box = box
        self.host_cells = host_cells


def _group_sites(space, table):
    coarse = table.face_table.coarse
    groups = {}
    for idx, site in enumerate(table.sites):
        if site.face_index >= 0:
            face = table.face_table.faces[site.face_index]
            key = ("face", site.face_index)
            hosts = (face.cell_a, face.cell_b)
        else:
            key = ("cell", site.cell)
            hosts = (site.cell,)
        if key not in groups:
            groups[key] = _SiteGroup(key, [], site.box, hosts)
        groups[key].site_indices.append(idx)
    return list(groups.values())


class SiteCalibration:
    """Static per-site response calibration shared by all transmissibility solves.

    ``ramp[i]`` is the site's flux response per unit pair difference in a
    synthetic locally-linear mean field aligned with its face (the
    flow-based reference value: exactly the two-cell TPFA transmissibility
    for a per-cell-constant linear problem).  ``dd[i]`` is the site's
    unit-pair-difference dipole response on the reference coefficient field.
    Intra-cell exchange sites have no through-flow axis, so their ramp value
    is the dipole response itself.
    """

    def __init__(self, space, field, table, global_bc="neumann"):
        coarse = table.face_table.coarse
        self.ramp = np.zeros(len(table.sites))
        self.dd = np.zeros(len(table.sites))
        groups = _group_sites(space, table)
        ramps = {}
        for orient in ("v", "h"):
            m = np.zeros((coarse.Ny, coarse.Nx))
            for cy in range(coarse.Ny):
                for cx in range(coarse.Nx):
                    m[cy, cx] = -float(cx if orient == "v" else cy)
            ramps[orient] = m
        for group in groups:
            positions = space.in_cells(group.host_cells)
            B = _continuum_constraints(space, positions, group.box, coarse.ratio)
            sy, sx, _ = _patch_pieces(coarse, field, group.box)
            # reference dipole responses
            flat = _mean_interpolator(coarse, np.zeros((coarse.Ny, coarse.Nx)))
            op, _, _ = _patch_operator_with_rim(coarse, field, group.box, flat, global_bc)
            lin = LinearFaceFlux()
            kkt = sp.bmat([[op.matrix(lin), B.T], [B, None]], format="csc")
            lu = splu(kkt)
            pos_row = {p: r for r, p in enumerate(positions)}
            for idx in group.site_indices:
                site = table.sites[idx]
                rhs = np.zeros(op.n + len(positions))
                rhs[op.n + pos_row[site.pos_a]] = 0.5
                rhs[op.n + pos_row[site.pos_b]] = -0.5
                du = lu.solve(rhs)[:op.n]
                self.dd[idx] = _site_flux(coarse, site, op, sy, sx, du, lin)
                if self.dd[idx] <= 0:
                    raise ValueError("nonpositive dipole response; degenerate coupling site")
            # ramp responses for face sites
            for orient in ("v", "h"):
                face_sites = [i for i in group.site_indices
                              if table.sites[i].face_index >= 0
                              and table.face_table.faces[table.sites[i].face_index].orientation == orient]
                if not face_sites:
                    continue
                means = ramps[orient]
                interp = _mean_interpolator(coarse, means)
                op_r, _, _ = _patch_operator_with_rim(coarse, field, group.box, interp,
                                                      global_bc)
                cell_vals = np.array([
                    means[coarse.cell_xy(space.functions[p].cell)[1],
                          coarse.cell_xy(space.functions[p].cell)[0]]
                    for p in positions])
                u, _ = _solve_linear_patch(op_r, B, cell_vals, LinearFaceFlux())
                for idx in face_sites:
                    site = table.sites[idx]
                    q = _site_flux(coarse, site, op_r, sy, sx, u, LinearFaceFlux())
                    self.ramp[idx] = q  # pair difference is one by construction
            for idx in group.site_indices:
                if table.sites[idx].face_index < 0:
                    self.ramp[idx] = self.dd[idx]


def compute_transmissibility(space, field, table, group, cont_means, cell_means,
                             constitutive, mode, calibration, cont_saturation=None,
                             source=None, config=None, clip_band=(0.5, 2.0),
                             rel_eps=0.05, global_bc="neumann"):
    """Transmissibilities of all coupling sites sharing one local solve.

    The local problem freezes the nonlinear coefficient on the
    piecewise-constant fill of the current continuum means, so everything is
    one sparse factorization per group.  Two quantities come out of it per
    site: the *calibrated response* (unit-pair-difference dipole response,
    rescaled by the static ramp/dipole calibration so a locally linear state
    over a per-cell-constant linear problem yields exactly the two-cell TPFA
    value) and the *state ratio* (member flux of the source-driven
    constrained state over the pair mean difference, which captures how
    sub-cell structure such as a source peak inflates the difference).  The
    ratio is taken where sane and clipped to a band around the calibrated
    response where it degenerates (near-equal means, transversal flow), so
    the targets stay bounded and smooth enough to learn.

    Returns a dict ``site_index -> T`` (``(T, T_w)`` in two-phase mode).
    """
    coarse = table.face_table.coarse
    fine = coarse.fine
    positions = space.in_cells(group.host_cells)
    interp = _mean_interpolator(coarse, cell_means)

    if mode == "two_phase":
        if cont_saturation is None:
            raise ValueError("two-phase transmissibilities need continuum saturations")
        frozen_values = field.values * constitutive.lam_total(space.fill(cont_saturation))
    elif mode == "unsaturated":
        frozen_values = field.values * constitutive.k_r(space.fill(cont_means))
    else:
        raise ValueError(f"unknown transmissibility mode {mode!r}")

    op, sy, sx = _patch_operator_with_rim(coarse, _ScaledField(frozen_values),
                                          group.box, interp, global_bc)
    B = _continuum_constraints(space, positions, group.box, coarse.ratio)
    lin = LinearFaceFlux()
    kkt = sp.bmat([[op.matrix(lin), B.T], [B, None]], format="csc")
    lu = splu(kkt)
    pos_row = {p: r for r, p in enumerate(positions)}
    s_patch = space.fill(cont_saturation)[sy, sx] if mode == "two_phase" else None

    # source-driven constrained state (same factorization, one extra backsolve)
    targets = np.array([cont_means[p] for p in positions])
    b = np.zeros(op.n)
    if source is not None:
        b = np.asarray(source)[sy, sx].ravel() * fine.cell_area
    rhs_state = np.concatenate([b - op.apply(np.zeros(op.n), lin), targets])
    u_state = lu.solve(rhs_state)[:op.n]

    out = {}
    lo, hi = clip_band
    for idx in group.site_indices:
        site = table.sites[idx]
        rhs = np.zeros(op.n + len(positions))
        rhs[op.n + pos_row[site.pos_a]] = 0.5
        rhs[op.n + pos_row[site.pos_b]] = -0.5
        du = lu.solve(rhs)[:op.n]
        scale = calibration.ramp[idx] / calibration.dd[idx]
        m_a, m_b = cont_means[site.pos_a], cont_means[site.pos_b]
        diff = m_a - m_b
        tiny = 1e-12 * (1.0 + abs(m_a) + abs(m_b))
        # ratio weight: fades out when the pair difference is small against
        # the pair magnitudes (the ratio is 0/0-conditioned there)
        delta = rel_eps * (1e-9 + abs(m_a) + abs(m_b))
        w = diff * diff / (diff * diff + delta * delta)

        def value(q, dd_flux):
            cal = max(dd_flux * scale, 0.0)
            if cal <= 0.0 or abs(diff) <= tiny:
                return cal
            ratio = float(np.clip(q / diff, lo * cal, hi * cal)) / cal
            return cal * ratio**w

        if mode == "two_phase":
            t_dd, tw_dd = _site_flux(coarse, site, op, sy, sx, du, lin,
                                     fw=constitutive.frac_flow, s_patch=s_patch)
            q, qw = _site_flux(coarse, site, op, sy, sx, u_state, lin,
                               fw=constitutive.frac_flow, s_patch=s_patch)
            out[idx] = (value(q, t_dd), value(qw, tw_dd))
        else:
            t_dd = _site_flux(coarse, site, op, sy, sx, du, lin)
            q = _site_flux(coarse, site, op, sy, sx, u_state, lin)
            out[idx] = value(q, t_dd)
    return out


def baseline_upscale_transmissibility(coarse, field, face):
    """Classical flow-based face transmissibility from a two-cell unit-drop solve.

    No oversampling: Dirichlet one/zero on the outer edges of the pair,
    no-flux along the pair, flux over local mean difference.  Equals the
    harmonic-mean TPFA value for per-cell-constant permeability.
    """
    r = coarse.ratio
    cxa, cya = coarse.cell_xy(face.cell_a)
    cxb, cyb = coarse.cell_xy(face.cell_b)
    box = (min(cxa, cxb), max(cxa, cxb), min(cya, cyb), max(cya, cyb))
    sy, sx, k = _patch_pieces(coarse, field, box)
    fine = coarse.fine
    if face.orientation == "v":
        sides = (True, True, False, False)
        values = {"left": 1.0, "right": 0.0}
    else:
        sides = (False, False, True, True)
        values = {"bottom": 1.0, "top": 0.0}
    op = TpfaOperator(k, fine.hx, fine.hy, sides, values)
    model = LinearFaceFlux()
    rhs = -op.apply(np.zeros(op.n), model)
    u = splu(op.matrix(model).tocsc()).solve(rhs).reshape(op.ny, op.nx)
    if face.orientation == "v":
        mean_a, mean_b = u[:, :r].mean(), u[:, r:].mean()
    else:
        mean_a, mean_b = u[:r, :].mean(), u[r:, :].mean()
    strip_a, strip_b = _face_strips(coarse, face.orientation, face.cell_a)
    ja, ia = strip_a[0] - sy.start, strip_a[1] - sx.start
    jb, ib = strip_b[0] - sy.start, strip_b[1] - sx.start
    geom = fine.hy / fine.hx if face.orientation == "v" else fine.hx / fine.hy
    d = fine.hx if face.orientation == "v" else fine.hy
    q = float(np.sum(model.flux(u[ja, ia], u[jb, ib], op.k[ja, ia], op.k[jb, ib], geom, d)))
    return q / (mean_a - mean_b)


# ---------------------------------------------------------------------------
# features and dataset

_NEIGHBOR_OFFSETS = [(-1, -1), (0, -1), (1, -1), (-1, 0), (0, 0), (1, 0),
                     (-1, 1), (0, 1), (1, 1), (-2, 0), (2, 0), (0, 2)]


def _site_tpfa_sum(coarse, field, site):
    """Direct TPFA sum over a site's member fine faces (static strength proxy)."""
    rows_a, cols_a, rows_b, cols_b, orient = site.fine_faces
    k = field.values
    hx, hy = coarse.fine.hx, coarse.fine.hy
    ka, kb = k[rows_a, cols_a], k[rows_b, cols_b]
    if isinstance(orient, str):
        geom = hy / hx if orient == "v" else hx / hy
    else:
        geom = np.where(orient == "v", hy / hx, hx / hy)
    return float(np.sum(geom * 2 * ka * kb / (ka + kb)))


def _site_static_features(space, coarse, field, indicator, site, t_up_face, source,
                          cal_ramp, cal_dd):
    sy, sx, k = _patch_pieces(coarse, field, site.box)
    logk = np.log(k)
    frac = np.asarray(indicator, dtype=bool)
    fa = space.functions[site.pos_a]
    fb = space.functions[site.pos_b]
    t_sum = _site_tpfa_sum(coarse, field, site)
    area = coarse.fine.cell_area
    src = np.zeros(k.shape) if source is None else np.asarray(source)
    return [
        t_sum,
        math.log(max(t_sum, 1e-300)),
        t_up_face,
        float(logk.mean()),
        float(np.quantile(logk, 0.25)),
        float(np.quantile(logk, 0.75)),
        float(frac[coarse.cell_slices(fa.cell)].sum()),
        float(frac[coarse.cell_slices(fb.cell)].sum()),
        float(fa.size),
        float(fb.size),
        float(src[fa.rows, fa.cols].sum() * area) if source is not None else 0.0,
        float(src[fb.rows, fb.cols].sum() * area) if source is not None else 0.0,
        cal_ramp,
        math.log(max(cal_ramp, 1e-300)),
        cal_dd,
    ]


_STATIC_NAMES = ["t_tpfa", "log_t_tpfa", "t_up_face", "logk_mean", "logk_q25",
                 "logk_q75", "frac_a", "frac_b", "size_a", "size_b", "src_a", "src_b",
                 "cal_ramp", "log_cal_ramp", "cal_dd"]


def feature_names(mode):
    nb = [f"nb_u_{i}" for i in range(len(_NEIGHBOR_OFFSETS))]
    if mode == "unsaturated":
        return _STATIC_NAMES + ["u_a", "u_b", "u_mid", "u_diff", "t_kr"] + nb
    nbs = [f"nb_s_{i}" for i in range(len(_NEIGHBOR_OFFSETS))]
    return (_STATIC_NAMES + ["p_a", "p_b", "p_diff", "s_a", "s_b", "s_mid",
                             "t_lam", "t_lam_fw"] + nb + nbs)


def _neighbor_means(coarse, site, space, means_raster):
    """Cell means at fixed offsets around the site's anchor cell (clamped)."""
    if site.cell >= 0:
        ax, ay = coarse.cell_xy(site.cell)
    else:
        fa = space.functions[site.pos_a]
        fb = space.functions[site.pos_b]
        axa, aya = coarse.cell_xy(fa.cell)
        axb, ayb = coarse.cell_xy(fb.cell)
        ax, ay = (axa + axb) / 2.0, (aya + ayb) / 2.0
    out = []
    for dx, dy in _NEIGHBOR_OFFSETS:
        cx = int(np.clip(round(ax + dx), 0, coarse.Nx - 1))
        cy = int(np.clip(round(ay + dy), 0, coarse.Ny - 1))
        out.append(float(means_raster[cy, cx]))
    return out


def _site_features(space, coarse, site, static, state, constitutive, mode):
    cont = state["cont"]
    ua, ub = float(cont[site.pos_a]), float(cont[site.pos_b])
    t_sum = static[0]
    if mode == "unsaturated":
        mid = 0.5 * (ua + ub)
        return static + [ua, ub, mid, ua - ub, t_sum * float(constitutive.k_r(mid))] \
            + _neighbor_means(coarse, site, space, state["cells"])
    s = state["cont_s"]
    sa, sb = float(s[site.pos_a]), float(s[site.pos_b])
    smid = 0.5 * (sa + sb)
    lam = float(constitutive.lam_total(smid))
    fw = float(constitutive.frac_flow(max(sa, sb)))
    return (static + [ua, ub, ua - ub, sa, sb, smid, t_sum * lam, t_sum * lam * fw]
            + _neighbor_means(coarse, site, space, state["cells"])
            + _neighbor_means(coarse, site, space, state["cells_s"]))


@dataclass
class Dataset:
    """Feature/target table with per-sample class tags and a seeded split."""

    X: np.ndarray
    y: np.ndarray
    classes: list
    feature_names: list
    target_names: list
    site_index: np.ndarray
    step_index: np.ndarray

    def __len__(self):
        return self.X.shape[0]

    def split(self, seed):
        """Disjoint, exhaustive 80:20 split within each class (validation = floor(0.2 n))."""
        rng = np.random.default_rng(seed)
        train_idx, val_idx = [], []
        for cls in CLASS_NAMES:
            idx = np.array([i for i, c in enumerate(self.classes) if c == cls], dtype=int)
            if idx.size == 0:
                continue
            perm = rng.permutation(idx.size)
            n_val = int(math.floor(0.2 * idx.size))
            val_idx.extend(idx[perm[:n_val]].tolist())
            train_idx.extend(idx[perm[n_val:]].tolist())
        return sorted(train_idx), sorted(val_idx)


class _StaticData:
    """Per-site static features shared by dataset generation and prediction."""

    def __init__(self, space, coarse, field, indicator, table, source=None,
                 calibration=None):
        if calibration is None:
            calibration = SiteCalibration(space, field, table)
        t_up = {}
        for fi, face in enumerate(table.face_table.faces):
            t_up[fi] = baseline_upscale_transmissibility(coarse, field, face)
        self.rows = []
        for i, site in enumerate(table.sites):
            face_t = t_up.get(site.face_index, 0.0)
            self.rows.append(_site_static_features(
                space, coarse, field, indicator, site, face_t, source,
                float(calibration.ramp[i]), float(calibration.dd[i])))


def generate_dataset(space, field, indicator, table, trajectory, constitutive,
                     mode, stride=1, config=None, global_bc="neumann", source=None):
    """One sample per (coupling site, sampled time step) from a fine run.

    ``trajectory`` is the fine state sequence: rasters for unsaturated mode,
    ``(p, s)`` pairs for two-phase mode.  Targets come from the constrained
    local transmissibility solves evaluated at the continuum means of the
    fine state; determinism follows from the fixed (step, site) ordering.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    coarse = table.face_table.coarse
    calibration = SiteCalibration(space, field, table, global_bc)
    static = _StaticData(space, coarse, field, indicator, table, source, calibration)
    groups = _group_sites(space, table)
    rows, targets, classes, site_idx, step_idx = [], [], [], [], []
    for step in range(1, len(trajectory), stride):
        if mode == "unsaturated":
            u = trajectory[step]
            state = {"cont": continuum_means(space, u)}
            state["cells"] = cell_state_means(space, state["cont"])
            sat = None
        else:
            p, s = trajectory[step]
            state = {"cont": continuum_means(space, p),
                     "cont_s": continuum_means(space, s)}
            state["cells"] = cell_state_means(space, state["cont"])
            state["cells_s"] = cell_state_means(space, state["cont_s"])
            sat = state["cont_s"]
        values = {}
        for group in groups:
            values.update(compute_transmissibility(
                space, field, table, group, state["cont"], state["cells"],
                constitutive, mode, calibration, cont_saturation=sat,
                source=source, config=config, global_bc=global_bc))
        for idx, site in enumerate(table.sites):
            t = values[idx]
            targets.append([t] if mode == "unsaturated" else list(t))
            rows.append(_site_features(space, coarse, site, static.rows[idx],
                                       state, constitutive, mode))
            classes.append(site.cls)
            site_idx.append(idx)
            step_idx.append(step)
    target_names = ["t_nl"] if mode == "unsaturated" else ["t_nl", "t_w_nl"]
    return Dataset(
        X=np.array(rows, dtype=float),
        y=np.array(targets, dtype=float),
        classes=classes,
        feature_names=feature_names(mode),
        target_names=target_names,
        site_index=np.array(site_idx),
        step_index=np.array(step_idx),
    )


# ---------------------------------------------------------------------------
# regressors

class RidgeModel:
    """Ridge regression on standardized features, solved from averaged normal equations.

    Using per-sample means makes the fit invariant under duplicating the
    training set.
    """

    def __init__(self, alpha=1e-8):
        self.alpha = alpha
        self.mean = None
        self.scale = None
        self.coef = None
        self.intercept = None

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        self.mean = X.mean(axis=0)
        self.scale = np.maximum(X.std(axis=0), 1e-12)
        Z = (X - self.mean) / self.scale
        n = X.shape[0]
        G = Z.T @ Z / n + self.alpha * np.eye(X.shape[1])
        self.intercept = y.mean(axis=0)
        self.coef = np.linalg.solve(G, Z.T @ (y - self.intercept) / n)
        return self

    def predict(self, X):
        Z = (np.asarray(X, dtype=float) - self.mean) / self.scale
        return Z @ self.coef + self.intercept

    def to_dict(self):
        return {"family": "ridge", "alpha": self.alpha,
                "mean": self.mean.tolist(), "scale": self.scale.tolist(),
                "coef": self.coef.tolist(), "intercept": np.asarray(self.intercept).tolist()}

    @classmethod
    def from_dict(cls, d):
        m = cls(alpha=d["alpha"])
        m.mean = np.array(d["mean"])
        m.scale = np.array(d["scale"])
        m.coef = np.array(d["coef"])
        m.intercept = np.array(d["intercept"])
        return m


class KnnModel:
    """Inverse-distance k-nearest-neighbor regression on standardized features.

    When an anchor feature is given, the model learns the ratio of the target
    to that (strictly positive) feature and multiplies back at prediction
    time, so the physics scaling extrapolates beyond the training manifold
    and only a bounded correction is interpolated.
    """

    def __init__(self, k=3, anchor=None):
        self.k = k
        self.anchor = anchor
        self.mean = None
        self.scale = None
        self.Z = None
        self.y = None

    def _ratio(self, X, y):
        if self.anchor is None:
            return y
        a = np.asarray(X, dtype=float)[:, self.anchor]
        return y / np.maximum(a, 1e-30)[:, None]

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        self.mean = X.mean(axis=0)
        self.scale = np.maximum(X.std(axis=0), 1e-12)
        self.Z = (X - self.mean) / self.scale
        self.y = self._ratio(X, np.asarray(y, dtype=float))
        return self

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = (X - self.mean) / self.scale
        out = np.zeros((Z.shape[0],) + self.y.shape[1:])
        k = min(self.k, self.Z.shape[0])
        for i, z in enumerate(Z):
            d = np.linalg.norm(self.Z - z, axis=1)
            nearest = np.argsort(d, kind="stable")[:k]
            if d[nearest[0]] == 0.0:
                out[i] = self.y[nearest[0]]
                continue
            w = 1.0 / d[nearest]
            out[i] = (w @ self.y[nearest]) / w.sum()
        if self.anchor is not None:
            out = out * np.maximum(X[:, self.anchor], 1e-30)[:, None]
        return out

    def to_dict(self):
        return {"family": "knn", "k": self.k, "anchor": self.anchor,
                "mean": self.mean.tolist(), "scale": self.scale.tolist(),
                "Z": self.Z.tolist(), "y": self.y.tolist()}

    @classmethod
    def from_dict(cls, d):
        m = cls(k=d["k"], anchor=d.get("anchor"))
        m.mean = np.array(d["mean"])
        m.scale = np.array(d["scale"])
        m.Z = np.array(d["Z"])
        m.y = np.array(d["y"])
        return m


_FAMILIES = {"ridge": RidgeModel, "knn": KnnModel}


class UntrainedClassError(RuntimeError):
    """Prediction requested for a class that had no training samples."""


@dataclass
class PerClassRegressor:
    """One regressor per coupling class, mirroring the four per-type networks."""

    mode: str
    family: str = "ridge"
    models: dict = field(default_factory=dict)
    names: list = field(default_factory=list)

    def predict(self, cls, x):
        if cls not in self.models:
            raise UntrainedClassError(f"no trained model for class {cls!r}")
        return self.models[cls].predict(np.asarray(x, dtype=float)[None, :])[0]

    def predict_many(self, cls, X):
        if cls not in self.models:
            raise UntrainedClassError(f"no trained model for class {cls!r}")
        return self.models[cls].predict(np.asarray(X, dtype=float))


def train(dataset, mode, family="ridge", seed=0):
    """Train per-class models on the 80:20 split; returns the regressor and metrics.

    Validation metrics are per class and per target; an empty class yields no
    model and predictions for it fail loudly.
    """
    train_idx, val_idx = dataset.split(seed)
    reg = PerClassRegressor(mode=mode, family=family, names=dataset.feature_names)
    report = {}
    cls_arr = np.array(dataset.classes)
    anchor_name = "t_kr" if mode == "unsaturated" else "t_lam"
    anchor = (dataset.feature_names.index(anchor_name)
              if anchor_name in dataset.feature_names else None)
    for cls in CLASS_NAMES:
        tr = [i for i in train_idx if cls_arr[i] == cls]
        va = [i for i in val_idx if cls_arr[i] == cls]
        if not tr:
            continue
        model = KnnModel(anchor=anchor) if family == "knn" else _FAMILIES[family]()
        model.fit(dataset.X[tr], dataset.y[tr])
        reg.models[cls] = model
        if va:
            pred = np.atleast_2d(model.predict(dataset.X[va]))
            if pred.shape[0] == 1 and len(va) > 1:
                pred = pred.T
            per_target = {}
            for t in range(dataset.y.shape[1]):
                per_target[dataset.target_names[t]] = metrics(dataset.y[va][:, t],
                                                              pred[:, t])
            report[cls] = {"n_train": len(tr), "n_val": len(va),
                           "per_target": per_target}
    return reg, report


def save_models(path, reg):
    """Versioned text serialization of the per-class models."""
    payload = {
        "version": 1,
        "mode": reg.mode,
        "family": reg.family,
        "feature_names": reg.names,
        "classes": {cls: m.to_dict() for cls, m in sorted(reg.models.items())},
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_models(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != 1:
        raise ValueError(f"unsupported model file version {payload.get('version')!r}")
    reg = PerClassRegressor(mode=payload["mode"], family=payload["family"],
                            names=payload["feature_names"])
    for cls, d in payload["classes"].items():
        reg.models[cls] = _FAMILIES[d["family"]].from_dict(d)
    return reg


def write_dataset_csv(path, dataset):
    """CSV with one named column per feature, the class tag and the targets."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "site", "cls"] + dataset.feature_names + dataset.target_names)
        for i in range(len(dataset)):
            writer.writerow(
                [int(dataset.step_index[i]), int(dataset.site_index[i]), dataset.classes[i]]
                + [repr(float(v)) for v in dataset.X[i]]
                + [repr(float(v)) for v in dataset.y[i]])


def read_dataset_csv(path):
    import csv

    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    n_meta = 3
    target_start = len(header) - (2 if header[-1] == "t_w_nl" else 1)
    X, y, classes, sites, steps = [], [], [], [], []
    for row in rows:
        steps.append(int(row[0]))
        sites.append(int(row[1]))
        classes.append(row[2])
        X.append([float(v) for v in row[n_meta:target_start]])
        y.append([float(v) for v in row[target_start:]])
    return Dataset(X=np.array(X), y=np.array(y), classes=classes,
                   feature_names=header[n_meta:target_start],
                   target_names=header[target_start:],
                   site_index=np.array(sites), step_index=np.array(steps))


# ---------------------------------------------------------------------------
# transmissibility providers (multi-continuum model)

class SurrogateProvider:
    """Site transmissibilities predicted by the trained per-class models."""

    def __init__(self, space, field, indicator, table, reg, constitutive, source=None):
        self.space = space
        self.table = table
        self.coarse = table.face_table.coarse
        self.reg = reg
        self.cs = constitutive
        self.static = _StaticData(space, self.coarse, field, indicator, table, source).rows

    def __call__(self, state):
        n_t = 1 if self.reg.mode == "unsaturated" else 2
        out = np.zeros((len(self.table.sites), n_t))
        by_cls = self.table.by_class()
        for cls, indices in by_cls.items():
            if not indices:
                continue
            X = [ _site_features(self.space, self.coarse, self.table.sites[i],
                                 self.static[i], state, self.cs, self.reg.mode)
                  for i in indices]
            pred = np.atleast_2d(self.reg.predict_many(cls, X))
            if pred.shape[0] == 1 and len(indices) > 1:
                pred = pred.T
            for row, i in enumerate(indices):
                out[i] = pred[row]
        return out


class ExactProvider:
    """Site transmissibilities from direct local solves (ground-truth targets)."""

    def __init__(self, space, field, table, constitutive, mode,
                 config=None, global_bc="neumann", source=None):
        self.space = space
        self.field = field
        self.table = table
        self.cs = constitutive
        self.mode = mode
        self.config = config
        self.global_bc = global_bc
        self.source = source
        self.groups = _group_sites(space, table)
        self.calibration = SiteCalibration(space, field, table, global_bc)

    def __call__(self, state):
        n_t = 1 if self.mode == "unsaturated" else 2
        out = np.zeros((len(self.table.sites), n_t))
        sat = state.get("cont_s")
        for group in self.groups:
            vals = compute_transmissibility(
                self.space, self.field, self.table, group, state["cont"],
                state["cells"], self.cs, self.mode, self.calibration,
                cont_saturation=sat, source=self.source, config=self.config,
                global_bc=self.global_bc)
            for idx, v in vals.items():
                out[idx] = v
        return out


class BaselineProvider:
    """Classical single-continuum upscaling: linearized face transmissibilities,
    nonlinearity applied pointwise at the coarse means."""

    def __init__(self, coarse, field, face_table, constitutive, mode):
        self.coarse = coarse
        self.faces = face_table.faces
        self.cs = constitutive
        self.mode = mode
        self.t_up = np.array([baseline_upscale_transmissibility(coarse, field, f)
                              for f in self.faces])

    def __call__(self, i, state):
        face = self.faces[i]
        cxa, cya = self.coarse.cell_xy(face.cell_a)
        cxb, cyb = self.coarse.cell_xy(face.cell_b)
        if self.mode == "unsaturated":
            um = 0.5 * (state["u"][cya, cxa] + state["u"][cyb, cxb])
            return np.array([self.t_up[i] * float(self.cs.k_r(um))])
        s = state["s"]
        p = state["p"]
        sa, sb = float(s[cya, cxa]), float(s[cyb, cxb])
        lam = float(self.cs.lam_total(0.5 * (sa + sb)))
        s_up = sa if p[cya, cxa] >= p[cyb, cxb] else sb
        t = self.t_up[i] * lam
        return np.array([t, t * float(self.cs.frac_flow(s_up))])


# ---------------------------------------------------------------------------
# coarse solvers

def _site_matrix(n, sites, t_values, extra_diag=None):
    rows, cols, vals = [], [], []
    for site, t in zip(sites, t_values):
        a, b = site.pos_a, site.pos_b
        rows.extend([a, b, a, b])
        cols.extend([a, b, b, a])
        vals.extend([t, t, -t, -t])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    if extra_diag is not None:
        A = A + sp.diags(extra_diag)
    return A


def _continuum_sources(space, source):
    """Total source rate attributed to each continuum (sum of member cell rates)."""
    area = space.coarse.fine.cell_area
    f = np.asarray(source, dtype=float)
    return np.array([float(f[fn.rows, fn.cols].sum() * area) for fn in space.functions])


def _state_unsat(space, cont):
    return {"cont": cont, "cells": cell_state_means(space, cont)}


def solve_multicontinuum_unsaturated(space, table, provider, constitutive, indicator,
                                     dt, steps, source, picard_tol=1e-6, picard_max=80):
    """Multi-continuum coarse stepping with provider-supplied transmissibilities.

    Backward Euler over the continuum means; within each step the site
    transmissibilities lag one Picard iterate behind the state.  Returns the
    per-step lists of continuum-mean vectors and coarse cell-mean rasters.
    """
    area = space.coarse.fine.cell_area
    c = constitutive.storage(indicator)
    cap = np.array([float(c[fn.rows, fn.cols].sum() * area) for fn in space.functions]) / dt
    q = _continuum_sources(space, source)
    n = space.n
    u = np.zeros(n)
    cont_series = [u.copy()]
    cell_series = [cell_state_means(space, u)]
    for step in range(steps):
        u_old = u.copy()
        rhs = q + cap * u_old
        change = np.inf
        prev_change = np.inf
        relax = 1.0
        t_used = None
        for it in range(picard_max):
            t_new = provider(_state_unsat(space, u))[:, 0]
            # damp the transmissibility table itself: nearest-neighbor models
            # switch discontinuously with the state, so plain lagging can
            # cycle; freezing the table for the last sweeps guarantees the
            # returned state solves its (frozen) system exactly
            if it >= picard_max - 3:
                relax = 0.0
            t_used = t_new if t_used is None else t_used + relax * (t_new - t_used)
            A = _site_matrix(n, table.sites, t_used, extra_diag=cap)
            u_new = splu(A.tocsc()).solve(rhs)
            change = float(np.linalg.norm(u_new - u)) / (1.0 + float(np.linalg.norm(u_new)))
            u = u_new
            if change <= picard_tol:
                break
            if it >= 4 and change > 0.7 * prev_change:
                relax = max(0.125, 0.5 * relax)
            prev_change = change
        else:
            raise NonlinearSolveError(f"coarse Picard did not converge at step {step}",
                                      [change])
        cont_series.append(u.copy())
        cell_series.append(cell_state_means(space, u))
    return cont_series, cell_series


def solve_multicontinuum_two_phase(space, table, provider, constitutive, dt, steps,
                                   source, cfl_target=0.9):
    """Multi-continuum coarse IMPES with provider-supplied (total, water) pairs."""
    area = space.coarse.fine.cell_area
    q = _continuum_sources(space, source)
    inj = np.clip(q, 0.0, None)
    prod = np.clip(q, None, 0.0)
    n = space.n
    pore = constitutive.porosity * area * np.array(
        [fn.size for fn in space.functions], dtype=float)
    s = np.zeros(n)
    p = np.zeros(n)
    p_cont, s_cont = [], [s.copy()]
    p_cells, s_cells = [], [cell_state_means(space, s)]
    for _ in range(steps):
        state = {"cont": p, "cells": cell_state_means(space, p),
                 "cont_s": s, "cells_s": cell_state_means(space, s)}
        tv = provider(state)
        A = _site_matrix(n, table.sites, tv[:, 0])
        ones = np.ones((n, 1))
        bordered = sp.bmat([[A, ones], [ones.T, None]], format="csc")
        p = splu(bordered).solve(np.concatenate([q, [0.0]]))[:n]
        dp = np.array([p[site.pos_a] - p[site.pos_b] for site in table.sites])
        qt_site = tv[:, 0] * dp
        up_pos = np.array([site.pos_a if qt >= 0 else site.pos_b
                           for site, qt in zip(table.sites, qt_site)])
        # learned water/total anisotropy of each site; the in-substep water
        # flux tracks the upwind fractional flow (keeps the transport
        # conservative when a small continuum fills within one step)
        fw0 = constitutive.frac_flow(s[up_pos])
        rho_raw = np.where(fw0 > 1e-9,
                           np.clip(tv[:, 1] / np.maximum(fw0 * tv[:, 0], 1e-30), 0.2, 5.0),
                           1.0)
        # anisotropy correction fades as the upwind side saturates so the
        # water flux meets the total flux exactly at full saturation
        rho = 1.0 + (rho_raw - 1.0) * (1.0 - fw0)
        # substep count from the stiffest continuum: throughput against pore
        # volume (fracture continua have tiny pore volumes)
        rate = -prod + inj
        for site, qt in zip(table.sites, qt_site):
            rate[site.pos_a] += 2 * abs(qt)
            rate[site.pos_b] += 2 * abs(qt)
        cfl = dt * float((rate / pore).max())
        n_sub = max(1, math.ceil(cfl / cfl_target))
        dts = dt / n_sub
        for _ in range(n_sub):
            fw = constitutive.frac_flow(s)
            qw_site = np.minimum(rho * fw[up_pos], 1.0) * qt_site
            div_w = np.zeros(n)
            for site, qw in zip(table.sites, qw_site):
                div_w[site.pos_a] += qw
                div_w[site.pos_b] -= qw
            q_w = inj + fw * prod
            s = np.clip(s + dts / pore * (q_w - div_w), 0.0, 1.0)
        p_cont.append(p.copy())
        s_cont.append(s.copy())
        p_cells.append(cell_state_means(space, p))
        s_cells.append(cell_state_means(space, s))
    return (p_cont, s_cont), (p_cells, s_cells)


def solve_singlecontinuum_unsaturated(coarse, face_table, provider, constitutive,
                                      indicator, dt, steps, source,
                                      picard_tol=1e-6, picard_max=80):
    """Single-continuum coarse stepping over cell means (the classical baseline)."""
    faces = face_table.faces
    r = coarse.ratio
    area = coarse.fine.cell_area
    cap = (constitutive.storage(indicator) * area).reshape(
        coarse.Ny, r, coarse.Nx, r).sum(axis=(1, 3)).ravel() / dt
    q = (np.asarray(source, dtype=float) * area).reshape(
        coarse.Ny, r, coarse.Nx, r).sum(axis=(1, 3)).ravel()
    n = coarse.n_cells
    u = np.zeros(n)
    series = [u.reshape(coarse.Ny, coarse.Nx).copy()]
    for step in range(steps):
        u_old = u.copy()
        rhs = q + cap * u_old
        change = np.inf
        prev_change = np.inf
        relax = 1.0
        t_used = None
        for it in range(picard_max):
            state = {"u": u.reshape(coarse.Ny, coarse.Nx)}
            t_new = np.array([float(provider(i, state)[0]) for i in range(len(faces))])
            if it >= picard_max - 3:
                relax = 0.0
            t_used = t_new if t_used is None else t_used + relax * (t_new - t_used)
            rows, cols, vals = [], [], []
            for face, t in zip(faces, t_used):
                a, b = face.cell_a, face.cell_b
                rows.extend([a, b, a, b])
                cols.extend([a, b, b, a])
                vals.extend([t, t, -t, -t])
            A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n)) + sp.diags(cap)
            u_new = splu(A.tocsc()).solve(rhs)
            change = float(np.linalg.norm(u_new - u)) / (1.0 + float(np.linalg.norm(u_new)))
            u = u_new
            if change <= picard_tol:
                break
            if it >= 4 and change > 0.7 * prev_change:
                relax = max(0.125, 0.5 * relax)
            prev_change = change
        else:
            raise NonlinearSolveError(f"baseline Picard did not converge at step {step}",
                                      [change])
        series.append(u.reshape(coarse.Ny, coarse.Nx).copy())
    return series


def solve_singlecontinuum_two_phase(coarse, face_table, provider, constitutive,
                                    dt, steps, source, cfl_target=0.9):
    """Single-continuum coarse IMPES over cell means (the classical baseline)."""
    faces = face_table.faces
    area = coarse.fine.cell_area
    r = coarse.ratio
    q = (np.asarray(source, dtype=float) * area).reshape(
        coarse.Ny, r, coarse.Nx, r).sum(axis=(1, 3)).ravel()
    inj = np.clip(q, 0.0, None)
    prod = np.clip(q, None, 0.0)
    pore = constitutive.porosity * coarse.Hx * coarse.Hy
    n = coarse.n_cells
    s = np.zeros(n)
    p_series, s_series = [], [np.zeros((coarse.Ny, coarse.Nx))]
    for _ in range(steps):
        state = {"p": np.zeros((coarse.Ny, coarse.Nx)) if not p_series else p_series[-1],
                 "s": s.reshape(coarse.Ny, coarse.Nx)}
        tv = np.array([provider(i, state) for i in range(len(faces))])
        rows, cols, vals = [], [], []
        for face, t in zip(faces, tv[:, 0]):
            a, b = face.cell_a, face.cell_b
            rows.extend([a, b, a, b])
            cols.extend([a, b, b, a])
            vals.extend([t, t, -t, -t])
        A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        ones = np.ones((n, 1))
        bordered = sp.bmat([[A, ones], [ones.T, None]], format="csc")
        p = splu(bordered).solve(np.concatenate([q, [0.0]]))[:n]
        dp = np.array([p[f.cell_a] - p[f.cell_b] for f in faces])
        qt_face = tv[:, 0] * dp
        up_cell = np.array([f.cell_a if qt >= 0 else f.cell_b
                            for f, qt in zip(faces, qt_face)])
        fw0 = constitutive.frac_flow(s[up_cell])
        rho_raw = np.where(fw0 > 1e-9,
                           np.clip(tv[:, 1] / np.maximum(fw0 * tv[:, 0], 1e-30), 0.2, 5.0),
                           1.0)
        rho = 1.0 + (rho_raw - 1.0) * (1.0 - fw0)
        rate = -prod + inj
        for f, qt in zip(faces, qt_face):
            rate[f.cell_a] += 2 * abs(qt)
            rate[f.cell_b] += 2 * abs(qt)
        cfl = dt * float(rate.max()) / pore
        n_sub = max(1, math.ceil(cfl / cfl_target))
        dts = dt / n_sub
        for _ in range(n_sub):
            fw = constitutive.frac_flow(s)
            qw_face = np.minimum(rho * fw[up_cell], 1.0) * qt_face
            div_w = np.zeros(n)
            for f, qw in zip(faces, qw_face):
                div_w[f.cell_a] += qw
                div_w[f.cell_b] -= qw
            q_w = inj + fw * prod
            s = np.clip(s + dts / pore * (q_w - div_w), 0.0, 1.0)
        p_series.append(p.reshape(coarse.Ny, coarse.Nx).copy())
        s_series.append(s.reshape(coarse.Ny, coarse.Nx).copy())
    return p_series, s_series


def solve_coarse_with_surrogate(space, table, reg, field, indicator,
                                constitutive, dt, steps, source, mode):
    """Multi-continuum coarse solve driven by the trained surrogate."""
    provider = SurrogateProvider(space, field, indicator, table, reg, constitutive,
                                 source=source)
    if mode == "unsaturated":
        _, cells = solve_multicontinuum_unsaturated(space, table, provider, constitutive,
                                                    indicator, dt, steps, source)
        return cells
    _, (p_cells, s_cells) = solve_multicontinuum_two_phase(space, table, provider,
                                                           constitutive, dt, steps, source)
    return p_cells, s_cells


def baseline_upscale(coarse, face_table, field, indicator, constitutive, dt, steps,
                     source, mode):
    """Single-continuum coarse solve with classical linearized transmissibilities."""
    provider = BaselineProvider(coarse, field, face_table, constitutive, mode)
    if mode == "unsaturated":
        return solve_singlecontinuum_unsaturated(coarse, face_table, provider,
                                                 constitutive, indicator, dt, steps, source)
    return solve_singlecontinuum_two_phase(coarse, face_table, provider, constitutive,
                                           dt, steps, source)
