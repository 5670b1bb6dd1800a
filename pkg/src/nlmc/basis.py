"""Linear NLMC: constrained multiscale basis functions and the upscaled system.

A basis function lives on the oversampled patch of its coarse cell and solves
a saddle-point problem there: TPFA flux balance against a weighted-multiplier
term, subject to normalized moment constraints (weighted average one on its
own continuum, zero on every other continuum of the patch).  The upscaled
system is the Galerkin system of these basis functions under the fine-grid
energy form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fine_solver import TpfaOperator, harmonic_faces
from .media import write_raster

__all__ = [
    "BasisFunction",
    "MultiscaleBasis",
    "UpscaledSystem",
    "patch_operator",
    "constraint_matrix",
    "build_basis_linear",
    "build_all_basis",
    "assemble_upscaled",
    "solve_coarse_linear",
    "energy_norm",
    "s_norm",
    "export_upscaled_matrix",
    "export_basis",
]


class SingularLocalProblem(RuntimeError):
    """A local saddle-point system was singular (rank-deficient constraints)."""


def patch_operator(region, field, global_bc="dirichlet"):
    """TPFA operator on an oversampled patch.

    Sides of the patch interior to the domain always get homogeneous Dirichlet
    data (the localization truncation); sides lying on the domain boundary
    inherit the global boundary condition.
    """
    coarse = region.coarse
    sy, sx = region.fine_slices()
    k = field.values[sy, sx]
    inherit_dirichlet = global_bc == "dirichlet"
    sides = (
        inherit_dirichlet if region.cx0 == 0 else True,
        inherit_dirichlet if region.cx1 == coarse.Nx - 1 else True,
        inherit_dirichlet if region.cy0 == 0 else True,
        inherit_dirichlet if region.cy1 == coarse.Ny - 1 else True,
    )
    return TpfaOperator(k, coarse.fine.hx, coarse.fine.hy, sides)


def constraint_matrix(space, region, cells=None):
    """Normalized moment rows over a patch.

    Returns
    -------
    (B, positions)
        ``B`` is ``(n_constraints, n_patch_cells)`` with row ``r`` the
        normalized weighted moment of constraint ``positions[r]``; applying it
        to a patch raster yields the macro values of the patch continua.
        ``cells`` restricts the constrained continua to a subset of the
        patch's coarse cells (all of them by default).
    """
    positions = space.in_cells(region.coarse_cells() if cells is None else cells)
    sy, sx = region.fine_slices()
    height, width = region.fine_shape()
    rows, cols, vals = [], [], []
    for r, pos in enumerate(positions):
        fn = space.functions[pos]
        local = (fn.rows - sy.start) * width + (fn.cols - sx.start)
        rows.append(np.full(local.size, r))
        cols.append(local)
        vals.append(fn.s_weights / fn.weight)
    B = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(positions), height * width),
    )
    return B, positions


def _kkt_factor(A, B):
    kkt = sp.bmat([[A, B.T], [B, None]], format="csc")
    try:
        return splu(kkt)
    except RuntimeError as exc:
        raise SingularLocalProblem(f"singular local saddle-point system: {exc}") from exc


@dataclass(frozen=True)
class BasisFunction:
    """One multiscale basis function with its Lagrange-multiplier record."""

    cell: int
    continuum: int
    region: object
    raster: np.ndarray = field(repr=False)  # global fine raster, zero outside the patch
    multipliers: np.ndarray = field(repr=False)  # one per patch constraint
    constraint_positions: list = field(repr=False)


class MultiscaleBasis:
    """All basis functions of one oversampling level, ordered like the auxiliary space."""

    def __init__(self, space, layers, entries):
        self.space = space
        self.layers = layers
        self.entries = entries  # list parallel to space.functions

    def __len__(self):
        return len(self.entries)

    def raster_matrix(self):
        """Dense ``(n_fine_cells, n_basis)`` matrix of flattened basis rasters."""
        return np.stack([e.raster.ravel() for e in self.entries], axis=1)


def _solve_patch_basis(space, field, region, global_bc):
    """Factor one patch and solve for the basis functions of its center cell."""
    op = patch_operator(region, field, global_bc)
    B, positions = constraint_matrix(space, region)
    lu = _kkt_factor(op.matrix(), B)
    n_loc, n_con = op.n, B.shape[0]
    sy, sx = region.fine_slices()
    out = []
    for j, pos in enumerate(space.in_cell(region.center)):
        rhs = np.zeros(n_loc + n_con)
        rhs[n_loc + positions.index(pos)] = 1.0
        sol = lu.solve(rhs)
        check = np.abs(B @ sol[:n_loc] - rhs[n_loc:]).max()
        if not np.isfinite(check) or check > 1e-8:
            fn = space.functions[pos]
            raise SingularLocalProblem(
                f"constraints not met for continuum {fn.continuum} of cell {fn.cell}"
            )
        raster = np.zeros(space.weights.shape)
        raster[sy, sx] = sol[:n_loc].reshape(region.fine_shape())
        out.append(BasisFunction(
            cell=region.center, continuum=j, region=region,
            raster=raster, multipliers=sol[n_loc:], constraint_positions=positions,
        ))
    return out


def build_basis_linear(space, field, cell, continuum, layers, global_bc="dirichlet"):
    """Build a single basis function for continuum ``continuum`` of coarse cell ``cell``."""
    from .mesh import oversample

    if layers < 1:
        raise ValueError("basis construction needs at least one oversampling layer")
    region = oversample(space.coarse, cell, layers)
    entries = _solve_patch_basis(space, field, region, global_bc)
    return entries[continuum]


def build_all_basis(space, field, layers, global_bc="dirichlet"):
    """Build the basis functions of every continuum at one oversampling level."""
    from .mesh import oversample

    if layers < 1:
        raise ValueError("basis construction needs at least one oversampling layer")
    entries = [None] * space.n
    for c in range(space.coarse.n_cells):
        if not space.in_cell(c):
            continue
        region = oversample(space.coarse, c, layers)
        for entry in _solve_patch_basis(space, field, region, global_bc):
            entries[space.position(c, entry.continuum)] = entry
    return MultiscaleBasis(space, layers, entries)


@dataclass(frozen=True)
class UpscaledSystem:
    """Macro stiffness matrix and load vector in the auxiliary-space ordering."""

    matrix: np.ndarray
    rhs: np.ndarray
    basis: MultiscaleBasis = field(repr=False)


def assemble_upscaled(basis, field, source, global_bc="dirichlet"):
    """Assemble the upscaled stiffness matrix and source moments.

    Entries are fine-grid energy products of basis pairs, so entries of basis
    functions with disjoint patches are exactly zero.
    """
    space = basis.space
    fine = space.coarse.fine
    op = TpfaOperator(field.values, fine.hx, fine.hy,
                      (True,) * 4 if global_bc == "dirichlet" else (False,) * 4)
    P = basis.raster_matrix()
    A_T = P.T @ (op.matrix() @ P)
    f = np.asarray(source, dtype=float).ravel() * fine.cell_area
    F = P.T @ f
    return UpscaledSystem(matrix=A_T, rhs=F, basis=basis)


def solve_coarse_linear(upscaled, rtol=1e-12):
    """Solve the upscaled system and reconstruct the downscaled solution.

    Returns
    -------
    (MacroState, ndarray)
        Macro unknowns and the fine raster ``sum_j U_j psi_j``.
    """
    from .continua import MacroState

    A, F = upscaled.matrix, upscaled.rhs
    try:
        U = np.linalg.solve(A, F)
    except np.linalg.LinAlgError as exc:
        raise SingularLocalProblem(f"singular (ungauged) upscaled system: {exc}") from exc
    res = np.linalg.norm(A @ U - F)
    if res > rtol * max(np.linalg.norm(F), 1e-300):
        raise SingularLocalProblem(f"upscaled solve residual {res:.3e} exceeds tolerance")
    space = upscaled.basis.space
    u_ms = (upscaled.basis.raster_matrix() @ U).reshape(space.weights.shape)
    return MacroState(U, space), u_ms


def energy_norm(u, weights, fine):
    """Envelope-weighted gradient (semi)norm via interior-face quadrature."""
    Tx, Ty = harmonic_faces(weights.k_bar, fine.hx, fine.hy)
    U = np.asarray(u)
    ex = Tx * (U[:, :-1] - U[:, 1:]) ** 2
    ey = Ty * (U[:-1, :] - U[1:, :]) ** 2
    return float(np.sqrt(ex.sum() + ey.sum()))


def s_norm(u, weights, fine):
    """Weighted L2 norm with the constraint weight."""
    return float(np.sqrt(np.sum(weights.k_tilde * np.asarray(u) ** 2) * fine.cell_area))


def export_upscaled_matrix(path, upscaled, tol=0.0):
    """Write the upscaled matrix in coordinate text format ``row col value``."""
    A = upscaled.matrix
    with open(path, "w", newline="\n") as fh:
        for i in range(A.shape[0]):
            for j in range(A.shape[1]):
                if abs(A[i, j]) > tol:
                    fh.write(f"{i} {j} {A[i, j]:.17g}\n")


def export_basis(basis, directory):
    """Dump every basis raster in the plain-text raster format."""
    import os

    for pos, entry in enumerate(basis.entries):
        cx, cy = basis.space.coarse.cell_xy(entry.cell)
        write_raster(os.path.join(directory, f"basis_{cx}_{cy}_{entry.continuum}.txt"),
                     entry.raster)
