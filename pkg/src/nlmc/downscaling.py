"""Nonlinear downscaling maps and the coarse nonlinear solve.

A downscaling map sends macro values (weighted continuum averages) to the
constrained fine-grid field on an oversampled patch: flux balance against a
weighted multiplier term, with the moment constraints pinning the averages.
The coarse model then seeks macro values for which the multiplier moments of
each center cell balance the source moments; the downscaled solution stitches
the per-cell local fields with the coarse partition-of-unity weights.

The patch of an ``M``-layer map extends one extra coarse layer beyond the
constrained region.  The unconstrained buffer ring lets the field decay
freely from the outermost constrained averages to the zero trace of the
truncation boundary; constraining right up to the rim distorts the map's
response to locally constant macro states and makes the localized coarse
operator drift non-monotonically with ``M``.  Whole-domain problems have no
truncation and constrain everything.

Patches that share a clipped bounding box and constraint set define identical
local problems, so local solves are cached.  The outer Jacobian comes from
one extra block of triangular backsolves on each converged local KKT
factorization (the implicit-function-theorem derivative of the local map); a
finite-difference variant is kept as a cross-check and configuration option.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .basis import SingularLocalProblem, constraint_matrix, patch_operator
from .continua import MacroState
from .fine_solver import GradientFaceFlux, NewtonConfig, NonlinearSolveError
from .mesh import oversample

__all__ = [
    "LocalSolution",
    "LocalDownscalingProblem",
    "NonlinearCoarseResult",
    "build_local_problem",
    "build_global_problem",
    "local_downscale_nonlinear",
    "global_downscale_nonlinear",
    "solve_coarse_nonlinear",
    "source_moments",
]


@dataclass
class LocalSolution:
    """Converged constrained local solve: patch field, multipliers, factorization."""

    u: np.ndarray  # patch cells, flattened
    lam: np.ndarray  # one per patch constraint
    lu: object = field(repr=False)
    iterations: int = 0
    residual: float = 0.0


class LocalDownscalingProblem:
    """Constrained nonlinear flow problem on one patch box.

    The residual of the saddle system is::

        [ flux_divergence(u) + mass * u + B^T lam ]   (fine balance rows)
        [ B u - U                                 ]   (normalized moment rows)

    with ``B`` the normalized moment matrix of all continua in the patch.
    """

    def __init__(self, space, field_, region, flux_model, global_bc="dirichlet",
                 mass=None, constrained_cells=None):
        self.space = space
        self.region = region
        self.model = flux_model
        self.op = patch_operator(region, field_, global_bc)
        self.B, self.positions = constraint_matrix(space, region, constrained_cells)
        self.pos_index = {p: r for r, p in enumerate(self.positions)}
        self.n_loc = self.op.n
        self.n_con = self.B.shape[0]
        sy, sx = region.fine_slices()
        area = space.coarse.fine.cell_area
        if mass is None:
            self.mass = None
        else:
            self.mass = np.asarray(mass)[sy, sx].ravel() * area

    def _residual(self, u, lam, U):
        r1 = self.op.apply(u, self.model) + self.B.T @ lam
        if self.mass is not None:
            r1 += self.mass * u
        r2 = self.B @ u - U
        return np.concatenate([r1, r2])

    def _kkt(self, u):
        J = self.op.matrix(self.model, u)
        if self.mass is not None:
            J = J + sp.diags(self.mass)
        return sp.bmat([[J, self.B.T], [self.B, None]], format="csc")

    def solve(self, U, config=None, warm=None):
        """Newton solve of the constrained local problem at macro values ``U``.

        ``warm`` may carry a previous :class:`LocalSolution` to start from.
        Linear flux models converge in a single step.
        """
        config = config or NewtonConfig()
        U = np.asarray(U, dtype=float)
        if U.shape != (self.n_con,):
            raise ValueError("constraint vector does not match the patch continua")
        if warm is not None:
            u, lam = warm.u.copy(), warm.lam.copy()
        else:
            u, lam = np.zeros(self.n_loc), np.zeros(self.n_con)
        res = self._residual(u, lam, U)
        rnorm = float(np.linalg.norm(res))
        # floor scales with the flux magnitudes: initial-residual-relative
        tol = config.atol + config.rtol * max(rnorm, 1.0 + float(np.linalg.norm(U)))
        history = [rnorm]
        lu = None
        for it in range(config.max_iter):
            if rnorm <= tol and lu is not None:
                return LocalSolution(u, lam, lu, it, rnorm)
            lu = None
            try:
                lu = splu(self._kkt(u))
            except RuntimeError as exc:
                raise SingularLocalProblem(
                    f"singular local system on patch of cell {self.region.center}: {exc}"
                ) from exc
            if rnorm <= tol:
                return LocalSolution(u, lam, lu, it, rnorm)
            dw = lu.solve(-res)
            if np.linalg.norm(dw) <= config.atol * (1.0 + np.linalg.norm(u)):
                return LocalSolution(u, lam, lu, it, rnorm)  # fp floor
            step = 1.0
            for _ in range(config.max_damping_steps):
                tu = u + step * dw[:self.n_loc]
                tlam = lam + step * dw[self.n_loc:]
                tres = self._residual(tu, tlam, U)
                tnorm = float(np.linalg.norm(tres))
                if tnorm < rnorm or tnorm <= tol:
                    break
                step *= config.damping
            else:
                raise NonlinearSolveError(
                    f"local downscaling stagnated on patch of cell {self.region.center}", history)
            u, lam, res, rnorm = tu, tlam, tres, tnorm
            history.append(rnorm)
        if rnorm <= tol:
            return LocalSolution(u, lam, lu, config.max_iter, rnorm)
        raise NonlinearSolveError(
            f"local downscaling did not converge on patch of cell {self.region.center}", history)

    def multiplier_sensitivity(self, solution):
        """Exact derivative ``d lam / d U`` at a converged solution.

        One sparse backsolve per constraint on the final KKT factorization.
        """
        rhs = np.zeros((self.n_loc + self.n_con, self.n_con))
        rhs[self.n_loc:, :] = np.eye(self.n_con)
        sol = solution.lu.solve(rhs)
        return sol[self.n_loc:, :]

    def embed(self, u):
        """Zero-extend a patch vector to the global fine raster."""
        out = np.zeros(self.space.weights.shape)
        sy, sx = self.region.fine_slices()
        out[sy, sx] = np.asarray(u).reshape(self.region.fine_shape())
        return out

    def multiplier_raster(self, lam):
        """Multiplier field as an auxiliary-space raster (zero outside the patch continua)."""
        coeffs = np.zeros(self.space.n)
        for r, p in enumerate(self.positions):
            coeffs[p] = -lam[r] / self.space.functions[p].weight
        return self.space.fill(coeffs)


def build_local_problem(space, field_, cell, layers, law=None, flux_model=None,
                        global_bc="dirichlet", mass=None):
    """Local problem of one coarse cell: constraints within ``layers`` coarse
    layers, patch padded by one extra buffer layer."""
    if layers < 1:
        raise ValueError("localization needs at least one oversampling layer")
    model = flux_model or GradientFaceFlux(law)
    region = oversample(space.coarse, cell, layers + 1)
    constrained = oversample(space.coarse, cell, layers).coarse_cells()
    return LocalDownscalingProblem(space, field_, region, model, global_bc, mass,
                                   constrained_cells=constrained)


def build_global_problem(space, field_, law=None, flux_model=None,
                         global_bc="dirichlet", mass=None):
    """Whole-domain downscaling problem constraining every continuum (oracle path)."""
    model = flux_model or GradientFaceFlux(law)
    coarse = space.coarse
    region = oversample(coarse, 0, max(coarse.Nx, coarse.Ny))
    if region.fine_shape() != space.weights.shape:
        raise AssertionError("global region must cover the whole domain")
    return LocalDownscalingProblem(space, field_, region, model, global_bc, mass)


def local_downscale_nonlinear(space, field_, law, cell, layers, U_macro, config=None,
                              global_bc="dirichlet", flux_model=None, mass=None):
    """Evaluate the local downscaling map of one cell at given macro values.

    ``U_macro`` is a full macro vector in auxiliary-space ordering; only the
    entries of continua inside the patch are used.

    Returns
    -------
    (ndarray, LocalSolution, LocalDownscalingProblem)
        The zero-extended fine raster and the raw solve record.
    """
    problem = build_local_problem(space, field_, cell, layers, law, flux_model,
                                  global_bc, mass)
    U = np.asarray(U_macro, dtype=float)[problem.positions]
    sol = problem.solve(U, config)
    return problem.embed(sol.u), sol, problem


def global_downscale_nonlinear(space, field_, law, U_macro, config=None,
                               global_bc="dirichlet", flux_model=None, mass=None):
    """Evaluate the global downscaling map at given macro values (all continua constrained)."""
    problem = build_global_problem(space, field_, law, flux_model, global_bc, mass)
    sol = problem.solve(np.asarray(U_macro, dtype=float), config)
    return problem.embed(sol.u), sol, problem


def source_moments(space, source):
    """Plain pairing of the source with every continuum indicator: ``(f, mu)``."""
    f = np.asarray(source, dtype=float)
    area = space.coarse.fine.cell_area
    return np.array([
        float(f[fn.rows, fn.cols].sum() * area) for fn in space.functions
    ])


@dataclass
class NonlinearCoarseResult:
    """Macro solution, downscaled field and the outer iteration record."""

    macro: MacroState
    u_ms: np.ndarray
    history: list
    layers: object


class _MapCollection:
    """Per-cell buffered local problems deduplicated by patch/constraint boxes."""

    def __init__(self, space, field_, layers, flux_model, global_bc, mass):
        coarse = space.coarse
        if layers is None:
            layers = max(coarse.Nx, coarse.Ny)
        self.layers = layers
        self.space = space
        self.problems = {}
        self.cell_box = {}
        for c in range(coarse.n_cells):
            if not space.in_cell(c):
                continue
            region = oversample(coarse, c, layers + 1)
            constrained = oversample(coarse, c, layers)
            key = (region.box(), constrained.box())
            if key not in self.problems:
                self.problems[key] = LocalDownscalingProblem(
                    space, field_, region, flux_model, global_bc, mass,
                    constrained_cells=constrained.coarse_cells())
            self.cell_box[c] = key
        self.solutions = {}

    def solve_all(self, U, config):
        for box, problem in self.problems.items():
            warm = self.solutions.get(box)
            self.solutions[box] = problem.solve(U[problem.positions], config, warm=warm)

    def residual(self, f_mom):
        """Coarse residual: center-cell multiplier moment minus source moment."""
        R = np.zeros(self.space.n)
        for c, box in self.cell_box.items():
            problem, sol = self.problems[box], self.solutions[box]
            for pos in self.space.in_cell(c):
                R[pos] = -sol.lam[problem.pos_index[pos]] - f_mom[pos]
        return R

    def jacobian_exact(self):
        n = self.space.n
        J = np.zeros((n, n))
        sens = {box: p.multiplier_sensitivity(self.solutions[box])
                for box, p in self.problems.items()}
        for c, box in self.cell_box.items():
            problem = self.problems[box]
            D = sens[box]
            cols = problem.positions
            for pos in self.space.in_cell(c):
                J[pos, cols] = -D[problem.pos_index[pos], :]
        return J

    def jacobian_fd(self, U, f_mom, base_R, config, eps=1e-6):
        n = self.space.n
        J = np.zeros((n, n))
        base_solutions = dict(self.solutions)
        for col in range(n):
            boxes = [b for b in self.problems
                     if col in self.problems[b].pos_index]
            if not boxes:
                continue
            h = eps * (1.0 + abs(U[col]))
            Up = U.copy()
            Up[col] += h
            for box in boxes:
                problem = self.problems[box]
                self.solutions[box] = problem.solve(
                    Up[problem.positions], config, warm=base_solutions[box])
            Rp = self.residual(f_mom)
            J[:, col] = (Rp - base_R) / h
            self.solutions.update({b: base_solutions[b] for b in boxes})
        return J


def solve_coarse_nonlinear(space, field_, law, source, layers, pou, config=None,
                           global_bc="dirichlet", flux_model=None, mass=None,
                           jacobian="exact", U0=None, outer_rtol=1e-9):
    """Outer Newton iteration on the coarse residual of the localized maps.

    ``layers=None`` selects whole-domain patches (the global-basis method).
    The downscaled solution is stitched from the per-cell local fields with
    the coarse partition-of-unity weights.  The outer residual is driven to
    ``outer_rtol`` relative to the source moments (the attainable floor is
    set by the multiplier accuracy of the inner direct solves, so the outer
    tolerance is deliberately looser than the inner one).
    """
    config = config or NewtonConfig()
    model = flux_model or GradientFaceFlux(law)
    maps = _MapCollection(space, field_, layers, model, global_bc, mass)
    f_mom = source_moments(space, source)
    U = np.zeros(space.n) if U0 is None else np.asarray(U0, dtype=float).copy()
    tol = config.atol + outer_rtol * float(np.linalg.norm(f_mom))
    maps.solve_all(U, config)
    R = maps.residual(f_mom)
    rnorm = float(np.linalg.norm(R))
    history = [rnorm]
    for _ in range(config.max_iter):
        if rnorm <= tol:
            break
        if jacobian == "exact":
            J = maps.jacobian_exact()
        elif jacobian == "fd":
            J = maps.jacobian_fd(U, f_mom, R, config)
        else:
            raise ValueError(f"unknown jacobian mode {jacobian!r}")
        try:
            dU = np.linalg.solve(J, -R)
        except np.linalg.LinAlgError as exc:
            raise NonlinearSolveError(f"singular coarse Jacobian: {exc}", history) from exc
        step = 1.0
        for _ in range(config.max_damping_steps):
            trial = U + step * dU
            maps.solve_all(trial, config)
            tR = maps.residual(f_mom)
            tnorm = float(np.linalg.norm(tR))
            if tnorm < rnorm or tnorm <= tol:
                break
            step *= config.damping
        else:
            raise NonlinearSolveError("coarse Newton stagnated", history)
        U, R, rnorm = trial, tR, tnorm
        history.append(rnorm)
    else:
        if rnorm > tol:
            raise NonlinearSolveError("coarse Newton did not converge", history)
    # stitch the local fields with the partition-of-unity cell weights
    u_ms = np.zeros(space.weights.shape)
    for c, box in maps.cell_box.items():
        problem, sol = maps.problems[box], maps.solutions[box]
        u_ms += pou.cell_weight(c) * problem.embed(sol.u)
    return NonlinearCoarseResult(
        macro=MacroState(U, space), u_ms=u_ms, history=history, layers=maps.layers)
