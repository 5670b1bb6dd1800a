"""Space-time nonlinear NLMC for parabolic problems.

Space-time continua are tensor products of the spatial continuum indicators
with coarse time-interval indicators.  Local problems live on a spatial patch
times a backward-extended time window ``(t_n^-, t_{n+1}]``: backward-Euler
substeps from a zero state at ``t_n^-``, with one constant-in-time multiplier
per covered interval and patch continuum enforcing the space-time moments.
The coarse model marches interval by interval (causality), solving for the
macro values of the current interval so that the multiplier moments of every
center cell balance the source moments.

Time quadrature of the constraints uses the backward-Euler-consistent
right-endpoint rule, which makes the single-interval method coincide exactly
with the spatial method applied to one implicit step.  Macro *extraction*
from a stored trajectory uses the trapezoid rule, matching how time series
are reported elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .basis import SingularLocalProblem, constraint_matrix, patch_operator
from .fine_solver import GradientFaceFlux, NewtonConfig, NonlinearSolveError
from .mesh import oversample

__all__ = [
    "SpaceTimeContinua",
    "SpaceTimeLocalProblem",
    "SpacetimeResult",
    "build_spacetime_continua",
    "local_spacetime_downscale",
    "solve_spacetime_coarse",
    "export_macro_series",
]


class SpaceTimeContinua:
    """Layout ``(interval, spatial continuum)`` with the time quadratures."""

    def __init__(self, space, partition):
        self.space = space
        self.partition = partition

    @property
    def n_per_interval(self):
        return self.space.n

    @property
    def n_total(self):
        return self.partition.n_intervals * self.space.n

    def extract(self, trajectory):
        """Macro values of a fine trajectory, one row per coarse interval.

        ``trajectory`` holds one raster per fine substep node including the
        initial state; the time average over each interval uses the trapezoid
        rule, the space average the weighted continuum moments.
        """
        m = self.partition.substeps
        expected = self.partition.n_intervals * m + 1
        if len(trajectory) != expected:
            raise ValueError(f"trajectory must hold {expected} rasters, got {len(trajectory)}")
        out = np.zeros((self.partition.n_intervals, self.space.n))
        w = np.full(m + 1, 1.0 / m)
        w[0] = w[-1] = 0.5 / m
        for n in range(self.partition.n_intervals):
            base = n * m
            acc = np.zeros(self.space.n)
            for q in range(m + 1):
                acc += w[q] * self.space.moments(trajectory[base + q])
            out[n] = acc
        return out


def build_spacetime_continua(partition, space):
    """Tensor-product space-time test functions over a spatial auxiliary space."""
    return SpaceTimeContinua(space, partition)


class SpaceTimeLocalProblem:
    """Constrained backward-Euler solve on one spatial patch and time window.

    Unknowns are the substep fields ``phi_1..phi_W`` (zero state at the window
    start) and one multiplier vector per covered coarse interval.  The window
    of interval ``n`` starts at the backward-extension node ``t_n^-``.
    """

    def __init__(self, space, field_, region, flux_model, partition, interval,
                 mass, global_bc="dirichlet", constrained_cells=None):
        self.space = space
        self.region = region
        self.model = flux_model
        self.partition = partition
        self.interval = interval
        self.p0 = int(partition.back_ext[interval])
        self.intervals = list(range(self.p0, interval + 1))
        self.op = patch_operator(region, field_, global_bc)
        self.B, self.positions = constraint_matrix(space, region, constrained_cells)
        self.pos_index = {p: r for r, p in enumerate(self.positions)}
        self.n_loc = self.op.n
        self.n_con = self.B.shape[0]
        self.n_win = len(self.intervals)
        m = partition.substeps
        self.W = self.n_win * m
        sy, sx = region.fine_slices()
        area = space.coarse.fine.cell_area
        self.mass = np.asarray(mass)[sy, sx].ravel() * area
        # per-substep time increments and owning window interval
        self.dts = np.concatenate([
            np.full(m, partition.interval_dt(p)) for p in self.intervals
        ])
        self.step_interval = np.repeat(np.arange(self.n_win), m)

    def _unknown_count(self):
        return self.W * self.n_loc + self.n_win * self.n_con

    def _residual(self, phi, lam, U):
        """phi: (W, n_loc); lam: (n_win, n_con); U: (n_win, n_con)."""
        res_steps = np.zeros((self.W, self.n_loc))
        prev = np.zeros(self.n_loc)
        for q in range(self.W):
            w = self.step_interval[q]
            res_steps[q] = (self.mass * (phi[q] - prev) / self.dts[q]
                            + self.op.apply(phi[q], self.model)
                            + self.B.T @ lam[w])
            prev = phi[q]
        res_con = np.zeros((self.n_win, self.n_con))
        m = self.partition.substeps
        for w in range(self.n_win):
            acc = np.zeros(self.n_con)
            for qq in range(m):
                acc += (self.B @ phi[w * m + qq]) / m  # right-endpoint rule
            res_con[w] = acc - U[w]
        return np.concatenate([res_steps.ravel(), res_con.ravel()])

    def _kkt(self, phi):
        m = self.partition.substeps
        nb = self.W + self.n_win
        blocks = [[None] * nb for _ in range(nb)]
        mass_dt = [sp.diags(self.mass / self.dts[q]) for q in range(self.W)]
        for q in range(self.W):
            blocks[q][q] = mass_dt[q] + self.op.matrix(self.model, phi[q])
            if q > 0:
                blocks[q][q - 1] = -mass_dt[q]
            w = self.step_interval[q]
            blocks[q][self.W + w] = self.B.T
            # right-endpoint rule: each substep carries weight 1/m of its interval
            blocks[self.W + w][q] = self.B * (1.0 / m)
        return sp.bmat(blocks, format="csc")

    def solve(self, U, config=None, warm=None):
        """Newton solve; ``U`` has shape ``(n_win, n_con)`` (window intervals x patch continua)."""
        config = config or NewtonConfig()
        U = np.asarray(U, dtype=float).reshape(self.n_win, self.n_con)
        if warm is not None:
            phi = warm[0].copy()
            lam = warm[1].copy()
        else:
            phi = np.zeros((self.W, self.n_loc))
            lam = np.zeros((self.n_win, self.n_con))
        res = self._residual(phi, lam, U)
        rnorm = float(np.linalg.norm(res))
        # floor scales with the flux magnitudes: initial-residual-relative
        tol = config.atol + config.rtol * max(rnorm, 1.0 + float(np.linalg.norm(U)))
        history = [rnorm]
        lu = None
        for it in range(config.max_iter):
            if rnorm <= tol and lu is not None:
                return _StSolution(phi, lam, lu, it, rnorm)
            try:
                lu = splu(self._kkt(phi))
            except RuntimeError as exc:
                raise SingularLocalProblem(f"singular space-time local system: {exc}") from exc
            if rnorm <= tol:
                return _StSolution(phi, lam, lu, it, rnorm)
            dw = lu.solve(-res)
            if np.linalg.norm(dw) <= config.atol * (1.0 + np.linalg.norm(phi)):
                return _StSolution(phi, lam, lu, it, rnorm)  # fp floor
            dphi = dw[:self.W * self.n_loc].reshape(self.W, self.n_loc)
            dlam = dw[self.W * self.n_loc:].reshape(self.n_win, self.n_con)
            step = 1.0
            for _ in range(config.max_damping_steps):
                tphi, tlam = phi + step * dphi, lam + step * dlam
                tres = self._residual(tphi, tlam, U)
                tnorm = float(np.linalg.norm(tres))
                if tnorm < rnorm or tnorm <= tol:
                    break
                step *= config.damping
            else:
                raise NonlinearSolveError("space-time local solve stagnated", history)
            phi, lam, res, rnorm = tphi, tlam, tres, tnorm
            history.append(rnorm)
        if rnorm <= tol:
            return _StSolution(phi, lam, lu, config.max_iter, rnorm)
        raise NonlinearSolveError(
            f"space-time local solve did not converge on interval {self.interval}", history)

    def multiplier_sensitivity(self, solution):
        """Exact ``d lam^{(n)} / d U^{(n)}`` at a converged solution (backsolves on the KKT)."""
        n_u = self.W * self.n_loc
        rhs = np.zeros((self._unknown_count(), self.n_con))
        row0 = n_u + (self.n_win - 1) * self.n_con
        rhs[row0:row0 + self.n_con, :] = np.eye(self.n_con)
        sol = solution.lu.solve(rhs)
        return sol[row0:row0 + self.n_con, :]

    def embed_step(self, phi_q):
        out = np.zeros(self.space.weights.shape)
        sy, sx = self.region.fine_slices()
        out[sy, sx] = phi_q.reshape(self.region.fine_shape())
        return out


@dataclass
class _StSolution:
    phi: np.ndarray
    lam: np.ndarray
    lu: object = field(repr=False)
    iterations: int = 0
    residual: float = 0.0


def local_spacetime_downscale(space, field_, partition, interval, cell, layers,
                              U_window, mass, law=None, flux_model=None,
                              config=None, global_bc="dirichlet"):
    """Evaluate one space-time local map; returns the window rasters and the solve record.

    As in the spatial maps, the patch is padded by one unconstrained buffer
    layer beyond the ``layers``-deep constrained region.
    """
    model = flux_model or GradientFaceFlux(law)
    region = oversample(space.coarse, cell, layers + 1)
    constrained = oversample(space.coarse, cell, layers).coarse_cells()
    problem = SpaceTimeLocalProblem(space, field_, region, model, partition,
                                    interval, mass, global_bc,
                                    constrained_cells=constrained)
    U = np.asarray(U_window, dtype=float)[:, problem.positions]
    sol = problem.solve(U, config)
    rasters = [problem.embed_step(sol.phi[q]) for q in range(problem.W)]
    return rasters, sol, problem


@dataclass
class SpacetimeResult:
    """Macro values per interval and the stitched fine trajectory."""

    macro: np.ndarray  # (n_intervals, n_continua)
    trajectory: list  # one raster per substep node, including t = 0
    history: list  # outer residual norms per interval


def _interval_source_moments(space, partition, interval, source):
    """Right-endpoint time average of the source moments over one interval."""
    from .downscaling import source_moments

    m = partition.substeps
    t = partition.t_nodes[interval]
    dt = partition.interval_dt(interval)
    acc = np.zeros(space.n)
    for q in range(m):
        f = source(t + (q + 1) * dt) if callable(source) else source
        acc += source_moments(space, f) / m
    return acc


def solve_spacetime_coarse(space, field_, partition, pou, source, layers, mass,
                           law=None, flux_model=None, config=None,
                           global_bc="dirichlet", outer_rtol=1e-9):
    """March the coarse space-time model interval by interval.

    Within each interval an outer Newton iteration adjusts the interval's
    macro values until the multiplier moments of every center cell balance
    the source moments; earlier intervals enter the local windows as fixed
    constraint values (causality).  As in the spatial solver, the outer
    tolerance is relative and looser than the inner direct-solve tolerance.
    """
    config = config or NewtonConfig()
    model = flux_model or GradientFaceFlux(law)
    coarse = space.coarse
    if layers is None:
        layers = max(coarse.Nx, coarse.Ny)
    n_int = partition.n_intervals
    macro = np.zeros((n_int, space.n))
    trajectory = [np.zeros(space.weights.shape)]
    history = []
    cells = [c for c in range(coarse.n_cells) if space.in_cell(c)]
    cell_weights = {c: pou.cell_weight(c) for c in cells}
    for n in range(n_int):
        # one problem per distinct (patch, constraint) box pair
        problems, cell_box = {}, {}
        for c in cells:
            region = oversample(coarse, c, layers + 1)
            constrained = oversample(coarse, c, layers)
            key = (region.box(), constrained.box())
            if key not in problems:
                problems[key] = SpaceTimeLocalProblem(
                    space, field_, region, model, partition, n, mass, global_bc,
                    constrained_cells=constrained.coarse_cells())
            cell_box[c] = key
        f_mom = _interval_source_moments(space, partition, n, source)
        U_n = macro[n - 1].copy() if n > 0 else np.zeros(space.n)
        solutions = {}

        def window_values(problem, U_current):
            vals = np.zeros((problem.n_win, problem.n_con))
            for w, p in enumerate(problem.intervals):
                src = U_current if p == n else macro[p]
                vals[w] = src[problem.positions]
            return vals

        def solve_all(U_current):
            for box, problem in problems.items():
                prev = solutions.get(box)
                warm = (prev.phi, prev.lam) if prev is not None else None
                solutions[box] = problem.solve(
                    window_values(problem, U_current), config, warm=warm)

        def residual():
            R = np.zeros(space.n)
            for c, box in cell_box.items():
                problem, sol = problems[box], solutions[box]
                for pos in space.in_cell(c):
                    R[pos] = -sol.lam[-1][problem.pos_index[pos]] - f_mom[pos]
            return R

        tol = config.atol + outer_rtol * float(np.linalg.norm(f_mom))
        solve_all(U_n)
        R = residual()
        rnorm = float(np.linalg.norm(R))
        hist = [rnorm]
        for _ in range(config.max_iter):
            if rnorm <= tol:
                break
            J = np.zeros((space.n, space.n))
            sens = {box: p.multiplier_sensitivity(solutions[box])
                    for box, p in problems.items()}
            for c, box in cell_box.items():
                problem = problems[box]
                D = sens[box]
                for pos in space.in_cell(c):
                    J[pos, problem.positions] = -D[problem.pos_index[pos], :]
            try:
                dU = np.linalg.solve(J, -R)
            except np.linalg.LinAlgError as exc:
                raise NonlinearSolveError(f"singular coarse space-time Jacobian: {exc}",
                                          hist) from exc
            step = 1.0
            for _ in range(config.max_damping_steps):
                trial = U_n + step * dU
                solve_all(trial)
                tR = residual()
                tnorm = float(np.linalg.norm(tR))
                if tnorm < rnorm or tnorm <= tol:
                    break
                step *= config.damping
            else:
                raise NonlinearSolveError(f"space-time interval {n} stagnated", hist)
            U_n, R, rnorm = trial, tR, tnorm
            hist.append(rnorm)
        else:
            if rnorm > tol:
                raise NonlinearSolveError(f"space-time interval {n} did not converge", hist)
        macro[n] = U_n
        history.append(hist)
        # stitch this interval's substeps from the window tails of the local fields
        m = partition.substeps
        for qq in range(m):
            u = np.zeros(space.weights.shape)
            for c, box in cell_box.items():
                problem, sol = problems[box], solutions[box]
                q = (problem.n_win - 1) * m + qq
                u += cell_weights[c] * problem.embed_step(sol.phi[q])
            trajectory.append(u)
    return SpacetimeResult(macro=macro, trajectory=trajectory, history=history)


def export_macro_series(path, continua, macro):
    """Write per-interval macro values as CSV rows ``(n, i, j, value)``."""
    import csv

    space = continua.space
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n", "i", "j", "value"])
        for n in range(macro.shape[0]):
            for pos, fn in enumerate(space.functions):
                writer.writerow([n, fn.cell, fn.continuum, repr(float(macro[n, pos]))])
