"""Fine-grid finite-volume reference solvers.

Cell-centered two-point flux approximation (TPFA) with harmonic face
permeabilities.  The same face machinery drives the linear elliptic solver,
the monotone nonlinear solver, the backward-Euler unsaturated-flow stepper
and the IMPES two-phase stepper, so the nonlinear paths collapse exactly onto
the linear one when the nonlinearity degenerates.

A face flux model turns endpoint states into a signed face flux.  Vector flux
laws enter through their normal profile (the two-point difference stands in
for the gradient); state-dependent coefficients like a relative permeability
enter through harmonic averaging of the endpoint coefficients.  Assembly is
deterministic; solves use a sparse direct factorization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

__all__ = [
    "NewtonConfig",
    "NonlinearSolveError",
    "DiscreteSystem",
    "TpfaOperator",
    "LinearFaceFlux",
    "GradientFaceFlux",
    "RelPermFaceFlux",
    "TwoPhaseResult",
    "harmonic_faces",
    "assemble_linear",
    "solve_linear",
    "solve_monotone",
    "solve_unsaturated",
    "solve_two_phase",
    "conservation_residual",
]

DIRICHLET_ALL = (True, True, True, True)
NEUMANN_ALL = (False, False, False, False)


@dataclass(frozen=True)
class NewtonConfig:
    """Tolerances and safeguards for the nonlinear solves."""

    atol: float = 1e-12
    rtol: float = 1e-12
    max_iter: int = 40
    damping: float = 0.5
    max_damping_steps: int = 8
    picard_fallback: bool = True

    def __post_init__(self):
        if self.atol <= 0 or self.rtol < 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")

    def tolerance(self, scale):
        return self.atol + self.rtol * scale


class NonlinearSolveError(RuntimeError):
    """Newton/Picard iteration failed to converge; carries the residual history."""

    def __init__(self, message, history):
        super().__init__(f"{message}; residual history {['%.3e' % r for r in history]}")
        self.history = history


def harmonic_faces(k, hx, hy):
    """Harmonic-mean face transmissibilities ``(Tx, Ty)`` for a cell raster ``k``.

    ``Tx[j, i]`` couples cells ``(i, j)`` and ``(i+1, j)`` and carries the
    geometric factor ``hy/hx``; symmetrically for ``Ty``.
    """
    kl, kr = k[:, :-1], k[:, 1:]
    Tx = (hy / hx) * 2.0 * kl * kr / (kl + kr)
    kb, kt = k[:-1, :], k[1:, :]
    Ty = (hx / hy) * 2.0 * kb * kt / (kb + kt)
    return Tx, Ty


def _harm(a, b):
    return 2.0 * a * b / (a + b)


class LinearFaceFlux:
    """Plain Darcy face flux ``geom * harm(kL, kR) * (uL - uR)``."""

    is_linear = True

    def flux(self, uL, uR, kL, kR, geom, d):
        return geom * _harm(kL, kR) * (uL - uR)

    def partials(self, uL, uR, kL, kR, geom, d):
        t = geom * _harm(kL, kR)
        return t, -t


class GradientFaceFlux:
    """Monotone gradient law along the face normal: ``T * g(|du|/d) * du``."""

    def __init__(self, law):
        self.law = law
        self.is_linear = law.is_linear

    def flux(self, uL, uR, kL, kR, geom, d):
        return geom * _harm(kL, kR) * self.law.face_flux(uL - uR, d)

    def partials(self, uL, uR, kL, kR, geom, d):
        t = geom * _harm(kL, kR) * self.law.face_flux_derivative(uL - uR, d)
        return t, -t


class RelPermFaceFlux:
    """State-coefficient flux ``geom * harm(kL kr(uL), kR kr(uR)) * (uL - uR)``."""

    is_linear = False

    def __init__(self, constitutive):
        self.cs = constitutive

    def _kr(self, u):
        return self.cs.k_r(u)

    def _dkr(self, u):
        return -self.cs.a * np.sign(u) * self.cs.k_r(u)

    def flux(self, uL, uR, kL, kR, geom, d):
        return geom * _harm(kL * self._kr(uL), kR * self._kr(uR)) * (uL - uR)

    def partials(self, uL, uR, kL, kR, geom, d):
        a = kL * self._kr(uL)
        b = kR * self._kr(uR)
        h = _harm(a, b)
        dh_da = 2.0 * b * b / (a + b) ** 2
        dh_db = 2.0 * a * a / (a + b) ** 2
        du = uL - uR
        dqL = geom * (dh_da * kL * self._dkr(uL) * du + h)
        dqR = geom * (dh_db * kR * self._dkr(uR) * du - h)
        return dqL, dqR


class TpfaOperator:
    """TPFA flux operator on a rectangular cell raster with per-side boundary types.

    ``dirichlet_sides = (left, right, bottom, top)`` selects homogeneous
    Dirichlet data on each side (ghost value zero at half-cell distance); the
    remaining sides are no-flux.  ``apply``/``matrix`` represent the residual
    and Jacobian of ``-div(flux)`` scaled by cell area for a given face flux
    model (linear Darcy flux by default).
    """

    def __init__(self, k, hx, hy, dirichlet_sides=DIRICHLET_ALL, dirichlet_values=None):
        self.k = np.asarray(k, dtype=float)
        self.ny, self.nx = self.k.shape
        self.hx, self.hy = hx, hy
        self.dirichlet_sides = tuple(dirichlet_sides)
        self.dirichlet_values = dirichlet_values
        self._index = np.arange(self.nx * self.ny).reshape(self.ny, self.nx)
        self._faces = self._face_tables()

    @property
    def n(self):
        return self.nx * self.ny

    def _face_tables(self):
        """Per-face index/coefficient tables: interior x, interior y, Dirichlet rims."""
        idx = self._index
        k = self.k
        hx, hy = self.hx, self.hy
        faces = []
        # interior faces: (left cells, right cells, kL, kR, geom, d)
        faces.append((idx[:, :-1].ravel(), idx[:, 1:].ravel(),
                      k[:, :-1].ravel(), k[:, 1:].ravel(), hy / hx, hx))
        faces.append((idx[:-1, :].ravel(), idx[1:, :].ravel(),
                      k[:-1, :].ravel(), k[1:, :].ravel(), hx / hy, hy))
        left, right, bottom, top = self.dirichlet_sides
        gv = self.dirichlet_values or {}
        # Dirichlet rim faces: ghost cell at half-cell distance holding the
        # boundary data (zero unless per-side values are supplied)
        rims = []
        if left:
            rims.append((idx[:, 0], k[:, 0], 2 * hy / hx, hx / 2, gv.get("left", 0.0)))
        if right:
            rims.append((idx[:, -1], k[:, -1], 2 * hy / hx, hx / 2, gv.get("right", 0.0)))
        if bottom:
            rims.append((idx[0, :], k[0, :], 2 * hx / hy, hy / 2, gv.get("bottom", 0.0)))
        if top:
            rims.append((idx[-1, :], k[-1, :], 2 * hx / hy, hy / 2, gv.get("top", 0.0)))
        return faces, rims

    def apply(self, u, model=None):
        """Flux-divergence residual vector (no source), length ``n``."""
        model = model or LinearFaceFlux()
        u = np.asarray(u, dtype=float).ravel()
        out = np.zeros(self.n)
        interior, rims = self._faces
        # within each face group the left (right) cell indices are all distinct,
        # so plain fancy-index accumulation is exact
        for L, R, kL, kR, geom, d in interior:
            q = model.flux(u[L], u[R], kL, kR, geom, d)
            out[L] += q
            out[R] -= q
        for cells, kc, geom, d, ghost in rims:
            out[cells] += model.flux(u[cells], ghost, kc, kc, geom, d)
        return out

    def matrix(self, model=None, u=None):
        """Sparse operator; for a nonlinear flux model this is the Jacobian at ``u``."""
        model = model or LinearFaceFlux()
        if u is None:
            u = np.zeros(self.n)
        u = np.asarray(u, dtype=float).ravel()
        interior, rims = self._faces
        rows, cols, vals = [], [], []
        for L, R, kL, kR, geom, d in interior:
            dqL, dqR = model.partials(u[L], u[R], kL, kR, geom, d)
            dqL = np.broadcast_to(dqL, L.shape)
            dqR = np.broadcast_to(dqR, L.shape)
            rows.extend((L, L, R, R))
            cols.extend((L, R, L, R))
            vals.extend((dqL, dqR, -dqL, -dqR))
        diag = np.zeros(self.n)
        for cells, kc, geom, d, ghost in rims:
            dqL, _ = model.partials(u[cells], ghost, kc, kc, geom, d)
            diag[cells] += np.broadcast_to(dqL, cells.shape)
        rows.append(np.arange(self.n))
        cols.append(np.arange(self.n))
        vals.append(diag)
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n, self.n),
        )

    def face_fluxes(self, u, model=None):
        """Interior face fluxes ``(qx, qy)``; ``qx[j, i] > 0`` flows in +x."""
        model = model or LinearFaceFlux()
        U = np.asarray(u, dtype=float).reshape(self.ny, self.nx)
        qx = model.flux(U[:, :-1], U[:, 1:], self.k[:, :-1], self.k[:, 1:],
                        self.hy / self.hx, self.hx)
        qy = model.flux(U[:-1, :], U[1:, :], self.k[:-1, :], self.k[1:, :],
                        self.hx / self.hy, self.hy)
        return qx, qy


@dataclass(frozen=True)
class DiscreteSystem:
    """Assembled sparse system with its right-hand side and boundary metadata."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    shape: tuple
    bc: str
    operator: TpfaOperator = field(repr=False, default=None)

    @property
    def n(self):
        return self.rhs.size


def assemble_linear(field, source, bc="dirichlet", fine=None):
    """Assemble the TPFA system for ``-div(k grad u) = f``.

    ``source`` is the per-cell value raster of ``f``; the right-hand side is
    scaled by cell area.  For no-flux boundaries the source must be balanced
    (a compatibility requirement of the pure-Neumann problem).
    """
    k = field.values
    ny, nx = k.shape
    if fine is None:
        hx, hy = 1.0 / nx, 1.0 / ny
    else:
        hx, hy = fine.hx, fine.hy
    f = np.asarray(source, dtype=float)
    if f.shape != k.shape:
        raise ValueError("source raster shape does not match the field")
    if bc not in ("dirichlet", "neumann"):
        raise ValueError(f"unsupported boundary condition {bc!r}")
    b = f.ravel() * (hx * hy)
    if bc == "neumann":
        imbalance = abs(b.sum())
        if imbalance > 1e-10 * (np.abs(b).sum() + 1e-300):
            raise ValueError(f"incompatible pure-Neumann source: net {imbalance:.3e}")
    op = TpfaOperator(k, hx, hy, DIRICHLET_ALL if bc == "dirichlet" else NEUMANN_ALL)
    return DiscreteSystem(matrix=op.matrix(), rhs=b, shape=(ny, nx), bc=bc, operator=op)


def _solve_gauged(matrix, rhs):
    """Solve a pure-Neumann system with a mean-zero gauge via one bordered multiplier."""
    n = rhs.size
    ones = np.ones((n, 1))
    bordered = sp.bmat([[matrix, ones], [ones.T, None]], format="csc")
    return splu(bordered).solve(np.concatenate([rhs, [0.0]]))[:n]


def solve_linear(system):
    """Direct solve; pure-Neumann systems get a mean-zero gauge."""
    if system.bc == "neumann":
        return _solve_gauged(system.matrix, system.rhs).reshape(system.shape)
    return splu(system.matrix.tocsc()).solve(system.rhs).reshape(system.shape)


def solve_monotone(field, law, source, config=None, fine=None):
    """Newton solve of ``-div(k g(|grad u|) grad u) = f`` with homogeneous Dirichlet data.

    Damped Newton with analytic Jacobian and a Picard fallback (frozen flux
    profile) when a step fails to reduce the residual.
    """
    config = config or NewtonConfig()
    k = field.values
    ny, nx = k.shape
    if fine is None:
        hx, hy = 1.0 / nx, 1.0 / ny
    else:
        hx, hy = fine.hx, fine.hy
    op = TpfaOperator(k, hx, hy, DIRICHLET_ALL)
    model = GradientFaceFlux(law)
    b = np.asarray(source, dtype=float).ravel() * (hx * hy)
    u = np.zeros(op.n)
    tol = config.tolerance(np.linalg.norm(b))
    history = []
    res = op.apply(u, model) - b
    rnorm = float(np.linalg.norm(res))
    for _ in range(config.max_iter):
        history.append(rnorm)
        if rnorm <= tol:
            return u.reshape(ny, nx)
        J = op.matrix(model, u).tocsc()
        du = splu(J).solve(-res)
        if np.linalg.norm(du) <= config.atol * (1.0 + np.linalg.norm(u)):
            return u.reshape(ny, nx)  # at the floating-point floor
        step = 1.0
        trial = tres = tnorm = None
        for _ in range(config.max_damping_steps):
            trial = u + step * du
            tres = op.apply(trial, model) - b
            tnorm = float(np.linalg.norm(tres))
            if tnorm < rnorm:
                break
            step *= config.damping
        else:
            if not config.picard_fallback:
                raise NonlinearSolveError("Newton stagnated", history)
            # Picard step: freeze the flux profile g at the current iterate
            U = u.reshape(ny, nx)
            gcell = law.g(np.abs(_cell_gradient_magnitude(U, hx, hy)))
            op_frozen = TpfaOperator(k * gcell, hx, hy, DIRICHLET_ALL)
            trial = splu(op_frozen.matrix().tocsc()).solve(b)
            tres = op.apply(trial, model) - b
            tnorm = float(np.linalg.norm(tres))
            if tnorm >= rnorm:
                raise NonlinearSolveError("Newton and Picard both stagnated", history)
        u, res, rnorm = trial, tres, tnorm
    if rnorm <= tol:
        return u.reshape(ny, nx)
    raise NonlinearSolveError("nonlinear solve did not converge", history)


def _cell_gradient_magnitude(U, hx, hy):
    """Cell-centered gradient magnitude raster by one-sided padding."""
    gx = np.gradient(U, hx, axis=1)
    gy = np.gradient(U, hy, axis=0)
    return np.hypot(gx, gy)


def solve_unsaturated(constitutive, field, fracture_indicator, dt, steps, source,
                      config=None, u0=None):
    """Backward-Euler time stepping of ``c(x) u_t - div(k_s k_r(u) grad u) = f``.

    No-flux boundaries; Newton iteration per step on the harmonically averaged
    state-coefficient flux.  Returns the list of rasters ``[u_0, ..., u_steps]``.
    """
    if steps < 1 or dt <= 0:
        raise ValueError("need steps >= 1 and dt > 0")
    config = config or NewtonConfig()
    k_s = field.values
    ny, nx = k_s.shape
    hx, hy = 1.0 / nx, 1.0 / ny
    area = hx * hy
    cap = (constitutive.storage(fracture_indicator) * area / dt).ravel()
    cap_mat = sp.diags(cap)
    b = np.asarray(source, dtype=float).ravel() * area
    op = TpfaOperator(k_s, hx, hy, NEUMANN_ALL)
    model = RelPermFaceFlux(constitutive)
    u = np.zeros(ny * nx) if u0 is None else np.asarray(u0, dtype=float).ravel().copy()
    series = [u.reshape(ny, nx).copy()]
    for step in range(steps):
        u_old = u.copy()
        rhs = b + cap * u_old
        tol = config.tolerance(np.linalg.norm(rhs))
        res = cap * u - rhs + op.apply(u, model)
        rnorm = float(np.linalg.norm(res))
        history = [rnorm]
        converged = rnorm <= tol
        for _ in range(config.max_iter):
            if converged:
                break
            J = (cap_mat + op.matrix(model, u)).tocsc()
            du = splu(J).solve(-res)
            if np.linalg.norm(du) <= config.atol * (1.0 + np.linalg.norm(u)):
                converged = True  # at the floating-point floor
                break
            s = 1.0
            for _ in range(config.max_damping_steps):
                trial = u + s * du
                tres = cap * trial - rhs + op.apply(trial, model)
                tnorm = float(np.linalg.norm(tres))
                if tnorm < rnorm:
                    break
                s *= config.damping
            u, res, rnorm = trial, tres, tnorm
            history.append(rnorm)
            converged = rnorm <= tol
        if not converged:
            raise NonlinearSolveError(f"unsaturated step {step} did not converge", history)
        series.append(u.reshape(ny, nx).copy())
    return series


@dataclass
class TwoPhaseResult:
    """IMPES trajectory with per-step diagnostics."""

    pressure: list
    saturation: list
    cfl: list
    water_balance: list
    clamp: list


def solve_two_phase(constitutive, field, fracture_indicator, dt, steps, source,
                    s0=None, cfl_target=0.9):
    """IMPES loop: implicit pressure with total mobility, explicit upwinded transport.

    ``source`` is the total-rate raster ``q``; cells with ``q > 0`` inject
    water (unit inflow saturation), cells with ``q < 0`` produce the local
    mixture at fractional flow.  Saturation substeps keep the per-substep CFL
    number under ``cfl_target``; out-of-range saturations are clamped and the
    clamp magnitude is recorded, never hidden.
    """
    if steps < 1 or dt <= 0:
        raise ValueError("need steps >= 1 and dt > 0")
    k = field.values
    ny, nx = k.shape
    hx, hy = 1.0 / nx, 1.0 / ny
    area = hx * hy
    pore = constitutive.porosity * area
    q = np.asarray(source, dtype=float) * area  # volumetric rates per cell
    if abs(q.sum()) > 1e-10 * (np.abs(q).sum() + 1e-300):
        raise ValueError("incompatible two-phase source: injection and production must balance")
    inj = np.clip(q, 0.0, None)
    prod = np.clip(q, None, 0.0)
    s = np.zeros((ny, nx)) if s0 is None else np.asarray(s0, dtype=float).copy()
    result = TwoPhaseResult([], [s.copy()], [], [], [])
    for _ in range(steps):
        lam = constitutive.lam_total(s)
        op = TpfaOperator(k * lam, hx, hy, NEUMANN_ALL)
        p = _solve_gauged(op.matrix(), q.ravel()).reshape(ny, nx)
        qx, qy = op.face_fluxes(p)

        outflow = (np.clip(np.pad(qx, ((0, 0), (0, 1))), 0, None)
                   + np.clip(-np.pad(qx, ((0, 0), (1, 0))), 0, None)
                   + np.clip(np.pad(qy, ((0, 1), (0, 0))), 0, None)
                   + np.clip(-np.pad(qy, ((1, 0), (0, 0))), 0, None)
                   - prod)
        cfl = dt * float(outflow.max()) / pore
        result.cfl.append(cfl)
        n_sub = max(1, math.ceil(cfl / cfl_target))
        dts = dt / n_sub
        clamp_mag = 0.0
        balance_err = 0.0
        for _ in range(n_sub):
            fw = constitutive.frac_flow(s)
            # upwind water flux per face
            fwx = np.where(qx >= 0, fw[:, :-1], fw[:, 1:]) * qx
            fwy = np.where(qy >= 0, fw[:-1, :], fw[1:, :]) * qy
            div_w = np.zeros_like(s)
            div_w[:, :-1] += fwx
            div_w[:, 1:] -= fwx
            div_w[:-1, :] += fwy
            div_w[1:, :] -= fwy
            q_w = inj + fw * prod
            ds = dts / pore * (q_w - div_w)
            s_new = s + ds
            # explicit-update bookkeeping: mass change equals net water injected
            gained = pore * ds.sum()
            injected = dts * q_w.sum()  # interior fluxes cancel by antisymmetry
            balance_err = max(balance_err, abs(gained - injected) / max(abs(injected), 1e-300))
            over = max(0.0, float(s_new.max()) - 1.0, float(-s_new.min()))
            clamp_mag = max(clamp_mag, over)
            s = np.clip(s_new, 0.0, 1.0)
        result.water_balance.append(balance_err)
        result.clamp.append(clamp_mag)
        result.pressure.append(p.copy())
        result.saturation.append(s.copy())
    return result


def conservation_residual(system, u):
    """Sum of per-cell imbalances ``|flux divergence - source|`` (L1 norm)."""
    return float(np.abs(system.matrix @ np.asarray(u).ravel() - system.rhs).sum())
