"""Coefficient fields, fracture geometry, constitutive laws and derived weights.

Permeability rasters follow the grid convention of :mod:`nlmc.mesh`.  Fractures
are resolved as one-fine-cell-wide high-permeability channels: a segment marks
every fine cell it passes through and those cells get the fracture
permeability.  The monotone flux laws have the form ``k(x) * g(|v|) * v`` with
``g`` bounded above and below by positive constants, so ``k`` itself serves as
the Lipschitz/coercivity envelope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = [
    "CoefficientField",
    "FractureSet",
    "MonotoneLaw",
    "LawViolation",
    "LawReport",
    "ConstitutiveSet",
    "WeightField",
    "generate_field",
    "rasterize_fractures",
    "evaluate_law",
    "check_law_assumptions",
    "compute_weights",
    "read_raster",
    "write_raster",
    "read_fractures",
    "write_fractures",
]


@dataclass(frozen=True)
class CoefficientField:
    """Per-fine-cell positive scalar coefficient with a provenance tag."""

    values: np.ndarray
    provenance: str = "unspecified"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("coefficient field must be strictly positive and finite")

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class FractureSet:
    """Line-segment fractures with a single fracture permeability."""

    segments: np.ndarray  # (n, 4) rows of (x0, y0, x1, y1)
    k_frac: float

    def __post_init__(self):
        seg = np.atleast_2d(np.asarray(self.segments, dtype=float))
        if seg.size == 0:
            seg = seg.reshape(0, 4)
        if seg.shape[1] != 4:
            raise ValueError("fracture segments must be rows of (x0, y0, x1, y1)")
        object.__setattr__(self, "segments", seg)
        if self.k_frac <= 0:
            raise ValueError("fracture permeability must be positive")

    def __len__(self):
        return len(self.segments)

    @classmethod
    def empty(cls, k_frac=1.0):
        return cls(segments=np.zeros((0, 4)), k_frac=k_frac)


def generate_field(fine, seed, contrast, correlation_len=0.1):
    """Generate a smoothed log-uniform random permeability raster.

    A uniform noise raster is smoothed with a Gaussian kernel of width
    ``correlation_len`` and rescaled in log space so that
    ``max(k) / min(k) == contrast`` exactly.  Deterministic per seed.
    """
    if contrast < 1:
        raise ValueError("contrast must be >= 1")
    rng = np.random.default_rng(seed)
    noise = rng.uniform(size=(fine.ny, fine.nx))
    tag = f"generated(seed={seed}, contrast={contrast:g}, correlation_len={correlation_len:g})"
    if contrast == 1:
        return CoefficientField(np.ones_like(noise), provenance=tag)
    sigma = (correlation_len / fine.hy, correlation_len / fine.hx)
    smooth = gaussian_filter(noise, sigma=sigma, mode="nearest")
    lo, hi = smooth.min(), smooth.max()
    if hi == lo:  # degenerate smoothing, fall back to a constant field
        return CoefficientField(np.ones_like(noise), provenance=tag)
    t = (smooth - lo) / (hi - lo)
    return CoefficientField(np.power(contrast, t), provenance=tag)


def _segment_cells(x0, y0, x1, y1, fine):
    """Fine cells crossed by a segment, by parametric grid traversal."""
    hx, hy = fine.hx, fine.hy
    for x, y in ((x0, y0), (x1, y1)):
        if not (0 <= x <= fine.lx and 0 <= y <= fine.ly):
            raise ValueError(f"fracture endpoint ({x}, {y}) outside the domain")
    dx, dy = x1 - x0, y1 - y0
    if dx == 0 and dy == 0:
        raise ValueError("zero-length fracture segment")

    def cell_of(x, y):
        return (min(int(x / hx), fine.nx - 1), min(int(y / hy), fine.ny - 1))

    ix, iy = cell_of(x0, y0)
    jx, jy = cell_of(x1, y1)
    cells = [(ix, iy)]
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    # parametric distance to the next vertical / horizontal grid line
    if dx != 0:
        nxt = (ix + (1 if dx > 0 else 0)) * hx
        t_max_x = (nxt - x0) / dx
        t_dx = abs(hx / dx)
    else:
        t_max_x, t_dx = math.inf, math.inf
    if dy != 0:
        nyt = (iy + (1 if dy > 0 else 0)) * hy
        t_max_y = (nyt - y0) / dy
        t_dy = abs(hy / dy)
    else:
        t_max_y, t_dy = math.inf, math.inf
    while (ix, iy) != (jx, jy):
        if t_max_x <= t_max_y:
            ix += step_x
            t_max_x += t_dx
        else:
            iy += step_y
            t_max_y += t_dy
        if not (0 <= ix < fine.nx and 0 <= iy < fine.ny):
            break
        cells.append((ix, iy))
    return cells


def rasterize_fractures(fractures, fine, base_field):
    """Mark fracture cells and overwrite their permeability with ``k_frac``.

    Returns
    -------
    (indicator, CoefficientField)
        Boolean raster of fracture cells and the modified field.  Idempotent:
        re-rasterizing an already modified field gives the same result.
    """
    indicator = np.zeros((fine.ny, fine.nx), dtype=bool)
    for x0, y0, x1, y1 in fractures.segments:
        for ix, iy in _segment_cells(x0, y0, x1, y1, fine):
            indicator[iy, ix] = True
    values = base_field.values.copy()
    values[indicator] = fractures.k_frac
    tag = base_field.provenance
    if len(fractures):
        tag = f"{tag} + {len(fractures)} fractures(k={fractures.k_frac:g})"
    return indicator, CoefficientField(values, provenance=tag)


class LawViolation(ValueError):
    """A sampled law violated monotonicity or coercivity; carries the witness pair."""

    def __init__(self, message, witness):
        super().__init__(f"{message}; witness pair {witness}")
        self.witness = witness


@dataclass(frozen=True)
class MonotoneLaw:
    """Flux law ``kappa(x, v) = k(x) * g(|v|) * v`` for a scalar profile ``g``.

    ``g`` must be bounded in ``[g_min, g_max]`` with ``g_min > 0`` for the
    Lipschitz and coercivity assumptions to hold with envelope ``k(x)``.
    """

    family: str
    g: callable = field(repr=False)
    dg: callable = field(repr=False)  # derivative of g w.r.t. |v|
    params: dict = field(default_factory=dict)

    @classmethod
    def linear(cls):
        return cls(family="linear", g=lambda t: np.ones_like(np.asarray(t, dtype=float)),
                   dg=lambda t: np.zeros_like(np.asarray(t, dtype=float)))

    @classmethod
    def default(cls, alpha=0.5):
        """Damped family ``g(t) = 1 + alpha / (1 + t)``; C2 = 1 and C1 = 1 + alpha."""
        return cls(
            family="damped",
            g=lambda t: 1.0 + alpha / (1.0 + t),
            dg=lambda t: -alpha / (1.0 + t) ** 2,
            params={"alpha": alpha},
        )

    @classmethod
    def from_name(cls, name, alpha=0.5):
        if name == "linear":
            return cls.linear()
        if name == "damped":
            return cls.default(alpha)
        raise ValueError(f"unknown law family {name!r}")

    @property
    def is_linear(self):
        return self.family == "linear"

    def face_flux(self, du, d):
        """Signed scalar flux profile ``g(|du|/d) * du`` normal to a face at distance ``d``."""
        return self.g(np.abs(du) / d) * du

    def face_flux_derivative(self, du, d):
        """Derivative of :meth:`face_flux` w.r.t. ``du`` (positive for monotone laws)."""
        t = np.abs(du) / d
        return self.g(t) + t * self.dg(t)


def evaluate_law(law, k, v):
    """Evaluate the flux ``kappa(x, v) = k * g(|v|) * v`` for vectors ``v`` of shape (..., 2)."""
    v = np.asarray(v, dtype=float)
    t = np.linalg.norm(v, axis=-1)
    return np.asarray(k)[..., None] * law.g(t)[..., None] * v


@dataclass(frozen=True)
class LawReport:
    """Empirically observed assumption constants for a flux law."""

    c_lipschitz: float
    c_coercive: float
    samples: int


def check_law_assumptions(law, sample_count=10_000, seed=0):
    """Sample random vector pairs and report the tightest observed law constants.

    Raises
    ------
    LawViolation
        If coercivity or monotonicity fails on a sampled pair.
    """
    if sample_count < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    # log-uniform magnitudes cover both the small-|v| Lipschitz extreme and the
    # large-|v| coercivity extreme of the bounded families
    mag = 10.0 ** rng.uniform(-3, 3, size=(sample_count, 2))
    ang = rng.uniform(0, 2 * np.pi, size=(sample_count, 2))
    z = np.stack([mag[:, 0] * np.cos(ang[:, 0]), mag[:, 0] * np.sin(ang[:, 0])], axis=-1)
    v = np.stack([mag[:, 1] * np.cos(ang[:, 1]), mag[:, 1] * np.sin(ang[:, 1])], axis=-1)
    k = np.ones(sample_count)
    fz, fv = evaluate_law(law, k, z), evaluate_law(law, k, v)

    coer = np.einsum("ij,ij->i", fv, v) / np.einsum("ij,ij->i", v, v)
    if np.any(coer <= 0):
        i = int(np.argmin(coer))
        raise LawViolation("coercivity violated", (z[i].tolist(), v[i].tolist()))
    mono = np.einsum("ij,ij->i", fz - fv, z - v)
    if np.any(mono < 0):
        i = int(np.argmin(mono))
        raise LawViolation("monotonicity violated", (z[i].tolist(), v[i].tolist()))
    lip = np.linalg.norm(fz - fv, axis=-1) / np.linalg.norm(z - v, axis=-1)
    return LawReport(
        c_lipschitz=float(lip.max()),
        c_coercive=float(coer.min()),
        samples=sample_count,
    )


@dataclass(frozen=True)
class ConstitutiveSet:
    """Nonlinear coefficients of the flow tests: relative permeability and mobilities."""

    a: float = 0.1  # k_r(u) = exp(-a |u|)
    c_matrix: float = 1.0
    c_fracture: float = 0.0
    porosity: float = 1.0

    def __post_init__(self):
        if self.a < 0 or self.porosity <= 0:
            raise ValueError("invalid constitutive parameters")

    def k_r(self, u):
        return np.exp(-self.a * np.abs(u))

    def lam_w(self, s):
        return np.square(s)

    def lam_n(self, s):
        return np.square(1.0 - s)

    def lam_total(self, s):
        return self.lam_w(s) + self.lam_n(s)

    def frac_flow(self, s):
        return self.lam_w(s) / self.lam_total(s)

    def storage(self, fracture_indicator):
        """Per-cell storage coefficient raster: ``c_matrix`` except on fracture cells."""
        return np.where(fracture_indicator, self.c_fracture, self.c_matrix)


@dataclass(frozen=True)
class WeightField:
    """Envelope ``k_bar`` and the constraint weight ``k_tilde = k_bar * sum_i |grad chi_i|^2``."""

    k_bar: np.ndarray
    k_tilde: np.ndarray
    diagnostics: dict

    @property
    def shape(self):
        return self.k_tilde.shape


def compute_weights(field, pou):
    """Build the weight rasters used by the constrained local problems.

    The envelope equals the permeability itself (exact for the implemented
    bounded-``g`` families).  The recorded diagnostics include the empirical
    ``k_tilde * H^2 / k_bar`` bracket, since the weight scales with the coarse
    mesh like ``1/H^2``.
    """
    gss = pou.grad_sq_sum()
    k_bar = field.values
    k_tilde = k_bar * gss
    if np.any(k_tilde < 0):
        raise ValueError("negative constraint weight")
    H2 = pou.coarse.Hx * pou.coarse.Hy
    diag = {
        "k_tilde_min": float(k_tilde.min()),
        "k_tilde_max": float(k_tilde.max()),
        "bracket_min": float((gss * H2).min()),
        "bracket_max": float((gss * H2).max()),
    }
    return WeightField(k_bar=k_bar, k_tilde=k_tilde, diagnostics=diag)


def write_raster(path, raster):
    """Write a raster as text: first line ``nx ny``, then ``ny`` rows of ``nx`` values."""
    raster = np.asarray(raster)
    ny, nx = raster.shape
    with open(path, "w", newline="\n") as fh:
        fh.write(f"{nx} {ny}\n")
        for j in range(ny):
            fh.write(" ".join(f"{v:.17g}" for v in raster[j]) + "\n")


def read_raster(path):
    """Read a raster written by :func:`write_raster`."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: expected 'nx ny' header")
        nx, ny = int(header[0]), int(header[1])
        data = np.loadtxt(fh, ndmin=2)
    if data.shape != (ny, nx):
        raise ValueError(f"{path}: expected {ny} rows of {nx} values, got {data.shape}")
    return data


def write_fractures(path, fractures):
    """Write fracture segments as text lines ``x0 y0 x1 y1``."""
    with open(path, "w", newline="\n") as fh:
        for row in fractures.segments:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_fractures(path, k_frac):
    """Read fracture segments written by :func:`write_fractures`."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}: expected 'x0 y0 x1 y1', got {line!r}")
            rows.append([float(p) for p in parts])
    return FractureSet(segments=np.array(rows).reshape(-1, 4), k_frac=k_frac)
