"""Structured fine/coarse grids, oversampling regions, partitions of unity and cutoffs.

All grids are 2D tensor-product grids on a rectangle (unit square by default).
Fine-grid scalar fields ("rasters") are numpy arrays of shape ``(ny, nx)`` with
``raster[j, i]`` the value in the fine cell whose center is at
``((i + 1/2) hx, (j + 1/2) hy)``.  Coarse cells are identified by a flat index
``c = cy * Nx + cx``.  Everything here is immutable after construction and safe
for concurrent reads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FineGrid",
    "CoarseGrid",
    "OversampleRegion",
    "SpaceTimePartition",
    "PartitionOfUnity",
    "CutoffFunction",
    "build_grids",
    "oversample",
    "build_partition_of_unity",
    "build_cutoff",
]


@dataclass(frozen=True)
class FineGrid:
    """Cell-centered fine grid with ``nx * ny`` rectangular cells."""

    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"fine grid needs at least one cell per axis, got {self.nx}x{self.ny}")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("domain extents must be positive")

    @property
    def hx(self):
        return self.lx / self.nx

    @property
    def hy(self):
        return self.ly / self.ny

    @property
    def cell_area(self):
        return self.hx * self.hy

    @property
    def n_cells(self):
        return self.nx * self.ny

    def cell_centers(self):
        """Return ``(X, Y)`` arrays of shape ``(ny, nx)`` with cell-center coordinates."""
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        return np.meshgrid(x, y)

    def node_coords(self):
        """Return 1D node coordinate arrays ``(xs, ys)`` of lengths ``nx+1``, ``ny+1``."""
        return np.arange(self.nx + 1) * self.hx, np.arange(self.ny + 1) * self.hy


@dataclass(frozen=True)
class CoarseGrid:
    """Coarse partition of the same domain; each coarse cell owns ``ratio**2`` fine cells."""

    Nx: int
    Ny: int
    ratio: int
    fine: FineGrid

    def __post_init__(self):
        if self.Nx < 1 or self.Ny < 1:
            raise ValueError("coarse grid needs at least one cell per axis")
        if self.fine.nx != self.Nx * self.ratio or self.fine.ny != self.Ny * self.ratio:
            raise ValueError(
                "fine grid is not an exact refinement: "
                f"{self.fine.nx}x{self.fine.ny} vs {self.Nx}x{self.Ny} at ratio {self.ratio}"
            )

    @property
    def Hx(self):
        return self.fine.lx / self.Nx

    @property
    def Hy(self):
        return self.fine.ly / self.Ny

    @property
    def n_cells(self):
        return self.Nx * self.Ny

    def cell_id(self, cx, cy):
        return cy * self.Nx + cx

    def cell_xy(self, c):
        return c % self.Nx, c // self.Nx

    def cell_slices(self, c):
        """Fine-index slices ``(sy, sx)`` of the fine cells owned by coarse cell ``c``."""
        cx, cy = self.cell_xy(c)
        r = self.ratio
        return slice(cy * r, (cy + 1) * r), slice(cx * r, (cx + 1) * r)

    def fine_to_coarse(self):
        """Array of shape ``(ny, nx)`` mapping each fine cell to its owning coarse cell."""
        j = np.arange(self.fine.ny) // self.ratio
        i = np.arange(self.fine.nx) // self.ratio
        return j[:, None] * self.Nx + i[None, :]

    def cell_mask(self, c):
        mask = np.zeros((self.fine.ny, self.fine.nx), dtype=bool)
        sy, sx = self.cell_slices(c)
        mask[sy, sx] = True
        return mask

    def cell_means(self, raster):
        """Plain volume means of a fine raster per coarse cell, shape ``(Ny, Nx)``."""
        r = self.ratio
        return raster.reshape(self.Ny, r, self.Nx, r).mean(axis=(1, 3))


@dataclass(frozen=True)
class OversampleRegion:
    """Rectangle of coarse cells within Chebyshev distance ``layers`` of a center cell."""

    center: int
    layers: int
    cx0: int
    cx1: int  # inclusive
    cy0: int
    cy1: int  # inclusive
    coarse: CoarseGrid = field(repr=False)

    @property
    def shape(self):
        return self.cx1 - self.cx0 + 1, self.cy1 - self.cy0 + 1

    def coarse_cells(self):
        """Flat ids of all coarse cells in the region, row-major."""
        cxs = np.arange(self.cx0, self.cx1 + 1)
        cys = np.arange(self.cy0, self.cy1 + 1)
        return (cys[:, None] * self.coarse.Nx + cxs[None, :]).ravel()

    def fine_slices(self):
        r = self.coarse.ratio
        return slice(self.cy0 * r, (self.cy1 + 1) * r), slice(self.cx0 * r, (self.cx1 + 1) * r)

    def fine_shape(self):
        r = self.coarse.ratio
        return (self.cy1 - self.cy0 + 1) * r, (self.cx1 - self.cx0 + 1) * r

    def contains_cell(self, c):
        cx, cy = self.coarse.cell_xy(c)
        return self.cx0 <= cx <= self.cx1 and self.cy0 <= cy <= self.cy1

    def box(self):
        """Hashable bounding box ``(cx0, cx1, cy0, cy1)``."""
        return self.cx0, self.cx1, self.cy0, self.cy1


def build_grids(Nx, Ny, r, lx=1.0, ly=1.0):
    """Build a consistent (coarse, fine) grid pair with integer refinement ratio ``r``.

    Returns
    -------
    (CoarseGrid, FineGrid)
    """
    for name, v in (("Nx", Nx), ("Ny", Ny), ("r", r)):
        if int(v) != v:
            raise ValueError(f"{name} must be an integer, got {v!r}")
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    Nx, Ny, r = int(Nx), int(Ny), int(r)
    fine = FineGrid(Nx * r, Ny * r, lx, ly)
    return CoarseGrid(Nx, Ny, r, fine), fine


def oversample(coarse, c, layers):
    """Oversampled region around coarse cell ``c``: ``layers`` coarse layers, clipped to the domain."""
    if layers < 0:
        raise ValueError("layer count must be >= 0")
    cx, cy = coarse.cell_xy(c)
    if not (0 <= cx < coarse.Nx and 0 <= cy < coarse.Ny):
        raise ValueError(f"coarse cell {c} outside the grid")
    return OversampleRegion(
        center=c,
        layers=layers,
        cx0=max(0, cx - layers),
        cx1=min(coarse.Nx - 1, cx + layers),
        cy0=max(0, cy - layers),
        cy1=min(coarse.Ny - 1, cy + layers),
        coarse=coarse,
    )


def _hat_profile(coarse_nodes_x, H, coords):
    """1D hat values: ``prof[k, i] = hat_k(coords[i])`` for coarse-node hats of width ``H``."""
    xk = coarse_nodes_x[:, None]
    return np.clip(1.0 - np.abs(coords[None, :] - xk) / H, 0.0, 1.0)


class PartitionOfUnity:
    """Bilinear coarse hat functions and the derived per-cell stitching weights.

    The hats are tensor products of 1D profiles, so nodal values, cell-centered
    gradients and the gradient-square sum are all assembled from 1D pieces.
    """

    def __init__(self, coarse):
        self.coarse = coarse
        fine = coarse.fine
        xn, yn = fine.node_coords()
        cx = np.arange(coarse.Nx + 1) * coarse.Hx
        cy = np.arange(coarse.Ny + 1) * coarse.Hy
        # hat values at fine nodes and at fine cell centers
        self._node_x = _hat_profile(cx, coarse.Hx, xn)
        self._node_y = _hat_profile(cy, coarse.Hy, yn)
        xc = (np.arange(fine.nx) + 0.5) * fine.hx
        yc = (np.arange(fine.ny) + 0.5) * fine.hy
        self._cell_x = _hat_profile(cx, coarse.Hx, xc)
        self._cell_y = _hat_profile(cy, coarse.Hy, yc)
        # cell-centered finite differences of the nodal profiles
        self._dx = (self._node_x[:, 1:] - self._node_x[:, :-1]) / fine.hx
        self._dy = (self._node_y[:, 1:] - self._node_y[:, :-1]) / fine.hy
        self._mx = 0.5 * (self._node_x[:, 1:] + self._node_x[:, :-1])
        self._my = 0.5 * (self._node_y[:, 1:] + self._node_y[:, :-1])

    @property
    def n_functions(self):
        return (self.coarse.Nx + 1) * (self.coarse.Ny + 1)

    def node_id(self, kx, ky):
        return ky * (self.coarse.Nx + 1) + kx

    def hat_nodal(self, kx, ky):
        """Hat function of coarse node ``(kx, ky)`` sampled at fine nodes, shape ``(ny+1, nx+1)``."""
        return np.outer(self._node_y[ky], self._node_x[kx])

    def hat_gradient(self, kx, ky):
        """Cell-centered gradient rasters ``(gx, gy)`` of one hat, each ``(ny, nx)``."""
        gx = np.outer(self._my[ky], self._dx[kx])
        gy = np.outer(self._dy[ky], self._mx[kx])
        return gx, gy

    def nodal_sum(self):
        """Sum of all hats at fine nodes (identically one for a partition of unity)."""
        return np.outer(self._node_y.sum(axis=0), self._node_x.sum(axis=0))

    def grad_sq_sum(self):
        """Raster of sum_i |grad chi_i|^2 at fine cell centers, shape ``(ny, nx)``."""
        sx2 = (self._dx**2).sum(axis=0)
        mx2 = (self._mx**2).sum(axis=0)
        sy2 = (self._dy**2).sum(axis=0)
        my2 = (self._my**2).sum(axis=0)
        return np.outer(my2, sx2) + np.outer(sy2, mx2)

    def _node_multiplicity(self, kx, ky):
        # number of coarse cells sharing the node: 1 at corners, 2 on edges, 4 inside
        mx = 1 if kx in (0, self.coarse.Nx) else 2
        my = 1 if ky in (0, self.coarse.Ny) else 2
        return mx * my

    def cell_weight(self, c):
        """Stitching weight ``chi_K`` for coarse cell ``c`` at fine cell centers.

        Sum of the hats of the cell's four corner nodes, each divided by the
        number of coarse cells sharing that node, so that the weights of all
        coarse cells sum to one everywhere.  Supported in the one-layer
        oversampled neighborhood of ``c``.
        """
        cx, cy = self.coarse.cell_xy(c)
        w = np.zeros((self.coarse.fine.ny, self.coarse.fine.nx))
        for ky in (cy, cy + 1):
            for kx in (cx, cx + 1):
                w += np.outer(self._cell_y[ky], self._cell_x[kx]) / self._node_multiplicity(kx, ky)
        return w


def build_partition_of_unity(coarse, fine=None):
    """Build the bilinear coarse partition of unity (``fine`` must match ``coarse.fine``)."""
    if fine is not None and fine is not coarse.fine and fine != coarse.fine:
        raise ValueError("fine grid does not match the coarse grid's refinement")
    return PartitionOfUnity(coarse)


@dataclass(frozen=True)
class CutoffFunction:
    """Cutoff between nested oversampled regions, expressed in the coarse hat basis."""

    node_coeffs: np.ndarray  # (Ny+1, Nx+1) coefficients in span{chi_i}
    cell_raster: np.ndarray  # sampled at fine cell centers, (ny, nx)
    inner: OversampleRegion
    outer: OversampleRegion


def build_cutoff(pou, c, M, m):
    """Cutoff equal to 1 on the ``m``-layer region of cell ``c`` and 0 outside the ``M``-layer one.

    Node coefficients ramp linearly with the Chebyshev layer distance from the
    inner region, which keeps the function inside ``span{chi_i}`` with values
    in ``[0, 1]``.
    """
    if M <= m:
        raise ValueError(f"need M > m >= 0, got M={M}, m={m}")
    coarse = pou.coarse
    inner = oversample(coarse, c, m)
    outer = oversample(coarse, c, M)
    kx = np.arange(coarse.Nx + 1)
    ky = np.arange(coarse.Ny + 1)
    # node-to-region Chebyshev distance in coarse layers; nodes on the closure
    # of the inner region are at distance zero
    dx = np.maximum(np.maximum(inner.cx0 - kx, kx - (inner.cx1 + 1)), 0)
    dy = np.maximum(np.maximum(inner.cy0 - ky, ky - (inner.cy1 + 1)), 0)
    dist = np.maximum(dy[:, None], dx[None, :])
    coeffs = np.clip(1.0 - dist / (M - m), 0.0, 1.0)
    # raster[j, i] = sum_{ky,kx} coeffs[ky, kx] * cell_y[ky, j] * cell_x[kx, i]
    raster = pou._cell_y.T @ coeffs @ pou._cell_x
    # snap the flat regions to remove rounding dust: exactly one inside the
    # inner region, exactly zero outside the outer one
    sy, sx = inner.fine_slices()
    raster[sy, sx] = 1.0
    mask = np.ones_like(raster, dtype=bool)
    sy, sx = outer.fine_slices()
    mask[sy, sx] = False
    raster[mask] = 0.0
    return CutoffFunction(node_coeffs=coeffs, cell_raster=raster, inner=inner, outer=outer)


@dataclass(frozen=True)
class SpaceTimePartition:
    """Coarse time intervals with fine substeps and per-interval backward extensions.

    ``t_nodes`` are the coarse time nodes ``0 = t_0 < ... < t_N = T``; each
    coarse interval ``(t_n, t_{n+1}]`` is integrated with ``substeps`` equal
    backward-Euler substeps.  ``back_ext[n]`` is the index of the earlier
    coarse node from which the local problems of interval ``n`` start.
    """

    t_nodes: np.ndarray
    substeps: int
    back_ext: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_nodes, dtype=float)
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("time nodes must satisfy 0 = t_0 < t_1 < ... = T")
        if self.substeps < 1:
            raise ValueError("need at least one substep per coarse interval")
        be = np.asarray(self.back_ext)
        if len(be) != len(t) - 1:
            raise ValueError("one backward-extension node per coarse interval required")
        if np.any(be < 0) or np.any(be >= np.arange(1, len(t))):
            raise ValueError("backward extension must satisfy 0 <= t_n^- < t_n")

    @property
    def n_intervals(self):
        return len(self.t_nodes) - 1

    def interval_dt(self, n):
        return (self.t_nodes[n + 1] - self.t_nodes[n]) / self.substeps

    @classmethod
    def uniform(cls, t_max, n_intervals, substeps=1, back_intervals=1):
        """Uniform partition of ``(0, t_max]`` with default one-interval backward extension."""
        t = np.linspace(0.0, t_max, n_intervals + 1)
        be = np.maximum(np.arange(n_intervals) - (back_intervals - 1), 0)
        return cls(t_nodes=t, substeps=substeps, back_ext=be)
