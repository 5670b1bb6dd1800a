"""Continua test functions, the weighted inner product, projection and macro extraction.

Each coarse cell carries one continuum per connected subregion: the matrix
(non-fracture) cells, and one per 4-connected fracture component inside the
cell.  A continuum's test function is the indicator of its subregion, so
functions of one cell have disjoint supports and the weighted projection onto
their span reduces to weighted averages.  Macro values are those weighted
averages, which makes them directly comparable to plain coarse-cell means.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import label as cc_label

__all__ = [
    "AuxiliaryFunction",
    "AuxiliarySpace",
    "MacroState",
    "build_continua",
    "s_product",
    "project",
    "extract_macro",
    "export_layout",
]

FOUR_NEIGHBOR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass(frozen=True)
class AuxiliaryFunction:
    """Indicator test function of one continuum subregion inside one coarse cell."""

    cell: int
    continuum: int
    kind: str  # "matrix" or "fracture"
    rows: np.ndarray = field(repr=False)  # fine-cell j indices
    cols: np.ndarray = field(repr=False)  # fine-cell i indices
    s_weights: np.ndarray = field(repr=False)  # k_tilde * cell_area per member cell
    weight: float = 0.0  # sum of s_weights = s(mu, mu)

    @property
    def size(self):
        return self.rows.size

    def raster(self, shape):
        out = np.zeros(shape)
        out[self.rows, self.cols] = 1.0
        return out


class AuxiliarySpace:
    """Ordered collection of continuum test functions with the weight field."""

    def __init__(self, coarse, weights, functions):
        self.coarse = coarse
        self.weights = weights
        self.functions = list(functions)
        self._by_cell = {}
        self._position = {}
        for pos, fn in enumerate(self.functions):
            self._by_cell.setdefault(fn.cell, []).append(pos)
            self._position[(fn.cell, fn.continuum)] = pos

    def __len__(self):
        return len(self.functions)

    @property
    def n(self):
        return len(self.functions)

    def position(self, cell, continuum):
        return self._position[(cell, continuum)]

    def in_cell(self, cell):
        """Positions of the continua of one coarse cell."""
        return self._by_cell.get(cell, [])

    def in_cells(self, cells):
        """Positions of all continua whose cells are in ``cells`` (given order)."""
        out = []
        for c in cells:
            out.extend(self._by_cell.get(c, []))
        return out

    def s_product(self, u, v):
        """Weighted inner product ``sum k_tilde * u * v * cell_area`` (midpoint quadrature)."""
        area = self.coarse.fine.cell_area
        return float(np.sum(self.weights.k_tilde * np.asarray(u) * np.asarray(v)) * area)

    def s_norm(self, u):
        return float(np.sqrt(max(self.s_product(u, u), 0.0)))

    def macro_s_norm(self, values):
        """s-norm of the auxiliary-space function with the given macro coefficients."""
        w = np.array([fn.weight for fn in self.functions])
        return float(np.sqrt(np.sum(np.asarray(values) ** 2 * w)))

    def moments(self, u):
        """Normalized weighted moments of a raster on every continuum (macro values)."""
        u = np.asarray(u)
        return np.array([
            float(np.dot(fn.s_weights, u[fn.rows, fn.cols]) / fn.weight)
            for fn in self.functions
        ])

    def fill(self, values):
        """Auxiliary-space raster with the given per-continuum coefficients."""
        out = np.zeros(self.weights.shape)
        for fn, v in zip(self.functions, values):
            out[fn.rows, fn.cols] = v
        return out


@dataclass(frozen=True)
class MacroState:
    """Macro values laid out in the ordering of an :class:`AuxiliarySpace`."""

    values: np.ndarray
    space: AuxiliarySpace = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.shape != (self.space.n,):
            raise ValueError("macro layout does not match the auxiliary space")
        if not np.all(np.isfinite(v)):
            raise ValueError("macro values must be finite")

    def __getitem__(self, key):
        cell, continuum = key
        return self.values[self.space.position(cell, continuum)]


def build_continua(coarse, fracture_indicator, weights):
    """Build the auxiliary space from the fracture layout and the weight field.

    Every coarse cell gets a matrix continuum if it has non-fracture cells, plus
    one continuum per 4-connected fracture component inside the cell.  A
    continuum whose weighted volume vanishes is rejected (the projection would
    be undefined on it).
    """
    frac = np.asarray(fracture_indicator, dtype=bool)
    area = coarse.fine.cell_area
    kt = weights.k_tilde
    functions = []
    for c in range(coarse.n_cells):
        sy, sx = coarse.cell_slices(c)
        local_frac = frac[sy, sx]
        j0, i0 = sy.start, sx.start
        subregions = []
        if not local_frac.all():
            jj, ii = np.nonzero(~local_frac)
            subregions.append(("matrix", jj, ii))
        if local_frac.any():
            labels, n_comp = cc_label(local_frac, structure=FOUR_NEIGHBOR)
            for comp in range(1, n_comp + 1):
                jj, ii = np.nonzero(labels == comp)
                subregions.append(("fracture", jj, ii))
        for continuum, (kind, jj, ii) in enumerate(subregions):
            rows, cols = jj + j0, ii + i0
            sw = kt[rows, cols] * area
            w = float(sw.sum())
            if w <= 0:
                cx, cy = coarse.cell_xy(c)
                raise ValueError(
                    f"degenerate continuum (zero weighted volume) in coarse cell ({cx}, {cy})"
                )
            functions.append(AuxiliaryFunction(
                cell=c, continuum=continuum, kind=kind,
                rows=rows, cols=cols, s_weights=sw, weight=w,
            ))
    return AuxiliarySpace(coarse, weights, functions)


def s_product(space, u, v):
    """Module-level alias of :meth:`AuxiliarySpace.s_product`."""
    return space.s_product(u, v)


def project(space, u):
    """Weighted projection of a raster onto the auxiliary space.

    Returns
    -------
    (MacroState, ndarray)
        The projection coefficients (per continuum) and the projected raster.
    """
    coeffs = space.moments(u)
    return MacroState(coeffs, space), space.fill(coeffs)


def extract_macro(space, u):
    """Macro values of a raster: its weighted average on every continuum."""
    return MacroState(space.moments(u), space)


def export_layout(space, path):
    """Write the continuum layout as CSV rows ``(cell_i, cell_j, continuum_id, fine_cell_count)``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell_i", "cell_j", "continuum_id", "fine_cell_count"])
        for fn in space.functions:
            cx, cy = space.coarse.cell_xy(fn.cell)
            writer.writerow([cx, cy, fn.continuum, fn.size])
