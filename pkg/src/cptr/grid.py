"""Structured rectilinear cell-centred grids for two-point flux assembly.

Only interior facets are stored. Boundary facets would carry zero flux under
homogeneous Neumann conditions, so they are left out of the topology entirely.
"""
from dataclasses import dataclass

import numpy as np

AXES = ("x", "y", "z")


@dataclass(frozen=True)
class InteriorFacet:
    cell_plus: int
    cell_minus: int
    area: float
    center_distance: float
    axis: str


class StructuredGrid:
    """Uniform ``nx x ny x nz`` box grid.

    Cells are numbered ``i + nx*(j + ny*k)``.  On every facet the plus cell is
    the one with the lower index along the facet axis, so the unit normal
    ``n_e`` points from plus to minus along the positive axis direction.
    Facets are stored x-axis first, then y, then z, each block in
    lexicographic ``(k, j, i)`` order.
    """

    def __init__(self, nx, ny, nz, Lx, Ly, Lz):
        for name, n in (("nx", nx), ("ny", ny), ("nz", nz)):
            if int(n) != n or n < 1:
                raise ValueError(f"{name} must be a positive integer, got {n!r}")
        for name, L in (("Lx", Lx), ("Ly", Ly), ("Lz", Lz)):
            if not np.isfinite(L) or L <= 0:
                raise ValueError(f"{name} must be positive, got {L!r}")
        self.nx, self.ny, self.nz = int(nx), int(ny), int(nz)
        self.Lx, self.Ly, self.Lz = float(Lx), float(Ly), float(Lz)
        self.spacing = np.array([self.Lx / self.nx, self.Ly / self.ny, self.Lz / self.nz])
        self.cell_volume = float(np.prod(self.spacing))
        self._build_facets()

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def n_cells(self):
        return self.nx * self.ny * self.nz

    @property
    def n_facets(self):
        return self.facet_plus.size

    @property
    def dim(self):
        return 3 if self.nz > 1 else 2

    def cell_index(self, i, j, k=0):
        return np.asarray(i) + self.nx * (np.asarray(j) + self.ny * np.asarray(k))

    def cell_ijk(self, index):
        index = np.asarray(index)
        i = index % self.nx
        j = (index // self.nx) % self.ny
        k = index // (self.nx * self.ny)
        return i, j, k

    def cell_centers(self):
        k, j, i = np.meshgrid(np.arange(self.nz), np.arange(self.ny), np.arange(self.nx),
                              indexing="ij")
        h = self.spacing
        return np.column_stack([((i + 0.5) * h[0]).ravel(),
                                ((j + 0.5) * h[1]).ravel(),
                                ((k + 0.5) * h[2]).ravel()])

    def _build_facets(self):
        idx = np.arange(self.n_cells).reshape(self.nz, self.ny, self.nx)
        h = self.spacing
        plus, minus, area, dist, axis = [], [], [], [], []
        for ax, (lo, hi) in enumerate((
                (idx[:, :, :-1], idx[:, :, 1:]),
                (idx[:, :-1, :], idx[:, 1:, :]),
                (idx[:-1, :, :], idx[1:, :, :]))):
            lo = lo.ravel()
            plus.append(lo)
            minus.append(hi.ravel())
            transverse = np.prod(np.delete(h, ax))
            area.append(np.full(lo.size, transverse))
            dist.append(np.full(lo.size, h[ax]))
            axis.append(np.full(lo.size, ax, dtype=np.int64))
        self.facet_plus = np.concatenate(plus).astype(np.int64)
        self.facet_minus = np.concatenate(minus).astype(np.int64)
        self.facet_area = np.concatenate(area)
        self.facet_distance = np.concatenate(dist)
        self.facet_axis = np.concatenate(axis)
        for arr in (self.facet_plus, self.facet_minus, self.facet_area,
                    self.facet_distance, self.facet_axis):
            arr.flags.writeable = False

    @property
    def facets(self):
        return [InteriorFacet(int(p), int(m), float(a), float(d), AXES[ax])
                for p, m, a, d, ax in zip(self.facet_plus, self.facet_minus,
                                          self.facet_area, self.facet_distance,
                                          self.facet_axis)]

    def box_overlap(self, lo, hi):
        """Volume of each cell lying inside the axis-aligned box ``[lo, hi]``."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        h = self.spacing
        overlap = []
        for ax, n in enumerate(self.shape):
            left = np.arange(n) * h[ax]
            right = left + h[ax]
            overlap.append(np.clip(np.minimum(right, hi[ax]) - np.maximum(left, lo[ax]), 0.0, None))
        ox, oy, oz = overlap
        return (oz[:, None, None] * oy[None, :, None] * ox[None, None, :]).ravel()

    def __repr__(self):
        return (f"StructuredGrid({self.nx}, {self.ny}, {self.nz}, "
                f"{self.Lx:g}, {self.Ly:g}, {self.Lz:g})")


def build_grid(nx, ny, nz, Lx, Ly, Lz):
    return StructuredGrid(nx, ny, nz, Lx, Ly, Lz)


def harmonic_average(a, b):
    """``2ab/(a+b)``, defined as 0 where ``a + b == 0``.  Works elementwise."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("harmonic_average requires non-negative arguments")
    s = a + b
    safe = np.where(s > 0, s, 1.0)
    out = np.where(s > 0, 2.0 * a * b / safe, 0.0)
    return out[()] if out.ndim == 0 else out
