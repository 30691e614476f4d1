"""Structured P1 grids on intervals and rectangles, and assembly of the
anisotropic p-Dirichlet energy, its gradient and its Hessian.

Gradients of P1 fields are constant per cell, so the energy
(1/p) sum_T |T| H^p(grad u|_T) is integrated exactly.  Zeroth-order terms use
the lumped (nodal) quadrature w_i = sum_{T ni i} |T|/(d+1).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .finsler import FinslerSpec


@dataclass(frozen=True)
class Domain:
    """Interval [0, L] (one length) or rectangle [0, L1] x [0, L2] (two lengths)."""

    lengths: tuple[float, ...]

    def __post_init__(self):
        lengths = tuple(float(v) for v in self.lengths)
        if len(lengths) not in (1, 2):
            raise ValueError("only intervals and rectangles are supported")
        if any(not (v > 0) for v in lengths):
            raise ValueError("domain lengths must be positive")
        object.__setattr__(self, "lengths", lengths)

    @property
    def dim(self) -> int:
        return len(self.lengths)

    @property
    def measure(self) -> float:
        return float(np.prod(self.lengths))

    @classmethod
    def interval(cls, length: float = 1.0) -> "Domain":
        return cls((length,))

    @classmethod
    def rectangle(cls, l1: float = 1.0, l2: float = 1.0) -> "Domain":
        return cls((l1, l2))

    def to_dict(self) -> dict:
        if self.dim == 1:
            return {"kind": "interval", "length": self.lengths[0]}
        return {"kind": "rectangle", "lengths": list(self.lengths)}

    @classmethod
    def from_dict(cls, d: dict) -> "Domain":
        if d.get("kind", "interval") == "interval":
            return cls((float(d.get("length", 1.0)),))
        return cls(tuple(d["lengths"]))

    def corners(self) -> np.ndarray:
        if self.dim == 1:
            return np.array([[0.0], [self.lengths[0]]])
        a, b = self.lengths
        return np.array([[0.0, 0.0], [a, 0.0], [0.0, b], [a, b]])


@dataclass(eq=False)
class Grid:
    domain: Domain
    resolution: tuple[int, ...]
    vertices: np.ndarray  # (nv, dim)
    cells: np.ndarray  # (nc, dim+1)
    boundary_mask: np.ndarray  # (nv,)
    cell_measure: np.ndarray  # (nc,)
    cell_grads: np.ndarray  # (nc, dim+1, dim): gradients of the local hat functions
    distance: np.ndarray  # (nv,) exact distance to the boundary
    h: float
    _interior: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self._interior = np.flatnonzero(~self.boundary_mask)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def interior(self) -> np.ndarray:
        return self._interior

    def cell_gradients(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_vertices,):
            raise ValueError(f"field has shape {u.shape}, grid has {self.n_vertices} vertices")
        return np.einsum("cvd,cv->cd", self.cell_grads, u[self.cells])

    def scatter(self, local: np.ndarray) -> np.ndarray:
        """Sum per-cell, per-local-vertex contributions (nc, d+1) into nodes."""
        return np.bincount(self.cells.ravel(), weights=local.ravel(), minlength=self.n_vertices)

    def to_dict(self) -> dict:
        return {
            "domain": self.domain.to_dict(),
            "resolution": list(self.resolution),
            "n_vertices": self.n_vertices,
            "n_cells": self.n_cells,
            "h": self.h,
            "h_min": float(self.cell_measure.min()) if self.dim == 1 else self.h,
            "vertices": self.vertices.tolist(),
            "cells": self.cells.tolist(),
            "boundary": np.flatnonzero(self.boundary_mask).tolist(),
        }

    def write_json(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            json.dump(self.to_dict(), fh)


@dataclass(eq=False)
class DiscreteField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_vertices,):
            raise ValueError("field size does not match grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field has non-finite entries")

    def to_csv(self, path) -> None:
        write_field_csv(self.grid, self.values, path)


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    weights: np.ndarray

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def _graded_lengths(length: float, n: int, min_cell: float, ratio: float) -> np.ndarray:
    """Cell lengths: geometric layers of ratio ``ratio`` at both ends, uniform core."""
    if not (0 < min_cell < length / n):
        raise ValueError("min_cell must lie in (0, length/resolution)")
    if not ratio > 1:
        raise ValueError("grading ratio must be > 1")
    layer: list[float] = []
    while True:
        k = len(layer)
        core_n = n - 2 * k
        if core_n < 2:
            raise ValueError("resolution too small for the requested grading")
        core_h = (length - 2 * sum(layer)) / core_n
        nxt = min_cell * ratio**k
        if nxt >= core_h / ratio:
            break
        layer.append(nxt)
    arr = np.asarray(layer)
    return np.concatenate([arr, np.full(n - 2 * len(layer), core_h), arr[::-1]])


def build_grid(
    domain: Domain | Sequence[float] | float,
    resolution: int | Sequence[int],
    min_cell: float | None = None,
    grading_ratio: float = 1.2,
) -> Grid:
    """Structured triangulation of an interval or rectangle.

    ``resolution`` is the number of cells per axis.  Rectangles split every
    cell along the (i, j)-(i+1, j+1) diagonal.  Intervals are uniform unless
    ``min_cell`` is given, in which case cells shrink geometrically towards both
    endpoints down to ``min_cell``.  Cell lengths and distances are then built
    from the lengths themselves, so layers far below the resolution of the
    vertex coordinates near x = L stay exact.
    """
    if not isinstance(domain, Domain):
        domain = Domain(tuple(np.atleast_1d(domain)))
    res = tuple(int(r) for r in np.broadcast_to(np.atleast_1d(resolution), (domain.dim,)))
    if any(r < 1 for r in res):
        raise ValueError("resolution must be >= 1 along every axis")

    if domain.dim == 1:
        (L,), (n,) = domain.lengths, res
        if min_cell is None:
            lens = np.full(n, L / n)
        else:
            lens = _graded_lengths(L, n, float(min_cell), float(grading_ratio))
        if min_cell is None:
            left = np.linspace(0.0, L, n + 1)
            right = L - left
        else:
            left = np.concatenate([[0.0], np.cumsum(lens)])
            right = np.concatenate([np.cumsum(lens[::-1])[::-1], [0.0]])
        x = left.copy()
        x[-1] = L
        cells = np.column_stack([np.arange(n), np.arange(1, n + 1)])
        grads = np.empty((n, 2, 1))
        grads[:, 0, 0] = -1.0 / lens
        grads[:, 1, 0] = 1.0 / lens
        bmask = np.zeros(n + 1, dtype=bool)
        bmask[[0, -1]] = True
        dist = np.minimum(left, right)
        dist[[0, -1]] = 0.0
        return Grid(domain, res, x[:, None], cells, bmask, lens, grads, dist, float(lens.max()))

    (a, b), (nx, ny) = domain.lengths, res
    xs = np.linspace(0.0, a, nx + 1)
    ys = np.linspace(0.0, b, ny + 1)
    X, Y = np.meshgrid(xs, ys)  # row j = y index
    verts = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[:-1, 1:].ravel()
    v01 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    cells = np.concatenate([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])])
    P = verts[cells]  # (nc, 3, 2)
    e1 = P[:, 1] - P[:, 0]
    e2 = P[:, 2] - P[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    area = 0.5 * det
    # gradients of barycentric coordinates: rows of inv([e1 e2])^T
    inv = np.empty((len(cells), 2, 2))
    inv[:, 0, 0] = e2[:, 1] / det
    inv[:, 0, 1] = -e2[:, 0] / det
    inv[:, 1, 0] = -e1[:, 1] / det
    inv[:, 1, 1] = e1[:, 0] / det
    grads = np.empty((len(cells), 3, 2))
    grads[:, 1] = inv[:, 0]
    grads[:, 2] = inv[:, 1]
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    x, y = verts[:, 0], verts[:, 1]
    dist = np.minimum.reduce([x, a - x, y, b - y])
    bmask = np.zeros(len(verts), dtype=bool)
    bmask[idx[0, :]] = bmask[idx[-1, :]] = bmask[idx[:, 0]] = bmask[idx[:, -1]] = True
    dist[bmask] = 0.0
    h = float(math.hypot(a / nx, b / ny))
    return Grid(domain, res, verts, cells, bmask, area, grads, dist, h)


def _check_field(grid: Grid, u) -> np.ndarray:
    u = np.asarray(u.values if isinstance(u, DiscreteField) else u, dtype=float)
    if u.shape != (grid.n_vertices,):
        raise ValueError(f"field has shape {u.shape}, grid has {grid.n_vertices} vertices")
    return u


def energy(grid: Grid, norm: FinslerSpec, p: float, u) -> float:
    if not p > 1:
        raise ValueError("p must be > 1")
    u = _check_field(grid, u)
    H = norm.value(grid.cell_gradients(u))
    return float(np.dot(grid.cell_measure, H**p) / p)


def energy_gradient(grid: Grid, norm: FinslerSpec, p: float, u) -> np.ndarray:
    """Nodal vector sum_T |T| a(grad u|_T).grad(lambda_i); boundary entries zero."""
    if not p > 1:
        raise ValueError("p must be > 1")
    u = _check_field(grid, u)
    a = norm.flux(p, grid.cell_gradients(u))
    local = grid.cell_measure[:, None] * np.einsum("cd,cvd->cv", a, grid.cell_grads)
    out = grid.scatter(local)
    out[grid.boundary_mask] = 0.0
    return out


def energy_gradient_abs(grid: Grid, norm: FinslerSpec, p: float, u) -> np.ndarray:
    """Nodal sums of |contributions|, the natural magnitude against which
    cancellation in ``energy_gradient`` is measured."""
    u = _check_field(grid, u)
    a = norm.flux(p, grid.cell_gradients(u))
    local = grid.cell_measure[:, None] * np.abs(np.einsum("cd,cvd->cv", a, grid.cell_grads))
    out = grid.scatter(local)
    out[grid.boundary_mask] = 0.0
    return out


def energy_hessian(grid: Grid, norm: FinslerSpec, p: float, u, clamp: float = 1e-10) -> sp.csr_matrix:
    """Sparse Jacobian of ``energy_gradient`` over all vertices."""
    u = _check_field(grid, u)
    Da = norm.flux_jacobian(p, grid.cell_gradients(u), clamp=clamp)
    G = grid.cell_grads
    local = grid.cell_measure[:, None, None] * np.einsum("cid,cde,cje->cij", G, Da, G)
    k = grid.cells.shape[1]
    rows = np.repeat(grid.cells, k, axis=1).ravel()
    cols = np.tile(grid.cells, (1, k)).ravel()
    n = grid.n_vertices
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def lumped_mass(grid: Grid) -> QuadratureRule:
    k = grid.cells.shape[1]
    local = np.repeat((grid.cell_measure / k)[:, None], k, axis=1)
    return QuadratureRule(grid.scatter(local))


def seminorm_p(grid: Grid, norm: FinslerSpec, p: float, u) -> float:
    """||H(grad u)||_{L^p}."""
    u = _check_field(grid, u)
    H = norm.value(grid.cell_gradients(u))
    return float(np.dot(grid.cell_measure, H**p) ** (1.0 / p))


def lp_norm(grid: Grid, quad: QuadratureRule, p: float, u) -> float:
    u = _check_field(grid, u)
    return float(np.dot(quad.weights, np.abs(u) ** p) ** (1.0 / p))


def distance_field(grid: Grid) -> DiscreteField:
    return DiscreteField(grid, grid.distance.copy())


def write_field_csv(grid: Grid, values, path, name: str = "value") -> None:
    values = np.asarray(values, dtype=float)
    header = ["x", name] if grid.dim == 1 else ["x", "y", name]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for xyz, v in zip(grid.vertices, values):
            w.writerow([repr(float(c)) for c in xyz] + [repr(float(v))])


def read_field_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :-1], data[:, -1]


# -- boundary-strip integrals --------------------------------------------


def _sub_points(dim: int, n: int) -> np.ndarray:
    """Barycentric coordinates of the centroids of a uniform n-fold subdivision."""
    if dim == 1:
        s = (np.arange(n) + 0.5) / n
        return np.column_stack([1 - s, s])
    pts = []
    for i in range(n):
        for j in range(n - i):
            pts.append(((i + 1 / 3) / n, (j + 1 / 3) / n))
            if i + j < n - 1:
                pts.append(((i + 2 / 3) / n, (j + 2 / 3) / n))
    xy = np.asarray(pts)
    return np.column_stack([1 - xy.sum(axis=1), xy])


@dataclass
class StripIntegral:
    """Sequence of estimates of int_{d > delta_k} F, delta_k = delta_0 2^{-k}."""

    deltas: list[float]
    estimates: list[float]
    increment_ratio: float
    decay_exponent: float  # -log2(increment ratio); ~ (r+1) for F ~ d^r
    finite: bool
    value: float  # geometric tail extrapolation if finite, else inf

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def strip_integral(
    grid: Grid,
    integrand: Callable[[np.ndarray, np.ndarray], np.ndarray],
    nodal: np.ndarray,
    levels: int = 5,
    base: int = 4,
    finite_threshold: float = 0.05,
) -> StripIntegral:
    """Integrate ``integrand(values, d)`` of a P1 field away from shrinking boundary strips.

    ``nodal`` is (n_vertices,) or (n_vertices, k); in the latter case the
    integrand receives the interpolated columns as an (n, k) array.

    Every cell is sub-sampled at the centroids of a uniform subdivision; cells
    touching the boundary use ``base * 2^k`` subdivisions at level k, so the
    excluded strip {d <= delta_k} is always resolved.  The divergence test uses
    the ratio of the last two increments: geometric decay means a finite
    integral, ratios >= 1 mean growth without saturation.
    """
    if levels < 3:
        raise ValueError("need at least three refinement levels")
    nodal = np.asarray(nodal, dtype=float)
    bcell = np.any(grid.boundary_mask[grid.cells], axis=1)
    hb = float(np.min(grid.cell_measure[bcell] ** (1.0 / grid.dim)))
    if grid.dim == 2:
        hb = float(np.min(np.sqrt(2 * grid.cell_measure[bcell])))
    delta0 = hb / 2.0

    def cell_sum(cells_sel: np.ndarray, nsub: int, delta: float) -> float:
        B = _sub_points(grid.dim, nsub)  # (s, d+1)
        c = grid.cells[cells_sel]
        vals = np.einsum("sv,cv...->cs...", B, nodal[c])
        dist = np.einsum("sv,cv->cs", B, grid.distance[c])
        w = grid.cell_measure[cells_sel][:, None] / B.shape[0]
        mask = dist > delta
        F = np.zeros_like(dist)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            F[mask] = integrand(vals[mask], dist[mask])
        return float(np.sum(np.where(mask, F * w, 0.0)))

    inner = cell_sum(np.flatnonzero(~bcell), 2, 0.0)
    deltas, ests = [], []
    for k in range(levels):
        delta = delta0 * 2.0**-k
        deltas.append(delta)
        ests.append(inner + cell_sum(np.flatnonzero(bcell), base * 2**k, delta))
    inc = np.diff(ests)
    if inc[-2] == 0:
        ratio = 0.0 if inc[-1] == 0 else math.inf
    else:
        ratio = float(inc[-1] / inc[-2])
    decay = -math.log2(ratio) if ratio > 0 else math.inf
    finite = bool(ratio < 1 and decay > finite_threshold)
    value = ests[-1] + inc[-1] * ratio / (1 - ratio) if finite else math.inf
    return StripIntegral(deltas, ests, ratio, decay, finite, float(value))
