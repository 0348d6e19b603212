"""Uniform geographic grid and the row-standardized spatial weight matrix.

Coordinates are projected onto a local east/north plane (equirectangular,
scaled by ``cos(origin_lat)``) and bucketed into square cells.  Location ids
are row-major: ``index = row * n_cols + col`` with row 0 at the southern edge
and col 0 at the western edge of the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DegenerateRow, DimensionMismatch, InvalidLocationId, OutOfBounds

EARTH_RADIUS_M = 6_371_008.8

DEFAULT_CELL_SIZE_M = 100.0
DEFAULT_NEIGHBOR_DISTANCE_M = 150.0
DEFAULT_SELF_WEIGHT = 1e4


@dataclass(frozen=True)
class GridSpec:
    origin_lat: float
    origin_lon: float
    cell_size_m: float
    n_rows: int
    n_cols: int

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ConfigError(f"grid needs n_rows >= 1 and n_cols >= 1, got {self.n_rows}x{self.n_cols}")
        if not self.cell_size_m > 0:
            raise ConfigError(f"cell_size_m must be > 0, got {self.cell_size_m}")

    @property
    def n_locations(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def width_m(self) -> float:
        return self.n_cols * self.cell_size_m

    @property
    def height_m(self) -> float:
        return self.n_rows * self.cell_size_m

    def loc_id(self, row: int, col: int) -> int:
        if not (0 <= row < self.n_rows and 0 <= col < self.n_cols):
            raise InvalidLocationId(f"cell ({row}, {col}) outside {self.n_rows}x{self.n_cols} grid")
        return row * self.n_cols + col

    def row_col(self, loc: int) -> tuple[int, int]:
        self._check(loc)
        return divmod(int(loc), self.n_cols)

    def _check(self, loc: int) -> None:
        if not 0 <= loc < self.n_locations:
            raise InvalidLocationId(f"location id {loc} outside [0, {self.n_locations})")


def project(spec: GridSpec, lat: float, lon: float) -> tuple[float, float]:
    """Meters (east, north) of a point relative to the grid origin."""
    k = math.cos(math.radians(spec.origin_lat))
    x = EARTH_RADIUS_M * math.radians(lon - spec.origin_lon) * k
    y = EARTH_RADIUS_M * math.radians(lat - spec.origin_lat)
    return x, y


def unproject(spec: GridSpec, x: float, y: float) -> tuple[float, float]:
    """Inverse of :func:`project`; returns ``(lat, lon)``."""
    k = math.cos(math.radians(spec.origin_lat))
    lat = spec.origin_lat + math.degrees(y / EARTH_RADIUS_M)
    lon = spec.origin_lon + math.degrees(x / (EARTH_RADIUS_M * k))
    return lat, lon


def locate(spec: GridSpec, lat: float, lon: float) -> int:
    """Return the id of the cell containing ``(lat, lon)``.

    Raises:
        OutOfBounds: the point falls outside ``[origin, origin + extent)``.
    """
    x, y = project(spec, lat, lon)
    col = math.floor(x / spec.cell_size_m)
    row = math.floor(y / spec.cell_size_m)
    if not (0 <= row < spec.n_rows and 0 <= col < spec.n_cols):
        raise OutOfBounds(f"point ({lat}, {lon}) projects to ({x:.1f}m, {y:.1f}m), outside the grid")
    return row * spec.n_cols + col


def cell_centers(spec: GridSpec) -> np.ndarray:
    """Projected centers of every cell, shape ``(|L|, 2)`` as (east, north)."""
    rows, cols = np.divmod(np.arange(spec.n_locations), spec.n_cols)
    return np.column_stack([(cols + 0.5) * spec.cell_size_m, (rows + 0.5) * spec.cell_size_m])


def cell_center(spec: GridSpec, loc: int) -> tuple[float, float]:
    row, col = spec.row_col(loc)
    return (col + 0.5) * spec.cell_size_m, (row + 0.5) * spec.cell_size_m


def cell_center_distance(spec: GridSpec, i: int, j: int) -> float:
    xi, yi = cell_center(spec, i)
    xj, yj = cell_center(spec, j)
    return math.hypot(xi - xj, yi - yj)


@dataclass(frozen=True)
class SpatialWeightMatrix:
    """Sparse ``|L| x |L|`` adjacency stored row-compressed."""

    matrix: sp.csr_matrix
    normalized: bool = False

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def neighbors(self, i: int) -> np.ndarray:
        """Off-diagonal support of row ``i``."""
        lo, hi = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        cols = self.matrix.indices[lo:hi]
        return cols[cols != i]


def _neighbor_offsets(spec: GridSpec, d: float) -> list[tuple[int, int]]:
    reach = int(math.ceil(d / spec.cell_size_m)) if d > 0 else 0
    reach = min(reach, max(spec.n_rows, spec.n_cols))
    return [
        (dr, dc)
        for dr in range(-reach, reach + 1)
        for dc in range(-reach, reach + 1)
        if (dr, dc) != (0, 0)
    ]


def build_spatial_weights(spec: GridSpec, d: float, q: float) -> SpatialWeightMatrix:
    """Binary distance-threshold adjacency with self weight ``q`` on the diagonal.

    Off-diagonal ``(i, j)`` is 1 when the cell-center distance is strictly
    below ``d``.  Only offsets within ``ceil(d / cell_size)`` cells are
    examined, so construction is ``O(|L| * (d / cell_size)^2)``.
    """
    if d < 0:
        raise ConfigError(f"neighbor distance d must be >= 0, got {d}")
    if not q > 0:
        raise ConfigError(f"self weight q must be > 0, got {q}")
    n = spec.n_locations
    centers = cell_centers(spec)
    rows_idx, cols_idx = np.divmod(np.arange(n), spec.n_cols)
    src = [np.arange(n)]
    dst = [np.arange(n)]
    val = [np.full(n, float(q))]
    for dr, dc in _neighbor_offsets(spec, d):
        r2, c2 = rows_idx + dr, cols_idx + dc
        ok = (r2 >= 0) & (r2 < spec.n_rows) & (c2 >= 0) & (c2 < spec.n_cols)
        i = np.nonzero(ok)[0]
        j = r2[ok] * spec.n_cols + c2[ok]
        dist = np.hypot(centers[i, 0] - centers[j, 0], centers[i, 1] - centers[j, 1])
        keep = dist < d
        src.append(i[keep])
        dst.append(j[keep])
        val.append(np.ones(int(keep.sum())))
    m = sp.csr_matrix(
        (np.concatenate(val), (np.concatenate(src), np.concatenate(dst))), shape=(n, n)
    )
    m.sort_indices()
    return SpatialWeightMatrix(m, normalized=False)


def row_normalize(m: SpatialWeightMatrix) -> SpatialWeightMatrix:
    """Divide every row by its sum so each row sums to one."""
    sums = m.row_sums()
    if np.any(sums <= 0):
        bad = int(np.flatnonzero(sums <= 0)[0])
        raise DegenerateRow(f"row {bad} sums to {sums[bad]}; cannot normalize")
    out = m.matrix.copy().astype(np.float64)
    out.data = out.data / np.repeat(sums, np.diff(out.indptr))
    return SpatialWeightMatrix(out, normalized=True)


def standardized_weights(spec: GridSpec, d: float = DEFAULT_NEIGHBOR_DISTANCE_M,
                         q: float = DEFAULT_SELF_WEIGHT) -> SpatialWeightMatrix:
    return row_normalize(build_spatial_weights(spec, d, q))


def apply_to_embedding(m: SpatialWeightMatrix, emb: np.ndarray) -> np.ndarray:
    """Return ``S* @ emb``: each row becomes the weighted mean of its neighborhood."""
    if not m.normalized:
        raise ValueError("spatial weight matrix must be row-normalized before use")
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != m.size:
        raise DimensionMismatch(f"embedding shape {emb.shape} does not match |L|={m.size}")
    return np.asarray(m.matrix @ emb)


def export_weights(m: SpatialWeightMatrix, path) -> None:
    """Write the nonzero entries as text: header ``"|L| nnz"`` then ``"i j weight"`` lines."""
    coo = m.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lines = [f"{m.size} {m.nnz}"]
    lines.extend(f"{coo.row[k]} {coo.col[k]} {coo.data[k]:.9g}" for k in order)
    Path(path).write_text("\n".join(lines) + "\n")


def import_weights(path, normalized: bool = True) -> SpatialWeightMatrix:
    lines = Path(path).read_text().split("\n")
    n, nnz = (int(v) for v in lines[0].split())
    rows, cols, vals = [], [], []
    for line in lines[1:1 + nnz]:
        i, j, w = line.split()
        rows.append(int(i))
        cols.append(int(j))
        vals.append(float(w))
    m = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    m.sort_indices()
    return SpatialWeightMatrix(m, normalized=normalized)
