"""Regular square-cell grid partitioned into municipalities.

Cells are indexed row-major from the lower-left corner: flat index
``row * n_cols + col`` with ``row = 0`` the southernmost row.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class GridError(ValueError):
    """Invalid grid geometry or membership table."""


@dataclass(frozen=True)
class GridParams:
    n_cols: int
    n_rows: int
    cell_size: float = 2.0
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if self.n_cols < 1 or self.n_rows < 1:
            raise GridError("grid needs at least one row and one column")
        if not self.cell_size > 0:
            raise GridError("cell_size must be positive")


@dataclass(frozen=True, eq=False)
class Grid:
    n_cols: int
    n_rows: int
    cell_size: float
    origin: tuple[float, float]
    land_mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        mask = np.asarray(self.land_mask, dtype=bool)
        if mask.shape != (self.n_rows, self.n_cols):
            raise GridError(
                f"land_mask shape {mask.shape} != ({self.n_rows}, {self.n_cols})")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "land_mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def land_cells(self) -> np.ndarray:
        """Flat indices of land cells, ascending."""
        return np.flatnonzero(self.land_mask.ravel())

    @property
    def n_land(self) -> int:
        return int(self.land_mask.sum())

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.n_rows and 0 <= col < self.n_cols):
            raise GridError(f"cell ({row}, {col}) outside {self.n_rows}x{self.n_cols} grid")
        return row * self.n_cols + col

    def row_col(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return np.divmod(np.asarray(idx), self.n_cols)

    def centers(self, idx=None) -> np.ndarray:
        """Cell-center coordinates (km), shape ``(n, 2)``; all cells if ``idx`` is None."""
        if idx is None:
            idx = np.arange(self.n_cells)
        rows, cols = self.row_col(idx)
        x = self.origin[0] + (cols + 0.5) * self.cell_size
        y = self.origin[1] + (rows + 0.5) * self.cell_size
        return np.column_stack([x, y]).astype(float)

    def cell_of(self, x: float, y: float) -> int:
        col = int(np.floor((x - self.origin[0]) / self.cell_size))
        row = int(np.floor((y - self.origin[1]) / self.cell_size))
        col = min(max(col, 0), self.n_cols - 1)
        row = min(max(row, 0), self.n_rows - 1)
        return row * self.n_cols + col

    def to_raster(self, land_values, nodata: float = np.nan) -> np.ndarray:
        """Scatter per-land-cell values into a ``(n_rows, n_cols)`` array."""
        out = np.full(self.n_cells, nodata, dtype=float)
        out[self.land_cells] = land_values
        return out.reshape(self.shape)

    def from_raster(self, raster) -> np.ndarray:
        return np.asarray(raster, dtype=float).reshape(-1)[self.land_cells]

    def same_as(self, other: "Grid") -> bool:
        return (self.n_cols == other.n_cols and self.n_rows == other.n_rows
                and np.isclose(self.cell_size, other.cell_size)
                and np.allclose(self.origin, other.origin)
                and np.array_equal(self.land_mask, other.land_mask))


@dataclass(frozen=True)
class Municipality:
    id: str
    name: str
    population: int
    centroid: tuple[float, float]
    member_cells: tuple[int, ...]

    def __post_init__(self):
        if self.population < 1:
            raise GridError(f"municipality {self.id}: population must be >= 1")
        if not self.member_cells:
            raise GridError(f"municipality {self.id} has no cells")


def centroid_of(grid: Grid, cells: Sequence[int], weights=None) -> tuple[float, float]:
    """Mean of member cell centers, optionally weighted (e.g. by population density).

    Raises
    ------
    GridError
        If ``cells`` is empty, a weight is negative, or all weights are zero.
    """
    cells = np.asarray(cells, dtype=int)
    if cells.size == 0:
        raise GridError("centroid of an empty cell set")
    xy = grid.centers(cells)
    if weights is None:
        c = xy.mean(axis=0)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (cells.size,):
            raise GridError("one weight per member cell required")
        if np.any(w < 0):
            raise GridError("weights must be non-negative")
        if not w.sum() > 0:
            raise GridError("weights sum to zero")
        c = (w[:, None] * xy).sum(axis=0) / w.sum()
    return (float(c[0]), float(c[1]))


def build_grid(params: GridParams, membership: Iterable[tuple[int, int, str]],
               table: Mapping[str, tuple[str, int]],
               density: Mapping[int, float] | None = None):
    """Build the grid and its municipalities from a cell-membership table.

    Parameters
    ----------
    params : GridParams
    membership : iterable of (row, col, municipality_id)
        One entry per land cell.
    table : mapping municipality_id -> (name, population)
    density : optional mapping flat cell index -> population density, used to
        weight centroids. Uniform within a municipality when omitted.

    Returns
    -------
    grid : Grid
    municipalities : list of Municipality, ordered by first appearance in ``table``
    """
    owner: dict[int, str] = {}
    mask = np.zeros((params.n_rows, params.n_cols), dtype=bool)
    for row, col, mid in membership:
        row, col = int(row), int(col)
        if not (0 <= row < params.n_rows and 0 <= col < params.n_cols):
            raise GridError(f"cell ({row}, {col}) outside the grid")
        if mid not in table:
            raise GridError(f"municipality {mid!r} missing from population table")
        idx = row * params.n_cols + col
        if idx in owner:
            raise GridError(
                f"cell ({row}, {col}) assigned twice ({owner[idx]!r} and {mid!r})")
        owner[idx] = mid
        mask[row, col] = True

    grid = Grid(params.n_cols, params.n_rows, float(params.cell_size),
                (float(params.origin_x), float(params.origin_y)), mask)

    cells_by: dict[str, list[int]] = {mid: [] for mid in table}
    for idx, mid in owner.items():
        cells_by[mid].append(idx)

    municipalities = []
    for mid, (name, population) in table.items():
        cells = sorted(cells_by[mid])
        if not cells:
            raise GridError(f"municipality {mid!r} owns zero cells")
        w = None if density is None else [density.get(c, 0.0) for c in cells]
        municipalities.append(Municipality(
            str(mid), str(name), int(population), centroid_of(grid, cells, w), tuple(cells)))
    return grid, municipalities


def membership_array(grid: Grid, municipalities: Sequence[Municipality]) -> np.ndarray:
    """Per-cell municipality position (-1 off land), flat over all cells."""
    out = np.full(grid.n_cells, -1, dtype=int)
    for k, m in enumerate(municipalities):
        out[list(m.member_cells)] = k
    return out


def rasterize_rectangles(rects: Mapping[str, tuple[int, int, int, int]]):
    """Membership rows for axis-aligned rectangles ``id -> (row0, col0, row1, col1)``.

    Bounds are half-open. Intended for synthetic countries only; overlaps
    surface as duplicate-assignment errors in :func:`build_grid`.
    """
    rows = []
    for mid, (r0, c0, r1, c1) in rects.items():
        for r in range(r0, r1):
            for c in range(c0, c1):
                rows.append((r, c, mid))
    return rows


def read_cells_csv(path) -> list[tuple[int, int, str]]:
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["row", "col", "municipality_id"]:
            raise GridError(f"{path}: expected header row,col,municipality_id")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                out.append((int(rec[0]), int(rec[1]), rec[2]))
            except (ValueError, IndexError):
                raise GridError(f"{path}:{lineno}: malformed cell record {rec!r}") from None
    return out


def read_municipalities_csv(path) -> dict[str, tuple[str, int]]:
    path = Path(path)
    table = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["municipality_id", "name", "population"]:
            raise GridError(f"{path}: expected header municipality_id,name,population")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                pop = int(rec[2])
            except (ValueError, IndexError):
                raise GridError(f"{path}:{lineno}: malformed population {rec!r}") from None
            if pop < 1:
                raise GridError(f"{path}:{lineno}: population must be >= 1")
            if rec[0] in table:
                raise GridError(f"{path}:{lineno}: duplicate municipality {rec[0]!r}")
            table[rec[0]] = (rec[1], pop)
    return table


def write_cells_csv(path, grid: Grid, municipalities: Sequence[Municipality]):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "municipality_id"])
        owner = membership_array(grid, municipalities)
        for idx in grid.land_cells:
            r, c = divmod(int(idx), grid.n_cols)
            w.writerow([r, c, municipalities[owner[idx]].id])


def write_municipalities_csv(path, municipalities: Sequence[Municipality]):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["municipality_id", "name", "population"])
        for m in municipalities:
            w.writerow([m.id, m.name, m.population])
