"""ESRI ASCII grid (``.asc``) reading and writing.

Arrays handled here are ``(n_rows, n_cols)`` with row 0 the southernmost
row, matching :class:`~geoincidence.geo_grid.Grid`. The file stores the
northernmost row first, so rows are flipped on the way in and out.
Values are written with 6 significant digits; NaN maps to NODATA.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

NODATA = -9999.0
FMT = "%.6g"

_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value")


def format_value(v: float) -> str:
    return FMT % v


def write_asc(path, values, origin=(0.0, 0.0), cell_size=1.0):
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("a 2-D array is required to write an ASCII grid")
    nrows, ncols = values.shape
    lines = [
        f"ncols {ncols}",
        f"nrows {nrows}",
        f"xllcorner {FMT % origin[0]}",
        f"yllcorner {FMT % origin[1]}",
        f"cellsize {FMT % cell_size}",
        "NODATA_value -9999",
    ]
    out = np.where(np.isnan(values), NODATA, values)[::-1]
    for row in out:
        lines.append(" ".join(FMT % v for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_asc(path):
    """Read an ASCII grid.

    Returns
    -------
    values : ndarray, shape (nrows, ncols)
        South row first; NODATA cells become NaN.
    header : dict
        ``ncols``, ``nrows``, ``xllcorner``, ``yllcorner``, ``cellsize``,
        ``NODATA_value``.
    """
    text = Path(path).read_text().split("\n")
    header = {}
    i = 0
    while i < len(text) and len(header) < 6:
        parts = text[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0]
        match = [k for k in _KEYS if k.lower() == key.lower()]
        if not match:
            break
        header[match[0]] = float(parts[1])
        i += 1
    missing = [k for k in _KEYS if k not in header]
    if missing:
        raise ValueError(f"{path}: header missing {missing}")
    nrows, ncols = int(header["nrows"]), int(header["ncols"])
    header["nrows"], header["ncols"] = nrows, ncols
    data = np.array(" ".join(text[i:]).split(), dtype=float)
    if data.size != nrows * ncols:
        raise ValueError(f"{path}: expected {nrows * ncols} values, found {data.size}")
    data = data.reshape(nrows, ncols)[::-1].copy()
    data[data == header["NODATA_value"]] = np.nan
    return data, header


def write_field(path, grid, land_values):
    """Write per-land-cell values of ``grid`` as an ASCII grid."""
    write_asc(path, grid.to_raster(land_values), grid.origin, grid.cell_size)
