import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from geoincidence.geo_grid import Grid
from geoincidence.raster import format_value, read_asc, write_asc, write_field


def test_header_and_row_order(tmp_path):
    vals = np.array([[1.0, 2.0], [3.0, np.nan]])     # row 0 is the south row
    write_asc(tmp_path / "a.asc", vals, origin=(10.0, 20.0), cell_size=2.0)
    lines = (tmp_path / "a.asc").read_text().splitlines()
    assert lines[:6] == ["ncols 2", "nrows 2", "xllcorner 10", "yllcorner 20", "cellsize 2",
                         "NODATA_value -9999"]
    assert lines[6] == "3 -9999"
    assert lines[7] == "1 2"


def test_read_back_with_header(tmp_path):
    vals = np.arange(6.0).reshape(2, 3)
    write_asc(tmp_path / "b.asc", vals, (0.0, 0.0), 1.0)
    back, header = read_asc(tmp_path / "b.asc")
    np.testing.assert_array_equal(back, vals)
    assert header["ncols"] == 3 and header["nrows"] == 2 and header["NODATA_value"] == -9999


@given(arrays(float, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(0, 1e7, allow_nan=False)))
def test_round_trip_at_stated_precision(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("asc") / "r.asc"
    write_asc(path, values)
    back, _ = read_asc(path)
    expected = np.array([[float(format_value(v)) for v in row] for row in values])
    np.testing.assert_array_equal(back, expected)
    # a second pass is bit-exact
    write_asc(path, back)
    again, _ = read_asc(path)
    np.testing.assert_array_equal(again, back)


def test_field_writes_nodata_off_land(tmp_path):
    mask = np.array([[True, False], [True, True]])
    grid = Grid(2, 2, 1.0, (0.0, 0.0), mask)
    write_field(tmp_path / "f.asc", grid, [1.5, 2.5, 3.5])
    back, _ = read_asc(tmp_path / "f.asc")
    assert np.isnan(back[0, 1])
    np.testing.assert_array_equal(grid.from_raster(back), [1.5, 2.5, 3.5])


def test_malformed_files_rejected(tmp_path):
    p = tmp_path / "bad.asc"
    p.write_text("ncols 2\nnrows 2\n1 2 3 4\n")
    with pytest.raises(ValueError, match="header"):
        read_asc(p)
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2 3\n")
    with pytest.raises(ValueError, match="expected 4"):
        read_asc(p)
    with pytest.raises(ValueError):
        write_asc(p, np.zeros(3))
