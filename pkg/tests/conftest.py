import numpy as np
import pytest
from hypothesis import settings

from geoincidence.geo_grid import GridParams, build_grid, rasterize_rectangles

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def rect_country(n_cols, n_rows, rects, populations, cell_size=2.0):
    """Grid plus municipalities from ``id -> (row0, col0, row1, col1)`` rectangles."""
    table = {mid: (f"Town {mid}", pop) for mid, pop in zip(rects, populations)}
    return build_grid(GridParams(n_cols, n_rows, cell_size), rasterize_rectangles(rects), table)


@pytest.fixture
def two_towns():
    """6x6 grid: the first 20 cells (row-major) form town S, the other 16 town N."""
    membership = [(k // 6, k % 6, "S" if k < 20 else "N") for k in range(36)]
    table = {"S": ("South", 5000), "N": ("North", 2000)}
    return build_grid(GridParams(6, 6, 2.0), membership, table)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record ``criterion -> pass/fail`` for the closing acceptance report."""
    def record(number, title, ok, detail=""):
        ACCEPTANCE_LINES.append(f"criterion {number:>3}  {'PASS' if ok else 'FAIL'}  "
                                f"{title}" + (f"  ({detail})" if detail else ""))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (int(s.split()[1].rstrip("abc")),
                                                             s.split()[1])):
            terminalreporter.write_line(line)
