"""Direct block sequential simulation of cell-level incidence rates.

Municipality rates are block data (area averages with a Poisson error
variance) plus point data placed at the cell containing each municipality
centroid. Every other land cell is visited along a random path; at each
cell a simple-kriging system over nearby informed cells and blocks gives a
local mean and variance, and a value is drawn from the global data
distribution re-centred on them.

The simulation engine is batched over days: one realization fixes the
path and the per-cell Gaussian draws, and every day in the batch is
simulated along that path with its own data, global distribution and
kriging weights. Neighbourhoods depend only on geometry and the path, so
they are built once per cell.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import date as Date
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import ndtr, ndtri

from .covariance import BlockSupport, VariogramModel, _structure, block_to_points, cov_matrix
from .geo_grid import Grid, Municipality, membership_array

log = logging.getLogger(__name__)

RATE_SCALE = 1e5  # rates are cases per 100,000 inhabitants


@dataclass(frozen=True)
class SimulationConfig:
    n_realizations: int = 100
    seed: int = 0
    max_point_neighbors: int = 12
    max_block_neighbors: int = 4
    search_radius: float | None = None  # defaults to the variogram range
    # rescale the model each day so that its point sill ("data") or its implied
    # variance of block averages ("dispersion") equals the day's declustered
    # data variance
    rescale_sill: bool = True
    sill_mode: str = "data"
    rate_scale: float = RATE_SCALE

    def __post_init__(self):
        if self.n_realizations < 1:
            raise ValueError("n_realizations must be >= 1")
        if self.max_point_neighbors < 1 or self.max_block_neighbors < 1:
            raise ValueError("neighbour caps must be >= 1")
        if self.sill_mode not in ("data", "dispersion"):
            raise ValueError("sill_mode must be 'data' or 'dispersion'")


@dataclass(frozen=True)
class BlockDatum:
    municipality: Municipality
    rate: float

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError(f"negative rate for municipality {self.municipality.id}")

    @property
    def population(self) -> int:
        return self.municipality.population


@dataclass(frozen=True, eq=False)
class IncidenceField:
    """One day's incidence over the land cells of ``grid``."""
    grid: Grid
    date: Date | None
    values: np.ndarray

    def raster(self) -> np.ndarray:
        return self.grid.to_raster(self.values)


@dataclass(eq=False)
class RealizationSet:
    fields: list[IncidenceField]
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.fields:
            g, d = self.fields[0].grid, self.fields[0].date
            if any(f.grid is not g or f.date != d for f in self.fields):
                raise ValueError("realizations must share one grid and date")

    def values(self) -> np.ndarray:
        return np.stack([f.values for f in self.fields])


class KrigingEstimate(NamedTuple):
    mean: float
    variance: float
    flag: str = ""


def poisson_risk_variance(mean_rate: float, population: float, sigma_r2: float,
                          scale: float = 1.0) -> float:
    """Risk variance of a rate observed on ``population`` people.

    ``sigma_r2 + scale * mean_rate / population``; ``scale`` converts a
    rate expressed per ``scale`` inhabitants back to a proportion's units.
    """
    if population <= 0:
        raise ValueError("population must be >= 1")
    if mean_rate < 0:
        raise ValueError("mean rate must be >= 0")
    return sigma_r2 + scale * mean_rate / population


def random_path(seed: int, grid: Grid) -> np.ndarray:
    """Random visiting order of the land cells (flat indices)."""
    return np.random.default_rng(seed).permutation(grid.land_cells)


def realization_seed(seed: int, realization: int) -> int:
    return int(seed) ^ int(realization)


def weighted_mean_var(values, weights):
    """Weighted mean and (population) variance along the last axis."""
    v = np.asarray(values, float)
    w = np.broadcast_to(np.asarray(weights, float), v.shape)
    total = w.sum(-1)
    m = (v * w).sum(-1) / total
    var = (w * (v - np.expand_dims(m, -1)) ** 2).sum(-1) / total
    return m, var


def _spd_solve(a, b):
    """Solve stacked SPD systems by Cholesky, falling back to a ridge-stabilised solve."""
    try:
        low = np.linalg.cholesky(a)
        y = np.linalg.solve(low, b)
        return np.linalg.solve(np.swapaxes(low, -1, -2), y), ""
    except np.linalg.LinAlgError:
        pass
    scale = np.maximum(np.trace(a, axis1=-2, axis2=-1) / a.shape[-1], 1e-300)
    ridge = 1e-10 * scale[..., None, None] * np.eye(a.shape[-1])
    return np.linalg.solve(a + ridge, b), "ridge"


def solve_block_kriging(target, point_data, block_data: Sequence[BlockDatum],
                        model: VariogramModel, grid: Grid, global_mean: float | None = None,
                        mean_rate: float | None = None,
                        rate_scale: float = 1.0) -> KrigingEstimate:
    """Simple block kriging at point ``target`` from point and block data.

    Parameters
    ----------
    target : (x, y)
    point_data : sequence of ((x, y), value)
        Exact point observations.
    block_data : sequence of BlockDatum
        Municipality averages. Each block's variance on the diagonal is its
        Poisson risk variance: block-averaged covariance plus
        ``rate_scale * mean_rate / population``.
    global_mean : known mean for simple kriging; defaults to the
        population-weighted mean of the block rates (or the point mean).
    mean_rate : rate used in the Poisson error term; defaults to ``global_mean``.
    """
    pts = np.array([p for p, _ in point_data], dtype=float).reshape(-1, 2)
    pvals = np.array([v for _, v in point_data], dtype=float)
    bvals = np.array([b.rate for b in block_data], dtype=float)
    c0 = model.total_sill
    if global_mean is None:
        if len(block_data):
            global_mean = float(weighted_mean_var(bvals, [b.population for b in block_data])[0])
        elif len(point_data):
            global_mean = float(pvals.mean())
        else:
            global_mean = 0.0
    if mean_rate is None:
        mean_rate = global_mean
    if not len(point_data) and not len(block_data):
        return KrigingEstimate(global_mean, c0, "no_data")

    supports = [grid.centers(b.municipality.member_cells) for b in block_data]
    t = np.asarray(target, dtype=float).reshape(1, 2)
    n_p, n_b = len(pts), len(supports)
    a = np.empty((n_p + n_b, n_p + n_b))
    rhs = np.empty(n_p + n_b)
    a[:n_p, :n_p] = cov_matrix(model, pts, pts)
    rhs[:n_p] = cov_matrix(model, pts, t)[:, 0]
    for i, s in enumerate(supports):
        k = n_p + i
        a[k, :n_p] = a[:n_p, k] = cov_matrix(model, s, pts).mean(axis=0) if n_p else []
        for j in range(i, n_b):
            a[k, n_p + j] = a[n_p + j, k] = cov_matrix(model, s, supports[j]).mean()
        a[k, k] = poisson_risk_variance(mean_rate, block_data[i].population, a[k, k], rate_scale)
        rhs[k] = cov_matrix(model, s, t).mean()

    flag = ""
    try:
        lam = cho_solve(cho_factor(a, lower=True), rhs)
    except LinAlgError:
        ridge = 1e-10 * max(np.trace(a) / len(a), 1e-300)
        lam = np.linalg.solve(a + ridge * np.eye(len(a)), rhs)
        flag = "ridge"
    vals = np.concatenate([pvals, bvals])
    mean = global_mean + lam @ (vals - global_mean)
    var = float(np.clip(c0 - lam @ rhs, 0.0, None))
    return KrigingEstimate(float(mean), var, flag)


# --- local distribution ----------------------------------------------------

_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(20)
_GH_W = _GH_W / _GH_W.sum()
_Y_LO, _Y_HI, _Y_N = -6.0, 6.0, 2401
_Y_GRID = np.linspace(_Y_LO, _Y_HI, _Y_N)
_DY = (_Y_HI - _Y_LO) / (_Y_N - 1)
_Y_PDF = np.exp(-0.5 * _Y_GRID ** 2)
_Y_PDF /= _Y_PDF.sum()


def _interp_rows(x, xp, fp):
    """``np.interp`` applied row by row: ``x (D,)``, ``xp, fp (D, K)``, flat outside."""
    rows = np.arange(len(x))
    k = xp.shape[1]
    idx = np.clip((xp <= x[:, None]).sum(1), 1, k - 1)
    x0, x1 = xp[rows, idx - 1], xp[rows, idx]
    f0, f1 = fp[rows, idx - 1], fp[rows, idx]
    span = x1 - x0
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(span > 0, (x - x0) / span, 1.0)
    t = np.clip(t, 0.0, 1.0)
    return f0 + t * (f1 - f0)


class GlobalDistribution:
    """Per-day declustered distribution of block rates.

    ``weights`` decluster the block values (area, i.e. member-cell count,
    in :class:`BlockDSS`). The quantile function interpolates linearly
    between midpoint plotting positions of the sorted data, with tails
    extended by one inter-datum gap on each side (floored at 0). It is
    tabulated on a uniform grid of Gaussian scores and then shifted and
    scaled so its mean and variance equal the weighted data moments.
    """

    def __init__(self, rates, weights):
        rates = np.atleast_2d(np.asarray(rates, dtype=float))
        w = np.broadcast_to(np.asarray(weights, dtype=float), rates.shape)
        order = np.argsort(rates, axis=1, kind="stable")
        z = np.take_along_axis(rates, order, axis=1)
        ws = np.take_along_axis(w, order, axis=1)
        cw = np.cumsum(ws, axis=1)
        p = (cw - 0.5 * ws) / cw[:, -1:]
        self.mean, self.var = weighted_mean_var(rates, w)
        if z.shape[1] > 1:
            lo = np.maximum(0.0, 2 * z[:, :1] - z[:, 1:2])
            hi = 2 * z[:, -1:] - z[:, -2:-1]
        else:
            lo, hi = z[:, :1], z[:, -1:]
        self.z = np.concatenate([lo, z, hi], axis=1)
        self.p = np.concatenate([np.zeros_like(lo), p, np.ones_like(lo)], axis=1)
        py = ndtr(_Y_GRID)
        table = np.stack([np.interp(py, pk, zk) for pk, zk in zip(self.p, self.z)])
        tm = table @ _Y_PDF
        tv = ((table - tm[:, None]) ** 2) @ _Y_PDF
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(tv > 0, np.sqrt(self.var / tv), 0.0)
        self.table = np.maximum(self.mean[:, None] + (table - tm[:, None]) * ratio[:, None], 0.0)
        self.mean_table = None
        self.mean_y = None

    def cdf(self, z):
        """Cumulative probability of one value per day."""
        return _interp_rows(np.asarray(z, float), self.z, self.p)

    def quantile_y(self, y):
        """Quantile at Gaussian score ``y`` (shape ``(D,)`` or ``(D, m)``)."""
        y = np.asarray(y, float)
        pos = np.clip((y - _Y_LO) / _DY, 0.0, _Y_N - 1.000001)
        j = pos.astype(int)
        t = pos - j
        rows = np.arange(len(self.table)).reshape((-1,) + (1,) * (y.ndim - 1))
        q0 = self.table[rows, j]
        q1 = self.table[rows, j + 1]
        return q0 + t * (q1 - q0)

    def quantile(self, p):
        return self.quantile_y(ndtri(np.clip(p, 1e-12, 1 - 1e-12)))


_S_GRID = np.linspace(0.0, 1.0, 21)


def _local_mean_table(dist):
    """Mean of ``Q(Phi(y + s X))``, X standard normal, on the ``(s, y)`` grid per day."""
    y = _Y_GRID[::10]
    nodes = (y[None, :, None] + _S_GRID[:, None, None] * _GH_X[None, None, :])
    q = dist.quantile_y(np.broadcast_to(nodes.ravel(), (len(dist.table), nodes.size)))
    return (q.reshape((len(dist.table),) + nodes.shape) @ _GH_W), y


def _invert_rows(target, rows, y):
    """Per day, the ``y`` at which the non-decreasing row reaches ``target``."""
    k = rows.shape[1]
    idx = np.clip((rows < target[:, None]).sum(1), 1, k - 1)
    r = np.arange(len(target))
    m0, m1 = rows[r, idx - 1], rows[r, idx]
    span = m1 - m0
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(span > 0, (target - m0) / span, 0.5)
    return y[idx - 1] + np.clip(t, 0.0, 1.0) * (y[idx] - y[idx - 1])


def draw_local(dist: GlobalDistribution, local_mean, local_sd, normal):
    """Draw one value per day from the global distribution, re-centred locally.

    Values are ``Q(Phi(y0 + local_sd * normal))`` where ``Q`` is the day's
    global quantile function and ``local_sd`` the kriging standard deviation
    in units of the day's total standard deviation (so in ``[0, 1]``). The
    Gaussian centre ``y0`` is chosen so the mean of this local distribution
    equals ``local_mean``; local means outside the attainable range are
    pinned to the nearest end.
    """
    lm = np.asarray(local_mean, float)
    sy = np.clip(np.asarray(local_sd, float), 0.0, 1.0)
    if dist.mean_table is None:
        dist.mean_table, dist.mean_y = _local_mean_table(dist)
    pos = sy * (len(_S_GRID) - 1)
    i0 = np.minimum(pos.astype(int), len(_S_GRID) - 2)
    t = pos - i0
    days = np.arange(len(lm))
    y_lo = _invert_rows(lm, dist.mean_table[days, i0], dist.mean_y)
    y_hi = _invert_rows(lm, dist.mean_table[days, i0 + 1], dist.mean_y)
    y0 = y_lo + t * (y_hi - y_lo)
    return dist.quantile_y(y0 + sy * normal)


# --- simulation engine -----------------------------------------------------

class BlockDSS:
    """Block-DSS simulator bound to one grid, municipality set and variogram."""

    def __init__(self, grid: Grid, municipalities: Sequence[Municipality],
                 model: VariogramModel, config: SimulationConfig | None = None):
        self.grid = grid
        self.municipalities = list(municipalities)
        self.model = model
        self.config = config or SimulationConfig()
        self.radius = float(self.config.search_radius or model.range)
        self.populations = np.array([m.population for m in self.municipalities], float)
        self.areas = np.array([len(m.member_cells) for m in self.municipalities], float)

        self.land = grid.land_cells
        self.owner = membership_array(grid, self.municipalities)
        if np.any(self.owner[self.land] < 0):
            raise ValueError("every land cell must belong to a municipality")
        self.centers = grid.centers()
        self.c0 = model.total_sill

        self.data_cells = np.array([grid.cell_of(*m.centroid) for m in self.municipalities])
        for k, c in enumerate(self.data_cells):
            if self.owner[c] != k:
                # centroid outside its own cells: use the nearest member cell
                cells = np.array(self.municipalities[k].member_cells)
                d = np.hypot(*(self.centers[cells] - self.municipalities[k].centroid).T)
                self.data_cells[k] = cells[np.argmin(d)]

        supports = [self.centers[list(m.member_cells)] for m in self.municipalities]
        n_m = len(supports)
        self.cov_block_cell = np.stack([block_to_points(model, BlockSupport(s), self.centers)
                                        for s in supports])
        self.cov_block_block = np.empty((n_m, n_m))
        for i in range(n_m):
            for j in range(i, n_m):
                self.cov_block_block[i, j] = self.cov_block_block[j, i] = \
                    cov_matrix(model, supports[i], supports[j]).mean()

        a = self.areas / self.areas.sum()
        # expected area-weighted variance of block averages under the unit model
        self.block_dispersion = float(a @ np.diag(self.cov_block_block)
                                      - a @ self.cov_block_block @ a)
        if not self.block_dispersion > 0:
            self.block_dispersion = self.c0

        cent = np.array([m.centroid for m in self.municipalities], float)
        self._block_lists = {}
        dist_cb = np.hypot(self.centers[:, None, 0] - cent[None, :, 0],
                           self.centers[:, None, 1] - cent[None, :, 1])
        for c in self.land:
            own = self.owner[c]
            order = [b for b in np.argsort(dist_cb[c], kind="stable")
                     if b != own and dist_cb[c, b] <= self.radius]
            self._block_lists[int(c)] = np.array(
                [own] + order[: self.config.max_block_neighbors - 1], dtype=int)

        r_cells = int(np.ceil(self.radius / grid.cell_size))
        dr, dc = np.mgrid[-r_cells:r_cells + 1, -r_cells:r_cells + 1]
        dr, dc = dr.ravel(), dc.ravel()
        d = np.hypot(dr, dc) * grid.cell_size
        keep = (d <= self.radius) & (d > 0)
        order = np.lexsort((dc[keep], dr[keep], d[keep]))
        self._offsets = np.column_stack([dr[keep][order], dc[keep][order]])

    def _cov(self, h):
        m = self.model
        g = m.nugget + m.sill * _structure(m.structure, h / m.range)
        return m.total_sill - np.where(h > 0, g, 0.0)

    # per-day inputs ---------------------------------------------------------

    def _day_inputs(self, rates):
        rates = np.atleast_2d(np.asarray(rates, dtype=float))
        if rates.shape[1] != len(self.municipalities):
            raise ValueError("one rate per municipality per day required")
        if np.any(rates < 0):
            raise ValueError("rates must be non-negative")
        dist = GlobalDistribution(rates, self.areas)
        pop_mean = rates @ self.populations / self.populations.sum()
        if self.config.rescale_sill:
            factor = dist.var / (self.c0 if self.config.sill_mode == "data" else self.block_dispersion)
        else:
            factor = np.ones(len(rates))
        err = self.config.rate_scale * pop_mean[:, None] / self.populations[None, :]
        degenerate = dist.var <= 1e-12 * np.maximum(1.0, dist.mean ** 2)
        return rates, dist, pop_mean, factor, err, degenerate

    def _neighbours(self, cell, informed):
        r, c = divmod(int(cell), self.grid.n_cols)
        rr = r + self._offsets[:, 0]
        cc = c + self._offsets[:, 1]
        ok = (rr >= 0) & (rr < self.grid.n_rows) & (cc >= 0) & (cc < self.grid.n_cols)
        flat = rr[ok] * self.grid.n_cols + cc[ok]
        flat = flat[informed[flat]]
        return flat[: self.config.max_point_neighbors]

    def simulate(self, rates, realization: int = 0, seed: int | None = None) -> np.ndarray:
        """Simulate one realization for every day in ``rates`` (shape ``(days, n_m)``).

        Returns an array ``(days, n_land)`` over ``grid.land_cells``.
        """
        rates, dist, gm, factor, err, degenerate = self._day_inputs(rates)
        n_days = len(rates)
        seed = self.config.seed if seed is None else seed
        rseed = realization_seed(seed, realization)
        rng = np.random.default_rng(rseed)
        path = rng.permutation(self.land)
        normals = rng.standard_normal(len(path))

        values = np.zeros((n_days, self.grid.n_cells))
        informed = np.zeros(self.grid.n_cells, dtype=bool)
        values[:, self.data_cells] = rates
        informed[self.data_cells] = True
        live = ~degenerate
        total = np.where(live, factor * self.c0, 1.0)
        n_clamped = 0
        n_ridge = 0

        for step, cell in enumerate(path):
            if informed[cell]:
                continue
            pts = self._neighbours(cell, informed)
            blocks = self._block_lists[int(cell)]
            n_p = len(pts)
            k = n_p + len(blocks)
            a0 = np.empty((k, k))
            b0 = np.empty(k)
            if n_p:
                xy = self.centers[pts]
                diff = xy[:, None, :] - xy[None, :, :]
                a0[:n_p, :n_p] = self._cov(np.hypot(diff[..., 0], diff[..., 1]))
                dt = xy - self.centers[cell]
                b0[:n_p] = self._cov(np.hypot(dt[:, 0], dt[:, 1]))
                cbp = self.cov_block_cell[blocks][:, pts]
                a0[n_p:, :n_p] = cbp
                a0[:n_p, n_p:] = cbp.T
            a0[n_p:, n_p:] = self.cov_block_block[blocks][:, blocks]
            b0[n_p:] = self.cov_block_cell[blocks, cell]

            a = factor[:, None, None] * a0[None]
            di = np.arange(n_p, k)
            a[:, di, di] += err[:, blocks]
            a[degenerate] = np.eye(k)
            rhs = factor[:, None] * b0[None]
            lam, flag = _spd_solve(a, rhs[..., None])
            lam = lam[..., 0]
            n_ridge += flag == "ridge"
            data = np.concatenate([values[:, pts], rates[:, blocks]], axis=1)
            mean = gm + np.einsum("dk,dk->d", lam, data - gm[:, None])
            var = np.clip(total - np.einsum("dk,dk->d", lam, rhs), 0.0, None)
            z = draw_local(dist, mean, np.sqrt(var / total), normals[step])
            neg = z < 0
            n_clamped += int(neg[live].sum())
            z = np.where(neg, 0.0, z)
            values[:, cell] = np.where(live, z, gm)
            informed[cell] = True

        if n_clamped:
            log.debug("realization %d: %d negative draws clamped to 0", realization, n_clamped)
        if n_ridge:
            log.debug("realization %d: %d ridge-stabilised solves", realization, n_ridge)
        values[degenerate] = gm[degenerate, None]
        return values[:, self.land]

    def realizations(self, rates, n_realizations: int | None = None, seed: int | None = None,
                     n_jobs: int = 1) -> np.ndarray:
        """All realizations, shape ``(n_realizations, days, n_land)``."""
        n = n_realizations or self.config.n_realizations
        if n_jobs > 1:
            with ProcessPoolExecutor(n_jobs) as ex:
                out = list(ex.map(self.simulate, [rates] * n, range(n), [seed] * n))
        else:
            out = [self.simulate(rates, r, seed) for r in range(n)]
        return np.stack(out)


def simulate_realization(day_data: Sequence[BlockDatum], model: VariogramModel,
                         config: SimulationConfig, seed: int, grid: Grid,
                         day: Date | None = None) -> IncidenceField:
    """Simulate one realization of one day's incidence field.

    ``day_data`` must hold one datum per municipality; ``seed`` is the
    realization's own seed.
    """
    municipalities = [d.municipality for d in day_data]
    engine = BlockDSS(grid, municipalities, model, config)
    values = engine.simulate([[d.rate for d in day_data]], realization=0, seed=seed)[0]
    return IncidenceField(grid, day, values)


def simulate_day(day_data: Sequence[BlockDatum], model: VariogramModel,
                 config: SimulationConfig, grid: Grid, day: Date | None = None) -> RealizationSet:
    engine = BlockDSS(grid, [d.municipality for d in day_data], model, config)
    vals = engine.realizations([[d.rate for d in day_data]])[:, 0]
    seeds = [realization_seed(config.seed, r) for r in range(len(vals))]
    return RealizationSet([IncidenceField(grid, day, v) for v in vals], seeds)


def _lerp_quantile(sorted_vals, q):
    n = sorted_vals.shape[0]
    pos = (n - 1) * q
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return sorted_vals[lo] + frac * (sorted_vals[hi] - sorted_vals[lo])


def summarize(realizations, ci_level: float = 0.90):
    """Per-cell median and central ``ci_level`` interval over realizations.

    ``realizations`` is a :class:`RealizationSet` or an array whose first
    axis indexes realizations. Quantiles interpolate linearly between order
    statistics at position ``(n - 1) q``.

    Returns
    -------
    median, lower, upper : ndarray
    """
    if isinstance(realizations, RealizationSet):
        realizations = realizations.values()
    vals = np.sort(np.asarray(realizations, dtype=float), axis=0)
    if vals.shape[0] < 1:
        raise ValueError("need at least one realization")
    alpha = (1.0 - ci_level) / 2.0
    median = _lerp_quantile(vals, 0.5)
    lower = _lerp_quantile(vals, alpha)
    upper = _lerp_quantile(vals, 1.0 - alpha)
    return median, np.minimum(lower, median), np.maximum(upper, median)
