"""Isotropic variogram models, population-weighted experimental variograms,
and point/block covariance assembly for kriging."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares, nnls
from scipy.spatial.distance import cdist

STRUCTURES = ("spherical", "exponential", "gaussian")
SILL_FLOOR = 1e-12


@dataclass(frozen=True)
class VariogramModel:
    """Nugget plus one isotropic structure.

    ``range`` is the practical range: the spherical model reaches its sill
    exactly there, the exponential and gaussian models reach 95% of it.
    """
    structure: str = "spherical"
    nugget: float = 0.0
    sill: float = 1.0
    range: float = 1.0
    fit_rss: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown structure {self.structure!r}; use one of {STRUCTURES}")
        if self.nugget < 0:
            raise ValueError("nugget must be >= 0")
        if not self.sill > 0:
            raise ValueError("sill must be > 0")
        if not self.range > 0:
            raise ValueError("range must be > 0")

    @property
    def total_sill(self) -> float:
        return self.nugget + self.sill

    def scaled(self, factor: float) -> "VariogramModel":
        """Same structure and range with nugget and sill multiplied by ``factor``."""
        return replace(self, nugget=self.nugget * factor, sill=self.sill * factor, fit_rss=None)


def _structure(structure, r):
    """Unit-sill structure value at ``r = h / range``."""
    if structure == "spherical":
        r = np.minimum(r, 1.0)
        return 1.5 * r - 0.5 * r ** 3
    if structure == "exponential":
        return 1.0 - np.exp(-3.0 * r)
    return 1.0 - np.exp(-3.0 * r ** 2)


def gamma(model: VariogramModel, h):
    """Semivariance at lag distance ``h`` (scalar or array)."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("lag distance must be non-negative")
    g = model.nugget + model.sill * _structure(model.structure, h / model.range)
    g = np.where(h > 0, g, 0.0)
    return float(g) if g.ndim == 0 else g


def covariance(model: VariogramModel, h):
    """``C(h) = nugget + sill - gamma(h)``, with ``C(0) = nugget + sill``."""
    return model.total_sill - gamma(model, h)


def cov_point(model: VariogramModel, p1, p2) -> float:
    d = float(np.hypot(*(np.asarray(p1, float) - np.asarray(p2, float))))
    return float(covariance(model, d))


def cov_matrix(model: VariogramModel, a, b):
    """Point-to-point covariances between coordinate arrays ``a (n,2)`` and ``b (m,2)``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return covariance(model, cdist(a, b))


@dataclass(frozen=True, eq=False)
class BlockSupport:
    """Area support discretized by its member cell centers."""
    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.size == 0:
            raise ValueError("block support needs at least one point")
        object.__setattr__(self, "points", pts)


def _support_points(s):
    return s.points if isinstance(s, BlockSupport) else np.atleast_2d(np.asarray(s, dtype=float))


def cov_block(model: VariogramModel, a, b) -> float:
    """Average point covariance over all pairs drawn from supports ``a`` and ``b``.

    Either argument may be a :class:`BlockSupport` or a single point.
    """
    return float(cov_matrix(model, _support_points(a), _support_points(b)).mean())


def block_to_points(model: VariogramModel, block: BlockSupport, points) -> np.ndarray:
    """Block-averaged covariance between one block and each of ``points``."""
    return cov_matrix(model, block.points, points).mean(axis=0)


@dataclass
class VariogramTable:
    lag: np.ndarray        # mean pair distance per bin (bin center when empty)
    gamma: np.ndarray      # NaN where the bin is empty
    n_pairs: np.ndarray
    weight: np.ndarray     # summed pair weights
    lag_width: float

    @property
    def empty(self) -> np.ndarray:
        return self.n_pairs == 0

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("lag,gamma,n_pairs,weight\n")
            for l, g, n, w in zip(self.lag, self.gamma, self.n_pairs, self.weight):
                g_txt = "nan" if np.isnan(g) else "%.6g" % g
                fh.write(f"{l:.6g},{g_txt},{int(n)},{w:.6g}\n")


def experimental_variogram(locations, values, populations, lag_width: float,
                           n_lags: int) -> VariogramTable:
    """Population-weighted experimental semivariogram.

    Each pair contributes ``w_ij (z_i - z_j)^2 / 2`` with pair weight
    ``w_ij = n_i n_j / (n_i + n_j)``, so pairs of large-population units
    dominate. ``values`` may be 2-D ``(n_sets, n)``, in which case the sets
    (e.g. days) share locations and are pooled bin by bin.
    """
    xy = np.atleast_2d(np.asarray(locations, dtype=float))
    z = np.atleast_2d(np.asarray(values, dtype=float))
    n = np.asarray(populations, dtype=float)
    if xy.shape[0] < 2:
        raise ValueError("need at least two samples")
    if not lag_width > 0:
        raise ValueError("lag_width must be positive")
    if z.shape[1] != xy.shape[0] or n.shape != (xy.shape[0],):
        raise ValueError("locations, values and populations disagree in length")

    i, j = np.triu_indices(xy.shape[0], k=1)
    d = np.hypot(*(xy[i] - xy[j]).T)
    w = n[i] * n[j] / (n[i] + n[j])
    sq = 0.5 * ((z[:, i] - z[:, j]) ** 2).sum(axis=0)
    bins = np.floor(d / lag_width).astype(int)
    keep = bins < n_lags
    bins, d, w, sq = bins[keep], d[keep], w[keep], sq[keep]

    n_pairs = np.bincount(bins, minlength=n_lags)
    wsum = np.bincount(bins, weights=w, minlength=n_lags)
    num = np.bincount(bins, weights=w * sq, minlength=n_lags)
    dsum = np.bincount(bins, weights=d, minlength=n_lags)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(wsum > 0, num / (wsum * z.shape[0]), np.nan)
        lag = np.where(n_pairs > 0, dsum / np.maximum(n_pairs, 1),
                       (np.arange(n_lags) + 0.5) * lag_width)
    return VariogramTable(lag, g, n_pairs, wsum, float(lag_width))


def _fit_linear(structure, rng, lag, g, sw):
    """Best (nugget, sill) for a fixed range by non-negative least squares."""
    basis = np.column_stack([np.ones_like(lag), _structure(structure, lag / rng)])
    coef, rnorm = nnls(basis * sw[:, None], g * sw)
    return coef, rnorm ** 2


def fit_variogram(table: VariogramTable, structure: str = "spherical") -> VariogramModel:
    """Weighted least-squares fit of a nugget + ``structure`` model.

    Bins are weighted by pair count. The range is profiled on a coarse grid
    (nugget and sill are linear given the range), then all three parameters
    are refined jointly. The residual sum of squares is stored in
    ``fit_rss``.
    """
    ok = ~table.empty & np.isfinite(table.gamma)
    if ok.sum() < 3:
        raise ValueError("need at least 3 non-empty lag bins to fit a variogram")
    lag, g = table.lag[ok], table.gamma[ok]
    sw = np.sqrt(table.n_pairs[ok].astype(float))
    max_lag = float(lag.max())

    if np.all(g <= SILL_FLOOR):
        warnings.warn("flat experimental variogram; sill set to floor", RuntimeWarning)
        return VariogramModel(structure, 0.0, SILL_FLOOR, max_lag, fit_rss=0.0)

    candidates = np.geomspace(table.lag_width * 0.25, 4.0 * max_lag, 80)
    best = min(((r,) + tuple(_fit_linear(structure, r, lag, g, sw)) for r in candidates),
               key=lambda t: t[2])
    r0, (nug0, sill0), _ = best

    def resid(theta):
        nug, sill, rng = theta
        return sw * (nug + sill * _structure(structure, lag / rng) - g)

    x0 = [nug0, max(sill0, SILL_FLOOR), r0]
    sol = least_squares(resid, x0, bounds=([0.0, SILL_FLOOR, 1e-6 * max_lag],
                                           [np.inf, np.inf, 100.0 * max_lag]),
                        xtol=1e-15, ftol=1e-15, gtol=1e-15)
    nug, sill, rng = sol.x
    rss = float(np.sum(resid(sol.x) ** 2))
    return VariogramModel(structure, float(nug), float(max(sill, SILL_FLOOR)), float(rng),
                          fit_rss=rss)
