"""Cell-level ARMA(p, q) and panel VAR(p) forecasters.

ARMA models are estimated by two-stage regression (Hannan-Rissanen): a
long autoregression supplies residual proxies, then the series is
regressed on an intercept, its own ``p`` lags and ``q`` lagged proxies.
VAR models are fitted by (optionally ridge-regularised) least squares
jointly over all equations.

Forecasts iterate one-step predictions with future innovations set to 0
and are clamped at 0 only when emitted.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class InsufficientDataError(ValueError):
    """Series too short for the requested model order."""


@dataclass(frozen=True)
class ArmaModel:
    p: int
    q: int
    intercept: float
    ar: np.ndarray                    # phi(1..p)
    ma: np.ndarray                    # theta(1..q)
    history: np.ndarray = field(repr=False)    # last p observations, oldest first
    residuals: np.ndarray = field(repr=False)  # in-sample residuals, aligned to the end of the series
    flag: str = ""

    def __post_init__(self):
        if len(self.ar) != self.p or len(self.ma) != self.q:
            raise ValueError("coefficient lengths do not match (p, q)")


def _min_length(p, q):
    return 3 * (p + q) + 10


def _lag_matrix(z, lags, start):
    """Columns ``z[t-1], ..., z[t-lags]`` for ``t = start .. len(z)-1``."""
    n = len(z)
    return np.column_stack([z[start - i:n - i] for i in range(1, lags + 1)]) if lags else \
        np.empty((n - start, 0))


def _long_ar_order(n, p, q):
    return int(min(max(p + q + 1, 2 * (p + q), 10), max(p + q + 1, n // 4)))


def _stage_one_residuals(z, p, q):
    """Residual proxies from a long autoregression (zeros where undefined)."""
    n = len(z)
    m = _long_ar_order(n, p, q)
    x = np.column_stack([np.ones(n - m), _lag_matrix(z, m, m)])
    coef = np.linalg.lstsq(x, z[m:], rcond=None)[0]
    eps = np.zeros(n)
    eps[m:] = z[m:] - x @ coef
    return eps, m


def fit_arma(series, p: int = 7, q: int = 1) -> ArmaModel:
    """Fit an ARMA(p, q) model with an intercept.

    Parameters
    ----------
    series : array_like
        Observations, oldest first. Length must be at least ``3 (p + q) + 10``.
    p : int
        Autoregressive order, ``>= 1``.
    q : int
        Moving-average order, ``>= 0``.

    Returns
    -------
    ArmaModel
        A constant series gives an intercept-only model flagged ``"constant"``.
    """
    z = np.asarray(series, dtype=float)
    if p < 1 or q < 0:
        raise ValueError("need p >= 1 and q >= 0")
    if len(z) < _min_length(p, q):
        raise InsufficientDataError(
            f"ARMA({p},{q}) needs at least {_min_length(p, q)} observations, got {len(z)}")
    if np.ptp(z) == 0:
        return ArmaModel(p, q, float(z[0]), np.zeros(p), np.zeros(q), z[-p:].copy(),
                         np.zeros(len(z)), "constant")

    if q == 0:
        eps, start = np.zeros(len(z)), p
    else:
        eps, m = _stage_one_residuals(z, p, q)
        start = max(p, m + q)
    x = np.column_stack([np.ones(len(z) - start), _lag_matrix(z, p, start),
                         _lag_matrix(eps, q, start)])
    coef = np.linalg.lstsq(x, z[start:], rcond=None)[0]
    resid = np.zeros(len(z))
    resid[start:] = z[start:] - x @ coef
    return ArmaModel(p, q, float(coef[0]), coef[1:p + 1].copy(), coef[p + 1:].copy(),
                     z[-p:].copy(), resid)


def _iterate_arma(intercept, ar, ma, history, last_resid, horizon):
    """Shared recursion; arrays carry a leading batch axis."""
    p, q = ar.shape[-1], ma.shape[-1]
    hist = list(np.moveaxis(history, -1, 0))      # oldest first
    eps = list(np.moveaxis(last_resid, -1, 0))    # oldest first, length q
    out = []
    for _ in range(horizon):
        pred = intercept.copy()
        for i in range(1, p + 1):
            pred = pred + ar[..., i - 1] * hist[-i]
        for j in range(1, q + 1):
            pred = pred + ma[..., j - 1] * eps[-j]
        out.append(pred)
        hist.append(pred)
        if q:
            eps.append(np.zeros_like(pred))
    return np.stack(out, axis=-1)


def forecast_arma(model: ArmaModel, horizon: int) -> np.ndarray:
    """Iterated forecasts ``horizon`` steps ahead, clamped at 0."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    last = model.residuals[-model.q:] if model.q else np.zeros(0)
    f = _iterate_arma(np.array(model.intercept), model.ar, model.ma, model.history, last, horizon)
    return np.maximum(f, 0.0)


@dataclass(frozen=True)
class ArmaPanel:
    """ARMA(p, q) coefficients for many cells fitted on a common calendar."""
    p: int
    q: int
    intercept: np.ndarray     # (C,)
    ar: np.ndarray            # (C, p)
    ma: np.ndarray            # (C, q)
    history: np.ndarray       # (C, p)
    last_residuals: np.ndarray  # (C, q)

    def cell(self, c: int) -> ArmaModel:
        return ArmaModel(self.p, self.q, float(self.intercept[c]), self.ar[c], self.ma[c],
                         self.history[c], self.last_residuals[c])


def _batched_lstsq(x, y):
    """Minimum-norm least squares for stacked systems ``x (C, n, k)``, ``y (C, n)``."""
    return np.einsum("ckn,cn->ck", np.linalg.pinv(x), y)


def fit_arma_panel(panel, p: int = 7, q: int = 1) -> ArmaPanel:
    """Fit one ARMA(p, q) per column of ``panel`` (shape ``(T, C)``).

    Same estimator as :func:`fit_arma`, vectorised over cells. Constant
    columns get intercept-only models.
    """
    z = np.asarray(panel, dtype=float).T   # (C, T)
    n_cells, n = z.shape
    if p < 1 or q < 0:
        raise ValueError("need p >= 1 and q >= 0")
    if n < _min_length(p, q):
        raise InsufficientDataError(
            f"ARMA({p},{q}) needs at least {_min_length(p, q)} observations, got {n}")

    def lags(a, k, start):
        return np.stack([a[:, start - i:n - i] for i in range(1, k + 1)], axis=-1) if k else \
            np.empty((a.shape[0], n - start, 0))

    eps = np.zeros_like(z)
    start = p
    if q:
        m = _long_ar_order(n, p, q)
        x1 = np.concatenate([np.ones((n_cells, n - m, 1)), lags(z, m, m)], axis=-1)
        c1 = _batched_lstsq(x1, z[:, m:])
        eps[:, m:] = z[:, m:] - np.einsum("cnk,ck->cn", x1, c1)
        start = max(p, m + q)
    x = np.concatenate([np.ones((n_cells, n - start, 1)), lags(z, p, start), lags(eps, q, start)],
                       axis=-1)
    coef = _batched_lstsq(x, z[:, start:])
    resid = z[:, start:] - np.einsum("cnk,ck->cn", x, coef)

    const = np.ptp(z, axis=1) == 0
    coef[const] = 0.0
    coef[const, 0] = z[const, 0]
    resid[const] = 0.0
    return ArmaPanel(p, q, coef[:, 0], coef[:, 1:p + 1], coef[:, p + 1:], z[:, -p:].copy(),
                     resid[:, resid.shape[1] - q:] if q else np.zeros((n_cells, 0)))


def forecast_arma_panel(model: ArmaPanel, horizon: int) -> np.ndarray:
    """Forecasts for every cell, shape ``(horizon, C)``, clamped at 0."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    f = _iterate_arma(model.intercept, model.ar, model.ma, model.history,
                      model.last_residuals, horizon)
    return np.maximum(f, 0.0).T


@dataclass(frozen=True)
class VarModel:
    p: int
    intercept: np.ndarray   # (N,)
    lags: np.ndarray        # (p, N, N); lags[i-1] is A(i)
    ridge: float = 0.0

    @property
    def n(self) -> int:
        return len(self.intercept)


def _var_design(z, p):
    t_obs = len(z)
    x = np.concatenate([np.ones((t_obs - p, 1))] + [z[p - i:t_obs - i] for i in range(1, p + 1)],
                       axis=1)
    return x, z[p:]


def fit_var(panel, p: int = 4, ridge: float = 0.0, max_cells: int | None = None) -> VarModel:
    """Least-squares VAR(p) with intercept over the columns of ``panel`` (``(T, N)``).

    Parameters
    ----------
    panel : array_like, shape (T_obs, N)
    p : int
        Lag order.
    ridge : float
        Ridge penalty on the lag coefficients (the intercept is not
        penalised). With ``ridge > 0`` and more regressors than samples the
        dual form ``X' (X X' + ridge I)^-1 Y`` is used.
    max_cells : int, optional
        Reject panels with more columns than this.

    Raises
    ------
    InsufficientDataError
        Too few observations for an unregularised fit.
    np.linalg.LinAlgError
        Rank-deficient design with ``ridge == 0``.
    """
    z = np.asarray(panel, dtype=float)
    if z.ndim != 2 or z.shape[1] < 1:
        raise ValueError("panel must be (T_obs, N) with N >= 1")
    t_obs, n = z.shape
    if p < 1:
        raise ValueError("p must be >= 1")
    if max_cells is not None and n > max_cells:
        raise ValueError(f"VAR over {n} cells exceeds the cap of {max_cells}")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    if ridge == 0 and t_obs < n * p + p + 5:
        raise InsufficientDataError(
            f"VAR({p}) on {n} cells needs {n * p + p + 5} observations without ridge; "
            f"got {t_obs}")
    if t_obs <= p:
        raise InsufficientDataError("panel shorter than the lag order")

    x, y = _var_design(z, p)
    if ridge == 0:
        if np.linalg.matrix_rank(x) < x.shape[1]:
            raise np.linalg.LinAlgError("rank-deficient VAR design; use ridge > 0")
        coef = np.linalg.lstsq(x, y, rcond=None)[0]
    else:
        # centre to leave the intercept unpenalised
        xm, ym = x[:, 1:].mean(0), y.mean(0)
        xc, yc = x[:, 1:] - xm, y - ym
        if xc.shape[1] > xc.shape[0]:
            gram = xc @ xc.T + ridge * np.eye(len(xc))
            b = xc.T @ np.linalg.solve(gram, yc)
        else:
            b = np.linalg.solve(xc.T @ xc + ridge * np.eye(xc.shape[1]), xc.T @ yc)
        coef = np.vstack([ym - xm @ b, b])
    lag_mats = np.stack([coef[1 + i * n:1 + (i + 1) * n].T for i in range(p)])
    return VarModel(p, coef[0].copy(), lag_mats, float(ridge))


def forecast_var(model: VarModel, recent, horizon: int) -> np.ndarray:
    """Iterated forecasts, shape ``(horizon, N)``, clamped at 0.

    ``recent`` holds at least ``p`` rows, oldest first.
    """
    recent = np.asarray(recent, dtype=float)
    if recent.ndim != 2 or recent.shape[0] < model.p or recent.shape[1] != model.n:
        raise ValueError(f"need at least {model.p} recent rows of {model.n} values")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    hist = list(recent[-model.p:])
    out = []
    for _ in range(horizon):
        nxt = model.intercept.copy()
        for i in range(1, model.p + 1):
            nxt = nxt + model.lags[i - 1] @ hist[-i]
        out.append(nxt)
        hist.append(nxt)
    return np.maximum(np.array(out), 0.0)


def write_arma_csv(path, models, ids=None):
    """Coefficient table, one row per cell: ``cell,intercept,ar_1..ar_p,ma_1..ma_q``."""
    if isinstance(models, ArmaPanel):
        models = [models.cell(c) for c in range(len(models.intercept))]
    ids = range(len(models)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        p, q = models[0].p, models[0].q
        w.writerow(["cell", "intercept"] + [f"ar_{i}" for i in range(1, p + 1)]
                   + [f"ma_{j}" for j in range(1, q + 1)])
        for cid, m in zip(ids, models):
            w.writerow([cid] + ["%.6g" % v for v in (m.intercept, *m.ar, *m.ma)])


def write_var_csv(path, model: VarModel):
    """Long-format table ``lag,row,col,value``; lag 0 rows hold the intercepts."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lag", "row", "col", "value"])
        for r, k in enumerate(model.intercept):
            w.writerow([0, r, "", "%.6g" % k])
        for i, a in enumerate(model.lags, start=1):
            for r, c in zip(*np.nonzero(a)):
                w.writerow([i, r, c, "%.6g" % a[r, c]])
