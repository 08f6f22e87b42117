"""Forecast error metrics and a rolling-origin backtesting harness.

The harness walks the forecast origin ``t`` forward one day at a time.
At each origin the forecaster sees the history through day ``t`` only, via
a :class:`HistoryView` that raises :class:`LeakageError` on any attempt to
read a later day, and predicts the field at ``t + T``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

FMT = "%.6g"


class LeakageError(RuntimeError):
    """A forecaster asked for data beyond its forecast origin."""


class GridMismatchError(ValueError):
    """Truth and prediction are not defined on the same cells."""


def _pair(truth, pred):
    z = np.asarray(getattr(truth, "values", truth), dtype=float).ravel()
    zh = np.asarray(getattr(pred, "values", pred), dtype=float).ravel()
    g1, g2 = getattr(truth, "grid", None), getattr(pred, "grid", None)
    if g1 is not None and g2 is not None and not g1.same_as(g2):
        raise GridMismatchError("fields live on different grids")
    if z.shape != zh.shape:
        raise GridMismatchError(f"field sizes differ: {z.size} vs {zh.size}")
    land = ~(np.isnan(z) | np.isnan(zh))
    return z[land], zh[land]


def rmse(truth, pred) -> float:
    """Root mean squared error over land cells (NaN cells are excluded)."""
    z, zh = _pair(truth, pred)
    return float(np.sqrt(np.mean((z - zh) ** 2)))


def smape(truth, pred) -> float:
    """Mean of ``2 |z - zh| / (z + zh)`` over land cells; cells where both are 0 contribute 0."""
    z, zh = _pair(truth, pred)
    den = z + zh
    both_zero = den == 0
    terms = np.where(both_zero, 0.0, 2.0 * np.abs(z - zh) / np.where(both_zero, 1.0, den))
    return float(np.mean(terms))


class HistoryView:
    """Read-only access to daily series up to and including day ``t``.

    ``series`` maps a name (e.g. ``"fields"``, ``"cases"``) to an array whose
    first axis is the day.
    """

    def __init__(self, series: Mapping[str, np.ndarray], t: int, dates: Sequence = ()):
        self._series = series
        self.t = int(t)
        self._dates = list(dates)

    def __contains__(self, name):
        return name in self._series

    def get(self, name: str, until: int | None = None) -> np.ndarray:
        """Days ``0 .. until`` (default ``t``) of series ``name`` as a copy."""
        until = self.t if until is None else int(until)
        if until > self.t:
            raise LeakageError(f"requested {name} through day {until}, origin is day {self.t}")
        return np.array(self._series[name][:until + 1])

    def day(self, name: str, i: int) -> np.ndarray:
        if i > self.t:
            raise LeakageError(f"requested {name} on day {i}, origin is day {self.t}")
        if i < 0:
            raise IndexError("negative day index")
        return np.array(self._series[name][i])

    @property
    def dates(self):
        return self._dates[:self.t + 1]


class Forecaster(Protocol):
    name: str

    def fit(self, history: HistoryView, horizon: int) -> None: ...

    def predict(self, history: HistoryView, horizon: int): ...

    def update(self, history: HistoryView, horizon: int) -> None: ...


@dataclass(frozen=True)
class DailyScore:
    date: object
    rmse: float
    smape: float


@dataclass
class EvalResult:
    model: str
    horizon: int
    scores: list[DailyScore]
    predictions: np.ndarray      # (n_test, n_cells)
    target_index: np.ndarray     # day index of each prediction

    def summary(self) -> dict:
        return summarize_scores(self.scores)


def summarize_scores(scores: Sequence[DailyScore]) -> dict:
    """Mean and population standard deviation of the daily scores."""
    r = np.array([s.rmse for s in scores])
    m = np.array([s.smape for s in scores])
    return {"rmse_mean": float(r.mean()), "rmse_std": float(r.std()),
            "smape_mean": float(m.mean()), "smape_std": float(m.std())}


def forecast_origins(n_days: int, warmup: int, horizon: int) -> range:
    """Origins ``t`` whose target ``t + horizon`` lies in the calendar, the first being day ``warmup - 1``."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not 1 <= warmup < n_days:
        raise ValueError("warmup must lie inside the data range")
    return range(warmup - 1, n_days - horizon)


def rolling_origin(forecaster, series: Mapping[str, np.ndarray], gold, horizon: int,
                   warmup: int, dates: Sequence = ()) -> EvalResult:
    """Backtest ``forecaster`` against ``gold`` fields.

    Parameters
    ----------
    forecaster
        Object with ``name`` and ``fit``/``predict``/``update`` methods (see
        :class:`Forecaster`). ``predict`` returns the field at ``t + T`` or
        ``None`` to defer; deferred predictions are collected at the end from
        ``forecaster.resolve()``, a mapping origin -> field.
    series : mapping of name -> daily array
        Everything the forecaster may read, guarded by :class:`HistoryView`.
    gold : array, shape (n_days, n_cells)
        Reference fields the predictions are scored against.
    horizon : int
    warmup : int
        Number of initial days available before the first origin.
    """
    gold = np.asarray(gold, dtype=float)
    origins = forecast_origins(len(gold), warmup, horizon)
    dates = list(dates) if len(dates) else list(range(len(gold)))
    forecaster.fit(HistoryView(series, origins[0], dates), horizon)
    preds: dict[int, np.ndarray] = {}
    deferred = []
    for t in origins:
        view = HistoryView(series, t, dates)
        out = forecaster.predict(view, horizon)
        if out is None:
            deferred.append(t)
        else:
            preds[t] = np.asarray(out, dtype=float).ravel()
        forecaster.update(view, horizon)
    if deferred:
        resolved = forecaster.resolve()
        for t in deferred:
            preds[t] = np.asarray(resolved[t], dtype=float).ravel()
    scores = []
    for t in origins:
        target = t + horizon
        scores.append(DailyScore(dates[target], rmse(gold[target], preds[t]),
                                 smape(gold[target], preds[t])))
    return EvalResult(forecaster.name, horizon, scores,
                      np.stack([preds[t] for t in origins]),
                      np.array([t + horizon for t in origins]))


class Persistence:
    """``zh(t + T) = z(t)``; reference forecaster."""
    name = "persistence"

    def __init__(self, key: str = "fields"):
        self.key = key

    def fit(self, history, horizon):
        pass

    def predict(self, history, horizon):
        return history.day(self.key, history.t)

    def update(self, history, horizon):
        pass


def write_scores_csv(path, results: Sequence[EvalResult]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "model", "horizon", "rmse", "smape"])
        for res in results:
            for s in res.scores:
                w.writerow([s.date, res.model, res.horizon, FMT % s.rmse, FMT % s.smape])


def write_summary_csv(path, results: Sequence[EvalResult]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "horizon", "rmse_mean", "rmse_std", "smape_mean", "smape_std"])
        for res in results:
            s = res.summary()
            w.writerow([res.model, res.horizon] + [FMT % s[k] for k in
                                                   ("rmse_mean", "rmse_std", "smape_mean",
                                                    "smape_std")])


def read_scores_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
