"""Adapters exposing the four models to :func:`~geoincidence.evaluation.rolling_origin`.

Each adapter reads only through the :class:`~geoincidence.evaluation.HistoryView`
it is handed. The series names used are ``"fields"`` (gold cell fields,
``(days, n_land)``), ``"cases"`` (daily new cases, ``(days, M)``) and
``"deaths"`` (national daily deaths, ``(days,)``).
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .baselines import fit_arma_panel, fit_var, forecast_arma_panel, forecast_var
from .block_dss import BlockDSS, summarize
from .geo_grid import Grid
from .sird import SirdConfig, forecast_municipalities
from .stconvs2s import (ModelConfig, band_slices, build_band_models, online_update,
                        predict_region_split, train)


class ArmaForecaster:
    """Per-cell ARMA(p, q) refitted on the full history at every origin."""
    name = "arma"

    def __init__(self, p: int = 7, q: int = 1):
        self.p, self.q = p, q

    def fit(self, history, horizon):
        pass

    def predict(self, history, horizon):
        model = fit_arma_panel(history.get("fields"), self.p, self.q)
        return forecast_arma_panel(model, horizon)[-1]

    def update(self, history, horizon):
        pass


class VarForecaster:
    """Panel VAR(p) over all land cells, refitted at every origin."""
    name = "var"

    def __init__(self, p: int = 4, ridge: float = 1e-3, max_cells: int = 2500):
        self.p, self.ridge, self.max_cells = p, ridge, max_cells

    def fit(self, history, horizon):
        pass

    def predict(self, history, horizon):
        z = history.get("fields")
        model = fit_var(z, self.p, self.ridge, self.max_cells)
        return forecast_var(model, z[-self.p:], horizon)[-1]

    def update(self, history, horizon):
        pass


class SirdDssForecaster:
    """Municipal SIRD forecasts mapped to cells by block DSS.

    Municipal rates are computed at every origin; the block DSS for all
    origins runs once at the end (:meth:`resolve`), batched over days, and
    each prediction is the per-cell median of the realizations.
    """
    name = "sird"

    def __init__(self, engine: BlockDSS, config: SirdConfig, pseudo_counts: dict | None = None,
                 n_realizations: int | None = None, seed: int | None = None):
        self.engine = engine
        self.config = config
        self.pseudo_counts = pseudo_counts or {}
        self.n_realizations = n_realizations
        self.seed = seed
        self.populations = engine.populations
        self._pending: dict[int, np.ndarray] = {}

    def fit(self, history, horizon):
        self._pending = {}

    def predict(self, history, horizon):
        cfg = self.config
        if horizon in self.pseudo_counts:
            cfg = replace(cfg, pseudo_count=float(self.pseudo_counts[horizon]))
        deaths = history.get("deaths") if "deaths" in history else None
        out = forecast_municipalities(history.get("cases"), self.populations, cfg, horizon, deaths)
        self._pending[history.t] = out.rates
        return None

    def update(self, history, horizon):
        pass

    def municipal_rates(self) -> dict[int, np.ndarray]:
        return dict(self._pending)

    def resolve(self) -> dict[int, np.ndarray]:
        origins = sorted(self._pending)
        rates = np.stack([self._pending[t] for t in origins])
        reals = self.engine.realizations(rates, self.n_realizations, self.seed)
        median = summarize(reals)[0]
        return {t: median[k] for k, t in enumerate(origins)}


class StconvForecaster:
    """Three band models trained on the warmup, then fine-tuned online."""
    name = "stconv"

    def __init__(self, grid: Grid, config: ModelConfig, epochs: int = 30,
                 online_epochs: int = 5, seed: int = 0):
        self.grid = grid
        self.config = config
        self.epochs = epochs
        self.online_epochs = online_epochs
        self.seed = seed
        self.trainers = None
        self.log = []

    def _rasters(self, fields):
        return np.nan_to_num(np.stack([self.grid.to_raster(f) for f in fields]))

    def _pairs(self, rasters, horizon, last_target):
        """(input, target) windows whose target ends at or before ``last_target``."""
        xs, ys = [], []
        for s in range(0, last_target - 2 * horizon + 2):
            xs.append(rasters[s:s + horizon])
            ys.append(rasters[s + horizon:s + 2 * horizon])
        return np.array(xs), np.array(ys)

    def _band_tensors(self, x, k, bands):
        s = bands[k]
        return x[:, None, :, s, :] / self.config.value_scale

    def fit(self, history, horizon):
        cfg = replace(self.config, horizon=horizon)
        self.config = cfg
        self.trainers = build_band_models(cfg, self.grid.n_rows, self.grid.n_cols, self.seed)
        rasters = self._rasters(history.get("fields"))
        xs, ys = self._pairs(rasters, horizon, history.t)
        if len(xs) == 0:
            raise ValueError("warmup too short to form a single training pair")
        bands = band_slices(self.grid.n_rows, len(self.trainers))
        for k, tr in enumerate(self.trainers):
            log = train(tr, self._band_tensors(xs, k, bands), self._band_tensors(ys, k, bands),
                        self.epochs, seed=self.seed + k)
            self.log.append(log)

    def predict(self, history, horizon):
        seq = self._rasters(history.get("fields")[-horizon:])
        pred = predict_region_split(self.trainers, seq)
        return self.grid.from_raster(pred)

    def update(self, history, horizon):
        t = history.t
        if t - 2 * horizon + 1 < 0:
            return
        rasters = self._rasters(history.get("fields")[t - 2 * horizon + 1:])
        x, y = rasters[None, :horizon], rasters[None, horizon:]
        bands = band_slices(self.grid.n_rows, len(self.trainers))
        for k, tr in enumerate(self.trainers):
            online_update(tr, self._band_tensors(x, k, bands), self._band_tensors(y, k, bands),
                          self.online_epochs)
