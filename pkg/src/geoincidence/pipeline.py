"""Configuration, ingestion, synthetic data and the simulate/forecast/evaluate flows.

Configuration is an INI file (``configparser``). A minimal synthetic run::

    [paths]
    data = data          ; cells.csv, municipalities.csv, cases.csv, deaths.csv
    output = out

    [general]
    seed = 7

Every command writes ``manifest.json`` into its output directory with the
SHA-256 of the configuration text, the seeds used and a checksum of every
file written. Text outputs use 6 significant digits.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from . import raster
from .block_dss import BlockDSS, SimulationConfig, summarize
from .covariance import VariogramModel, experimental_variogram, fit_variogram
from .evaluation import (EvalResult, Persistence, rolling_origin, write_scores_csv,
                         write_summary_csv)
from .forecasters import ArmaForecaster, SirdDssForecaster, StconvForecaster, VarForecaster
from .geo_grid import (Grid, GridParams, Municipality, build_grid, rasterize_rectangles,
                       read_cells_csv, read_municipalities_csv, write_cells_csv,
                       write_municipalities_csv)
from .sird import SirdConfig
from .stconvs2s import ModelConfig

log = logging.getLogger(__name__)

RATE_SCALE = 1e5
WINDOW = 14
MODELS = ("arma", "var", "sird", "stconv")
FMT = "%.6g"


class DataError(ValueError):
    """Input files are missing or malformed."""


# --- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_cols: int = 30
    n_rows: int = 30
    cell_size: float = 2.0
    muni_cols: int = 3
    muni_rows: int = 2
    populations: tuple[int, ...] = (120_000, 40_000, 250_000, 60_000, 90_000, 30_000)
    days: int = 240
    start: date = date(2020, 3, 1)
    # (start day, peak transmission rate, duration in days)
    waves: tuple[tuple[int, float, int], ...] = ((0, 0.4, 35), (90, 0.14, 100))
    recovery_rate: float = 1.0 / 10.0
    death_rate: float = 0.001
    coupling_km: float = 15.0
    coupling: float = 0.15
    heterogeneity: float = 0.15
    imports: float = 1.0
    background: float = 0.05
    noise: float = 0.1

    def __post_init__(self):
        if min(self.n_cols, self.n_rows, self.muni_cols, self.muni_rows, self.days) < 1:
            raise ValueError("grid, municipality and calendar counts must be >= 1")
        if self.muni_cols > self.n_cols or self.muni_rows > self.n_rows:
            raise ValueError("more municipalities than cells along an axis")
        if len(self.populations) != self.muni_cols * self.muni_rows:
            raise ValueError("one population per municipality required")
        if self.background < 0 or self.imports < 0 or self.noise < 0:
            raise ValueError("background, imports and noise must be >= 0")
        for start, _, dur in self.waves:
            if start < 0 or dur < 1 or start + dur > self.days:
                raise ValueError(f"wave ({start}, {dur}) falls outside the calendar")


@dataclass
class PipelineConfig:
    data_dir: Path
    output_dir: Path
    gold_dir: Path | None
    variogram: VariogramModel | None      # None: fit from data
    variogram_structure: str
    lag_width: float
    n_lags: int
    simulation: SimulationConfig
    gold_realizations: int
    forecast_realizations: int
    sird: SirdConfig
    pseudo_counts: dict
    model: ModelConfig
    epochs: int
    online_epochs: int
    horizons: tuple[int, ...]
    warmup: int
    models: tuple[str, ...]
    arma_p: int
    arma_q: int
    var_p: int
    var_ridge: float
    var_max_cells: int
    synthetic: SyntheticSpec
    grid: GridParams
    seed: int
    text: str = field(default="", repr=False)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()


def _ints(text):
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _waves(text):
    out = []
    for item in str(text).split(";"):
        item = item.strip()
        if item:
            a, b, c = item.split(":")
            out.append((int(a), float(b), int(c)))
    return tuple(out)


def _pairs(text):
    out = {}
    for item in str(text).split(","):
        item = item.strip()
        if item:
            k, v = item.split(":")
            out[int(k)] = float(v)
    return out


DEFAULTS = {
    "paths": {"data": "data", "output": "out", "gold": ""},
    "general": {"seed": "2020"},
    # without a [grid] section the grid follows the [synthetic] dimensions
    "grid": {"n_cols": "30", "n_rows": "30", "cell_size_km": "2", "origin_x_km": "0",
             "origin_y_km": "0"},
    "variogram": {"structure": "spherical", "nugget": "0", "sill": "1", "range_km": "40",
                  "fit": "false", "lag_width_km": "4", "n_lags": "12"},
    "simulation": {"n_realizations": "100", "gold_realizations": "100",
                   "forecast_realizations": "100", "max_point_neighbors": "12",
                   "max_block_neighbors": "4", "search_radius_km": ""},
    "sird": {"pseudo_count": "10000", "pseudo_count_by_horizon": "7:10000,10:100000",
             "recovery_window": "14", "bandwidth": "10",
             "projection_mode": "linear_extrapolation", "mean_n": "7",
             "extrapolation_window": "14", "recovery_rule": "literal"},
    "model": {"layers_per_block": "3", "base_filters": "32", "spatial_kernel": "5",
              "temporal_kernel": "5", "li_count": "2", "lw_kernel": "1,1,1",
              "value_scale": "1000", "reduce_to": "input", "lr": "0.001", "beta3": "0.9999",
              "batch_size": "5", "epochs": "30", "online_epochs": "5",
              "head_init": "zero"},
    "evaluation": {"horizons": "7,10", "warmup_days": "60", "models": "arma,var,sird,stconv",
                   "arma_p": "7", "arma_q": "1", "var_p": "4", "var_ridge": "0.001",
                   "var_max_cells": "2500"},
    "synthetic": {"n_cols": "30", "n_rows": "30", "cell_size_km": "2", "muni_cols": "3",
                  "muni_rows": "2",
                  "populations": "120000,40000,250000,60000,90000,30000",
                  "days": "240", "start_date": "2020-03-01",
                  "waves": "0:0.4:35; 90:0.14:100", "recovery_rate": "0.1",
                  "death_rate": "0.001", "coupling_km": "15", "coupling": "0.15",
                  "heterogeneity": "0.15", "imports": "1", "background": "0.05",
                  "noise": "0.1"},
}


def cp_has_grid(text: str) -> bool:
    """True when the user's configuration text declares a ``[grid]`` section."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read_string(text)
    return cp.has_section("grid")


def load_config(path=None, text: str | None = None) -> PipelineConfig:
    """Read an INI configuration; missing keys take the documented defaults.

    Relative paths are resolved against the configuration file's directory.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read_dict(DEFAULTS)
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise DataError(f"configuration file {path} not found")
        text = path.read_text()
        base = path.parent
    if text:
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise DataError(f"malformed configuration: {exc}") from None
    try:
        g = cp["general"]
        seed = g.getint("seed")
        v = cp["variogram"]
        fit = v.getboolean("fit")
        vmodel = None if fit else VariogramModel(v["structure"], v.getfloat("nugget"),
                                                 v.getfloat("sill"), v.getfloat("range_km"))
        s = cp["simulation"]
        radius = s["search_radius_km"].strip()
        sim = SimulationConfig(n_realizations=s.getint("n_realizations"), seed=seed,
                               max_point_neighbors=s.getint("max_point_neighbors"),
                               max_block_neighbors=s.getint("max_block_neighbors"),
                               search_radius=float(radius) if radius else None)
        sd = cp["sird"]
        sird = SirdConfig(pseudo_count=sd.getfloat("pseudo_count"),
                          recovery_window=sd.getint("recovery_window"),
                          bandwidth=sd.getfloat("bandwidth"),
                          projection_mode=sd["projection_mode"], mean_n=sd.getint("mean_n"),
                          extrapolation_window=sd.getint("extrapolation_window"),
                          recovery_rule=sd["recovery_rule"])
        m = cp["model"]
        model = ModelConfig(layers_per_block=m.getint("layers_per_block"),
                            base_filters=m.getint("base_filters"),
                            spatial_kernel=m.getint("spatial_kernel"),
                            temporal_kernel=m.getint("temporal_kernel"),
                            li_count=m.getint("li_count"), lw_kernel=_ints(m["lw_kernel"]),
                            value_scale=m.getfloat("value_scale"), reduce_to=m["reduce_to"],
                            lr=m.getfloat("lr"), beta3=m.getfloat("beta3"),
                            batch_size=m.getint("batch_size"), head_init=m["head_init"].strip())
        e = cp["evaluation"]
        models = tuple(x.strip() for x in e["models"].split(",") if x.strip())
        unknown = set(models) - set(MODELS)
        if unknown:
            raise DataError(f"unknown models {sorted(unknown)}; choose from {MODELS}")
        y = cp["synthetic"]
        spec = SyntheticSpec(n_cols=y.getint("n_cols"), n_rows=y.getint("n_rows"),
                             cell_size=y.getfloat("cell_size_km"),
                             muni_cols=y.getint("muni_cols"), muni_rows=y.getint("muni_rows"),
                             populations=_ints(y["populations"]), days=y.getint("days"),
                             start=date.fromisoformat(y["start_date"].strip()),
                             waves=_waves(y["waves"]), recovery_rate=y.getfloat("recovery_rate"),
                             death_rate=y.getfloat("death_rate"),
                             coupling_km=y.getfloat("coupling_km"),
                             coupling=y.getfloat("coupling"),
                             heterogeneity=y.getfloat("heterogeneity"),
                             imports=y.getfloat("imports"),
                             background=y.getfloat("background"), noise=y.getfloat("noise"))
        if text and cp_has_grid(text):
            gr = cp["grid"]
            gparams = GridParams(gr.getint("n_cols"), gr.getint("n_rows"),
                                 gr.getfloat("cell_size_km"), gr.getfloat("origin_x_km"),
                                 gr.getfloat("origin_y_km"))
        else:
            gparams = GridParams(spec.n_cols, spec.n_rows, spec.cell_size)
        p = cp["paths"]
        gold = p["gold"].strip()
        return PipelineConfig(
            data_dir=base / p["data"], output_dir=base / p["output"],
            gold_dir=(base / gold) if gold else None,
            variogram=vmodel, variogram_structure=v["structure"],
            lag_width=v.getfloat("lag_width_km"), n_lags=v.getint("n_lags"),
            simulation=sim, gold_realizations=s.getint("gold_realizations"),
            forecast_realizations=s.getint("forecast_realizations"),
            sird=sird, pseudo_counts=_pairs(sd["pseudo_count_by_horizon"]),
            model=model, epochs=m.getint("epochs"), online_epochs=m.getint("online_epochs"),
            horizons=_ints(e["horizons"]), warmup=e.getint("warmup_days"), models=models,
            arma_p=e.getint("arma_p"), arma_q=e.getint("arma_q"), var_p=e.getint("var_p"),
            var_ridge=e.getfloat("var_ridge"), var_max_cells=e.getint("var_max_cells"),
            synthetic=spec, grid=gparams, seed=seed, text=text or "")
    except DataError:
        raise
    except (ValueError, KeyError) as exc:
        raise DataError(f"invalid configuration: {exc}") from None


# --- ingestion --------------------------------------------------------------

@dataclass
class MunicipalityPanel:
    dates: list[date]
    ids: list[str]
    populations: np.ndarray      # (M,)
    cases: np.ndarray            # (days, M) daily new cases
    deaths: np.ndarray | None    # (days,) national daily deaths
    filled_days: int = 0

    def incidence(self) -> np.ndarray:
        return incidence_rates(self.cases, self.populations)


def incidence_rates(cases, populations, window: int = WINDOW, scale: float = RATE_SCALE):
    """Trailing ``window``-day sum of daily cases per ``scale`` inhabitants.

    Day ``t`` sums days ``t - window + 1 .. t`` (fewer at the start).
    """
    c = np.asarray(cases, dtype=float)
    cs = np.cumsum(c, axis=0)
    lagged = np.zeros_like(cs)
    lagged[window:] = cs[:-window]
    return scale * (cs - lagged) / np.asarray(populations, dtype=float)


def read_cases_csv(path, ids: Sequence[str]):
    """Parse ``date,municipality_id,new_cases``; returns dates and a ``(days, M)`` array.

    Missing (date, municipality) combinations between the first and last
    date are filled with 0 and counted.
    """
    path = Path(path)
    index = {m: k for k, m in enumerate(ids)}
    records = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["date", "municipality_id", "new_cases"]:
            raise DataError(f"{path}: expected header date,municipality_id,new_cases")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(rec)}")
            try:
                day = date.fromisoformat(rec[0])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed date {rec[0]!r}") from None
            if rec[1] not in index:
                raise DataError(f"{path}:{lineno}: unknown municipality {rec[1]!r}")
            try:
                n = float(rec[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed count {rec[2]!r}") from None
            if n < 0:
                raise DataError(f"{path}:{lineno}: negative case count {n:g}")
            key = (day, index[rec[1]])
            if key in records:
                raise DataError(f"{path}:{lineno}: duplicate record for {rec[1]} on {rec[0]}")
            records[key] = n
    if not records:
        raise DataError(f"{path}: no case records")
    first = min(d for d, _ in records)
    last = max(d for d, _ in records)
    n_days = (last - first).days + 1
    dates = [first + timedelta(days=i) for i in range(n_days)]
    cases = np.zeros((n_days, len(ids)))
    for (d, m), n in records.items():
        cases[(d - first).days, m] = n
    filled = n_days * len(ids) - len(records)
    return dates, cases, filled


def read_deaths_csv(path, dates: Sequence[date]) -> np.ndarray:
    """National daily deaths ``date,new_deaths`` aligned to ``dates`` (missing days are 0)."""
    path = Path(path)
    pos = {d: i for i, d in enumerate(dates)}
    out = np.zeros(len(dates))
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["date", "new_deaths"]:
            raise DataError(f"{path}: expected header date,new_deaths")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                day, n = date.fromisoformat(rec[0]), float(rec[1])
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: malformed record {rec!r}") from None
            if n < 0:
                raise DataError(f"{path}:{lineno}: negative death count {n:g}")
            if day in pos:
                out[pos[day]] = n
    return out


def ingest(data_dir, grid_params: GridParams):
    """Load cells, municipalities, cases and (optional) national deaths.

    Returns
    -------
    grid : Grid
    municipalities : list of Municipality
    panel : MunicipalityPanel
    """
    data_dir = Path(data_dir)
    for name in ("cells.csv", "municipalities.csv", "cases.csv"):
        if not (data_dir / name).exists():
            raise DataError(f"missing input file {data_dir / name}")
    table = read_municipalities_csv(data_dir / "municipalities.csv")
    grid, munis = build_grid(grid_params, read_cells_csv(data_dir / "cells.csv"), table)
    ids = [m.id for m in munis]
    dates, cases, filled = read_cases_csv(data_dir / "cases.csv", ids)
    if filled:
        log.warning("%d missing (date, municipality) case records filled with 0", filled)
    deaths = None
    if (data_dir / "deaths.csv").exists():
        deaths = read_deaths_csv(data_dir / "deaths.csv", dates)
    pops = np.array([m.population for m in munis], dtype=float)
    return grid, munis, MunicipalityPanel(dates, ids, pops, cases, deaths, filled)


# --- synthetic country ------------------------------------------------------

@dataclass
class SyntheticData:
    grid: Grid
    municipalities: list[Municipality]
    dates: list[date]
    cases: np.ndarray           # observed (noisy) daily cases (days, M)
    deaths: np.ndarray          # observed national daily deaths (days,)
    expected_cases: np.ndarray  # noise-free daily cases (days, M)
    rates: np.ndarray           # noise-free 14-day incidence (days, M)


def synthetic_country(spec: SyntheticSpec):
    """Rectangular country split into ``muni_rows x muni_cols`` rectangles."""
    rects = {}
    names = {}
    k = 0
    row_edges = np.linspace(0, spec.n_rows, spec.muni_rows + 1).round().astype(int)
    col_edges = np.linspace(0, spec.n_cols, spec.muni_cols + 1).round().astype(int)
    for i in range(spec.muni_rows):
        for j in range(spec.muni_cols):
            mid = f"M{k + 1:02d}"
            rects[mid] = (row_edges[i], col_edges[j], row_edges[i + 1], col_edges[j + 1])
            names[mid] = (f"Municipality {k + 1}", int(spec.populations[k]))
            k += 1
    return build_grid(GridParams(spec.n_cols, spec.n_rows, spec.cell_size),
                      rasterize_rectangles(rects), names)


def _wave_profile(spec: SyntheticSpec) -> np.ndarray:
    """Transmission rate per day: ``background`` plus a raised-cosine bump per wave."""
    t = np.arange(spec.days, dtype=float)
    beta = np.zeros(spec.days)
    if spec.waves:
        beta += spec.background
    for start, peak, dur in spec.waves:
        u = (t - start) / dur
        inside = (u >= 0) & (u <= 1)
        beta += np.where(inside, peak * 0.5 * (1 - np.cos(2 * np.pi * u)), 0.0)
    return beta


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticData:
    """Simulate a spatially coupled SIRD epidemic on a synthetic country.

    Each municipality follows daily-step SIRD dynamics whose force of
    infection mixes its own prevalence with the prevalence of the others,
    weighted by ``coupling * exp(-distance / coupling_km)``. Transmission
    is a constant ``background`` rate plus the wave profile, scaled by a
    per-municipality factor. Infections are imported at up to ``imports``
    per 100,000 inhabitants a day, in proportion to the current
    transmission rate; with no waves there is neither transmission nor
    importation, so the epidemic never starts. Observed daily cases
    are Poisson draws around the noise-free counts with gamma-distributed
    day effects (coefficient of variation ``noise``).
    """
    rng = np.random.default_rng(seed)
    grid, munis = synthetic_country(spec)
    n_m = len(munis)
    pops = np.array([m.population for m in munis], dtype=float)
    cent = np.array([m.centroid for m in munis])
    dist = np.hypot(*(cent[:, None, :] - cent[None, :, :]).transpose(2, 0, 1))
    mix = spec.coupling * np.exp(-dist / spec.coupling_km)
    np.fill_diagonal(mix, 1.0)
    mix /= mix.sum(axis=1, keepdims=True)
    factor = 1.0 + spec.heterogeneity * (2 * rng.random(n_m) - 1)
    beta = _wave_profile(spec)
    seed_share = rng.dirichlet(np.ones(n_m))

    s, i = pops.copy(), np.zeros(n_m)
    expected = np.zeros((spec.days, n_m))
    exp_deaths = np.zeros(spec.days)
    for t in range(spec.days):
        prev = i / pops
        new = np.minimum(beta[t] * factor * s * (mix @ prev), s)
        if beta[t] > 0:
            imported = spec.imports * pops / RATE_SCALE * seed_share * n_m
            new = np.minimum(new + imported * beta[t] / max(beta.max(), 1e-12), s)
        rec = spec.recovery_rate * i
        dth = spec.death_rate * i
        s = s - new
        i = i + new - rec - dth
        expected[t] = new
        exp_deaths[t] = dth.sum()

    if spec.noise > 0:
        shape = 1.0 / spec.noise ** 2
        day_effect = rng.gamma(shape, 1.0 / shape, size=expected.shape)
    else:
        day_effect = np.ones_like(expected)
    cases = rng.poisson(expected * day_effect).astype(float)
    deaths = rng.poisson(exp_deaths).astype(float)
    dates = [spec.start + timedelta(days=k) for k in range(spec.days)]
    rates = incidence_rates(expected, pops)
    return SyntheticData(grid, munis, dates, cases, deaths, expected, rates)


# --- output helpers ---------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Outputs:
    """Tracks files written by one command for the manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def path(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def manifest(self, command: str, cfg: PipelineConfig, seeds: dict, extra: dict | None = None):
        entries = [{"file": str(p.relative_to(self.root)), "sha256": _sha256(p)}
                   for p in sorted(set(self.files))]
        doc = {"command": command, "config_sha256": cfg.config_hash, "seeds": seeds,
               "files": entries}
        if extra:
            doc.update(extra)
        (self.root / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_panel(data_dir, grid, munis, dates, cases, deaths, outputs: Outputs | None = None):
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    paths = {n: data_dir / n for n in ("cells.csv", "municipalities.csv", "cases.csv",
                                       "deaths.csv")}
    write_cells_csv(paths["cells.csv"], grid, munis)
    write_municipalities_csv(paths["municipalities.csv"], munis)
    with paths["cases.csv"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "municipality_id", "new_cases"])
        for t, d in enumerate(dates):
            for k, m in enumerate(munis):
                w.writerow([d.isoformat(), m.id, "%d" % cases[t, k]])
    with paths["deaths.csv"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "new_deaths"])
        for t, d in enumerate(dates):
            w.writerow([d.isoformat(), "%d" % deaths[t]])
    if outputs is not None:
        outputs.files.extend(paths.values())


def write_rates_csv(path, dates, ids, rates):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "municipality_id", "rate"])
        for t, d in enumerate(dates):
            for k, mid in enumerate(ids):
                w.writerow([d.isoformat(), mid, FMT % rates[t, k]])


def read_gold(gold_dir, grid: Grid, dates) -> np.ndarray:
    """Median rasters ``<gold_dir>/median_<date>.asc`` as ``(days, n_land)``."""
    out = []
    for d in dates:
        p = Path(gold_dir) / f"median_{d.isoformat()}.asc"
        if not p.exists():
            raise DataError(f"missing gold raster {p}")
        vals, _ = raster.read_asc(p)
        out.append(grid.from_raster(vals))
    return np.array(out)


# --- commands ---------------------------------------------------------------

def resolve_variogram(cfg: PipelineConfig, grid: Grid, munis, rates) -> VariogramModel:
    """Configured model, or one fitted to the population-weighted variogram of all days."""
    if cfg.variogram is not None:
        return cfg.variogram
    cent = np.array([m.centroid for m in munis])
    pops = np.array([m.population for m in munis], dtype=float)
    live = np.asarray(rates)[np.asarray(rates).std(axis=1) > 0]
    if len(live) == 0:
        return VariogramModel(cfg.variogram_structure, 0.0, 1.0, grid.cell_size * 10)
    # standardise each day so every day shapes the fitted range equally
    z = (live - live.mean(1, keepdims=True)) / live.std(1, keepdims=True)
    table = experimental_variogram(cent, z, pops, cfg.lag_width, cfg.n_lags)
    return fit_variogram(table, cfg.variogram_structure)


def simulate_fields(engine: BlockDSS, rates, n_realizations: int, seed: int):
    """Median, lower and upper fields for every day, each ``(days, n_land)``."""
    reals = engine.realizations(rates, n_realizations, seed)
    return summarize(reals)


def _write_fields(outputs: Outputs, grid, dates, prefix_dir, fields: dict):
    for name, vals in fields.items():
        for t, d in enumerate(dates):
            raster.write_field(outputs.path(f"{prefix_dir}/{name}_{d.isoformat()}.asc"), grid,
                               vals[t])


def cmd_synth(cfg: PipelineConfig) -> Path:
    """Generate the synthetic country, its case files and gold-standard rasters."""
    seeds = {"synthetic": cfg.seed, "gold": cfg.seed + 1}
    data = generate_synthetic(cfg.synthetic, seeds["synthetic"])
    out = Outputs(cfg.data_dir)
    write_panel(cfg.data_dir, data.grid, data.municipalities, data.dates, data.cases,
                data.deaths, out)
    ids = [m.id for m in data.municipalities]
    write_rates_csv(out.path("truth_rates.csv"), data.dates, ids, data.rates)
    model = resolve_variogram(cfg, data.grid, data.municipalities, data.rates)
    engine = BlockDSS(data.grid, data.municipalities, model, cfg.simulation)
    med, lo, hi = simulate_fields(engine, data.rates, cfg.gold_realizations, seeds["gold"])
    _write_fields(out, data.grid, data.dates, "gold", {"median": med})
    out.manifest("synth", cfg, seeds, {"variogram": _variogram_dict(model)})
    return cfg.data_dir


def _variogram_dict(m: VariogramModel):
    return {"structure": m.structure, "nugget": FMT % m.nugget, "sill": FMT % m.sill,
            "range_km": FMT % m.range}


def _load(cfg: PipelineConfig):
    grid, munis, panel = ingest(cfg.data_dir, cfg.grid)
    return grid, munis, panel


def cmd_simulate(cfg: PipelineConfig) -> Path:
    """Daily median and CI rasters from the observed municipal incidence."""
    grid, munis, panel = _load(cfg)
    rates = panel.incidence()
    model = resolve_variogram(cfg, grid, munis, rates)
    engine = BlockDSS(grid, munis, model, cfg.simulation)
    seeds = {"simulation": cfg.seed}
    med, lo, hi = simulate_fields(engine, rates, cfg.simulation.n_realizations, cfg.seed)
    out = Outputs(cfg.output_dir / "simulate")
    _write_fields(out, grid, panel.dates, ".", {"median": med, "lower": lo, "upper": hi})
    out.manifest("simulate", cfg, seeds, {"variogram": _variogram_dict(model)})
    return out.root


def _gold(cfg: PipelineConfig, grid, dates):
    gold_dir = cfg.gold_dir or (cfg.data_dir / "gold")
    return read_gold(gold_dir, grid, dates)


def make_forecaster(name: str, cfg: PipelineConfig, grid, munis, model_vg, seed: int):
    if name == "arma":
        return ArmaForecaster(cfg.arma_p, cfg.arma_q)
    if name == "var":
        return VarForecaster(cfg.var_p, cfg.var_ridge, cfg.var_max_cells)
    if name == "sird":
        engine = BlockDSS(grid, munis, model_vg, cfg.simulation)
        return SirdDssForecaster(engine, cfg.sird, cfg.pseudo_counts,
                                 cfg.forecast_realizations, seed)
    if name == "stconv":
        return StconvForecaster(grid, cfg.model, cfg.epochs, cfg.online_epochs, seed)
    if name == "persistence":
        return Persistence()
    raise DataError(f"unknown model {name!r}")


def _run_model(name, horizon, cfg, grid, munis, panel, gold, model_vg, seed) -> EvalResult:
    fc = make_forecaster(name, cfg, grid, munis, model_vg, seed)
    series = {"fields": gold, "cases": panel.cases}
    if panel.deaths is not None:
        series["deaths"] = panel.deaths
    return rolling_origin(fc, series, gold, horizon, cfg.warmup,
                          [d.isoformat() for d in panel.dates])


def _model_seed(cfg, name, horizon):
    return cfg.seed + 100 * (MODELS + ("persistence",)).index(name) + horizon


def _vg_for_forecast(cfg, grid, munis, panel):
    gold_dir = cfg.gold_dir or (cfg.data_dir / "gold")
    man = Path(gold_dir).parent / "manifest.json"
    if cfg.variogram is None and man.exists():
        v = json.loads(man.read_text()).get("variogram")
        if v:
            return VariogramModel(v["structure"], float(v["nugget"]), float(v["sill"]),
                                  float(v["range_km"]))
    return resolve_variogram(cfg, grid, munis, panel.incidence())


def cmd_forecast(cfg: PipelineConfig, model: str, horizon: int) -> Path:
    """Rolling-origin predictions of one model, one raster per test day."""
    grid, munis, panel = _load(cfg)
    gold = _gold(cfg, grid, panel.dates)
    vg = _vg_for_forecast(cfg, grid, munis, panel)
    seed = _model_seed(cfg, model, horizon)
    res = _run_model(model, horizon, cfg, grid, munis, panel, gold, vg, seed)
    out = Outputs(cfg.output_dir / "forecast" / f"{model}_h{horizon}")
    for k, t in enumerate(res.target_index):
        raster.write_field(out.path(f"pred_{panel.dates[t].isoformat()}.asc"), grid,
                           res.predictions[k])
    write_scores_csv(out.path("scores.csv"), [res])
    out.manifest("forecast", cfg, {model: seed}, {"model": model, "horizon": horizon})
    return out.root


def cmd_evaluate(cfg: PipelineConfig, models: Sequence[str] | None = None,
                 horizons: Sequence[int] | None = None) -> Path:
    """Backtest every configured model at every horizon.

    Writes ``scores.csv`` and ``summary.csv`` (the configured models),
    ``reference_summary.csv`` (persistence) and per-day error rasters
    ``errors/<model>_h<T>/{abs,smape}_<date>.asc``.
    """
    grid, munis, panel = _load(cfg)
    gold = _gold(cfg, grid, panel.dates)
    vg = _vg_for_forecast(cfg, grid, munis, panel)
    models = tuple(models or cfg.models)
    horizons = tuple(horizons or cfg.horizons)
    out = Outputs(cfg.output_dir / "evaluate")
    results, reference, seeds, timings = [], [], {}, {}
    for h in horizons:
        for name in models + ("persistence",):
            seed = _model_seed(cfg, name, h)
            seeds[f"{name}_h{h}"] = seed
            t0 = time.perf_counter()
            res = _run_model(name, h, cfg, grid, munis, panel, gold, vg, seed)
            timings[f"{name}_h{h}"] = time.perf_counter() - t0
            log.info("%s h=%d done in %.1fs", name, h, timings[f"{name}_h{h}"])
            (reference if name == "persistence" else results).append(res)
            if name != "persistence":
                _write_error_rasters(out, grid, panel.dates, gold, res)
    write_scores_csv(out.path("scores.csv"), results + reference)
    write_summary_csv(out.path("summary.csv"), results)
    write_summary_csv(out.path("reference_summary.csv"), reference)
    out.manifest("evaluate", cfg, seeds, {"variogram": _variogram_dict(vg)})
    return out.root


def _write_error_rasters(out: Outputs, grid, dates, gold, res: EvalResult):
    for k, t in enumerate(res.target_index):
        z, zh = gold[t], res.predictions[k]
        den = z + zh
        sm = np.where(den == 0, 0.0, 2 * np.abs(z - zh) / np.where(den == 0, 1.0, den))
        tag = f"errors/{res.model}_h{res.horizon}"
        raster.write_field(out.path(f"{tag}/abs_{dates[t].isoformat()}.asc"), grid,
                           np.abs(z - zh))
        raster.write_field(out.path(f"{tag}/smape_{dates[t].isoformat()}.asc"), grid, sm)
