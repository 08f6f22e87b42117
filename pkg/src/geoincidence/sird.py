"""Time-varying SIRD models per municipality.

Daily case counts are turned into active-case, recovery and death series
(recoveries and deaths are approximated from a national mortality ratio),
per-day rates are derived, smoothed with a Nadaraya-Watson estimator,
shrunk toward the national rates with a pseudo-count, projected forward
and integrated with a daily step. The result is a predicted 14-day
incidence per municipality that can be mapped with block DSS.

All series are arrays indexed by day; panels are ``(days, municipalities)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROJECTION_MODES = ("last", "mean_n", "linear_extrapolation")
INCIDENCE_WINDOW = 14


@dataclass
class Flags:
    """Counts of days where a floor or fallback was applied."""
    zero_denominator: int = 0
    negative_active: int = 0
    negative_recoveries: int = 0
    projection_fallback: int = 0

    def total(self) -> int:
        return (self.zero_denominator + self.negative_active + self.negative_recoveries
                + self.projection_fallback)


@dataclass(frozen=True)
class SirdConfig:
    pseudo_count: float = 10_000.0
    recovery_window: int = 14
    bandwidth: float = 10.0
    projection_mode: str = "linear_extrapolation"
    mean_n: int = 7
    extrapolation_window: int = 14
    step: int = 1
    # "literal": r(t) = I(t) - d(t); "lagged": r(t) = i(t - w) - d(t)
    recovery_rule: str = "literal"

    def __post_init__(self):
        if self.pseudo_count < 0:
            raise ValueError("pseudo_count must be >= 0")
        if self.recovery_window < 1:
            raise ValueError("recovery_window must be >= 1")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be > 0")
        if self.projection_mode not in PROJECTION_MODES:
            raise ValueError(f"projection_mode must be one of {PROJECTION_MODES}")
        if self.mean_n < 1 or self.extrapolation_window < 2:
            raise ValueError("mean_n >= 1 and extrapolation_window >= 2 required")
        if self.step != 1:
            raise ValueError("only a one-day integration step is supported")
        if self.recovery_rule not in ("literal", "lagged"):
            raise ValueError("recovery_rule must be 'literal' or 'lagged'")


@dataclass
class SirdState:
    S: float
    I: float
    R: float
    D: float
    N: float

    def __post_init__(self):
        if min(self.S, self.I, self.R, self.D) < 0:
            raise ValueError("compartments must be non-negative")
        if not np.isclose(self.S + self.I + self.R + self.D, self.N, rtol=1e-12, atol=1e-9):
            raise ValueError("S + I + R + D must equal N")


@dataclass
class RateSeries:
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    present: np.ndarray          # False where I = 0 (rates undefined)
    smoothed: dict = field(default_factory=dict)
    blended: dict = field(default_factory=dict)


def national_mortality(deaths, active_lagged, flags: Flags | None = None) -> np.ndarray:
    """Daily mortality ratio ``mu(t) = d_P(t) / I_P(t - w)``.

    ``active_lagged`` is already aligned (element ``t`` holds ``I_P(t - w)``).
    A zero denominator gives ``mu = 0`` and is counted in ``flags``.
    """
    d = np.asarray(deaths, dtype=float)
    a = np.asarray(active_lagged, dtype=float)
    zero = a <= 0
    if flags is not None:
        flags.zero_denominator += int(zero.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(zero, 0.0, d / np.where(zero, 1.0, a))


def active_cases(i, r, d, flags: Flags | None = None) -> np.ndarray:
    """Active cases ``I(t) = sum_{s<=t} i(s) - r(s) - d(s)``, floored at 0.

    Works on series ``(T,)`` or panels ``(T, M)``; after a floor the sum
    restarts from 0.
    """
    i, r, d = (np.asarray(a, dtype=float) for a in (i, r, d))
    if not i.shape == r.shape == d.shape:
        raise ValueError("i, r and d must have equal shapes")
    net = i - r - d
    out = np.empty_like(net)
    running = np.zeros(net.shape[1:])
    for t in range(len(net)):
        running = running + net[t]
        neg = running < 0
        if flags is not None:
            flags.negative_active += int(np.sum(neg))
        running = np.where(neg, 0.0, running)
        out[t] = running
    return out


def approximate_recoveries_deaths(cases, national_deaths=None, w: int = 14,
                                  rule: str = "literal", flags: Flags | None = None):
    """Approximate per-municipality recoveries, deaths and active cases.

    Deaths are ``d(t) = mu(t) I(t - w)`` with the national ratio
    ``mu(t) = d_P(t) / I_P(t - w)``, where ``I_P`` is the sum of the
    municipal active cases. Recoveries follow ``rule``:

    ``"literal"``
        ``r(t) = I(t) - d(t)`` together with
        ``I(t) = I(t-1) + i(t) - r(t) - d(t)``, i.e.
        ``I(t) = (I(t-1) + i(t)) / 2``. When that makes ``r`` negative,
        ``r = 0`` and ``I(t) = I(t-1) + i(t) - d(t)``.
    ``"lagged"``
        ``r(t) = i(t - w) - d(t)`` floored at 0.

    Parameters
    ----------
    cases : array_like, shape (T, M)
        Daily new cases.
    national_deaths : array_like, shape (T,), optional
        Daily national deaths; zero mortality when omitted.

    Returns
    -------
    r, d, I : ndarray, shape (T, M)
    mu : ndarray, shape (T,)
    """
    i = np.asarray(cases, dtype=float)
    if i.ndim == 1:
        i = i[:, None]
    n_days, n_m = i.shape
    dp = np.zeros(n_days) if national_deaths is None else np.asarray(national_deaths, float)
    if dp.shape != (n_days,):
        raise ValueError("national deaths must have one value per day")
    flags = flags if flags is not None else Flags()
    r = np.zeros_like(i)
    d = np.zeros_like(i)
    act = np.zeros_like(i)
    mu = np.zeros(n_days)
    prev = np.zeros(n_m)
    for t in range(n_days):
        lagged = act[t - w] if t >= w else np.zeros(n_m)
        mu[t] = national_mortality(dp[t:t + 1], [lagged.sum()], flags)[0]
        d[t] = mu[t] * lagged
        if rule == "literal":
            cur = 0.5 * (prev + i[t])
            rec = cur - d[t]
        else:
            rec = (i[t - w] if t >= w else np.zeros(n_m)) - d[t]
            cur = prev + i[t] - np.maximum(rec, 0.0) - d[t]
        neg = rec < 0
        flags.negative_recoveries += int(neg.sum())
        if rule == "literal":
            cur = np.where(neg, prev + i[t] - d[t], cur)
        rec = np.maximum(rec, 0.0)
        negc = cur < 0
        flags.negative_active += int(negc.sum())
        cur = np.maximum(cur, 0.0)
        r[t], act[t] = rec, cur
        prev = cur
    return r, d, act, mu


def derive_rates(i, r, d, active) -> RateSeries:
    """Per-day ``beta = i/I``, ``gamma = r/I``, ``delta = d/I``; days with ``I = 0`` are missing."""
    i, r, d, a = (np.asarray(x, dtype=float) for x in (i, r, d, active))
    present = a > 0
    safe = np.where(present, a, 1.0)
    nan = np.nan
    return RateSeries(np.where(present, i / safe, nan), np.where(present, r / safe, nan),
                      np.where(present, d / safe, nan), present)


def smooth(series, bandwidth: float = 10.0) -> np.ndarray:
    """Nadaraya-Watson smoother with a Gaussian kernel over the day index.

    NaN entries are treated as missing: they get no weight but do receive a
    smoothed value. Applies column-wise to 2-D input. Columns with no
    present value stay NaN.
    """
    s = np.asarray(series, dtype=float)
    if not bandwidth > 0:
        raise ValueError("bandwidth must be > 0")
    t = np.arange(len(s), dtype=float)
    k = np.exp(-0.5 * ((t[:, None] - t[None, :]) / bandwidth) ** 2)
    present = ~np.isnan(s)
    vals = np.where(present, s, 0.0)
    if s.ndim == 1:
        num, den = k @ vals, k @ present
    else:
        num, den = k @ vals, k @ present.astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def blend(regional, national, k: float, n: float):
    """Pseudo-count shrinkage ``(K national + n regional) / (K + n)``."""
    if k < 0 or np.any(np.asarray(n) < 0):
        raise ValueError("K and n must be >= 0")
    n = np.asarray(n, dtype=float)
    if k == 0 and np.any(n == 0):
        raise ValueError("K and n cannot both be 0")
    if k == 0:
        return np.asarray(regional, dtype=float) * 1.0
    return (k * np.asarray(national, dtype=float) + n * np.asarray(regional, dtype=float)) / (k + n)


def project_rates(series, mode: str = "last", horizon: int = 1, n: int = 7,
                  window: int = 14, flags: Flags | None = None) -> np.ndarray:
    """Project a rate series ``horizon`` days ahead.

    ``last`` repeats the final value, ``mean_n`` repeats the mean of the
    last ``n`` values, and ``linear_extrapolation`` continues the
    least-squares line through the last ``window`` values (floored at 0).
    Missing (NaN) values are dropped first. With too little history the
    projection falls back to ``last`` and is counted in ``flags``.
    """
    if mode not in PROJECTION_MODES:
        raise ValueError(f"unknown projection mode {mode!r}")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    s = np.asarray(series, dtype=float)
    idx = np.flatnonzero(~np.isnan(s))
    if idx.size == 0:
        return np.zeros(horizon)
    last = np.full(horizon, s[idx[-1]])
    if mode == "last":
        return last
    if mode == "mean_n":
        if idx.size < n:
            if flags is not None:
                flags.projection_fallback += 1
            return last
        return np.full(horizon, s[idx[-n:]].mean())
    use = idx[-window:]
    if use.size < 2:
        if flags is not None:
            flags.projection_fallback += 1
        return last
    x = use.astype(float)
    xm = x.mean()
    slope = ((x - xm) * (s[use] - s[use].mean())).sum() / ((x - xm) ** 2).sum()
    intercept = s[use].mean() - slope * xm
    future = len(s) - 1 + np.arange(1, horizon + 1)
    return np.maximum(intercept + slope * future, 0.0)


def integrate(state0: SirdState, beta, gamma, delta):
    """Explicit daily-step SIRD integration with capped flows.

    Each day ``new = beta I S / N`` (at most ``S``), ``rec = gamma I`` and
    ``dth = delta I`` (scaled down together if they would exceed ``I``),
    all evaluated at the start of the day.

    Returns
    -------
    trajectory : ndarray, shape (T + 1, 4)
        ``S, I, R, D`` from the initial state on.
    new_cases : ndarray, shape (T,)
    """
    beta, gamma, delta = (np.asarray(x, dtype=float) for x in (beta, gamma, delta))
    if not beta.shape == gamma.shape == delta.shape:
        raise ValueError("rate series must have equal lengths")
    if np.any(beta < 0) or np.any(gamma < 0) or np.any(delta < 0):
        raise ValueError("rates must be non-negative")
    s, i, r, d, n = state0.S, state0.I, state0.R, state0.D, state0.N
    traj = [(s, i, r, d)]
    new_cases = []
    for b, g, dl in zip(beta, gamma, delta):
        new = min(b * i * s / n, s) if n > 0 else 0.0
        rec, dth = g * i, dl * i
        out = rec + dth
        if out > i:
            rec, dth = rec * i / out, dth * i / out
        s = s - new
        i = max(i + new - rec - dth, 0.0)
        r = r + rec
        d = d + dth
        traj.append((s, i, r, d))
        new_cases.append(new)
    return np.array(traj), np.array(new_cases)


@dataclass
class SirdForecast:
    rates: np.ndarray         # (M,) predicted 14-day incidence per 100k at t + T
    new_cases: np.ndarray     # (T, M) predicted daily new cases
    flags: Flags


def _nan_to_national(regional, national):
    return np.where(np.isnan(regional), national[:, None], regional)


def forecast_municipalities(cases, populations, config: SirdConfig, horizon: int,
                            national_deaths=None, rate_scale: float = 1e5) -> SirdForecast:
    """Predict each municipality's 14-day incidence ``horizon`` days after the last day.

    Parameters
    ----------
    cases : array_like, shape (T, M)
        Daily new cases up to and including the forecast origin.
    populations : array_like, shape (M,)
    config : SirdConfig
    horizon : int
    national_deaths : array_like, shape (T,), optional

    Returns
    -------
    SirdForecast
        ``rates`` is ``rate_scale * (cases in the 14 days ending at t + T) / n``
        mixing observed and predicted daily cases.
    """
    i = np.asarray(cases, dtype=float)
    pops = np.asarray(populations, dtype=float)
    if i.ndim != 2 or i.shape[1] != len(pops):
        raise ValueError("cases must be (days, municipalities) matching populations")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    flags = Flags()
    r, d, act, _ = approximate_recoveries_deaths(i, national_deaths, config.recovery_window,
                                                 config.recovery_rule, flags)
    reg = derive_rates(i, r, d, act)
    nat = derive_rates(i.sum(1), r.sum(1), d.sum(1), act.sum(1))

    new_all = np.zeros((horizon, len(pops)))
    for name in ("beta", "gamma", "delta"):
        nat_s = smooth(getattr(nat, name), config.bandwidth)
        nat_s = np.where(np.isnan(nat_s), 0.0, nat_s)
        reg_s = _nan_to_national(smooth(getattr(reg, name), config.bandwidth), nat_s)
        reg.smoothed[name] = reg_s
        nat.smoothed[name] = nat_s
        reg.blended[name] = blend(reg_s, nat_s[:, None], config.pseudo_count, pops[None, :])

    cum_cases = i.sum(0)
    for m in range(len(pops)):
        proj = [project_rates(reg.blended[name][:, m], config.projection_mode, horizon,
                              config.mean_n, config.extrapolation_window, flags)
                for name in ("beta", "gamma", "delta")]
        n = pops[m]
        s0 = max(n - cum_cases[m], 0.0)
        i0 = min(act[-1, m], n - s0)
        d0 = min(d[:, m].sum(), n - s0 - i0)
        state = SirdState(s0, i0, n - s0 - i0 - d0, d0, n)
        _, new = integrate(state, *proj)
        new_all[:, m] = new

    window = np.concatenate([i, new_all])[-INCIDENCE_WINDOW:]
    rates = rate_scale * window.sum(0) / pops
    return SirdForecast(rates, new_all, flags)


def parameter_table(rates: RateSeries, dates, ids):
    """Rows ``date,municipality_id,param,raw,smoothed,blended`` for CSV export."""
    rows = []
    for name in ("beta", "gamma", "delta"):
        raw = np.atleast_2d(getattr(rates, name).T).T
        sm = np.atleast_2d(rates.smoothed.get(name, np.full_like(raw, np.nan)).T).T
        bl = np.atleast_2d(rates.blended.get(name, np.full_like(raw, np.nan)).T).T
        for t, day in enumerate(dates):
            for m, mid in enumerate(ids):
                rows.append((day, mid, name, raw[t, m], sm[t, m], bl[t, m]))
    return rows
