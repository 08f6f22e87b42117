import numpy as np
import pytest
from hypothesis import given, strategies as st

from geoincidence.sird import (Flags, SirdConfig, SirdState, active_cases,
                               approximate_recoveries_deaths, blend, derive_rates,
                               forecast_municipalities, integrate, national_mortality,
                               parameter_table, project_rates, smooth)


def test_national_mortality_examples():
    assert national_mortality([0.0], [500.0])[0] == 0.0
    assert national_mortality([5.0], [1000.0])[0] == pytest.approx(0.005)
    flags = Flags()
    assert national_mortality([3.0], [0.0], flags)[0] == 0.0
    assert flags.zero_denominator == 1


def test_national_mortality_series(rng):
    d = rng.integers(0, 20, 30).astype(float)
    a = rng.integers(1, 5000, 30).astype(float)
    expected = [d[t] / a[t] for t in range(30)]
    np.testing.assert_allclose(national_mortality(d, a), expected, rtol=1e-15)


def test_active_cases_examples():
    assert active_cases([5, 5], [0, 0], [0, 0]).tolist() == [5, 10]
    assert active_cases([10, 0], [0, 10], [0, 0]).tolist() == [10, 0]


def test_active_cases_prefix_sum(rng):
    i = rng.integers(20, 40, 50)
    r = rng.integers(0, 10, 50)
    d = rng.integers(0, 5, 50)
    np.testing.assert_array_equal(active_cases(i, r, d), np.cumsum(i - r - d))


def test_active_cases_floor_flagged():
    flags = Flags()
    out = active_cases([1, 0, 4], [0, 5, 0], [0, 0, 0], flags)
    assert out.tolist() == [1, 0, 4]
    assert flags.negative_active == 1


def test_recoveries_without_mortality():
    cases = np.array([[10.0], [4.0], [0.0], [6.0]])
    r, d, act, mu = approximate_recoveries_deaths(cases, None, w=2)
    assert np.all(d == 0) and np.all(mu == 0)
    np.testing.assert_array_equal(r, act)


def test_deaths_follow_mortality_times_lagged_active():
    cases = np.full((30, 2), 100.0)
    deaths = np.zeros(30)
    deaths[20:] = 2.0
    r, d, act, mu = approximate_recoveries_deaths(cases, deaths, w=14)
    for t in range(20, 30):
        np.testing.assert_allclose(d[t], mu[t] * act[t - 14], rtol=1e-14)
        assert mu[t] == pytest.approx(2.0 / act[t - 14].sum())
    # the national death count is apportioned exactly across municipalities
    np.testing.assert_allclose(d[20:].sum(1), 2.0, rtol=1e-12)


def test_deaths_example_mu_one_percent():
    # one municipality holding 200 active cases w days ago and a national ratio of 0.01
    cases = np.zeros((5, 1))
    cases[0] = 400.0
    r, d, act, mu = approximate_recoveries_deaths(cases, [0, 0, 0, 0, 2.0], w=4)
    assert act[0, 0] == 200.0
    assert mu[4] == pytest.approx(0.01)
    assert d[4, 0] == pytest.approx(2.0)


def spreadsheet_oracle(cases, deaths, w):
    """Row-by-row recomputation in plain Python (literal recovery rule)."""
    n_days, n_m = len(cases), len(cases[0])
    act = [[0.0] * n_m for _ in range(n_days)]
    rec = [[0.0] * n_m for _ in range(n_days)]
    dth = [[0.0] * n_m for _ in range(n_days)]
    for t in range(n_days):
        lag = act[t - w] if t >= w else [0.0] * n_m
        tot = sum(lag)
        mu = deaths[t] / tot if tot > 0 else 0.0
        for m in range(n_m):
            prev = act[t - 1][m] if t else 0.0
            dth[t][m] = mu * lag[m]
            cur = (prev + cases[t][m]) / 2
            r = cur - dth[t][m]
            if r < 0:
                r, cur = 0.0, prev + cases[t][m] - dth[t][m]
            rec[t][m], act[t][m] = r, max(cur, 0.0)
    return np.array(rec), np.array(dth), np.array(act)


def test_three_municipality_oracle(rng):
    cases = rng.poisson([30, 5, 60], size=(40, 3)).astype(float)
    deaths = rng.poisson(1.0, 40).astype(float)
    r, d, act, _ = approximate_recoveries_deaths(cases, deaths, w=7)
    r2, d2, a2 = spreadsheet_oracle(cases.tolist(), deaths.tolist(), 7)
    np.testing.assert_allclose(r, r2, atol=1e-10)
    np.testing.assert_allclose(d, d2, atol=1e-10)
    np.testing.assert_allclose(act, a2, atol=1e-10)


def test_lagged_recovery_rule():
    cases = np.array([[10.0], [0.0], [0.0], [5.0]])
    r, d, act, _ = approximate_recoveries_deaths(cases, None, w=2, rule="lagged")
    assert r[:, 0].tolist() == [0, 0, 10, 0]
    assert act[:, 0].tolist() == [10, 10, 0, 5]


def test_derive_rates_examples():
    rs = derive_rates([10.0, 3.0], [0.0, 0.0], [0.0, 0.0], [100.0, 0.0])
    assert rs.beta[0] == pytest.approx(0.1)
    assert rs.gamma[0] == 0.0 and rs.delta[0] == 0.0
    assert not rs.present[1] and np.isnan(rs.beta[1])


def test_derive_rates_series(rng):
    i, r, d = (rng.uniform(0, 10, 30) for _ in range(3))
    a = rng.uniform(50, 100, 30)
    rs = derive_rates(i, r, d, a)
    for t in range(30):
        assert (rs.beta[t], rs.gamma[t], rs.delta[t]) == pytest.approx(
            (i[t] / a[t], r[t] / a[t], d[t] / a[t]), rel=1e-15)


def test_smooth_examples():
    np.testing.assert_allclose(smooth(np.full(12, 0.3)), 0.3, rtol=1e-14)
    s = np.full(9, np.nan)
    s[4] = 2.5
    np.testing.assert_allclose(smooth(s, 3.0), 2.5, rtol=1e-14)


def test_smooth_impulse_matches_kernel_sum():
    s = np.zeros(41)
    s[20] = 1.0
    t = np.arange(41.0)
    expected = [np.exp(-0.5 * ((u - 20) / 10) ** 2) / np.exp(-0.5 * ((u - t) / 10) ** 2).sum()
                for u in t]
    out = smooth(s, 10.0)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    np.testing.assert_allclose(out[:20], out[40:20:-1], atol=1e-12)


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=40), st.floats(0.5, 30))
def test_smooth_is_convex_combination(values, bw):
    out = smooth(values, bw)
    assert np.all(out >= min(values) - 1e-9) and np.all(out <= max(values) + 1e-9)


def test_blend_limits_and_midpoint():
    assert blend(0.2, 0.4, 0.0, 500.0) == 0.2
    assert blend(0.2, 0.4, 1000.0, 0.0) == 0.4
    assert blend(0.2, 0.4, 7.0, 7.0) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        blend(0.2, 0.4, 0.0, 0.0)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(1, 1e6),
       st.lists(st.floats(0, 1e7), min_size=2, max_size=10))
def test_blend_interpolates_monotonically(reg, nat, n, ks):
    vals = [float(blend(reg, nat, k, n)) for k in sorted(ks)]
    lo, hi = min(reg, nat), max(reg, nat)
    assert all(lo - 1e-12 <= v <= hi + 1e-12 for v in vals)
    dist = [abs(v - nat) for v in vals]
    assert all(a >= b - 1e-12 for a, b in zip(dist, dist[1:]))


def test_projection_modes():
    assert project_rates([0.05, 0.08], "last", 3).tolist() == [0.08] * 3
    np.testing.assert_allclose(project_rates([0.1, 0.3], "mean_n", 4, n=2), 0.2)
    line = 0.01 * np.arange(30)
    np.testing.assert_allclose(project_rates(line, "linear_extrapolation", 5),
                               0.01 * np.arange(30, 35), atol=1e-9)


def test_projection_floors_and_falls_back():
    assert np.all(project_rates([0.5, 0.3, 0.1], "linear_extrapolation", 5) >= 0)
    flags = Flags()
    assert project_rates([0.2], "linear_extrapolation", 2, flags=flags).tolist() == [0.2, 0.2]
    assert project_rates([0.2, 0.4], "mean_n", 1, n=5, flags=flags).tolist() == [0.4]
    assert flags.projection_fallback == 2


def test_integrate_zero_rates_is_constant():
    traj, new = integrate(SirdState(900, 50, 40, 10, 1000), [0.0] * 5, [0.0] * 5, [0.0] * 5)
    assert np.all(traj == traj[0]) and np.all(new == 0)


def test_integrate_full_recovery_in_one_step():
    traj, _ = integrate(SirdState(900, 50, 30, 20, 1000), [0.0], [1.0], [0.0])
    assert traj[1, 1] == 0.0 and traj[1, 2] == 80.0


def test_geometric_growth_closed_form():
    n = 1e15   # S/N stays above 1 - 1e-12 over the whole run
    beta, gamma = 0.25, 0.1
    traj, _ = integrate(SirdState(n - 10, 10, 0, 0, n), [beta] * 60, [gamma] * 60, [0.0] * 60)
    expected = 10 * (1 + beta - gamma) ** np.arange(61)
    assert traj[:, 0].min() / n >= 0.999
    np.testing.assert_allclose(traj[:, 1], expected, rtol=1e-9)


def test_growth_recursion_with_susceptible_fraction():
    n = 1e6
    beta, gamma = 0.3, 0.1
    traj, _ = integrate(SirdState(n - 5, 5, 0, 0, n), [beta] * 40, [gamma] * 40, [0.0] * 40)
    s, i = traj[:, 0], traj[:, 1]
    keep = s[:-1] / n >= 0.999
    pred = i[:-1] * (1 + beta * s[:-1] / n - gamma)
    np.testing.assert_allclose(i[1:][keep], pred[keep], rtol=1e-12)


@given(st.floats(1e2, 1e9), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1),
       st.integers(0, 2 ** 32 - 1))
def test_integrate_conserves_and_is_monotone(n, i_frac, r_frac, d_frac, seed):
    rng = np.random.default_rng(seed)
    i0 = n * 0.5 * i_frac
    r0 = (n - i0) * 0.3 * r_frac
    d0 = (n - i0 - r0) * 0.1 * d_frac
    state = SirdState(n - i0 - r0 - d0, i0, r0, d0, n)
    beta, gamma, delta = rng.uniform(0, 2, (3, 100))
    traj, new = integrate(state, beta, gamma, delta)
    total = traj.sum(1)
    assert np.max(np.abs(total - n)) <= 1e-9 * n
    assert np.all(traj >= 0)
    assert np.all(np.diff(traj[:, 0]) <= 0)
    assert np.all(np.diff(traj[:, 2]) >= 0) and np.all(np.diff(traj[:, 3]) >= 0)


def test_state_validation():
    with pytest.raises(ValueError):
        SirdState(10, 5, 0, 0, 20)
    with pytest.raises(ValueError):
        SirdState(-1, 21, 0, 0, 20)
    with pytest.raises(ValueError):
        SirdConfig(pseudo_count=-1)
    with pytest.raises(ValueError):
        SirdConfig(projection_mode="cubic")


def test_forecast_all_zero_history():
    out = forecast_municipalities(np.zeros((60, 3)), [1000, 2000, 3000], SirdConfig(), 7)
    assert np.all(out.rates == 0)


def test_forecast_stationary_single_municipality():
    n = 1e9
    out = forecast_municipalities(np.full((120, 1), 10.0), [n], SirdConfig(pseudo_count=0.0), 7)
    assert out.rates[0] == pytest.approx(140 / n * 1e5, rel=1e-3)
    np.testing.assert_allclose(out.new_cases[:, 0], 10.0, rtol=1e-3)


@pytest.mark.parametrize("k,horizon", [(10_000, 7), (100_000, 10)])
def test_large_pseudo_counts_accepted(k, horizon, rng):
    cases = rng.poisson(20, (90, 4)).astype(float)
    out = forecast_municipalities(cases, [50_000, 80_000, 20_000, 10_000],
                                  SirdConfig(pseudo_count=k), horizon)
    assert out.rates.shape == (4,) and np.all(out.rates >= 0)
    assert out.new_cases.shape == (horizon, 4)


def test_parameter_table_rows():
    rs = derive_rates(np.ones((3, 2)), np.zeros((3, 2)), np.zeros((3, 2)), np.full((3, 2), 4.0))
    rows = parameter_table(rs, ["d0", "d1", "d2"], ["A", "B"])
    assert len(rows) == 3 * 3 * 2
    assert rows[0][:4] == ("d0", "A", "beta", 0.25)
