import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from geoincidence.evaluation import (GridMismatchError, HistoryView, LeakageError, Persistence,
                                     forecast_origins, rmse, rolling_origin, smape,
                                     summarize_scores, write_scores_csv, write_summary_csv)

rates = st.floats(0, 1e5, allow_nan=False)


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(math.sqrt(12.5), abs=1e-12)


def test_smape_examples():
    assert smape([5.0, 7.0], [5.0, 7.0]) == 0.0
    assert smape([100.0], [300.0]) == 1.0
    assert smape([0.0], [4.0]) == 2.0
    assert smape([0.0, 0.0], [0.0, 0.0]) == 0.0


def test_nodata_cells_excluded():
    assert rmse([np.nan, 0.0, 0.0], [1e9, 3.0, 4.0]) == pytest.approx(math.sqrt(12.5))
    with pytest.raises(GridMismatchError):
        rmse([1.0, 2.0], [1.0])


@given(st.lists(st.tuples(rates, rates), min_size=1, max_size=30), st.floats(-1e3, 1e3))
def test_rmse_translation_invariant(pairs, c):
    z, zh = np.array(pairs).T
    assert rmse(z + c, zh + c) == pytest.approx(rmse(z, zh), rel=1e-6, abs=1e-6)


@given(st.lists(st.tuples(rates, rates), min_size=1, max_size=30), st.floats(1e-3, 1e3))
def test_scaling(pairs, a):
    z, zh = np.array(pairs).T
    assert rmse(a * z, a * zh) == pytest.approx(a * rmse(z, zh), rel=1e-9, abs=1e-9)
    assert smape(a * z, a * zh) == pytest.approx(smape(z, zh), rel=1e-9, abs=1e-12)


def test_smape_bounded_on_random_pairs():
    rng = np.random.default_rng(0)
    z = rng.exponential(100, 10_000) * rng.integers(0, 2, 10_000)
    zh = rng.exponential(100, 10_000) * rng.integers(0, 2, 10_000)
    terms = [smape([a], [b]) for a, b in zip(z, zh)]
    assert min(terms) >= 0.0 and max(terms) <= 2.0


def test_history_view_guards_the_future():
    view = HistoryView({"fields": np.arange(10.0)}, t=4)
    assert view.get("fields").tolist() == [0, 1, 2, 3, 4]
    assert view.day("fields", 4) == 4
    with pytest.raises(LeakageError):
        view.day("fields", 5)
    with pytest.raises(LeakageError):
        view.get("fields", until=6)
    with pytest.raises(IndexError):
        view.day("fields", -1)


class Peeker:
    name = "peeker"

    def fit(self, history, horizon):
        pass

    def predict(self, history, horizon):
        return history.day("fields", history.t + 1)

    def update(self, history, horizon):
        pass


def test_future_peeking_forecaster_always_rejected():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(10, 30))
        gold = rng.uniform(0, 5, (n, 4))
        with pytest.raises(LeakageError):
            rolling_origin(Peeker(), {"fields": gold}, gold, int(rng.integers(1, 4)),
                           int(rng.integers(2, 6)))


def test_persistence_on_constant_data_scores_zero():
    gold = np.full((30, 9), 42.0)
    res = rolling_origin(Persistence(), {"fields": gold}, gold, 7, 10)
    assert all(s.rmse == 0.0 and s.smape == 0.0 for s in res.scores)


def test_number_of_scores_and_alignment():
    gold = np.arange(20.0)[:, None] * np.ones((1, 2))
    res = rolling_origin(Persistence(), {"fields": gold}, gold, 2, 16)
    assert len(res.scores) == 3
    assert res.target_index.tolist() == [17, 18, 19]
    assert res.predictions[:, 0].tolist() == [15.0, 16.0, 17.0]
    assert forecast_origins(20, 16, 2) == range(15, 18)
    with pytest.raises(ValueError):
        forecast_origins(20, 20, 2)


class Deferred:
    """Returns nothing at predict time and resolves every origin at the end."""
    name = "deferred"

    def __init__(self):
        self.seen = []

    def fit(self, history, horizon):
        pass

    def predict(self, history, horizon):
        self.seen.append(history.t)
        return None

    def update(self, history, horizon):
        pass

    def resolve(self):
        return {t: np.full(3, float(t)) for t in self.seen}


def test_deferred_predictions_are_resolved():
    gold = np.repeat(np.arange(12.0)[:, None], 3, axis=1)
    res = rolling_origin(Deferred(), {"fields": gold}, gold, 1, 8)
    assert res.predictions[:, 0].tolist() == [7.0, 8.0, 9.0, 10.0]


def test_summary_matches_recomputation_from_csv(tmp_path):
    rng = np.random.default_rng(5)
    gold = rng.uniform(0, 100, (40, 6))
    res = rolling_origin(Persistence(), {"fields": gold}, gold, 7, 20)
    write_scores_csv(tmp_path / "scores.csv", [res])
    write_summary_csv(tmp_path / "summary.csv", [res])
    with open(tmp_path / "scores.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["date", "model", "horizon", "rmse", "smape"]
    r = np.array([float(x["rmse"]) for x in rows])
    m = np.array([float(x["smape"]) for x in rows])
    with open(tmp_path / "summary.csv") as fh:
        (summary,) = list(csv.DictReader(fh))
    assert list(summary) == ["model", "horizon", "rmse_mean", "rmse_std", "smape_mean",
                             "smape_std"]
    assert float(summary["rmse_mean"]) == pytest.approx(r.mean(), rel=1e-5)
    assert float(summary["rmse_std"]) == pytest.approx(r.std(), rel=1e-5)
    assert float(summary["smape_mean"]) == pytest.approx(m.mean(), rel=1e-5)
    assert float(summary["smape_std"]) == pytest.approx(m.std(), rel=1e-5)
    s = summarize_scores(res.scores)
    assert s["rmse_mean"] == pytest.approx(np.mean([x.rmse for x in res.scores]))
