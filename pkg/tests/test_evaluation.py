import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfpredict.dataset import FeatureMode, generate_synthetic_timelines
from cfpredict.errors import DegenerateVariance, EmptyInput, LengthMismatch, ZeroBase
from cfpredict.evaluation import (
    REPORT_COLUMNS,
    direction_accuracy,
    format_table,
    mae,
    metrics_report,
    mse,
    percent_change,
    r2,
    rating_to_title,
    reports_to_csv,
    rmse,
    run_ablation,
)
from cfpredict.models import ModelKind
from cfpredict.train import TrainConfig


def test_perfect_predictions():
    y = [1500.0, 1620.0, 1733.0]
    assert mae(y, y) == mse(y, y) == rmse(y, y) == 0.0
    assert r2(y, y) == 1.0


def test_hand_example():
    assert mae([0, 0], [3, 4]) == 3.5
    assert mse([0, 0], [3, 4]) == 12.5
    assert abs(rmse([0, 0], [3, 4]) - math.sqrt(12.5)) <= 1e-12
    assert abs(rmse([0, 0], [3, 4]) - 3.5355339059327378) <= 1e-12


def test_r2_examples():
    assert r2([1, 2, 3], [1, 2, 4]) == 0.5
    y = [1.0, 4.0, 7.0]
    assert r2(y, [4.0] * 3) == 0.0


def test_metric_errors():
    with pytest.raises(LengthMismatch):
        mae([1, 2], [1])
    with pytest.raises(EmptyInput):
        mse([], [])
    with pytest.raises(DegenerateVariance):
        r2([5, 5, 5], [1, 2, 3])


vectors = st.lists(st.floats(-4000, 4000), min_size=2, max_size=60)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_rmse_squared_is_mse(data):
    y = data.draw(vectors)
    p = data.draw(st.lists(st.floats(-4000, 4000), min_size=len(y), max_size=len(y)))
    m = mse(y, p)
    assert abs(rmse(y, p) ** 2 - m) <= 1e-9 * max(m, 1e-300)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_metric_properties(data):
    y = data.draw(vectors)
    p = data.draw(st.lists(st.floats(-4000, 4000), min_size=len(y), max_size=len(y)))
    assert mae(y, p) >= 0 and mse(y, p) >= 0
    assert mae(y, p) == mae(p, y)
    # mae <= rmse (Jensen), up to rounding
    assert mae(y, p) <= rmse(y, p) * (1 + 1e-12) + 1e-12
    perm = np.random.default_rng(len(y)).permutation(len(y))
    assert mae(np.array(y)[perm], np.array(p)[perm]) == mae(y, p)
    if np.ptp(y) > 1e-6:  # tinier spreads underflow when squared
        assert r2(y, p) <= 1.0


def test_direction_accuracy():
    assert direction_accuracy([1510, 1480], [1500, 1500], [1510, 1480]) == 1.0
    assert direction_accuracy([1520], [1500], [1490]) == 0.0
    assert direction_accuracy([1520, 1500, 1500], [1500, 1500, 1500], [1530, 1500, 1510]) == 2 / 3
    with pytest.raises(LengthMismatch):
        direction_accuracy([1], [1, 2], [1])


@pytest.mark.parametrize("pred,prev,expected", [(1500, 1500, 0.0), (1650, 1500, 10.0), (1350, 1500, -10.0)])
def test_percent_change(pred, prev, expected):
    assert percent_change(pred, prev) == expected


def test_percent_change_zero_base():
    with pytest.raises(ZeroBase):
        percent_change(100, 0)


@pytest.mark.parametrize(
    "rating,title",
    [
        (0, "Newbie"),
        (1199, "Newbie"),
        (1200, "Pupil"),
        (1399, "Pupil"),
        (1400, "Specialist"),
        (1500, "Specialist"),
        (1599, "Specialist"),
        (1600, "Expert"),
        (1899, "Expert"),
        (1900, "Candidate Master"),
        (2099, "Candidate Master"),
        (2100, "Master"),
        (2299, "Master"),
        (2300, "International Master"),
        (2399, "International Master"),
        (2400, "Grandmaster"),
        (2450, "Grandmaster"),
        (2599, "Grandmaster"),
        (2600, "International Grandmaster"),
        (2999, "International Grandmaster"),
        (3000, "Legendary Grandmaster"),
        (3900, "Legendary Grandmaster"),
    ],
)
def test_rating_titles(rating, title):
    assert rating_to_title(rating)[0] == title


def test_grandmaster_division_and_color():
    assert rating_to_title(2400) == ("Grandmaster", "Division 1", "Red")


def test_report_csv_and_table():
    rep = metrics_report(ModelKind.GRU, FeatureMode.BASE, [1510.0, 1490.0], [1500.0, 1480.0], [1495.0, 1505.0], seed=3)
    assert rep.rmse == 10.0 and rep.mae == 10.0 and rep.n_test == 2
    assert rep.r2 == 0.0  # errors as large as the spread of the targets
    assert rep.direction_accuracy == 1.0
    lines = reports_to_csv([rep]).splitlines()
    assert lines[0].split(",") == list(REPORT_COLUMNS)
    assert lines[1].startswith("GRU,BASE,10.0,100.0,10.0,")
    table = format_table({ModelKind.GRU: rep, ModelKind.LSTM: rep}, "t")
    header = table.splitlines()[1]
    assert header.index("LSTM") < header.index("GRU")
    with pytest.raises(DegenerateVariance):
        metrics_report(ModelKind.GRU, FeatureMode.BASE, [1510.0, 1490.0], [1500.0, 1500.0], [1495.0, 1505.0])


def test_ablation_structure():
    tls = generate_synthetic_timelines(4, 20, seed=0, practice_effect=5.0)
    res = run_ablation(
        {f"u{i}": t for i, t in enumerate(tls)},
        kinds=["lstm", "gru"],
        seeds=(0, 1),
        train_cfg=TrainConfig(epochs=2, batch_size=8),
        n_layers=1,
        hidden=4,
        dropout=0.0,
        dense_hidden=4,
    )
    for mode in FeatureMode:
        assert len(res.runs[mode]) == 4
        assert {r.seed for r in res.runs[mode]} == {0, 1}
        assert set(res.tables[mode]) == {ModelKind.LSTM, ModelKind.GRU}
        for cell in res.tables[mode].values():
            assert abs(cell.rmse**2 - cell.mse) <= 1e-9 * cell.mse
            assert cell.n_test == 2 * res.runs[mode][0].n_test
    assert res.runs[FeatureMode.BASE][0].n_test == res.runs[FeatureMode.WITH_PRACTICE][0].n_test
