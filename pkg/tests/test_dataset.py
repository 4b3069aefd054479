import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfpredict.dataset import (
    DATASET_MAGIC,
    FeatureMode,
    FeatureScaler,
    SequenceSample,
    build_bundle,
    build_timeline,
    dataset_from_bytes,
    dataset_to_bytes,
    fit_scaler,
    generate_synthetic_timelines,
    load_dataset,
    make_sequences,
    practice_counts,
    save_dataset,
    split_dataset,
    timeline_to_csv,
)
from cfpredict.errors import EmptyTrainingSet, FormatVersionMismatch, IoFailure, NonChronologicalInput
from cfpredict.ingest import ParticipantType, RatingChange, StandingsRow, Submission, Verdict

from conftest import random_timeline, small_bundle

HOUR = 3600


def rc(cid, t, rating=1500, rank=10):
    return RatingChange(cid, f"Round {cid}", rank, rating - 10, rating, t)


def sub(i, t, problem, verdict=Verdict.OK, ptype=ParticipantType.PRACTICE, cid=1):
    return Submission(i, cid, problem, t, verdict, ptype)


# --- timeline -------------------------------------------------------------


def test_single_contest_no_submissions():
    tl = build_timeline([rc(1, 10 * HOUR, 1400)], [], {})
    assert len(tl) == 1
    assert tl[0].ac_count == 0 and tl[0].wa_count == 0
    assert tl[0].rating == 1400.0 and tl[0].solve_rating == 0.0


def test_distinct_problem_counts():
    subs = [
        sub(1, 100, "1/A", Verdict.WRONG_ANSWER),
        sub(2, 110, "1/A", Verdict.WRONG_ANSWER),
        sub(3, 120, "1/A", Verdict.OK),
        sub(4, 130, "1/B", Verdict.WRONG_ANSWER),
    ]
    assert practice_counts(subs, 0, 1000) == (1, 1)


def test_solved_twice_counts_once():
    subs = [sub(1, 100, "1/A"), sub(2, 200, "1/A")]
    assert practice_counts(subs, 0, 1000) == (1, 0)


def test_contestant_submissions_excluded_and_window_bounds():
    subs = [
        sub(1, 100, "1/A"),
        sub(2, 150, "1/B", ptype=ParticipantType.CONTESTANT),
        sub(3, 200, "1/C"),
        sub(4, 201, "1/D"),
    ]
    # (lo, hi]: 100 is excluded, 200 included
    assert practice_counts(subs, 100, 200) == (1, 0)


def test_practice_windows_between_contests():
    # contest 1 starts at 10h (first contestant submission), rating update at 13h
    # contest 2 has no contestant submissions: start falls back to update - 5h = 45h
    ratings = [rc(1, 13 * HOUR, 1500), rc(2, 50 * HOUR, 1550)]
    subs = [
        sub(1, 2 * HOUR, "9/A"),
        sub(2, 10 * HOUR, "1/A", ptype=ParticipantType.CONTESTANT),
        sub(3, 11 * HOUR, "9/B"),  # after contest 1 start, before its update: in neither window
        sub(4, 20 * HOUR, "9/C"),
        sub(5, 21 * HOUR, "9/D", Verdict.WRONG_ANSWER),
        sub(6, 46 * HOUR, "9/E"),  # after contest 2 start
    ]
    standings = {1: StandingsRow(1, "h", 1500.0, 3)}
    tl = build_timeline(ratings, subs, standings)
    assert (tl[0].ac_count, tl[0].wa_count) == (1, 0)
    assert (tl[1].ac_count, tl[1].wa_count) == (1, 1)
    assert tl[0].solve_rating == 1500.0 and tl[1].solve_rating == 0.0
    assert tl[0].rank == 10.0  # the rating record's rank, not the standings one


@pytest.mark.parametrize(
    "ratings",
    [[], [rc(1, 100), rc(2, 100)], [rc(1, 200), rc(2, 100)]],
)
def test_non_chronological_rejected(ratings):
    with pytest.raises(NonChronologicalInput):
        build_timeline(ratings, [], {})


def test_timeline_csv_columns():
    text = timeline_to_csv(build_timeline([rc(1, 100)], [], {}))
    assert text.splitlines()[0] == "contest_id,contest_time,rating,rank,solve_rating,ac_count,wa_count"
    assert len(text.splitlines()) == 2


# --- sequences ------------------------------------------------------------


@pytest.mark.parametrize("length,expected", [(0, 0), (1, 0), (15, 0), (16, 1), (20, 5), (40, 25)])
def test_sequence_counts(length, expected):
    tl = random_timeline(np.random.default_rng(length), length)
    assert len(make_sequences(tl)) == expected


def naive_windows(tl, mode):
    rows = [t.vector(mode) for t in tl]
    out = []
    for s in range(len(rows)):
        if s + 16 <= len(rows):
            out.append((rows[s : s + 15], rows[s + 15]))
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.sampled_from(list(FeatureMode)), st.integers(0, 2**32 - 1))
def test_sequences_match_naive_slicing(length, mode, seed):
    tl = random_timeline(np.random.default_rng(seed), length)
    samples = make_sequences(tl, 16, mode)
    oracle = naive_windows(tl, mode)
    assert len(samples) == len(oracle) == max(0, length - 15)
    for s, (inputs, target) in zip(samples, oracle):
        assert s.inputs.tolist() == inputs
        assert s.target.tolist() == target
        assert s.inputs.shape == (15, mode.n_features)
        assert s.target_prev_rating == inputs[-1][0]


def test_feature_order():
    tl = random_timeline(np.random.default_rng(0), 1)
    t = tl[0]
    assert t.vector(FeatureMode.BASE) == [t.rating, t.rank, t.solve_rating]
    assert t.vector(FeatureMode.WITH_PRACTICE) == [t.rating, t.rank, t.solve_rating, t.ac_count, t.wa_count]


# --- scaler ---------------------------------------------------------------


def sample(inputs, target):
    inputs = np.asarray(inputs, dtype=np.float64)
    return SequenceSample(inputs, np.asarray(target, dtype=np.float64), "", float(inputs[-1, 0]))


def test_scaler_constant_column_passes_through():
    s = fit_scaler([sample([[1500.0, 1.0]] * 3, [1500.0, 2.0])])
    assert s.transform(np.array([1500.0, 1.0]))[0] == 1500.0
    assert s.inverse(np.array([1500.0, 2.0]))[0] == 1500.0


def test_scaler_hand_value():
    s = FeatureScaler(np.array([1200.0]), np.array([1800.0]))
    assert s.transform(np.array([1500.0]))[0] == 0.5


def test_scaler_fits_on_inputs_and_targets():
    s = fit_scaler([sample([[1.0], [2.0]], [9.0])])
    assert s.min[0] == 1.0 and s.max[0] == 9.0


def test_scaler_does_not_clip():
    s = FeatureScaler(np.array([0.0]), np.array([10.0]))
    assert s.transform(np.array([20.0]))[0] == 2.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_scaler_round_trip(seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-1000, 1000, 5)
    s = FeatureScaler(lo, lo + rng.uniform(0, 3000, 5))
    x = rng.uniform(-5000, 5000, (7, 5))
    back = s.inverse(s.transform(x))
    assert np.all(np.abs(back - x) <= 1e-9 * np.maximum(1.0, np.abs(x)))


def test_empty_training_set():
    with pytest.raises(EmptyTrainingSet):
        fit_scaler([])


# --- split ----------------------------------------------------------------


def tagged(n, users=1):
    return [
        SequenceSample(np.full((2, 1), float(i)), np.array([float(i)]), f"u{i % users}", float(i))
        for i in range(n)
    ]


def test_split_sizes():
    train, test = split_dataset(tagged(10), 0.8, seed=1)
    assert (len(train), len(test)) == (8, 2)


def test_split_deterministic():
    a = split_dataset(tagged(50), 0.8, seed=4)
    b = split_dataset(tagged(50), 0.8, seed=4)
    assert [s.target[0] for s in a[0]] == [s.target[0] for s in b[0]]
    c = split_dataset(tagged(50), 0.8, seed=5)
    assert [s.target[0] for s in a[0]] != [s.target[0] for s in c[0]]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 80), st.integers(1, 12), st.integers(0, 1000))
def test_split_partitions_all_samples(n, users, seed):
    samples = tagged(n, users)
    train, test = split_dataset(samples, 0.8, seed)
    assert sorted(s.target[0] for s in train + test) == list(range(n))
    assert len(train) == math.floor(0.8 * n + 0.5)
    tr, te = split_dataset(samples, 0.8, seed, by_user=True)
    assert not {s.contestant_tag for s in tr} & {s.contestant_tag for s in te}
    assert len(tr) + len(te) == n


# --- synthetic generator --------------------------------------------------


def deltas(tls):
    r = np.array([[t.rating for t in tl] for tl in tls])
    return np.diff(r, axis=1)


def test_synthetic_zero_effect_mean():
    d = deltas(generate_synthetic_timelines(100, 101, seed=0, practice_effect=0.0))
    assert d.size == 10_000
    se = d.std(ddof=1) / math.sqrt(d.size)
    assert abs(d.mean()) < 3 * se


def test_synthetic_effect_mean():
    d = deltas(generate_synthetic_timelines(100, 101, seed=1, practice_effect=5.0, mean_ac=4.0))
    # ac levels are per-user, so the standard error comes from per-user means
    per_user = d.mean(axis=1)
    se = per_user.std(ddof=1) / math.sqrt(per_user.size)
    assert abs(d.mean() - 20.0) < 3 * se
    assert abs(d.mean() - 20.0) < 2.5


def test_synthetic_ac_drives_delta():
    tls = generate_synthetic_timelines(50, 40, seed=2, practice_effect=10.0)
    d = deltas(tls).ravel()
    ac = np.array([[t.ac_count for t in tl] for tl in tls])[:, 1:].ravel()
    slope = np.polyfit(ac, d, 1)[0]
    assert slope == pytest.approx(10.0, abs=1.0)


def test_synthetic_ranks_follow_solve_rating():
    tls = generate_synthetic_timelines(8, 16, seed=3, practice_effect=5.0)
    for t in range(16):
        rows = sorted((tl[t] for tl in tls), key=lambda r: -r.solve_rating)
        assert [r.rank for r in rows] == sorted(r.rank for r in rows)
        assert rows[0].rank == 1.0


def test_synthetic_deterministic():
    a = generate_synthetic_timelines(3, 20, seed=9, practice_effect=5.0)
    b = generate_synthetic_timelines(3, 20, seed=9, practice_effect=5.0)
    assert a == b


def test_synthetic_rejects_short_length():
    with pytest.raises(ValueError):
        generate_synthetic_timelines(3, 15, seed=0, practice_effect=1.0)


# --- bundle and binary format ---------------------------------------------


def test_bundle_shapes():
    b = small_bundle(FeatureMode.BASE)
    assert b.n_features == 3 and b.seq_len == 15
    assert len(b.train) + len(b.test) == 4 * 5


def test_modes_share_the_split():
    base = small_bundle(FeatureMode.BASE, split_seed=7)
    prac = small_bundle(FeatureMode.WITH_PRACTICE, split_seed=7)
    key = lambda s: (s.contestant_tag, s.target_prev_rating)
    assert [key(s) for s in base.test] == [key(s) for s in prac.test]


def test_dataset_round_trip(tmp_path):
    b = small_bundle()
    path = tmp_path / "d.bin"
    save_dataset(b, path)
    assert load_dataset(path) == b
    assert dataset_to_bytes(load_dataset(path)) == dataset_to_bytes(b)


def test_dataset_wrong_magic():
    data = dataset_to_bytes(small_bundle())
    with pytest.raises(FormatVersionMismatch):
        dataset_from_bytes(b"CFSEQ999" + data[len(DATASET_MAGIC) :])


def test_dataset_truncated_at_every_offset():
    tls = generate_synthetic_timelines(1, 17, seed=0, practice_effect=1.0)
    data = dataset_to_bytes(build_bundle({"a": tls[0]}, FeatureMode.BASE))
    for cut in range(len(data)):
        with pytest.raises((FormatVersionMismatch, IoFailure)):
            dataset_from_bytes(data[:cut])
    with pytest.raises(FormatVersionMismatch):
        dataset_from_bytes(data + b"\0")


def test_load_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        load_dataset(tmp_path / "nope.bin")
