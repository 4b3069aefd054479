"""Per-contest feature timelines, fixed-length sequence samples, scaling,
splitting, a synthetic generator and the binary dataset format.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import math
import os
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyTrainingSet, FormatVersionMismatch, IoFailure, NonChronologicalInput
from .ingest import ParticipantType, RatingChange, StandingsRow, Submission, Verdict
from .nncore import Rng

DEFAULT_WINDOW = 16
CONTEST_START_FALLBACK_S = 5 * 3600
TIMELINE_COLUMNS = ("contest_id", "contest_time", "rating", "rank", "solve_rating", "ac_count", "wa_count")


class FeatureMode(str, enum.Enum):
    BASE = "BASE"
    WITH_PRACTICE = "WITH_PRACTICE"

    @property
    def n_features(self) -> int:
        return 3 if self is FeatureMode.BASE else 5

    @classmethod
    def parse(cls, raw: "str | FeatureMode") -> "FeatureMode":
        if isinstance(raw, cls):
            return raw
        key = str(raw).strip().upper().replace("-", "_")
        aliases = {"PRACTICE": cls.WITH_PRACTICE, "WITH_PRACTICE": cls.WITH_PRACTICE, "BASE": cls.BASE}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown feature mode {raw!r}") from None


@dataclass(frozen=True)
class TimestampFeatures:
    contest_id: int
    contest_time: int
    rating: float
    rank: float
    solve_rating: float
    ac_count: float
    wa_count: float

    def vector(self, mode: FeatureMode) -> list[float]:
        base = [self.rating, self.rank, self.solve_rating]
        if mode is FeatureMode.WITH_PRACTICE:
            base += [self.ac_count, self.wa_count]
        return base


@dataclass(frozen=True, eq=False)
class SequenceSample:
    inputs: np.ndarray  # (window - 1, F)
    target: np.ndarray  # (F,)
    contestant_tag: str
    target_prev_rating: float

    def __eq__(self, other):
        if not isinstance(other, SequenceSample):
            return NotImplemented
        return (
            self.contestant_tag == other.contestant_tag
            and _bits_equal(self.target_prev_rating, other.target_prev_rating)
            and _arrays_bits_equal(self.inputs, other.inputs)
            and _arrays_bits_equal(self.target, other.target)
        )

    __hash__ = None


def _bits_equal(a: float, b: float) -> bool:
    return struct.pack("<d", a) == struct.pack("<d", b)


def _arrays_bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.astype("<f8").tobytes() == b.astype("<f8").tobytes()


# ---------------------------------------------------------------------------
# timeline construction


def _contest_starts(submissions: Sequence[Submission]) -> dict[int, int]:
    starts: dict[int, int] = {}
    for s in submissions:
        if s.participant_type is ParticipantType.CONTESTANT:
            prev = starts.get(s.contest_id)
            if prev is None or s.creation_time < prev:
                starts[s.contest_id] = s.creation_time
    return starts


def practice_counts(submissions: Iterable[Submission], lo: int, hi: int) -> tuple[int, int]:
    """(AC, WA) over practice submissions with ``lo < creation_time <= hi``.

    AC counts distinct problems with an OK verdict in the window; WA counts
    distinct problems attempted in the window without any OK there.
    """
    solved: set[str] = set()
    tried: set[str] = set()
    for s in submissions:
        if s.participant_type is ParticipantType.CONTESTANT:
            continue
        if lo < s.creation_time <= hi:
            tried.add(s.problem_key)
            if s.verdict is Verdict.OK:
                solved.add(s.problem_key)
    return len(solved), len(tried - solved)


def build_timeline(
    ratings: Sequence[RatingChange],
    submissions: Sequence[Submission],
    standings: Mapping[int, StandingsRow],
) -> list[TimestampFeatures]:
    """One feature row per rated contest.

    The practice window for contest k is ``(update_time[k-1], start_k]`` where
    ``start_k`` is the earliest in-contest submission (or ``update_time - 5h``
    when there is none). The first contest's window opens at the account's
    earliest submission.
    """
    if not ratings:
        raise NonChronologicalInput("rating history is empty")
    for a, b in zip(ratings, ratings[1:]):
        if b.update_time <= a.update_time:
            raise NonChronologicalInput(
                f"rating changes out of order: contest {a.contest_id} at {a.update_time}, "
                f"contest {b.contest_id} at {b.update_time}"
            )
    starts = _contest_starts(submissions)
    earliest = min((s.creation_time for s in submissions), default=None)

    timeline = []
    prev_update = None
    for rc in ratings:
        start = starts.get(rc.contest_id, rc.update_time - CONTEST_START_FALLBACK_S)
        if prev_update is None:
            lo = earliest - 1 if earliest is not None else start
        else:
            lo = prev_update
        ac, wa = practice_counts(submissions, lo, start)
        row = standings.get(rc.contest_id)
        timeline.append(
            TimestampFeatures(
                contest_id=rc.contest_id,
                contest_time=rc.update_time,
                rating=float(rc.new_rating),
                rank=float(rc.rank),
                solve_rating=float(row.points) if row is not None else 0.0,
                ac_count=float(ac),
                wa_count=float(wa),
            )
        )
        prev_update = rc.update_time
    return timeline


def timeline_to_csv(timeline: Sequence[TimestampFeatures], out: io.TextIOBase | None = None) -> str:
    buf = out if out is not None else io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMELINE_COLUMNS)
    for t in timeline:
        w.writerow([getattr(t, c) for c in TIMELINE_COLUMNS])
    return buf.getvalue() if out is None else ""


# ---------------------------------------------------------------------------
# sequences


def make_sequences(
    timeline: Sequence[TimestampFeatures],
    window: int = DEFAULT_WINDOW,
    feature_mode: FeatureMode = FeatureMode.WITH_PRACTICE,
    contestant_tag: str = "",
) -> list[SequenceSample]:
    if window < 2:
        raise ValueError("window must be at least 2")
    mode = FeatureMode.parse(feature_mode)
    if len(timeline) < window:
        return []
    rows = np.array([t.vector(mode) for t in timeline], dtype=np.float64)
    samples = []
    for start in range(len(timeline) - window + 1):
        block = rows[start : start + window]
        samples.append(
            SequenceSample(
                inputs=block[:-1].copy(),
                target=block[-1].copy(),
                contestant_tag=contestant_tag,
                target_prev_rating=float(block[-2, 0]),
            )
        )
    return samples


# ---------------------------------------------------------------------------
# scaling


@dataclass(frozen=True, eq=False)
class FeatureScaler:
    """Per-feature min-max scaling to [0, 1]; constant features pass through."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        if np.any(self.max < self.min):
            raise ValueError("scaler max must be >= min")

    @property
    def n_features(self) -> int:
        return self.min.size

    def _offset_span(self):
        const = self.max == self.min
        offset = np.where(const, 0.0, self.min)
        span = np.where(const, 1.0, self.max - self.min)
        return offset, span

    def transform(self, x: np.ndarray) -> np.ndarray:
        offset, span = self._offset_span()
        return (np.asarray(x, dtype=np.float64) - offset) / span

    def inverse(self, x: np.ndarray) -> np.ndarray:
        offset, span = self._offset_span()
        return np.asarray(x, dtype=np.float64) * span + offset

    def inverse_column(self, values: np.ndarray, j: int) -> np.ndarray:
        offset, span = self._offset_span()
        return np.asarray(values, dtype=np.float64) * span[j] + offset[j]

    def __eq__(self, other):
        if not isinstance(other, FeatureScaler):
            return NotImplemented
        return _arrays_bits_equal(self.min, other.min) and _arrays_bits_equal(self.max, other.max)

    __hash__ = None


def fit_scaler(train_samples: Sequence[SequenceSample]) -> FeatureScaler:
    if not train_samples:
        raise EmptyTrainingSet("cannot fit a scaler on zero samples")
    rows = np.concatenate([np.vstack([s.inputs, s.target[None, :]]) for s in train_samples])
    return FeatureScaler(min=rows.min(axis=0), max=rows.max(axis=0))


def apply_scaler(scaler: FeatureScaler, samples: Sequence[SequenceSample]) -> list[SequenceSample]:
    # no clipping: test rows may land outside [0, 1]
    return [
        SequenceSample(
            inputs=scaler.transform(s.inputs),
            target=scaler.transform(s.target),
            contestant_tag=s.contestant_tag,
            target_prev_rating=s.target_prev_rating,
        )
        for s in samples
    ]


def invert_scaler(scaler: FeatureScaler, vector: np.ndarray) -> np.ndarray:
    return scaler.inverse(vector)


# ---------------------------------------------------------------------------
# splitting


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(
    samples: Sequence[SequenceSample],
    ratio: float = 0.8,
    seed: int = 0,
    by_user: bool = False,
) -> tuple[list[SequenceSample], list[SequenceSample]]:
    """Seeded shuffle then cut at ``round(ratio * N)``.

    With ``by_user`` whole contestants are shuffled instead and assigned to
    train until the train side reaches the target size.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    n = len(samples)
    target = _round_half_up(ratio * n)
    rng = Rng(seed)
    if not by_user:
        order = rng.permutation(n)
        return [samples[i] for i in order[:target]], [samples[i] for i in order[target:]]

    groups: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        groups[s.contestant_tag].append(i)
    tags = sorted(groups)
    train, test = [], []
    for k in rng.permutation(len(tags)):
        idx = groups[tags[k]]
        side = train if len(train) < target else test
        side.extend(samples[i] for i in idx)
    return train, test


# ---------------------------------------------------------------------------
# bundle


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    train: list[SequenceSample]
    test: list[SequenceSample]
    scaler: FeatureScaler
    feature_mode: FeatureMode
    split_seed: int

    @property
    def n_features(self) -> int:
        return self.feature_mode.n_features

    @property
    def seq_len(self) -> int:
        for s in self.train or self.test:
            return s.inputs.shape[0]
        return DEFAULT_WINDOW - 1

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (
            self.feature_mode is other.feature_mode
            and self.split_seed == other.split_seed
            and self.scaler == other.scaler
            and self.train == other.train
            and self.test == other.test
        )

    __hash__ = None


def build_bundle(
    timelines: Mapping[str, Sequence[TimestampFeatures]],
    feature_mode: FeatureMode | str,
    window: int = DEFAULT_WINDOW,
    ratio: float = 0.8,
    split_seed: int = 0,
    by_user: bool = False,
) -> DatasetBundle:
    """Sequences from every contestant, split, then scaled with a train-only fit."""
    mode = FeatureMode.parse(feature_mode)
    samples: list[SequenceSample] = []
    for tag, timeline in timelines.items():
        samples.extend(make_sequences(timeline, window, mode, contestant_tag=tag))
    train, test = split_dataset(samples, ratio, split_seed, by_user)
    scaler = fit_scaler(train)
    return DatasetBundle(
        train=apply_scaler(scaler, train),
        test=apply_scaler(scaler, test),
        scaler=scaler,
        feature_mode=mode,
        split_seed=split_seed,
    )


def stack_samples(samples: Sequence[SequenceSample]) -> tuple[np.ndarray, np.ndarray]:
    """(B, T, F) inputs and (B, F) targets."""
    x = np.stack([s.inputs for s in samples])
    y = np.stack([s.target for s in samples])
    return x, y


# ---------------------------------------------------------------------------
# synthetic data


def generate_synthetic_timelines(
    n_users: int,
    length: int,
    seed: int,
    practice_effect: float,
    *,
    mean_ac: float = 4.0,
    rating_noise: float = 25.0,
    persistence: float = 0.9,
    intensity_spread: float = 0.6,
    start_time: int = 1_600_000_000,
    contest_gap_s: int = 7 * 86400,
) -> list[list[TimestampFeatures]]:
    """Random-walk contestants whose rating change depends on practice.

    Each user has a mean practice level and a persistent (AR(1) log-normal)
    practice intensity; the AC count for window t is that intensity rounded
    stochastically (so its expectation is the intensity), and the rating change at contest t is
    ``practice_effect * ac_t + N(0, rating_noise)``. Users take part in the same
    synthetic contests, so ranks are assigned by solve rating within each one.
    """
    if length < DEFAULT_WINDOW:
        raise ValueError(f"length must be >= {DEFAULT_WINDOW}")
    rng = Rng(seed)
    u, T = n_users, length

    base = rng.uniform(u, 1200.0, 1800.0)
    user_level = mean_ac * rng.gamma(2.0, 0.5, u)
    ell = np.empty((u, T))
    ell[:, 0] = rng.normal(u)
    innov = rng.normal((u, T))
    k = math.sqrt(1.0 - persistence**2)
    for t in range(1, T):
        ell[:, t] = persistence * ell[:, t - 1] + k * innov[:, t]
    s = intensity_spread
    intensity = user_level[:, None] * np.exp(s * ell - 0.5 * s * s)
    # stochastic rounding: E[ac] equals the intensity, variance at most 1/4
    ac = np.floor(intensity + rng.uniform((u, T)))
    wa = rng.poisson(0.5 * intensity + 0.5).astype(np.float64)

    luck = rng.normal((u, T), 0.0, rating_noise)
    delta = practice_effect * ac + luck
    rating = base[:, None] + np.cumsum(delta, axis=1)
    prev = np.concatenate([base[:, None], rating[:, :-1]], axis=1)

    solve = np.maximum(0.0, 1500.0 + 8.0 * delta + 0.5 * (prev - 1500.0) + rng.normal((u, T), 0.0, 60.0))
    # rank = 1 + number of users with strictly higher solve rating in that contest
    rank = 1.0 + (solve[None, :, :] > solve[:, None, :]).sum(axis=1)

    timelines = []
    for i in range(u):
        timelines.append(
            [
                TimestampFeatures(
                    contest_id=1000 + t,
                    contest_time=start_time + t * contest_gap_s,
                    rating=float(rating[i, t]),
                    rank=float(rank[i, t]),
                    solve_rating=float(solve[i, t]),
                    ac_count=float(ac[i, t]),
                    wa_count=float(wa[i, t]),
                )
                for t in range(T)
            ]
        )
    return timelines


def synthetic_bundle(
    n_users: int,
    length: int,
    seed: int,
    practice_effect: float,
    feature_mode: FeatureMode | str,
    *,
    window: int = DEFAULT_WINDOW,
    ratio: float = 0.8,
    split_seed: int = 0,
    **generator_kw,
) -> DatasetBundle:
    timelines = generate_synthetic_timelines(n_users, length, seed, practice_effect, **generator_kw)
    return build_bundle(
        {f"synthetic-{i:04d}": tl for i, tl in enumerate(timelines)},
        feature_mode,
        window=window,
        ratio=ratio,
        split_seed=split_seed,
    )


# ---------------------------------------------------------------------------
# binary format
#
#   magic    8 bytes  b"CFSEQ001"
#   header   <IIIIqB  n_train, n_test, seq_len, n_features, split_seed, feature_mode (0 BASE, 1 WITH_PRACTICE)
#   tags     per sample (train then test): <H byte length + utf-8
#   scaler   2*F float64 (min then max)
#   samples  per sample (train then test): seq_len*F inputs, F target, 1 prev rating; all <f8

DATASET_MAGIC = b"CFSEQ001"
_HEADER = struct.Struct("<IIIIqB")
_MODES = (FeatureMode.BASE, FeatureMode.WITH_PRACTICE)


def dataset_to_bytes(bundle: DatasetBundle) -> bytes:
    samples = bundle.train + bundle.test
    F = bundle.n_features
    T = bundle.seq_len
    out = io.BytesIO()
    out.write(DATASET_MAGIC)
    out.write(_HEADER.pack(len(bundle.train), len(bundle.test), T, F, bundle.split_seed, _MODES.index(bundle.feature_mode)))
    for s in samples:
        tag = s.contestant_tag.encode("utf-8")
        out.write(struct.pack("<H", len(tag)))
        out.write(tag)
    out.write(np.asarray(bundle.scaler.min, dtype="<f8").tobytes())
    out.write(np.asarray(bundle.scaler.max, dtype="<f8").tobytes())
    for s in samples:
        if s.inputs.shape != (T, F) or s.target.shape != (F,):
            raise ValueError("sample shape does not match bundle header")
        out.write(np.asarray(s.inputs, dtype="<f8").tobytes())
        out.write(np.asarray(s.target, dtype="<f8").tobytes())
        out.write(struct.pack("<d", s.target_prev_rating))
    return out.getvalue()


def dataset_from_bytes(data: bytes) -> DatasetBundle:
    if len(data) < len(DATASET_MAGIC) or data[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise FormatVersionMismatch("not a CFSEQ001 dataset file")
    pos = len(DATASET_MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatVersionMismatch("dataset file is truncated")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    n_train, n_test, T, F, seed, mode_idx = _HEADER.unpack(take(_HEADER.size))
    if mode_idx >= len(_MODES) or _MODES[mode_idx].n_features != F:
        raise FormatVersionMismatch(f"inconsistent header: mode {mode_idx}, F={F}")
    n = n_train + n_test
    tags = []
    for _ in range(n):
        (k,) = struct.unpack("<H", take(2))
        try:
            tags.append(take(k).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatVersionMismatch("bad contestant tag") from exc
    lo = np.frombuffer(take(8 * F), dtype="<f8").astype(np.float64)
    hi = np.frombuffer(take(8 * F), dtype="<f8").astype(np.float64)
    per = T * F + F + 1
    body = np.frombuffer(take(8 * per * n), dtype="<f8").astype(np.float64).reshape(n, per)
    if pos != len(data):
        raise FormatVersionMismatch("trailing bytes after dataset payload")
    samples = [
        SequenceSample(
            inputs=body[i, : T * F].reshape(T, F).copy(),
            target=body[i, T * F : T * F + F].copy(),
            contestant_tag=tags[i],
            target_prev_rating=float(body[i, -1]),
        )
        for i in range(n)
    ]
    try:
        scaler = FeatureScaler(min=lo, max=hi)
    except ValueError as exc:
        raise FormatVersionMismatch(str(exc)) from exc
    return DatasetBundle(
        train=samples[:n_train],
        test=samples[n_train:],
        scaler=scaler,
        feature_mode=_MODES[mode_idx],
        split_seed=seed,
    )


def save_dataset(bundle: DatasetBundle, path: str | os.PathLike) -> None:
    data = dataset_to_bytes(bundle)
    try:
        tmp = f"{os.fspath(path)}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write dataset {path}: {exc}") from exc


def load_dataset(path: str | os.PathLike) -> DatasetBundle:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read dataset {path}: {exc}") from exc
    return dataset_from_bytes(data)


def bundle_digest(bundle: DatasetBundle) -> str:
    return hashlib.sha256(dataset_to_bytes(bundle)).hexdigest()


def train_digest(bundle: DatasetBundle) -> str:
    """Hash of everything training may see: mode, split seed, scaler and train samples."""
    h = hashlib.sha256()
    h.update(f"{bundle.feature_mode.value}:{bundle.split_seed}:".encode())
    h.update(np.asarray(bundle.scaler.min, dtype="<f8").tobytes())
    h.update(np.asarray(bundle.scaler.max, dtype="<f8").tobytes())
    for s in bundle.train:
        h.update(s.contestant_tag.encode("utf-8") + b"\0")
        h.update(np.asarray(s.inputs, dtype="<f8").tobytes())
        h.update(np.asarray(s.target, dtype="<f8").tobytes())
        h.update(struct.pack("<d", s.target_prev_rating))
    return h.hexdigest()
