"""Aggregate covariates for the Cox models and per-step sequence tensors
for the recurrent models.

Sequence steps default to active days (calendar days with at least one
session); a per-session mode is available. All continuous channels are
z-scored with statistics frozen from the training split.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, UserHistory
from .errors import DataError, ValidationError

DERIVED_DISCRETE = ("day_of_week", "day_of_month", "hour_of_day")
DERIVED_CARDINALITIES = {"day_of_week": 7, "day_of_month": 31, "hour_of_day": 24}


@dataclass(frozen=True)
class FeatureConfig:
    max_steps: int = 64
    per_session_steps: bool = False
    variance_threshold: float = 0.9

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValidationError(f"max_steps must be >= 1, got {self.max_steps}")
        if not (0 < self.variance_threshold < 1):
            raise ValidationError(
                f"variance_threshold must lie in (0, 1), got {self.variance_threshold}"
            )


def count_active_days(user: UserHistory) -> int:
    return len({math.floor(s.start_time) for s in user.sessions})


def dataset_continuous_markers(dataset: Dataset) -> list[str]:
    names: set[str] = set()
    for user in dataset.users:
        for s in user.sessions:
            names.update(s.continuous_markers)
    return sorted(names)


def dataset_discrete_markers(dataset: Dataset) -> list[str]:
    names: set[str] = set()
    for user in dataset.users:
        for s in user.sessions:
            names.update(s.discrete_markers)
    return sorted(names)


# ---------------------------------------------------------------------------
# aggregate features (Cox covariates)

@dataclass
class AggregateMatrix:
    X: np.ndarray  # (n_users, n_features)
    feature_names: list[str]
    user_ids: list[str]
    continuous_markers: list[str]


def build_aggregates(dataset: Dataset, continuous_markers: Sequence[str] | None = None) -> AggregateMatrix:
    """One covariate vector per user, summarizing their observed history.

    Single-session users get zero gap statistics plus a trailing missing-gap
    flag so the degenerate case stays distinguishable.
    """
    markers = (
        list(continuous_markers)
        if continuous_markers is not None
        else dataset_continuous_markers(dataset)
    )
    names = (
        ["session_count", "active_day_count", "mean_gap", "std_gap", "mean_duration"]
        + [f"mean_{m}" for m in markers]
        + ["absence_time", "observation_span", "missing_gap_flag"]
    )
    rows = []
    ids = []
    for user in dataset.users:
        gaps = np.asarray(user.return_targets)
        durations = [s.duration for s in user.sessions]
        row = [
            float(len(user.sessions)),
            float(count_active_days(user)),
            float(gaps.mean()) if gaps.size else 0.0,
            float(gaps.std()) if gaps.size >= 2 else 0.0,
            float(np.mean(durations)),
        ]
        for m in markers:
            vals = [s.continuous_markers.get(m, 0.0) for s in user.sessions]
            row.append(float(np.mean(vals)))
        row.append(dataset.absence_time(user))
        row.append(user.last_session_start - user.first_session_start)
        row.append(0.0 if gaps.size else 1.0)
        rows.append(row)
        ids.append(user.user_id)
    X = np.asarray(rows, dtype=float).reshape(len(rows), len(names))
    if not np.all(np.isfinite(X)):
        raise ValidationError("aggregate features contain non-finite entries")
    return AggregateMatrix(X=X, feature_names=names, user_ids=ids, continuous_markers=markers)


@dataclass
class Standardization:
    feature_names: list[str]
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, feature_names: Sequence[str]) -> "Standardization":
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        std = np.where(std == 0.0, 1.0, std)
        return cls(list(feature_names), mean, std)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std

    def to_dict(self) -> dict:
        return {
            "feature_names": self.feature_names,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(list(d["feature_names"]), np.asarray(d["mean"]), np.asarray(d["std"]))


# ---------------------------------------------------------------------------
# sequence features (recurrent models)

@dataclass
class UserSequence:
    user_id: str
    disc: np.ndarray  # (T, n_disc) int64
    cont: np.ndarray  # (T, n_cont) float64, normalized
    targets: np.ndarray  # (T,) raw gap after each step, in days
    is_censored: bool
    active_day_count: int  # full count, before truncation
    last_session_end: float
    absence_time: float
    horizon_gap: float

    def __len__(self) -> int:
        return self.disc.shape[0]


@dataclass
class SequenceStats:
    """Frozen encoding/normalization state, fitted on the training split."""

    discrete_features: list[str]
    cardinalities: list[int]
    vocabs: dict[str, dict[str, int]]  # marker-backed features only
    cont_channels: list[str]
    mean: np.ndarray
    std: np.ndarray
    continuous_markers: list[str]
    max_steps: int
    per_session_steps: bool

    def encode_discrete(self, name: str, value) -> int:
        vocab = self.vocabs.get(name)
        if vocab is None:
            return int(value)
        card = self.cardinalities[self.discrete_features.index(name)]
        return vocab.get(str(value), card)  # unseen categories -> unknown slot

    def to_dict(self) -> dict:
        return {
            "discrete_features": self.discrete_features,
            "cardinalities": self.cardinalities,
            "vocabs": self.vocabs,
            "cont_channels": self.cont_channels,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "continuous_markers": self.continuous_markers,
            "max_steps": self.max_steps,
            "per_session_steps": self.per_session_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SequenceStats":
        return cls(
            discrete_features=list(d["discrete_features"]),
            cardinalities=[int(c) for c in d["cardinalities"]],
            vocabs={k: dict(v) for k, v in d["vocabs"].items()},
            cont_channels=list(d["cont_channels"]),
            mean=np.asarray(d["mean"]),
            std=np.asarray(d["std"]),
            continuous_markers=list(d["continuous_markers"]),
            max_steps=int(d["max_steps"]),
            per_session_steps=bool(d["per_session_steps"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "SequenceStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _user_steps(user: UserHistory, dataset: Dataset, markers: list[str],
                marker_features: list[str], per_session: bool):
    """Raw (discrete values, continuous values, elapsed, target) step rows."""
    weekday0 = dataset.epoch_weekday
    steps_disc: list[list] = []
    steps_cont: list[list[float]] = []
    targets: list[float] = []

    if per_session:
        units = [[s] for s in user.sessions]
        gaps = list(user.return_targets)  # end-to-start gaps between sessions
    else:
        units = []
        days: list[int] = []
        for s in user.sessions:
            day = math.floor(s.start_time)
            if days and day == days[-1]:
                units[-1].append(s)
            else:
                units.append([s])
                days.append(day)
        gaps = [float(days[i + 1] - days[i]) for i in range(len(days) - 1)]

    for j, unit in enumerate(units):
        first = unit[0]
        day = math.floor(first.start_time)
        frac = first.start_time - day
        disc_row = [first.discrete_markers.get(m) for m in marker_features]
        disc_row += [
            (day + weekday0) % 7,
            day % 31,
            min(int(frac * 24.0), 23),
        ]
        gap_before = gaps[j - 1] if j > 0 else 0.0
        cont_row = [
            gap_before,
            float(len(unit)),
            float(sum(s.duration for s in unit)),
        ]
        for m in markers:
            cont_row.append(float(sum(s.continuous_markers.get(m, 0.0) for s in unit)))
        steps_disc.append(disc_row)
        steps_cont.append(cont_row)
        targets.append(gaps[j] if j < len(gaps) else user.final_gap)
    return steps_disc, steps_cont, targets


def build_sequences(
    dataset: Dataset,
    config: FeatureConfig | None = None,
    stats: SequenceStats | None = None,
) -> tuple[list[UserSequence], SequenceStats]:
    """Build per-user step tensors.

    With stats=None (training mode) the vocabularies and z-score statistics
    are fitted on this dataset and returned; otherwise the given stats are
    applied unchanged (test mode).
    """
    if stats is None:
        if config is None:
            raise ValidationError("build_sequences needs a FeatureConfig in training mode")
        markers = dataset_continuous_markers(dataset)
        marker_features = dataset_discrete_markers(dataset)
        vocabs: dict[str, dict[str, int]] = {}
        for name in marker_features:
            values = sorted(
                {
                    str(s.discrete_markers[name])
                    for u in dataset.users
                    for s in u.sessions
                    if name in s.discrete_markers
                }
            )
            vocabs[name] = {v: i for i, v in enumerate(values)}
        discrete_features = marker_features + list(DERIVED_DISCRETE)
        cardinalities = [len(vocabs[n]) for n in marker_features] + [
            DERIVED_CARDINALITIES[n] for n in DERIVED_DISCRETE
        ]
        cont_channels = ["elapsed_days", "session_count", "total_duration"] + [
            f"sum_{m}" for m in markers
        ]
        stats = SequenceStats(
            discrete_features=discrete_features,
            cardinalities=cardinalities,
            vocabs=vocabs,
            cont_channels=cont_channels,
            mean=np.zeros(len(cont_channels)),
            std=np.ones(len(cont_channels)),
            continuous_markers=markers,
            max_steps=config.max_steps,
            per_session_steps=config.per_session_steps,
        )
        fitting = True
    else:
        markers = stats.continuous_markers
        marker_features = [n for n in stats.discrete_features if n in stats.vocabs]
        fitting = False

    raw: list[tuple[UserHistory, list, list, list]] = []
    for user in dataset.users:
        d, c, t = _user_steps(user, dataset, markers, marker_features, stats.per_session_steps)
        keep = stats.max_steps
        raw.append((user, d[-keep:], c[-keep:], t[-keep:]))

    if fitting:
        all_rows = np.concatenate(
            [np.asarray(c, dtype=float) for _, _, c, _ in raw if c], axis=0
        ) if any(c for _, _, c, _ in raw) else np.zeros((0, len(stats.cont_channels)))
        if all_rows.shape[0] == 0:
            raise DataError("cannot fit sequence statistics on an empty dataset")
        stats.mean = all_rows.mean(axis=0)
        std = all_rows.std(axis=0)
        stats.std = np.where(std == 0.0, 1.0, std)

    sequences: list[UserSequence] = []
    for user, d_rows, c_rows, t_rows in raw:
        disc = np.empty((len(d_rows), len(stats.discrete_features)), dtype=np.int64)
        for j, row in enumerate(d_rows):
            for k, name in enumerate(stats.discrete_features):
                disc[j, k] = stats.encode_discrete(name, row[k])
        cont = (np.asarray(c_rows, dtype=float) - stats.mean) / stats.std
        sequences.append(
            UserSequence(
                user_id=user.user_id,
                disc=disc,
                cont=cont,
                targets=np.asarray(t_rows, dtype=float),
                is_censored=user.is_censored,
                active_day_count=count_active_days(user),
                last_session_end=user.last_session_end,
                absence_time=dataset.absence_time(user),
                horizon_gap=dataset.horizon_gap(user),
            )
        )
    return sequences, stats


@dataclass
class PaddedBatch:
    disc: np.ndarray  # (B, T, n_disc)
    cont: np.ndarray  # (B, T, n_cont)
    targets: np.ndarray  # (B, T)
    lengths: np.ndarray  # (B,)
    censored: np.ndarray  # (B,) bool
    user_ids: list[str]


def pad_batch(sequences: Sequence[UserSequence]) -> PaddedBatch:
    """Right-pad a list of user sequences into dense batch tensors."""
    B = len(sequences)
    T = max(len(s) for s in sequences)
    n_disc = sequences[0].disc.shape[1]
    n_cont = sequences[0].cont.shape[1]
    disc = np.zeros((B, T, n_disc), dtype=np.int64)
    cont = np.zeros((B, T, n_cont))
    targets = np.ones((B, T))  # padded lanes carry a harmless positive gap
    lengths = np.empty(B, dtype=np.int64)
    censored = np.empty(B, dtype=bool)
    for i, s in enumerate(sequences):
        L = len(s)
        disc[i, :L] = s.disc
        cont[i, :L] = s.cont
        targets[i, :L] = s.targets
        lengths[i] = L
        censored[i] = s.is_censored
    return PaddedBatch(disc, cont, targets, lengths, censored, [s.user_id for s in sequences])


def select_embedding_dims(embedding: np.ndarray, variance_threshold: float = 0.9) -> int:
    """Smallest dimension whose principal components explain more than the
    threshold share of the embedding matrix's variance."""
    if not (0 < variance_threshold < 1):
        raise ValidationError(
            f"variance_threshold must lie in (0, 1), got {variance_threshold}"
        )
    centered = embedding - embedding.mean(axis=0, keepdims=True)
    s = np.linalg.svd(centered, compute_uv=False)
    var = s ** 2
    total = var.sum()
    if total <= 0.0:
        return 1
    cum = np.cumsum(var) / total
    return int(np.argmax(cum > variance_threshold)) + 1
