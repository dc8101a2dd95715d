import copy

import numpy as np
import pytest

from returntime.data import Session, WindowConfig, assign_windows
from returntime.errors import ValidationError
from returntime.features import (
    FeatureConfig,
    Standardization,
    build_aggregates,
    build_sequences,
    count_active_days,
    pad_batch,
    select_embedding_dims,
)

WINDOW = WindowConfig(activity_start=1.0, prediction_start=10.0, horizon_end=30.0)


def s(user, start, duration=0.0, device="mobile", pages=2.0):
    return Session(
        user_id=user, start_time=start, duration=duration,
        discrete_markers={"device": device},
        continuous_markers={"pages_viewed": pages},
    )


def small_dataset():
    raw = [
        s("a", 0.2), s("a", 2.5), s("a", 4.1),        # censored, 3 active days
        s("b", 3.3), s("b", 3.5), s("b", 8.0), s("b", 12.0),  # returns at 12
        s("c", 6.0, device="tablet"),                  # single session, censored
    ]
    return assign_windows(raw, WINDOW)


class TestAggregates:
    def test_example_user(self):
        raw = [s("a", 0.0), s("a", 2.0), s("a", 4.0)]
        ds = assign_windows(raw, WINDOW)
        agg = build_aggregates(ds)
        row = dict(zip(agg.feature_names, agg.X[0]))
        assert row["session_count"] == 3.0
        assert row["mean_gap"] == 2.0
        assert row["absence_time"] == 6.0
        assert row["observation_span"] == 4.0
        assert row["missing_gap_flag"] == 0.0

    def test_single_session_user_flagged(self):
        ds = assign_windows([s("c", 6.0)], WINDOW)
        agg = build_aggregates(ds)
        row = dict(zip(agg.feature_names, agg.X[0]))
        assert row["mean_gap"] == 0.0
        assert row["std_gap"] == 0.0
        assert row["missing_gap_flag"] == 1.0

    def test_zscore_moments(self):
        rng = np.random.default_rng(0)
        X = rng.normal(3.0, 2.5, size=(500, 4))
        std = Standardization.fit(X, ["a", "b", "c", "d"])
        Z = std.apply(X)
        np.testing.assert_allclose(Z.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(Z.std(axis=0), 1.0, atol=1e-9)

    def test_constant_column_left_at_zero(self):
        X = np.hstack([np.ones((10, 1)), np.arange(10.0)[:, None]])
        std = Standardization.fit(X, ["const", "lin"])
        Z = std.apply(X)
        assert np.all(Z[:, 0] == 0.0)

    def test_marker_universe_can_be_pinned(self):
        ds = small_dataset()
        agg = build_aggregates(ds, continuous_markers=["pages_viewed", "videos"])
        assert "mean_videos" in agg.feature_names
        assert np.all(agg.X[:, agg.feature_names.index("mean_videos")] == 0.0)


class TestSequences:
    def test_truncation_to_most_recent_days(self):
        raw = [s("u", float(d) + 0.3) for d in range(70)] + [s("u", 75.0)]
        window = WindowConfig(activity_start=1.0, prediction_start=72.0, horizon_end=100.0)
        ds = assign_windows(raw, window)
        seqs, stats = build_sequences(ds, FeatureConfig(max_steps=64))
        (seq,) = seqs
        assert len(seq) == 64
        assert seq.active_day_count == 70
        # elapsed input of the first retained step keeps the real gap
        raw_elapsed = seq.cont[0, 0] * stats.std[0] + stats.mean[0]
        assert raw_elapsed == pytest.approx(1.0)

    def test_single_active_day_has_zero_elapsed(self):
        ds = assign_windows([s("c", 6.0)], WINDOW)
        seqs, stats = build_sequences(ds, FeatureConfig(max_steps=8))
        (seq,) = seqs
        assert len(seq) == 1
        raw_elapsed = seq.cont[0, 0] * stats.std[0] + stats.mean[0]
        assert raw_elapsed == pytest.approx(0.0)
        assert seq.targets[0] == pytest.approx(30.0 - 6.0)

    def test_same_day_sessions_grouped(self):
        ds = assign_windows([s("b", 3.3), s("b", 3.5), s("b", 8.0)], WINDOW)
        seqs, stats = build_sequences(ds, FeatureConfig(max_steps=8))
        (seq,) = seqs
        assert len(seq) == 2
        idx = stats.cont_channels.index("session_count")
        raw_count = seq.cont[0, idx] * stats.std[idx] + stats.mean[idx]
        assert raw_count == pytest.approx(2.0)

    def test_targets_are_day_gaps_then_final_gap(self):
        ds = assign_windows([s("b", 3.3), s("b", 8.0), s("b", 12.0)], WINDOW)
        seqs, _ = build_sequences(ds, FeatureConfig(max_steps=8))
        (seq,) = seqs
        assert seq.targets[0] == pytest.approx(5.0)  # day 3 -> day 8
        assert seq.targets[-1] == pytest.approx(12.0 - 8.0)
        assert not seq.is_censored

    def test_unknown_category_maps_to_reserved_slot(self):
        train = small_dataset()
        _, stats = build_sequences(train, FeatureConfig(max_steps=8))
        test_ds = assign_windows([s("z", 5.0, device="smartwatch")], WINDOW)
        seqs, _ = build_sequences(test_ds, stats=stats)
        (seq,) = seqs
        device_col = stats.discrete_features.index("device")
        card = stats.cardinalities[device_col]
        assert seq.disc[0, device_col] == card
        assert seq.disc[0, device_col] < card + 1

    def test_all_indices_within_cardinality_plus_unknown(self):
        ds = small_dataset()
        seqs, stats = build_sequences(ds, FeatureConfig(max_steps=8))
        cards = np.asarray(stats.cardinalities)
        for seq in seqs:
            assert np.all(seq.disc < cards + 1)
            assert np.all(seq.disc >= 0)

    def test_test_mode_does_not_mutate_stats(self):
        train = small_dataset()
        _, stats = build_sequences(train, FeatureConfig(max_steps=8))
        frozen = copy.deepcopy(stats.to_dict())
        test_ds = assign_windows([s("z", 5.0, pages=99.0)], WINDOW)
        build_sequences(test_ds, stats=stats)
        assert stats.to_dict() == frozen

    def test_lengths_match_capped_active_days(self):
        ds = small_dataset()
        config = FeatureConfig(max_steps=2)
        seqs, _ = build_sequences(ds, config)
        for seq, user in zip(seqs, ds.users):
            assert len(seq) == min(count_active_days(user), 2)

    def test_per_session_mode(self):
        ds = assign_windows([s("b", 3.3, duration=0.1), s("b", 3.5), s("b", 8.0)], WINDOW)
        seqs, _ = build_sequences(ds, FeatureConfig(max_steps=8, per_session_steps=True))
        (seq,) = seqs
        assert len(seq) == 3
        assert seq.targets[0] == pytest.approx(3.5 - 3.4)

    def test_pad_batch_masks(self):
        ds = small_dataset()
        seqs, _ = build_sequences(ds, FeatureConfig(max_steps=8))
        batch = pad_batch(seqs)
        assert batch.disc.shape[0] == len(seqs)
        assert batch.lengths.tolist() == [len(s_) for s_ in seqs]
        assert np.all(batch.targets > 0)


class TestEmbeddingDimSelection:
    def test_rank_one_matrix_needs_one_dim(self):
        u = np.array([1.0, -1.0, 2.0, -2.0])
        u -= u.mean()
        v = np.array([0.6, 0.8, 0.0])
        emb = 3.0 * np.outer(u / np.linalg.norm(u), v)
        assert select_embedding_dims(emb, 0.9) == 1

    def test_isotropic_needs_all_dims(self):
        rng = np.random.default_rng(1)
        emb = rng.normal(size=(2000, 4))
        assert select_embedding_dims(emb, 0.9) == 4

    def test_zero_matrix_degenerates_to_one(self):
        assert select_embedding_dims(np.zeros((5, 3)), 0.9) == 1

    def test_threshold_validated(self):
        with pytest.raises(ValidationError):
            select_embedding_dims(np.eye(3), 1.5)
