import numpy as np
import pytest

from returntime import net
from returntime.baselines import (
    baseline_predict,
    load_simple_rnn,
    mse_sequence_loss,
    predict_simple_rnn,
    save_simple_rnn,
    train_simple_rnn,
)
from returntime.data import Session, WindowConfig, assign_windows
from returntime.errors import DataError
from returntime.features import FeatureConfig, build_sequences, pad_batch
from returntime.metrics import nonreturning_recall
from returntime.rnnsm import TrainingConfig
from returntime.synth import GeneratorConfig, generate

from oracles import finite_difference_grads, max_relative_error

WINDOW = WindowConfig(activity_start=30.0, prediction_start=100.0, horizon_end=160.0)


@pytest.fixture(scope="module")
def small_data():
    cfg = GeneratorConfig(user_count=220, seed=31)
    sessions, _ = generate(cfg)
    dataset = assign_windows(sessions, cfg.window)
    seqs, stats = build_sequences(dataset, FeatureConfig(max_steps=32))
    return dataset, seqs, stats


def small_net(stats):
    return net.NetConfig(
        discrete_features=tuple(stats.discrete_features),
        cardinalities=tuple(stats.cardinalities),
        embedding_dims=tuple(2 for _ in stats.discrete_features),
        n_continuous=len(stats.cont_channels),
        fusion_size=8,
        hidden_size=8,
    )


class TestBaseline:
    def test_prediction_is_absence_time(self):
        raw = [
            Session("a", 50.0, 0.5), Session("a", 120.0),
            Session("b", 90.0),
        ]
        ds = assign_windows(raw, WINDOW)
        records = baseline_predict(ds)
        by_id = {r.user_id: r for r in records}
        assert by_id["a"].predicted_return_days == pytest.approx(100.0 - 50.5)
        assert by_id["b"].predicted_return_days == pytest.approx(10.0)

    def test_last_session_at_window_start_predicts_zero(self):
        ds = assign_windows([Session("a", 100.0)], WINDOW)
        (record,) = baseline_predict(ds)
        assert record.predicted_return_days == 0.0

    def test_nonreturning_recall_is_exactly_zero(self, small_data):
        dataset, _, _ = small_data
        records = baseline_predict(dataset)
        assert nonreturning_recall(records) == 0.0

    def test_always_underestimates_returning_users(self, small_data):
        dataset, _, _ = small_data
        records = baseline_predict(dataset)
        errors = [
            r.predicted_return_days - r.true_return_days
            for r in records
            if r.true_return_days is not None
        ]
        assert all(e <= 1e-9 for e in errors)
        assert np.mean(errors) <= 0.0


class TestSimpleRnn:
    @pytest.mark.parametrize("final_only", [True, False])
    def test_mse_gradient_matches_finite_differences(self, small_data, final_only):
        # synthetic, well-scaled batch: finite-difference noise grows with
        # the loss magnitude, so day-scale targets stay O(1) here
        _, seqs, stats = small_data
        config = small_net(stats)
        rng = np.random.default_rng(0)
        params = net.init_params(config, rng)
        for k in params:
            params[k] = params[k] + rng.normal(scale=0.2, size=params[k].shape)
        template = [s for s in seqs if not s.is_censored][:4]
        batch = pad_batch(template)
        batch.targets = rng.uniform(0.5, 4.0, size=batch.targets.shape)

        def loss_fn():
            o, _, _ = net.forward_batch(params, config, batch.disc, batch.cont, batch.lengths)
            value, _ = mse_sequence_loss(o, batch, final_step_only=final_only)
            return value

        o, _, cache = net.forward_batch(params, config, batch.disc, batch.cont, batch.lengths)
        _, grad_o = mse_sequence_loss(o, batch, final_step_only=final_only)
        analytic = net.backward_batch(params, config, cache, grad_o)
        numeric = finite_difference_grads(loss_fn, params, h=1e-5)
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_censored_users_do_not_affect_training(self, small_data):
        _, seqs, stats = small_data
        config = small_net(stats)
        cfg = TrainingConfig(epochs=2, batch_size=32, seed=5)
        mixed = train_simple_rnn(seqs, config, stats, cfg)
        returning_only = train_simple_rnn(
            [s for s in seqs if not s.is_censored], config, stats, cfg
        )
        assert mixed.loss_trace == returning_only.loss_trace
        for k in mixed.params:
            assert np.array_equal(mixed.params[k], returning_only.params[k])

    def test_training_reduces_loss(self, small_data):
        # squared errors on raw day-scale gaps need a larger Adam step than
        # the log-likelihood loss
        _, seqs, stats = small_data
        config = small_net(stats)
        model = train_simple_rnn(
            seqs, config, stats, TrainingConfig(epochs=8, seed=6, learning_rate=0.05)
        )
        assert model.loss_trace[-1] < model.loss_trace[0]

    def test_requires_returning_users(self, small_data):
        _, seqs, stats = small_data
        censored_only = [s for s in seqs if s.is_censored]
        with pytest.raises(DataError):
            train_simple_rnn(censored_only, small_net(stats), stats, TrainingConfig(epochs=1))

    def test_negative_outputs_clamped_to_zero(self, small_data):
        _, seqs, stats = small_data
        config = small_net(stats)
        params = net.init_params(config, np.random.default_rng(7))
        params["out_b"][0] = -50.0
        model_like = train_simple_rnn(
            [s for s in seqs if not s.is_censored][:10], config, stats,
            TrainingConfig(epochs=0, seed=7),
        )
        model_like.params = params
        records = predict_simple_rnn(model_like, seqs[:20])
        assert all(r.predicted_return_days >= 0.0 for r in records)
        assert any(r.predicted_return_days == 0.0 for r in records)

    def test_save_load_round_trip(self, small_data, tmp_path):
        _, seqs, stats = small_data
        config = small_net(stats)
        model = train_simple_rnn(seqs, config, stats, TrainingConfig(epochs=2, seed=8))
        path = tmp_path / "rnn.npz"
        save_simple_rnn(path, model)
        loaded = load_simple_rnn(path)
        assert predict_simple_rnn(loaded, seqs[:10]) == predict_simple_rnn(model, seqs[:10])
