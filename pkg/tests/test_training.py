import math

import numpy as np
import pytest

from waveletmixer import tensor as T
from waveletmixer.data import SynthConfig, synth_generate
from waveletmixer.model import ModelConfig
from waveletmixer.tensor import Tensor
from waveletmixer.training import (
    AdamState,
    NormalizationStats,
    TrainConfig,
    adam_step,
    binary_cross_entropy,
    minmax_fit_apply,
    train,
)


class TestMinMax:
    def test_basic_scaling(self):
        w = np.array([0.0, 5.0, 10.0]).reshape(3, 1, 1)
        out, _, _ = minmax_fit_apply(w, [])
        np.testing.assert_allclose(out.ravel(), [0.0, 0.5, 1.0])

    def test_constant_channel_maps_to_zero(self):
        w = np.full((2, 1, 1), 7.0)
        out, _, _ = minmax_fit_apply(w, [])
        np.testing.assert_array_equal(out.ravel(), [0.0, 0.0])

    def test_no_clipping_beyond_train_range(self):
        train_w = np.array([0.0, 10.0]).reshape(2, 1, 1)
        test_w = np.array([12.0]).reshape(1, 1, 1)
        _, (test_out,), _ = minmax_fit_apply(train_w, [test_w])
        assert test_out.ravel()[0] == pytest.approx(1.2)

    def test_stats_depend_only_on_train_split(self):
        rng = np.random.default_rng(0)
        train_w = rng.random((5, 3, 2))
        test_a = rng.random((4, 3, 2))
        test_b = test_a + 100.0
        _, _, stats_a = minmax_fit_apply(train_w, [test_a])
        _, _, stats_b = minmax_fit_apply(train_w, [test_b])
        np.testing.assert_array_equal(stats_a.mins, stats_b.mins)
        np.testing.assert_array_equal(stats_a.maxs, stats_b.maxs)

    def test_skip_channel_passes_codes_through(self):
        w = np.zeros((2, 2, 2))
        w[..., 0] = [[1.0, 3.0], [5.0, 9.0]]
        w[..., 1] = [[4.0, 4.0], [17.0, 17.0]]
        stats = NormalizationStats.fit(w, skip_channel=1)
        out = stats.apply(w)
        np.testing.assert_array_equal(out[..., 1], w[..., 1])
        assert out[..., 0].max() == 1.0

    def test_empty_train_split_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            NormalizationStats.fit(np.zeros((0, 4, 2)))

    def test_roundtrip_dict(self):
        stats = NormalizationStats.fit(np.random.default_rng(1).random((3, 2, 4)),
                                       skip_channel=2)
        back = NormalizationStats.from_dict(stats.to_dict())
        np.testing.assert_array_equal(back.mins, stats.mins)
        assert back.skip_channel == 2


class TestBCE:
    def test_half_is_ln2(self):
        loss = binary_cross_entropy(Tensor(np.array([0.5])), np.array([1.0]))
        assert loss.data.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_confident_correct_near_zero(self):
        loss = binary_cross_entropy(Tensor(np.array([1.0 - 1e-7])), np.array([1.0]))
        assert loss.data.item() == pytest.approx(0.0, abs=1e-6)

    def test_quarter_wrong_class(self):
        loss = binary_cross_entropy(Tensor(np.array([0.25])), np.array([0.0]))
        assert loss.data.item() == pytest.approx(-math.log(0.75), abs=1e-12)

    def test_batch_mean(self):
        loss = binary_cross_entropy(Tensor(np.array([0.5, 0.5])), np.array([1.0, 0.0]))
        assert loss.data.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_gradient_direction(self):
        p = Tensor(np.array([0.3]), requires_grad=True)
        binary_cross_entropy(p, np.array([1.0])).backward()
        assert p.grad[0] < 0  # raising p toward the label lowers the loss


class TestAdam:
    def test_first_step_magnitude(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        p.grad = np.ones(1)
        state = AdamState([p])
        adam_step([p], state, lr=1e-3)
        assert p.data[0] == pytest.approx(-1e-3, rel=1e-6)

    def test_zero_grad_zero_moments_no_move(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        adam_step([p], AdamState([p]), lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_identical_histories_identical_updates(self):
        a = Tensor(np.array([0.5]), requires_grad=True)
        b = Tensor(np.array([0.5]), requires_grad=True)
        sa, sb = AdamState([a]), AdamState([b])
        for g in (0.3, -0.2, 0.7):
            a.grad = np.array([g])
            b.grad = np.array([g])
            adam_step([a], sa, lr=1e-2)
            adam_step([b], sb, lr=1e-2)
        np.testing.assert_array_equal(a.data, b.data)

    def test_quadratic_descent(self):
        # one step on f(theta) = theta^2 at lr 1e-4 strictly decreases loss
        theta = Tensor(np.array([0.7]), requires_grad=True)
        state = AdamState([theta])
        before = theta.data[0] ** 2
        loss = T.mul(theta, theta)
        T.tsum(loss).backward()
        adam_step([theta], state, lr=1e-4)
        assert theta.data[0] ** 2 < before

    def test_missing_grad_treated_as_zero(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        p.grad = None
        adam_step([p], AdamState([p]), lr=0.1)
        np.testing.assert_array_equal(p.data, [3.0])


def small_train_setup(n=220, t_len=8, **overrides):
    ds = synth_generate(SynthConfig(n_samples=n, window_len=t_len, seed=12))
    mcfg = ModelConfig(n_layers=1, d_hidden=8, n_scales=2, patch_len=4,
                       dropout=0.0, lc_embed_dim=4)
    defaults = dict(learning_rate=1e-3, epochs=3, patience=10, batch_size=32,
                    seed=5, precision="f64")
    defaults.update(overrides)
    return ds, mcfg, TrainConfig(**defaults)


class TestTrainLoop:
    def test_log_and_checkpoints_present(self):
        ds, mcfg, tcfg = small_train_setup()
        result = train(mcfg, ds, tcfg)
        assert len(result.log) == 3
        assert set(result.checkpoints) == {"f1", "recall", "pr_auc", "mae", "mse"}
        for row in result.log:
            assert set(row) == {"epoch", "train_loss", "val_loss", "precision", "recall",
                                "f1", "pr_auc", "roc_auc", "fpr", "mse", "mae"}

    def test_checkpoint_values_are_argbest_of_log(self):
        ds, mcfg, tcfg = small_train_setup(epochs=5)
        result = train(mcfg, ds, tcfg)
        for metric in ("f1", "recall", "pr_auc"):
            values = [row[metric] for row in result.log if row[metric] is not None]
            assert result.checkpoints[metric]["value"] == pytest.approx(max(values))
        for metric in ("mae", "mse"):
            values = [row[metric] for row in result.log]
            assert result.checkpoints[metric]["value"] == pytest.approx(min(values))

    def test_seed_reproducibility_bit_identical(self):
        ds, mcfg, tcfg = small_train_setup(epochs=2)
        a = train(mcfg, ds, tcfg)
        b = train(mcfg, ds, tcfg)
        assert a.log_csv(seed=5) == b.log_csv(seed=5)
        for k in a.checkpoints:
            for name in a.checkpoints[k]["params"]:
                np.testing.assert_array_equal(
                    a.checkpoints[k]["params"][name], b.checkpoints[k]["params"][name])

    def test_early_stop_patience_arithmetic(self):
        # constant predictions freeze every metric after epoch 1 -> stop at epoch 1+patience
        ds, mcfg, tcfg = small_train_setup(epochs=50, patience=4, learning_rate=1e-12)
        result = train(mcfg, ds, tcfg)
        assert result.stopped_early
        assert len(result.log) == 5

    def test_empty_split_is_configuration_error(self):
        ds, mcfg, tcfg = small_train_setup()
        ds.manifest.split_boundaries = {"train_end": "2014-12-31", "val_end": "2022-12-31",
                                        "test_end": "2024-12-31"}
        # all synth dates start in 2015 -> empty train split
        with pytest.raises(ValueError, match="empty split|outside"):
            train(mcfg, ds, tcfg)

    def test_log_csv_format(self):
        ds, mcfg, tcfg = small_train_setup(epochs=1)
        result = train(mcfg, ds, tcfg)
        text = result.log_csv(seed=tcfg.seed)
        lines = text.strip().split("\n")
        assert lines[0] == "# seed=5"
        assert lines[1].startswith("epoch,train_loss,val_loss")
        assert len(lines) == 3
