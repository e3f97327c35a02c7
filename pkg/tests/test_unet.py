import math

import numpy as np
import pytest

from adaseg import tensor as T
from adaseg.tensor import Tape, Tensor
from adaseg.unet import (AdamState, CheckpointError, UNetConfig, adam_step, bce_loss, build_unet,
                         checkpoint_bytes, load_checkpoint, parameter_count, predict_mask, save_checkpoint,
                         train_epoch)


class TestBuild:
    def test_bottleneck_shape_default(self):
        model = build_unet(UNetConfig(), np.random.default_rng(0))
        x = Tensor(np.zeros((1, 1, 64, 64), np.float32))
        with Tape() as tape:
            model.forward(x)
            act = T.register_capture(tape, "bottleneck").activation
        assert act.shape == (1, 64, 8, 8)

    def test_same_seed_identical(self, tiny_config):
        a = build_unet(tiny_config, np.random.default_rng(3))
        b = build_unet(tiny_config, np.random.default_rng(3))
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_parameter_count_by_hand(self):
        # enc1 1->8, enc2 8->16, enc3 16->32, bottleneck 32->64, dec3 96->32, dec2 48->16, dec1 24->8
        convs = [(1, 8), (8, 8), (8, 16), (16, 16), (16, 32), (32, 32), (32, 64), (64, 64),
                 (96, 32), (32, 32), (48, 16), (16, 16), (24, 8), (8, 8)]
        by_hand = sum(ci * co * 9 + co + 2 * co for ci, co in convs) + (8 + 1)
        model = build_unet(UNetConfig(), np.random.default_rng(0))
        assert parameter_count(UNetConfig()) == by_hand == sum(p.data.size for p in model.params.values())

    @pytest.mark.parametrize("kw", [dict(n=60), dict(depth=0), dict(kernel_size=4), dict(dropout=1.0),
                                    dict(base_channels=0), dict(bn_momentum=1.5)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            UNetConfig(**kw).validate()


class TestForward:
    def test_probabilities_in_unit_interval(self, tiny_model, rng):
        p = tiny_model.predict_proba(rng.uniform(size=(3, 16, 16)))
        assert p.shape == (3, 16, 16)
        assert np.all((p > 0) & (p < 1))

    def test_eval_deterministic(self, tiny_model, rng):
        x = rng.uniform(size=(2, 16, 16))
        np.testing.assert_array_equal(tiny_model.predict_proba(x), tiny_model.predict_proba(x))

    def test_training_without_dropout_matches_eval_with_frozen_stats(self, rng):
        model = build_unet(UNetConfig(n=16, base_channels=2, dropout=0.0, bn_momentum=1.0), rng)
        x = rng.uniform(size=(4, 1, 16, 16)).astype(np.float32)
        train_out = model.forward(x, training=True, rng=rng).data  # momentum 1 freezes the batch stats
        eval_out = model.forward(x, training=False).data
        np.testing.assert_allclose(train_out, eval_out, rtol=1e-4, atol=1e-4)

    def test_wrong_input_shape(self, tiny_model):
        with pytest.raises(T.TensorError, match="expected images"):
            tiny_model.forward(np.zeros((1, 1, 8, 8), np.float32))

    def test_layer_ids(self, tiny_model):
        assert tiny_model.layer_ids == ["input", "enc1", "enc2", "enc3", "bottleneck", "dec3", "dec2", "dec1",
                                        "logits"]


class TestLoss:
    def test_perfect_prediction(self):
        y = np.array([[0.0, 1.0], [1.0, 0.0]])
        loss = float(bce_loss(Tensor(y.copy()), y).data)
        assert loss == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)
        assert loss < 1e-6

    def test_half_is_ln2(self, rng):
        y = (rng.uniform(size=(3, 4)) > 0.5).astype(float)
        assert float(bce_loss(Tensor(np.full((3, 4), 0.5)), y).data) == pytest.approx(math.log(2))

    def test_symmetry(self, rng):
        p = rng.uniform(0.01, 0.99, size=(5, 5))
        y = (rng.uniform(size=(5, 5)) > 0.5).astype(float)
        a = float(bce_loss(Tensor(p), y).data)
        b = float(bce_loss(Tensor(1 - p), 1 - y).data)
        assert a == pytest.approx(b, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(T.TensorError):
            bce_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 2)))


class TestAdam:
    def _param(self, v=0.0):
        return {"w": Tensor(np.array([v], np.float64), requires_grad=True)}

    def test_first_step_by_hand(self):
        p, st = self._param(), AdamState(lr=0.001)
        adam_step(p, {"w": np.array([1.0])}, st)
        # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        assert st.t == 1
        assert p["w"].data[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)

    def test_zero_gradient(self):
        p, st = self._param(2.5), AdamState()
        adam_step(p, {"w": np.array([0.0])}, st)
        assert p["w"].data[0] == 2.5 and st.t == 1

    def test_deterministic(self):
        results = []
        for _ in range(2):
            p, st = self._param(1.0), AdamState()
            for g in (0.3, -0.2, 0.7):
                adam_step(p, {"w": np.array([g])}, st)
            results.append(p["w"].data[0])
        assert results[0] == results[1]

    def test_non_finite_gradient_named(self):
        with pytest.raises(FloatingPointError, match="w"):
            adam_step(self._param(), {"w": np.array([np.nan])}, AdamState())


class TestTraining:
    def test_single_sample_overfit(self):
        rng = np.random.default_rng(0)
        model = build_unet(UNetConfig(n=16, base_channels=4, dropout=0.0), rng)
        x = rng.uniform(size=(1, 16, 16)).astype(np.float32)
        y = np.zeros((1, 16, 16), np.uint8)
        y[0, 4:10, 5:12] = 1
        st = AdamState(lr=1e-2)
        losses = [train_epoch(model, st, x, y, 16, rng) for _ in range(50)]
        decreasing = np.mean(np.diff(losses) < 0)
        assert decreasing >= 0.9
        assert losses[-1] < losses[0]

    def test_one_step_per_epoch(self, tiny_model, rng):
        st = AdamState()
        train_epoch(tiny_model, st, rng.uniform(size=(16, 16, 16)), np.zeros((16, 16, 16)), 16, rng)
        assert st.t == 1
        train_epoch(tiny_model, st, rng.uniform(size=(17, 16, 16)), np.zeros((17, 16, 16)), 16, rng)
        assert st.t == 3

    def test_same_seed_same_losses(self, tiny_config, small_data):
        train, _ = small_data
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(9)
            model = build_unet(tiny_config, rng)
            st = AdamState()
            runs.append([train_epoch(model, st, train.images, train.masks, 4, rng) for _ in range(3)])
        assert runs[0] == runs[1]


class TestPredictMask:
    def _constant_model(self, tiny_config, bias):
        model = build_unet(tiny_config, np.random.default_rng(0))
        model.params["head.weight"].data[...] = 0
        model.params["head.bias"].data[...] = bias
        return model

    def test_half_probability_is_foreground(self, tiny_config, rng):
        m = predict_mask(self._constant_model(tiny_config, 0.0), rng.uniform(size=(2, 16, 16)))
        assert m.all()

    def test_constant_mask(self, tiny_config, rng):
        m = predict_mask(self._constant_model(tiny_config, -3.0), rng.uniform(size=(2, 16, 16)))
        assert not m.any()

    def test_idempotent_threshold(self, tiny_model, rng):
        m = predict_mask(tiny_model, rng.uniform(size=(2, 16, 16)))
        np.testing.assert_array_equal((m >= 0.5).astype(np.uint8), m)


class TestCheckpoint:
    def _trained(self, tiny_config, small_data):
        rng = np.random.default_rng(2)
        model = build_unet(tiny_config, rng)
        st = AdamState()
        train_epoch(model, st, small_data[0].images, small_data[0].masks, 4, rng)
        model.epochs_trained = 1
        return model, st

    def test_byte_identical_resave(self, tiny_config, small_data, tmp_path):
        model, st = self._trained(tiny_config, small_data)
        save_checkpoint(model, st, tmp_path / "a.ckpt")
        m2, st2 = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(m2, st2, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert m2.epochs_trained == 1 and st2.t == st.t

    def test_reload_same_outputs(self, tiny_config, small_data, tmp_path):
        model, st = self._trained(tiny_config, small_data)
        save_checkpoint(model, st, tmp_path / "a.ckpt")
        m2, _ = load_checkpoint(tmp_path / "a.ckpt")
        x = small_data[1].images
        np.testing.assert_array_equal(model.predict_proba(x), m2.predict_proba(x))

    @pytest.mark.parametrize("cut", [3, 20, -1])
    def test_truncated(self, tiny_model, tmp_path, cut):
        data = checkpoint_bytes(tiny_model, AdamState())
        (tmp_path / "t.ckpt").write_bytes(data[:cut] if cut > 0 else data[:-7])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_no_temp_left_behind(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, None, tmp_path / "m.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]
        _, st = load_checkpoint(tmp_path / "m.ckpt")
        assert st is None
