import math

import numpy as np
import pytest

from chorusbench.annotations import SpeciesVocabulary
from chorusbench.crnn import (
    CrnnConfig,
    CrnnParams,
    bce_loss,
    bce_loss_grad,
    binarize,
    conv_stack_forward,
    forward,
    forward_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
    tensor_shapes,
)
from chorusbench.crnn.layers import gru_forward, sigmoid
from oracles import finite_difference_grads, relative_error

SMALL = CrnnConfig(n_mels=8, n_classes=3, conv_channels=(4, 4),
                   freq_pool=(2, 2), gru_units=8, gru_layers=1,
                   dense_units=(8,))


class TestConfig:
    def test_defaults_match_published_design(self):
        cfg = CrnnConfig()
        assert cfg.conv_channels == (64, 128, 128, 128, 264)
        assert cfg.freq_pool == (2, 2, 2, 2, 2)
        assert cfg.gru_units == 128 and cfg.gru_layers == 2
        assert cfg.dense_units == (128, 128)
        assert cfg.dropout == 0.5
        assert cfg.freq_remaining == 4
        assert cfg.gru_input_size == 264 * 4

    def test_pool_must_divide_mels(self):
        with pytest.raises(ValueError, match="divide"):
            CrnnConfig(n_mels=100, conv_channels=(8,), freq_pool=(3,))


class TestForward:
    def test_shape_and_range_small(self, rng):
        params = init_params(SMALL, seed=0)
        x = rng.normal(size=(20, 8))
        probs = forward(x, params)
        assert probs.shape == (20, 3)
        assert np.all((probs > 0) & (probs < 1))

    def test_full_config_shape(self, rng):
        cfg = CrnnConfig()
        params = init_params(cfg, seed=0, dtype=np.float32)
        x = rng.normal(size=(313, 128)).astype(np.float32)
        probs = forward(x, params)
        assert probs.shape == (313, 20)
        assert np.all((probs > 0) & (probs < 1))

    def test_zero_output_layer_gives_half(self, rng):
        params = init_params(SMALL, seed=0)
        params.tensors["out/weight"][:] = 0.0
        params.tensors["out/bias"][:] = 0.0
        probs = forward(rng.normal(size=(15, 8)), params)
        assert np.all(probs == 0.5)

    def test_eval_deterministic(self, rng):
        params = init_params(SMALL, seed=0)
        x = rng.normal(size=(20, 8))
        a = forward(x, params, mode="eval")
        b = forward(x, params, mode="eval")
        assert np.array_equal(a, b)

    def test_train_mode_needs_rng(self, rng):
        params = init_params(SMALL, seed=0)
        with pytest.raises(ValueError, match="rng"):
            forward_batch(params, rng.normal(size=(1, 10, 8)), train=True)

    def test_wrong_width_names_layer(self, rng):
        params = init_params(SMALL, seed=0)
        with pytest.raises(ValueError, match="input"):
            forward(rng.normal(size=(20, 9)), params)

    def test_sigmoid_range_many_random_inputs(self, rng):
        params = init_params(SMALL, seed=3)
        for _ in range(100):
            x = rng.normal(0, 3, size=(6, 8))
            probs = forward(x, params)
            assert np.all((probs > 0) & (probs < 1))

    def test_time_length_preserved_any_frames(self, rng):
        params = init_params(SMALL, seed=0)
        for frames in (1, 7, 50):
            probs = forward(rng.normal(size=(frames, 8)), params)
            assert probs.shape == (frames, 3)


class TestConvStackLocality:
    def test_receptive_field_radius(self, rng):
        # five 3x3 layers -> radius 5 in time; two layers -> radius 2
        cfg = CrnnConfig(n_mels=16, n_classes=2,
                         conv_channels=(4, 4, 4, 4, 4),
                         freq_pool=(2, 2, 2, 2, 1), gru_units=4,
                         gru_layers=1, dense_units=(4,))
        params = init_params(cfg, seed=1)
        k = 30
        a = rng.normal(size=(1, 40, 16))
        b = a.copy()
        b[0, k:] = rng.normal(size=(40 - k, 16))
        xa = ((a - params.norm_mean) / params.norm_std)
        xb = ((b - params.norm_mean) / params.norm_std)
        out_a, _ = conv_stack_forward(params, xa)
        out_b, _ = conv_stack_forward(params, xb)
        r = len(cfg.conv_channels)
        assert np.allclose(out_a[0, :k - r], out_b[0, :k - r], atol=1e-12)
        assert not np.allclose(out_a[0, :k], out_b[0, :k], atol=1e-12)


class TestGruCell:
    def test_single_step_closed_form(self):
        # scalar weights, two steps, checked against a literal evaluation
        # of the gate equations
        w = dict(W_z=0.3, W_r=-0.4, W_h=0.8, U_z=0.5, U_r=0.2, U_h=-0.6,
                 b_z=0.1, b_r=-0.2, b_h=0.05)
        p = {k: np.array([[v]]) if k[0] in "WU" else np.array([v])
             for k, v in w.items()}
        x = np.array([[[0.7], [-0.3]]])  # (B=1, T=2, D=1)
        out, _ = gru_forward(x, p)

        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        h = 0.0
        expected = []
        for t in range(2):
            xt = x[0, t, 0]
            z = sig(w["W_z"] * xt + w["U_z"] * h + w["b_z"])
            r = sig(w["W_r"] * xt + w["U_r"] * h + w["b_r"])
            c = math.tanh(w["W_h"] * xt + w["U_h"] * (r * h) + w["b_h"])
            h = (1 - z) * h + z * c
            expected.append(h)
        assert abs(out[0, 0, 0] - expected[0]) < 1e-12
        assert abs(out[0, 1, 0] - expected[1]) < 1e-12


class TestInitParams:
    def test_deterministic(self):
        a = init_params(SMALL, seed=11)
        b = init_params(SMALL, seed=11)
        for name in a.tensors:
            assert np.array_equal(a.tensors[name], b.tensors[name])

    def test_biases_and_shifts_zero(self):
        params = init_params(SMALL, seed=2)
        for name, t in params.tensors.items():
            leaf = name.rsplit("/", 1)[1]
            if leaf in ("bias", "ln_shift") or leaf.startswith("b_"):
                assert not t.any(), name

    def test_fan_bound_on_every_weight_tensor(self):
        params = init_params(CrnnConfig(n_mels=32, n_classes=4,
                                        conv_channels=(8, 8),
                                        freq_pool=(2, 2), gru_units=8,
                                        gru_layers=2, dense_units=(8, 8)),
                             seed=5)
        for name, t in params.tensors.items():
            leaf = name.rsplit("/", 1)[1]
            if leaf == "kernel":
                fan_in = t.shape[0] * t.shape[1] * t.shape[2]
                fan_out = t.shape[0] * t.shape[1] * t.shape[3]
            elif leaf.startswith(("W", "U")) or leaf == "weight":
                fan_in, fan_out = t.shape
            else:
                continue
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            assert np.abs(t).max() <= bound, name

    def test_seed_changes_weights(self):
        a = init_params(SMALL, seed=1)
        b = init_params(SMALL, seed=2)
        assert not np.array_equal(a.tensors["conv1/kernel"],
                                  b.tensors["conv1/kernel"])


class TestBceLoss:
    def test_half_predictions_give_ln2(self, rng):
        pred = np.full((10, 4), 0.5)
        target = (rng.random((10, 4)) < 0.5).astype(float)
        assert bce_loss(pred, target) == pytest.approx(math.log(2.0))

    def test_perfect_prediction_near_floor(self):
        target = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = bce_loss(target, target)
        assert loss == pytest.approx(-math.log(1 - 1e-7), rel=1e-3)
        assert loss < 2e-7

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bce_loss(np.zeros((2, 3)), np.zeros((3, 2)))

    def test_gradient_matches_finite_differences(self, rng):
        pred = rng.uniform(0.05, 0.95, size=(4, 3))
        target = (rng.random((4, 3)) < 0.5).astype(float)
        analytic = bce_loss_grad(pred, target)
        fd = finite_difference_grads(lambda: bce_loss(pred, target), pred,
                                     step=1e-6)
        rel = relative_error(analytic, fd)
        assert rel.max() < 1e-5


class TestBinarize:
    VOCAB = SpeciesVocabulary(("A", "B"))

    def test_strict_threshold(self):
        probs = np.array([[0.51, 0.49], [0.50, 0.999]])
        roll = binarize(probs, self.VOCAB, 0.016)
        assert roll.matrix[0, 0] == 1 and roll.matrix[1, 0] == 0
        assert roll.matrix[0, 1] == 0  # exactly 0.50 stays off
        assert roll.matrix[1, 1] == 1

    def test_monotone_in_threshold(self, rng):
        probs = rng.random((30, 2))
        lo = binarize(probs, self.VOCAB, 0.016, threshold=0.3)
        hi = binarize(probs, self.VOCAB, 0.016, threshold=0.7)
        assert np.all(hi.matrix <= lo.matrix)

    def test_shape(self, rng):
        roll = binarize(rng.random((313, 2)), self.VOCAB, 0.016)
        assert roll.matrix.shape == (2, 313)


class TestCheckpoint:
    def test_roundtrip_lossless_bytes(self, tmp_path, rng):
        params = init_params(SMALL, seed=3, dtype=np.float32)
        params.norm_mean = rng.normal(size=8)
        params.norm_std = rng.uniform(0.5, 2.0, size=8)
        params.species_codes = ("AAA", "BBB", "CCC")
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(params, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.config == params.config
        assert loaded.species_codes == ("AAA", "BBB", "CCC")
        for name in params.tensors:
            assert np.allclose(loaded.tensors[name],
                               params.tensors[name].astype(np.float32))

    def test_outputs_survive_roundtrip(self, tmp_path, rng):
        params = init_params(SMALL, seed=4, dtype=np.float32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        x = rng.normal(size=(12, 8)).astype(np.float32)
        assert np.allclose(forward(x, params), forward(x, loaded), atol=1e-6)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestTensorShapes:
    def test_counts_for_default_config(self):
        shapes = tensor_shapes(CrnnConfig())
        assert shapes["conv1/kernel"] == (3, 3, 1, 64)
        assert shapes["conv5/kernel"] == (3, 3, 128, 264)
        assert shapes["gru1/fw/W_z"] == (264 * 4, 128)
        assert shapes["gru2/fw/W_z"] == (256, 128)
        assert shapes["dense1/weight"] == (256, 128)
        assert shapes["out/weight"] == (128, 20)
