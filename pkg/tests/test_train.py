import csv
import math

import numpy as np
import pytest

from metro import autodiff as ad
from metro.errors import ConfigError, NumericError, ValidationError
from metro.metrics import procrustes_align
from metro.model import BlockSpec, EncoderConfig, load_checkpoint
from metro.train import (DEFAULT_TTA, LOG_COLUMNS, Adam, Featurizer, TrainConfig, average_aligned, clip_grad_norm,
                         evaluate, infer, lr_at, make_batch, model_for_dataset, train, train_step, tta_infer)

TINY = EncoderConfig(16, [BlockSpec(8, 1, 2), BlockSpec(4, 1, 1)], upsampler_hidden=8)


@pytest.fixture
def tiny_model(hand_data):
    return model_for_dataset(hand_data, TINY, seed=1)


class TestSchedule:
    def test_step_decay(self):
        cfg = TrainConfig(epochs=200, lr_initial=1e-4)
        assert cfg.lr_decay_epoch == 100
        assert lr_at(cfg, 1) == 1e-4 and lr_at(cfg, 99) == 1e-4
        assert lr_at(cfg, 100) == 1e-4 / 10 and lr_at(cfg, 200) == 1e-4 / 10

    @pytest.mark.parametrize("kw", [{"lr_initial": -1.0}, {"mvm_max_fraction": 1.5}, {"batch_size": 0},
                                    {"lr_decay_factor": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()


class TestAdam:
    def test_three_steps_by_hand(self):
        p = ad.Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        opt = Adam({"p": p})
        grads = [np.array([0.5]), np.array([-0.25]), np.array([2.0])]
        m = v = np.zeros(1)
        x = np.array([1.0])
        for t, g in enumerate(grads, 1):
            p.grad = g.copy()
            opt.step(0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            np.testing.assert_allclose(p.data, x, rtol=0, atol=1e-12)

    def test_constant_gradient_step_tends_to_lr(self):
        p = ad.Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
        opt = Adam({"p": p})
        for _ in range(5000):
            before = p.data.copy()
            p.grad = np.array([3.0, -0.01, 250.0])
            opt.step(1e-3)
        np.testing.assert_allclose(np.abs(p.data - before), 1e-3, rtol=0.01)

    def test_non_finite_gradient(self):
        p = ad.Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
        p.grad = np.array([0.0, np.nan])
        with pytest.raises(NumericError, match="'w'"):
            Adam({"w": p}).step(1e-3)

    def test_missing_gradient_is_zero(self):
        p = ad.Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
        Adam({"p": p}).step(1e-3)
        np.testing.assert_array_equal(p.data, 1.0)


class TestClip:
    def test_clip_scales_to_norm(self):
        a = ad.Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
        b = ad.Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        assert clip_grad_norm({"a": a, "b": b}, 1.0) == 5.0
        np.testing.assert_allclose([*a.grad, *b.grad], [0.6, 0.0, 0.8], rtol=1e-10)

    def test_below_norm_untouched(self):
        a = ad.Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
        a.grad = np.array([0.3, 0.4])
        clip_grad_norm({"a": a}, 1.0)
        np.testing.assert_array_equal(a.grad, [0.3, 0.4])


class TestBatches:
    def test_identity_batch(self, body_data):
        b = make_batch(body_data, [0, 2])
        np.testing.assert_array_equal(b.vertices, body_data.records["vertices"][[0, 2]])
        assert b.images is None

    def test_augmented_batch(self, body_data):
        fz = Featurizer(body_data.meta)
        b = make_batch(body_data, [0, 1], np.random.default_rng(0), fz)
        assert not np.array_equal(b.vertices, body_data.records["vertices"][[0, 1]])
        # augmentation is a similarity of the stored sample
        for i in range(2):
            _, _, _, aligned = procrustes_align(body_data.records["vertices"][i], b.vertices[i])
            assert np.abs(aligned - b.vertices[i]).max() < 1e-5


class TestTraining:
    def test_lr_zero_leaves_params(self, tiny_model, hand_data):
        before = {k: p.data.copy() for k, p in tiny_model.params.items()}
        train(tiny_model, hand_data, TrainConfig(epochs=2, batch_size=3, lr_initial=0.0, eval_every=0))
        for k, p in tiny_model.params.items():
            assert np.array_equal(p.data, before[k]), k

    def test_deterministic(self, hand_data):
        cfg = TrainConfig(epochs=2, batch_size=4, lr_initial=1e-3, eval_every=1)
        runs = []
        for _ in range(2):
            m = model_for_dataset(hand_data, TINY, seed=1)
            res = train(m, hand_data, cfg)
            runs.append((res.history, m.params["head.w"].data.copy()))
        assert runs[0][0] == runs[1][0]
        assert np.array_equal(runs[0][1], runs[1][1])

    def test_memorises_single_sample(self, hand_data):
        # a 3-D labelled sample; TINY's width-4 final norm confines outputs to an
        # ellipsoid surface, so this uses a last width of 8
        one = hand_data.subset([int(np.flatnonzero(hand_data.records["alpha"] == 1)[0])])
        enc = EncoderConfig(16, [BlockSpec(16, 2, 2), BlockSpec(8, 2, 2)], upsampler_hidden=8)
        m = model_for_dataset(one, enc, seed=0, dtype=np.float64)
        cfg = TrainConfig(epochs=1000, batch_size=1, lr_initial=1e-3, lr_decay_epoch=500,
                          mvm_max_fraction=0.0, eval_every=0)
        res = train(m, one, cfg)
        assert res.history[-1]["loss_total"] < 0.01 * res.history[0]["loss_total"]

    def test_log_and_checkpoints(self, tmp_path, tiny_model, hand_data):
        cfg = TrainConfig(epochs=3, batch_size=4, lr_initial=1e-3, eval_every=2)
        res = train(tiny_model, hand_data, cfg, out_dir=tmp_path)
        with open(tmp_path / "train_log.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == LOG_COLUMNS
        assert [r["epoch"] for r in rows] == ["0", "1", "2", "3"]
        assert rows[1]["mpjpe"] == "" and rows[2]["mpjpe"] != ""
        back, extra = load_checkpoint(tmp_path / "model.ckpt")
        assert extra["epoch"] == 3
        assert evaluate(back, hand_data) == res.final_report

    def test_early_stop(self, tiny_model, hand_data):
        res = train(tiny_model, hand_data, TrainConfig(epochs=5, batch_size=6, lr_initial=1e-3,
                                                       stop_mpjpe_ratio=10.0))
        assert res.stopped_early and res.epochs_run == 1

    def test_nan_aborts_with_log(self, tmp_path, tiny_model, hand_data):
        tiny_model.params["head.b"].data[...] = np.nan
        with pytest.raises(NumericError):
            train(tiny_model, hand_data, TrainConfig(epochs=2, batch_size=6, eval_every=0), out_dir=tmp_path)
        assert (tmp_path / "train_log.csv").exists()

    def test_empty_dataset(self, tiny_model, hand_data):
        with pytest.raises(ValidationError):
            train(tiny_model, hand_data.subset([]), TrainConfig(epochs=1))

    def test_mask_cap_zero_matches_plain_forward(self, tiny_model, hand_data):
        b = make_batch(hand_data, [0, 1, 2])
        plain = tiny_model.forward(b.feature)
        masked = tiny_model.forward(b.feature, rng=np.random.default_rng(5), mvm_max_fraction=0.0)
        assert np.array_equal(plain.full_vertices3d.data, masked.full_vertices3d.data)

    def test_train_step_reports_breakdown(self, tiny_model, hand_data):
        b = make_batch(hand_data, [0, 1])
        lb = train_step(tiny_model, b, Adam(tiny_model.params), 1e-3, np.random.default_rng(0), TrainConfig())
        assert math.isfinite(lb.total) and lb.l_v > 0


class TestTTA:
    def test_average_aligned_identical(self, rng):
        m = rng.standard_normal((20, 3))
        assert np.array_equal(average_aligned([m, m, m]), m)

    def test_average_aligned_undoes_similarity(self, rng):
        m = rng.standard_normal((20, 3))
        c, s = math.cos(0.3), math.sin(0.3)
        R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        np.testing.assert_allclose(average_aligned([m, 1.2 * m @ R.T + 0.5]), m, atol=1e-12)

    def test_empty(self):
        with pytest.raises(ValidationError):
            average_aligned([])

    def test_identity_transform_is_plain_inference(self, tiny_model, hand_data):
        fz = Featurizer(hand_data.meta)
        single = tta_infer(tiny_model, hand_data[0], [DEFAULT_TTA[0]], fz)
        plain = infer(tiny_model, hand_data[0]).full_vertices3d.data[0]
        assert np.array_equal(single, plain.astype(np.float64))

    def test_default_transforms(self, tiny_model, hand_data):
        out = tta_infer(tiny_model, hand_data[1], DEFAULT_TTA, Featurizer(hand_data.meta))
        assert out.shape == (hand_data[1].vertices.shape[0], 3) and np.isfinite(out).all()
