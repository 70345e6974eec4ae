import csv

import numpy as np
import pytest

from helpers import apply_cast, smooth_images, write_corpus
from uwformer import tensor as T
from uwformer.io import load_checkpoint, quantize, write_ppm
from uwformer.metrics import spl
from uwformer.model import ModelConfig
from uwformer.tensor import Tensor
from uwformer.trainer import (
    TEACHER_PREFIX,
    DataError,
    NumericError,
    TrainConfig,
    TrainConfigError,
    augment,
    ema_update,
    init_state,
    load_labeled,
    load_state,
    lr_schedule,
    masked_loss,
    random_crop,
    save_state,
    spl_gate,
    supervised_loss,
    supervised_step,
    train_loop,
    train_step,
)

TINY_MODEL = dict(base_channels=4, encoder_blocks=[1, 1, 1, 1], decoder_blocks=[1, 1, 1], ffc_blocks=1)


def tiny_config(**kw):
    base = dict(epochs=2, lr_drop_epoch=1, batch_size=2, lr=1e-3, model=dict(TINY_MODEL))
    base.update(kw)
    return TrainConfig(**base)


def batch(seed, n=2, size=16):
    clean = smooth_images(np.random.default_rng(seed), n, size)
    return apply_cast(clean), clean


class TestLosses:
    def test_equal_is_zero(self):
        a = Tensor(np.random.default_rng(0).random((2, 3, 4, 4)))
        assert supervised_loss(a, a).item() == 0.0
        assert supervised_loss(a, a, "l2").item() == 0.0

    def test_constant_offset(self):
        a = np.random.default_rng(1).random((1, 3, 4, 4))
        assert supervised_loss(Tensor(a), Tensor(a + 0.5)).item() == pytest.approx(0.5)
        assert supervised_loss(Tensor(a), Tensor(a + 0.5), "l2").item() == pytest.approx(0.25)

    def test_l1_gradient(self):
        rng = np.random.default_rng(2)
        p = Tensor(rng.random((1, 3, 4, 4)), requires_grad=True)
        t = rng.random((1, 3, 4, 4))
        T.backward(supervised_loss(p, Tensor(t)))
        np.testing.assert_allclose(p.grad, np.sign(p.data - t) / p.data.size)

    def test_masked_loss_ignores_rejected(self):
        rng = np.random.default_rng(3)
        pred = rng.random((3, 3, 4, 4))
        target = rng.random((3, 3, 4, 4))
        mask = np.array([1, 0, 1])
        got = masked_loss(Tensor(pred), target, mask).item()
        want = np.abs(pred - target)[[0, 2]].mean()
        assert got == pytest.approx(want)


class TestEma:
    def _pair(self):
        rng = np.random.default_rng(4)
        t = {"w": Tensor(rng.random(5))}
        s = {"w": Tensor(rng.random(5))}
        return t, s

    def test_alpha_one_freezes(self):
        t, s = self._pair()
        before = t["w"].data.copy()
        ema_update(t, s, 1.0)
        np.testing.assert_array_equal(t["w"].data, before)

    def test_alpha_zero_copies(self):
        t, s = self._pair()
        ema_update(t, s, 0.0)
        np.testing.assert_array_equal(t["w"].data, s["w"].data)

    def test_single_step(self):
        t = {"w": Tensor(np.array([1.0]))}
        s = {"w": Tensor(np.array([0.0]))}
        ema_update(t, s, 0.99)
        assert t["w"].data[0] == pytest.approx(0.99)

    def test_schema_mismatch(self):
        with pytest.raises(ValueError):
            ema_update({"a": Tensor(np.zeros(2))}, {"b": Tensor(np.zeros(2))}, 0.5)


class TestGate:
    def test_tie_is_accepted(self):
        x = np.random.default_rng(5).random((2, 3, 16, 16))
        np.testing.assert_array_equal(spl_gate(x, x), [1, 1])

    def test_gray_output_rejected(self):
        x = np.random.default_rng(6).random((1, 3, 16, 16))
        gray = np.full_like(x, 0.5)
        assert spl(gray[0]) < spl(x[0])
        np.testing.assert_array_equal(spl_gate(gray, x), [0])

    def test_infinite_margin_rejects_all(self):
        x = np.random.default_rng(7).random((3, 3, 16, 16))
        assert not spl_gate(x, np.zeros_like(x), float("inf")).any()

    def test_margin(self):
        rng = np.random.default_rng(8)
        inp = np.full((1, 3, 16, 16), 0.5)
        out = rng.random((1, 3, 16, 16))
        gain = spl(out[0]) - spl(inp[0])
        assert spl_gate(out, inp, gain - 1e-9)[0] == 1
        assert spl_gate(out, inp, gain + 1e-9)[0] == 0


class TestSchedule:
    def test_step_drop(self):
        cfg = TrainConfig()
        assert lr_schedule(0, cfg) == 2e-4
        assert lr_schedule(99, cfg) == 2e-4
        assert lr_schedule(100, cfg) == pytest.approx(2e-5)
        assert lr_schedule(150, cfg) == pytest.approx(2e-5)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.ema_decay, cfg.unsup_weight) == (200, 4, 0.999, 0.1)

    @pytest.mark.parametrize("kw", [
        dict(ema_decay=1.5), dict(unsup_weight=-1), dict(lr_drop_epoch=300),
        dict(loss="huber"), dict(crop_size=20), dict(batch_size=0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(TrainConfigError):
            TrainConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(TrainConfigError):
            TrainConfig.from_dict({"epochs": 3, "momentum": 0.9})

    def test_nested_model(self):
        cfg = TrainConfig.from_dict({"model": TINY_MODEL})
        assert cfg.model == ModelConfig(**TINY_MODEL)


class TestSteps:
    def test_zero_lambda_matches_supervised_path(self):
        cfg = tiny_config(unsup_weight=0.0)
        a, b = init_state(cfg), init_state(cfg)
        for i in range(3):
            x, y = batch(i)
            u, _ = batch(10 + i)
            la = train_step(a, (x, y), u, cfg)
            lb = supervised_step(b, x, y, cfg)
            assert la.sup == lb.sup
        for k in a.student:
            np.testing.assert_array_equal(a.student[k].data, b.student[k].data)
            np.testing.assert_array_equal(a.teacher[k].data, b.teacher[k].data)

    def test_zero_lr_leaves_student(self):
        cfg = tiny_config()
        state = init_state(cfg)
        before = {k: v.data.copy() for k, v in state.student.items()}
        x, y = batch(0)
        train_step(state, (x, y), batch(1)[0], cfg, lr=0.0)
        for k, v in state.student.items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_step_counts_and_gate_stats(self):
        cfg = tiny_config()
        state = init_state(cfg)
        x, y = batch(0)
        out = train_step(state, (x, y), batch(1, n=3)[0], cfg)
        assert state.step == 1 and state.adam.step == 1
        assert out.evaluated == 3 and 0 <= out.accepted <= 3

    def test_replayed_ema(self, tmp_path):
        cfg = tiny_config(ema_decay=0.99)
        state = init_state(cfg)
        replay = {k: v.data.astype(np.float64) for k, v in state.student.items()}
        for i in range(50):
            x, y = batch(i % 5)
            train_step(state, (x, y), batch(100 + i % 7)[0], cfg)
            for k, v in state.student.items():
                replay[k] = 0.99 * replay[k] + 0.01 * v.data.astype(np.float64)
        save_state(tmp_path / "s.uwf", state, cfg)
        tensors, _ = load_checkpoint(tmp_path / "s.uwf")
        worst = max(np.abs(tensors[TEACHER_PREFIX + k] - replay[k]).max() for k in replay)
        assert worst < 1e-6

    def test_nan_raises(self):
        cfg = tiny_config()
        state = init_state(cfg)
        x, y = batch(0)
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            supervised_step(state, x, y, cfg)

    def test_state_round_trip(self, tmp_path):
        cfg = tiny_config()
        state = init_state(cfg)
        x, y = batch(0)
        train_step(state, (x, y), batch(1)[0], cfg)
        save_state(tmp_path / "a.uwf", state, cfg)
        loaded, cfg2 = load_state(tmp_path / "a.uwf")
        assert cfg2 == cfg and loaded.step == 1
        for k in state.student:
            np.testing.assert_array_equal(loaded.student[k].data, state.student[k].data)
            np.testing.assert_array_equal(loaded.adam.m[k], state.adam.m[k])
        assert loaded.rng.integers(1 << 30) == state.rng.integers(1 << 30)


class TestAugment:
    def test_joint(self):
        rng = np.random.default_rng(9)
        a = rng.random((3, 8, 8))
        for seed in range(8):
            x, y = augment(np.random.default_rng(seed), a, a.copy())
            np.testing.assert_array_equal(x, y)

    def test_non_square_keeps_shape(self):
        a = np.random.default_rng(10).random((3, 8, 16))
        for seed in range(8):
            (x,) = augment(np.random.default_rng(seed), a)
            assert x.shape == a.shape

    def test_pixels_preserved(self):
        a = np.random.default_rng(11).random((3, 8, 8))
        (x,) = augment(np.random.default_rng(3), a)
        np.testing.assert_array_equal(np.sort(x.ravel()), np.sort(a.ravel()))

    def test_crop(self):
        a = np.arange(3 * 32 * 48, dtype=float).reshape(3, 32, 48)
        x, y = random_crop(np.random.default_rng(0), 16, a, a)
        assert x.shape == (3, 16, 16)
        np.testing.assert_array_equal(x, y)
        with pytest.raises(DataError):
            random_crop(np.random.default_rng(0), 64, a)


class TestLoop:
    def _corpus(self, tmp_path):
        rng = np.random.default_rng(12)
        lab = write_corpus(tmp_path / "lab", smooth_images(rng, 3, 16))
        unl = write_corpus(tmp_path / "unl", smooth_images(rng, 2, 16), labeled=False)
        return lab, unl

    def test_log_and_checkpoint(self, tmp_path):
        lab, unl = self._corpus(tmp_path)
        cfg = tiny_config(epochs=3, checkpoint_every=2)
        state, rows = train_loop(lab, unl, cfg, tmp_path / "m.uwf")
        assert state.epoch == 3 and state.step == 6
        with open(tmp_path / "m.uwf.log.csv") as f:
            log = list(csv.reader(f))
        assert log[0] == ["epoch", "l_sup", "l_unsup", "gate_rate", "lr"]
        assert [r[0] for r in log[1:]] == ["0", "1", "2"]
        assert all(0.0 <= float(r[3]) <= 1.0 for r in log[1:])
        assert float(log[1][4]) == 1e-3 and float(log[2][4]) == pytest.approx(1e-4)
        _, scalars = load_checkpoint(tmp_path / "m.uwf")
        assert scalars["epoch"] == 3

    def test_deterministic(self, tmp_path):
        lab, unl = self._corpus(tmp_path)
        cfg = tiny_config()
        for name in ("a", "b"):
            train_loop(lab, unl, cfg, tmp_path / f"{name}.uwf")
        assert (tmp_path / "a.uwf").read_bytes() == (tmp_path / "b.uwf").read_bytes()
        assert (tmp_path / "a.uwf.log.csv").read_bytes() == (tmp_path / "b.uwf.log.csv").read_bytes()

    def test_empty_unlabeled(self, tmp_path):
        lab, _ = self._corpus(tmp_path)
        (tmp_path / "empty").mkdir()
        _, rows = train_loop(lab, tmp_path / "empty", tiny_config(), tmp_path / "m.uwf")
        assert all(r["l_unsup"] == 0.0 and r["gate_rate"] == 0.0 for r in rows)

    def test_missing_target(self, tmp_path):
        lab, _ = self._corpus(tmp_path)
        (lab / "target" / "img001.ppm").unlink()
        with pytest.raises(DataError, match="img001"):
            load_labeled(lab)

    def test_mixed_sizes_need_crop(self, tmp_path):
        lab, _ = self._corpus(tmp_path)
        big = quantize(np.random.default_rng(13).random((3, 32, 32)))
        write_ppm(lab / "input" / "z.ppm", big)
        write_ppm(lab / "target" / "z.ppm", big)
        with pytest.raises(DataError):
            train_loop(lab, None, tiny_config(), tmp_path / "m.uwf")
        train_loop(lab, None, tiny_config(crop_size=16, epochs=2), tmp_path / "m.uwf")
