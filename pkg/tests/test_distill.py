import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from curlprune import tensor as T
from curlprune.augment import one_hot
from curlprune.data import SyntheticSpec, make_synthetic
from curlprune.distill import (DistillConfig, FinetuneConfig, LogitStore, finetune, refine_logits, seed_store,
                               step1_loss, step2_loss)
from curlprune.nn import ArchConfig, build_tiny_resnet
from curlprune.training import predict_logits

from gradcheck import check


def _logits(seed, n=4, c=5):
    return np.random.default_rng(seed).standard_normal((n, c))


def _ce(v, y):
    z = v - v.max(axis=1, keepdims=True)
    logq = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(y * logq).sum(axis=1).mean())


class TestConfig:
    def test_defaults(self):
        assert DistillConfig.step1() == DistillConfig(2.0, 0.7, "step1")
        assert DistillConfig.step2() == DistillConfig(1.0, 0.7, "step2")

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_alpha_range(self, alpha):
        with pytest.raises(ValueError, match="alpha"):
            DistillConfig.step1(alpha=alpha)

    def test_wrong_step(self):
        with pytest.raises(ValueError):
            step1_loss(_logits(0), _logits(0), one_hot([0, 1, 2, 3], 5), DistillConfig.step2())


class TestStep1:
    def test_identical_logits_leave_ce(self):
        v = _logits(1)
        y = one_hot([0, 1, 2, 3], 5, np.float64)
        parts = {}
        loss = step1_loss(T.Tensor(v), v, y, DistillConfig.step1(), parts)
        assert abs(parts["kl"]) < 1e-12
        assert math.isclose(float(loss.data), 0.3 * _ce(v, y), rel_tol=1e-9)

    def test_alpha_one_ignores_labels(self):
        v, u = _logits(2), _logits(3)
        cfg = DistillConfig.step1(alpha=1.0)
        a = step1_loss(T.Tensor(v), u, one_hot([0, 0, 0, 0], 5, np.float64), cfg).data
        b = step1_loss(T.Tensor(v), u, one_hot([4, 3, 2, 1], 5, np.float64), cfg).data
        assert a == b

    def test_matches_closed_form(self):
        v, u = _logits(4), _logits(5)
        y = one_hot([1, 1, 0, 4], 5, np.float64)
        t = 2.0
        p = np.exp(u / t) / np.exp(u / t).sum(1, keepdims=True)
        q = np.exp(v / t) / np.exp(v / t).sum(1, keepdims=True)
        kl = float((p * np.log(p / q)).sum(1).mean())
        expected = 0.7 * t * t * kl + 0.3 * _ce(v, y)
        assert math.isclose(float(step1_loss(T.Tensor(v), u, y, DistillConfig.step1()).data), expected, rel_tol=1e-9)

    def test_gradient_reaches_student_only(self):
        y = one_hot([0, 2, 1, 3], 5, np.float64)
        u0 = _logits(7)
        assert check(lambda v: step1_loss(v, u0, y, DistillConfig.step1()), [_logits(6)]) < 1e-5
        v, u = T.Parameter(_logits(6)), T.Parameter(u0)
        T.backward(step1_loss(v, u, y, DistillConfig.step1()))
        assert np.all(u.grad == 0) and np.any(v.grad != 0)


class TestStep2:
    def test_identical_logits_kl_zero(self):
        v = _logits(8)
        parts = {}
        step2_loss(T.Tensor(v), T.Tensor(v), [0, 1, 2, 3], DistillConfig.step2(), parts)
        assert abs(parts["kl"]) < 1e-12

    @pytest.mark.parametrize("temperature", [1.0, 2.0])
    def test_gradients_to_student_and_logits(self, temperature):
        cfg = DistillConfig.step2(temperature=temperature)
        y = [3, 0, 4, 1]
        assert check(lambda v, u: step2_loss(v, u, y, cfg), [_logits(9), _logits(10)]) < 1e-5

    def test_reversed_direction(self):
        v, u = _logits(11), _logits(12)
        p = np.exp(u) / np.exp(u).sum(1, keepdims=True)
        q = np.exp(v) / np.exp(v).sum(1, keepdims=True)
        parts = {}
        step2_loss(T.Tensor(v), T.Tensor(u), [0, 0, 0, 0], DistillConfig.step2(), parts)
        assert math.isclose(parts["kl"], float((q * np.log(q / p)).sum(1).mean()), rel_tol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)), arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
    def test_kl_nonnegative(self, v, u):
        parts = {}
        step2_loss(T.Tensor(v), T.Tensor(u), [0, 1, 2], DistillConfig.step2(), parts)
        assert parts["kl"] >= -1e-12


class TestStore:
    def test_refine_step(self):
        store = LogitStore(np.zeros((4, 3)), eta=1.0)
        g = np.array([[1.0, 2.0, 3.0], [-1.0, 0.0, 0.5]])
        assert refine_logits(store, [2, 0], g) == 2
        np.testing.assert_array_equal(store.u[2], -g[0])
        np.testing.assert_array_equal(store.u[0], -g[1])
        np.testing.assert_array_equal(store.u[[1, 3]], 0)

    def test_eta_zero_freezes(self):
        store = LogitStore(np.ones((2, 3)), eta=0.0)
        refine_logits(store, [0, 1], np.ones((2, 3)))
        assert np.all(store.u == 1)

    def test_non_finite_rows_skipped(self, caplog):
        store = LogitStore(np.zeros((2, 2)), eta=1.0)
        refine_logits(store, [0, 1], np.array([[np.nan, 1.0], [1.0, 1.0]]))
        np.testing.assert_array_equal(store.u, [[0, 0], [-1, -1]])
        assert "non-finite" in caplog.text

    def test_missing_record(self):
        store = LogitStore(np.zeros((2, 2)))
        with pytest.raises(KeyError, match="missing"):
            refine_logits(store, [5], np.zeros((1, 2)))

    def test_file_roundtrip(self, tmp_path):
        store = LogitStore(np.random.default_rng(0).standard_normal((5, 3)), eta=1.0, epoch=4)
        store.save(tmp_path / "u.bin")
        back = LogitStore.load(tmp_path / "u.bin")
        assert back.u.tobytes() == store.u.tobytes() and (back.eta, back.epoch) == (1.0, 4)

    def test_frozen_student_update_lowers_loss(self):
        rng = np.random.default_rng(3)
        cfg = DistillConfig.step2()
        store = LogitStore(rng.standard_normal((32, 10)) * 3, eta=1.0)
        ids = np.arange(32)
        v = rng.standard_normal((32, 10))
        y = rng.integers(0, 10, 32)
        u = T.Parameter(store.get(ids), dtype=np.float64)
        before = step2_loss(T.Tensor(v, dtype=np.float64), u, y, cfg)
        T.backward(before)
        refine_logits(store, ids, u.grad)
        after = step2_loss(T.Tensor(v, dtype=np.float64), T.Tensor(store.get(ids), dtype=np.float64), y, cfg)
        T.clear_tape()
        assert float(after.data) < float(before.data)


@pytest.fixture(scope="module")
def pair():
    cfg = ArchConfig(widths=(8, 16), blocks=(1, 1), image_size=8, stem_width=4)
    teacher = build_tiny_resnet(cfg, seed=0)
    student = build_tiny_resnet(cfg, seed=1)
    ds = make_synthetic(SyntheticSpec(per_class=3, side=8, patch=5))
    return teacher, student, ds, ds.channel_stats()


class TestFinetune:
    def _snap(self, net):
        return [p.data.tobytes() for p in net.parameters()] + \
            [bn.running_mean.tobytes() + bn.running_var.tobytes() for _, bn in net.conv_bn_pairs()]

    def test_teacher_untouched_and_metrics(self, pair, tmp_path):
        teacher, student, ds, norm = pair
        before = self._snap(teacher)
        cfg = FinetuneConfig(arm="curl", epochs1=2, epochs2=1, warmup1=1, seed=0)
        res = finetune(student.clone(), teacher, ds, cfg, norm, eval_set=ds, store_path=tmp_path / "u.bin")
        assert self._snap(teacher) == before
        phases = [r["phase"] for r in res.log.rows]
        assert phases == ["step1", "step1", "step2", "final"]
        assert len(res.store) == 6 * len(ds)
        assert LogitStore.load(tmp_path / "u.bin").epoch == 1
        assert 0 <= res.final_accuracy <= 100

    def test_class_mismatch(self, pair):
        teacher, _, ds, norm = pair
        other = build_tiny_resnet(ArchConfig(widths=(8, 16), blocks=(1, 1), image_size=8, stem_width=4,
                                             class_count=3))
        with pytest.raises(ValueError, match="classes"):
            finetune(other, teacher, ds, FinetuneConfig(epochs1=1), norm)

    def test_frozen_logits_without_expansion(self, pair):
        teacher, student, ds, norm = pair
        cfg = FinetuneConfig(arm="curl", epochs1=0, epochs2=1, refine=False, expand=False, flip=False, seed=0)
        res = finetune(student.clone(), teacher, ds, cfg, norm)
        assert len(res.store) == len(ds)
        np.testing.assert_array_equal(res.store.u, seed_store(teacher, ds, norm, 0.0).u)
        assert res.store.eta == 0.0

    def test_plain_arm_needs_no_teacher(self, pair):
        _, student, ds, norm = pair
        res = finetune(student.clone(), None, ds, FinetuneConfig(arm="plain", epochs1=1), norm)
        assert res.store is None and res.log.rows[0]["kl"] == 0.0

    def test_deterministic(self, pair):
        teacher, student, ds, norm = pair
        cfg = FinetuneConfig(arm="kd_mixup", epochs1=1, seed=3)
        a = finetune(student.clone(), teacher, ds, cfg, norm).net
        b = finetune(student.clone(), teacher, ds, cfg, norm).net
        x = np.zeros((2, 1, 8, 8), dtype=np.float32)
        assert predict_logits(a, x).tobytes() == predict_logits(b, x).tobytes()
