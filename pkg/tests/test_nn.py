"""Learned blocks: shapes, closed-form limits, gradient checks, checkpoints."""

import numpy as np
import pytest

from hoigraph import autodiff as ad
from hoigraph.config import ModelConfig, config_hash
from hoigraph.nn import (BranchFusion, CheckpointMismatchError, CrossAttention,
                         GateFusion, LayerNorm, Linear, MissingGradientError,
                         ParameterStore, clip_gradients, global_grad_norm,
                         load_checkpoint, save_checkpoint)

from helpers import finite_difference_check


def rnd(shape, seed=0, scale=1.0):
    return np.random.Generator(np.random.Philox(key=seed)).standard_normal(shape) * scale


class TestParameterStore:
    def test_init_is_pure_function_of_seed_and_name(self):
        a = ParameterStore(seed=3).create("w", (4, 5))
        b = ParameterStore(seed=3).create("w", (4, 5))
        np.testing.assert_array_equal(a.value, b.value)
        c = ParameterStore(seed=4).create("w", (4, 5))
        assert not np.allclose(a.value, c.value)

    def test_uniform_bound(self):
        p = ParameterStore(seed=0).create("w", (100, 8))
        assert np.max(np.abs(p.value)) <= 1.0 / np.sqrt(100)

    def test_duplicate_name_rejected(self):
        store = ParameterStore()
        store.create("w", (2,))
        with pytest.raises(ValueError):
            store.create("w", (2,))

    def test_trainable_flag(self):
        store = ParameterStore()
        frozen = store.create("f", (3,), init="ones", trainable=False)
        assert not frozen.requires_grad
        assert ("f" not in dict(store.trainable_items()))


class TestLinear:
    def test_identity_weights(self):
        store = ParameterStore()
        lin = Linear(store, "lin", 3, 3)
        store["lin.w"].value = np.eye(3)
        x = rnd((4, 3), 1)
        np.testing.assert_allclose(lin(ad.Var(x)).value, x)

    def test_zero_input_gives_bias(self):
        store = ParameterStore()
        lin = Linear(store, "lin", 3, 2)
        store["lin.b"].value = np.array([1.0, -2.0])
        out = lin(ad.Var(np.zeros((5, 3))))
        np.testing.assert_allclose(out.value, np.tile([1.0, -2.0], (5, 1)))

    def test_shape_mismatch(self):
        lin = Linear(ParameterStore(), "lin", 3, 2)
        with pytest.raises(ValueError):
            lin(ad.Var(np.zeros((5, 4))))

    def test_gradients(self):
        store = ParameterStore(seed=1)
        lin = Linear(store, "lin", 4, 3)
        x = ad.Var(rnd((2, 4), 2), requires_grad=True)
        w = rnd((2, 3), 3)
        finite_difference_check(
            lambda: ad.sum_all(ad.mul(lin(x), ad.Var(w))),
            store.trainable_items() + [("x", x)])


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        ln = LayerNorm(ParameterStore(), "ln", 4)
        out = ln(ad.Var(np.full((2, 4), 3.7)))
        np.testing.assert_allclose(out.value, 0.0, atol=1e-12)

    def test_already_normalized_row_fixed_point(self):
        ln = LayerNorm(ParameterStore(), "ln", 2)
        out = ln(ad.Var(np.array([[1.0, -1.0]])))
        # variance term: 1/sqrt(1 + 1e-5) pulls a hair under 1
        np.testing.assert_allclose(out.value, [[1.0, -1.0]], atol=1e-5)

    def test_row_statistics(self):
        ln = LayerNorm(ParameterStore(), "ln", 16)
        out = ln(ad.Var(rnd((6, 16), 4, scale=5.0))).value
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_shift_invariance(self):
        ln = LayerNorm(ParameterStore(), "ln", 8)
        x = rnd((3, 8), 5)
        a = ln(ad.Var(x)).value
        b = ln(ad.Var(x + 11.0)).value
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_width_validation(self):
        with pytest.raises(ValueError):
            LayerNorm(ParameterStore(), "ln", 1)

    def test_gradients(self):
        store = ParameterStore(seed=2)
        ln = LayerNorm(store, "ln", 5)
        x = ad.Var(rnd((3, 5), 6), requires_grad=True)
        w = rnd((3, 5), 7)
        finite_difference_check(
            lambda: ad.sum_all(ad.mul(ln(x), ad.Var(w))),
            store.trainable_items() + [("x", x)])


class TestBranchFusion:
    def test_zero_a_gives_output_bias(self):
        store = ParameterStore(seed=3)
        mbf = BranchFusion(store, "mbf", 4, 6, 8, branches=2)
        store["mbf.b"].value = np.arange(8.0)
        out = mbf(ad.Var(np.zeros((3, 4))), ad.Var(rnd((3, 6), 8)))
        np.testing.assert_allclose(out.value, np.tile(np.arange(8.0), (3, 1)))

    def test_single_branch_reduces_to_gated_product(self):
        store = ParameterStore(seed=4)
        mbf = BranchFusion(store, "mbf", 3, 3, 3, branches=1)
        store["mbf.u"].value = np.eye(3)
        store["mbf.v"].value = np.eye(3)
        store["mbf.w"].value = np.eye(3)
        a = np.array([[1.0, 2.0, 0.5]])
        b = np.array([[2.0, 1.0, 4.0]])
        np.testing.assert_allclose(mbf(ad.Var(a), ad.Var(b)).value, a * b)

    def test_broadcast_single_row(self):
        store = ParameterStore(seed=5)
        mbf = BranchFusion(store, "mbf", 4, 6, 8, branches=4)
        a = ad.Var(rnd((1, 4), 9))
        b = ad.Var(rnd((5, 6), 10))
        assert mbf(a, b).value.shape == (5, 8)

    def test_divisibility_validation(self):
        with pytest.raises(ValueError):
            BranchFusion(ParameterStore(), "mbf", 4, 4, 10, branches=4)

    def test_gradients_all_tensors(self):
        store = ParameterStore(seed=6)
        mbf = BranchFusion(store, "mbf", 3, 4, 4, branches=2)
        a = ad.Var(rnd((2, 3), 11), requires_grad=True)
        b = ad.Var(rnd((2, 4), 12), requires_grad=True)
        w = rnd((2, 4), 13)
        finite_difference_check(
            lambda: ad.sum_all(ad.mul(mbf(a, b), ad.Var(w))),
            store.trainable_items() + [("a", a), ("b", b)])


class TestGateFusion:
    def test_gate_closed_limit(self):
        store = ParameterStore(seed=7)
        mmf = GateFusion(store, "mmf", 6, 4)
        store["mmf.s2.b"].value[...] = -50.0  # sigmoid -> 0
        x = rnd((3, 6), 14)
        out = mmf(ad.Var(x), ad.Var(rnd((3, 4), 15)))
        expected = mmf.ln(ad.Var(x)).value
        np.testing.assert_allclose(out.value, expected, atol=1e-12)

    def test_zero_content_zero_biases(self):
        store = ParameterStore(seed=8)
        mmf = GateFusion(store, "mmf", 4, 3)
        store["mmf.ln.b"].value = np.array([1.0, 2.0, 3.0, 4.0])
        out = mmf(ad.Var(np.zeros((2, 4))), ad.Var(rnd((2, 3), 16)))
        np.testing.assert_allclose(out.value, np.tile([1.0, 2.0, 3.0, 4.0], (2, 1)))

    def test_row_count_mismatch(self):
        mmf = GateFusion(ParameterStore(), "mmf", 4, 3)
        with pytest.raises(ValueError):
            mmf(ad.Var(np.zeros((2, 4))), ad.Var(np.zeros((3, 3))))

    def test_gradients(self):
        store = ParameterStore(seed=9)
        mmf = GateFusion(store, "mmf", 4, 3, hidden=4)
        x = ad.Var(rnd((2, 4), 17), requires_grad=True)
        s = ad.Var(rnd((2, 3), 18), requires_grad=True)
        w = rnd((2, 4), 19)
        finite_difference_check(
            lambda: ad.sum_all(ad.mul(mmf(x, s), ad.Var(w))),
            store.trainable_items() + [("x", x), ("s", s)])


class TestCrossAttention:
    def test_single_key_weight_is_one(self):
        store = ParameterStore(seed=10)
        attn = CrossAttention(store, "att", 8, 6, heads=2)
        attn(ad.Var(rnd((3, 8), 20)), ad.Var(rnd((1, 6), 21)))
        np.testing.assert_allclose(attn.last_attention, 1.0, atol=1e-12)

    def test_two_identical_keys_split_evenly(self):
        store = ParameterStore(seed=11)
        attn = CrossAttention(store, "att", 8, 6, heads=2)
        key = rnd((1, 6), 22)
        attn(ad.Var(rnd((2, 8), 23)), ad.Var(np.vstack([key, key])))
        np.testing.assert_allclose(attn.last_attention, 0.5, atol=1e-12)

    def test_rows_sum_to_one(self):
        store = ParameterStore(seed=12)
        attn = CrossAttention(store, "att", 8, 6, heads=4)
        attn(ad.Var(rnd((5, 8), 24, scale=3.0)), ad.Var(rnd((9, 6), 25, scale=3.0)))
        np.testing.assert_allclose(attn.last_attention.sum(axis=-1), 1.0, atol=1e-6)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            CrossAttention(ParameterStore(), "att", 9, 6, heads=2)

    def test_gradients(self):
        store = ParameterStore(seed=13)
        attn = CrossAttention(store, "att", 4, 3, heads=2)
        q = ad.Var(rnd((2, 4), 26), requires_grad=True)
        kv = ad.Var(rnd((3, 3), 27), requires_grad=True)
        w = rnd((2, 4), 28)
        finite_difference_check(
            lambda: ad.sum_all(ad.mul(attn(q, kv), ad.Var(w))),
            store.trainable_items() + [("q", q), ("kv", kv)])


class TestGradientUtilities:
    def test_global_norm_and_clip(self):
        store = ParameterStore()
        a = store.create("a", (2,), init="zeros")
        b = store.create("b", (2,), init="zeros")
        a.grad = np.array([3.0, 0.0])
        b.grad = np.array([0.0, 4.0])
        assert global_grad_norm(store) == pytest.approx(5.0)
        clip_gradients(store, 0.1)
        assert global_grad_norm(store) == pytest.approx(0.1, abs=1e-9)

    def test_clip_noop_under_norm(self):
        store = ParameterStore()
        a = store.create("a", (2,), init="zeros")
        a.grad = np.array([0.01, 0.0])
        clip_gradients(store, 0.1)
        np.testing.assert_allclose(a.grad, [0.01, 0.0])


class TestCheckpoints:
    def _store(self):
        store = ParameterStore(seed=14)
        store.create("w", (3, 4))
        store.create("b", (4,), init="zeros")
        store.create("frozen.t", (2, 2), init="ones", trainable=False)
        return store

    def test_round_trip(self, tmp_path):
        store = self._store()
        store["w"].value += 1.5
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, store, "hash1234")
        other = self._store()
        load_checkpoint(path, other, "hash1234")
        for name in store.names():
            np.testing.assert_array_equal(store[name].value, other[name].value)

    def test_hash_mismatch(self, tmp_path):
        store = self._store()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, store, "hash1234")
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(path, self._store(), "other")

    def test_shape_mismatch(self, tmp_path):
        store = self._store()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, store, "h")
        other = ParameterStore(seed=14)
        other.create("w", (3, 5))
        other.create("b", (4,), init="zeros")
        other.create("frozen.t", (2, 2), init="ones", trainable=False)
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(path, other, "h")

    def test_config_hash_sensitivity(self):
        h1 = config_hash(ModelConfig(), 5, 3)
        h2 = config_hash(ModelConfig(d=32), 5, 3)
        h3 = config_hash(ModelConfig(), 6, 3)
        assert h1 != h2 and h1 != h3
        assert h1 == config_hash(ModelConfig(), 5, 3)
