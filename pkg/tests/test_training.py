"""Targets, focal loss, the optimizer, and the training loop contracts."""

import numpy as np
import pytest

from hoigraph import autodiff as ad
from hoigraph.config import ModelConfig, TrainSettings
from hoigraph.data import SynthTaskSpec, generate_synthetic
from hoigraph.evaluation import HoiGroundTruth
from hoigraph.geometry import Box, PairPolicy, enumerate_pairs
from hoigraph.model import build_stub_providers, InteractionModel
from hoigraph.nn import MissingGradientError, ParameterStore, global_grad_norm
from hoigraph.providers import DetectionPolicy, filter_detections
from hoigraph.training import (AdamW, TrainingDiverged, build_targets, focal_loss,
                               train)

from helpers import det, finite_difference_check


def _fixture_pairs():
    dets = filter_detections(
        [det(0, 0, 10, 10, 0, 0.9, index=0), det(5, 5, 15, 15, 1, 0.8, index=1),
         det(50, 50, 70, 70, 2, 0.7, index=2)],
        DetectionPolicy())
    table = enumerate_pairs(dets, PairPolicy(), 100, 100)
    return dets, table


class TestBuildTargets:
    def test_exact_match_sets_bit(self):
        dets, table = _fixture_pairs()
        gts = [HoiGroundTruth("img", Box(0, 0, 10, 10), Box(5, 5, 15, 15), 1, 1)]
        t = build_targets(table, dets, gts, num_actions=3)
        row = [p for p in range(len(table))
               if table.h_index[p] == 0 and dets.categories()[table.o_index[p]] == 1]
        np.testing.assert_array_equal(t[row[0]], [0, 1, 0])
        assert t.sum() == 1.0

    def test_no_gts_all_zero(self):
        dets, table = _fixture_pairs()
        t = build_targets(table, dets, [], num_actions=3)
        np.testing.assert_array_equal(t, 0.0)

    def test_multi_label_overlapping_gts(self):
        dets, table = _fixture_pairs()
        gts = [HoiGroundTruth("img", Box(0, 0, 10, 10), Box(5, 5, 15, 15), 1, 0),
               HoiGroundTruth("img", Box(1, 1, 11, 11), Box(4, 4, 14, 14), 1, 2)]
        t = build_targets(table, dets, gts, num_actions=3)
        row = [p for p in range(len(table))
               if table.h_index[p] == 0 and dets.categories()[table.o_index[p]] == 1][0]
        np.testing.assert_array_equal(t[row], [1, 0, 1])

    def test_exhaustive_matcher_oracle(self):
        dets, table = _fixture_pairs()
        rng = np.random.Generator(np.random.Philox(key=5))
        gts = []
        for _ in range(4):
            x, y = rng.uniform(0, 50, 2)
            w, h = rng.uniform(5, 30, 2)
            gts.append(HoiGroundTruth("img", Box(0, 0, 10, 10),
                                      Box(x, y, x + w, y + h),
                                      int(rng.integers(1, 3)), int(rng.integers(0, 3))))
        t = build_targets(table, dets, gts, num_actions=3)
        from hoigraph.geometry import iou
        for p in range(len(table)):
            hbox = dets.detections[int(table.h_index[p])].box
            obox = dets.detections[int(table.o_index[p])].box
            ocat = int(dets.categories()[table.o_index[p]])
            for a in range(3):
                expected = any(
                    gt.action == a and gt.category == ocat
                    and iou(hbox, gt.human_box) > 0.5 and iou(obox, gt.object_box) > 0.5
                    for gt in gts)
                assert t[p, a] == float(expected)

    def test_category_mismatch_blocks(self):
        dets, table = _fixture_pairs()
        gts = [HoiGroundTruth("img", Box(0, 0, 10, 10), Box(5, 5, 15, 15), 2, 1)]
        t = build_targets(table, dets, gts, num_actions=3)
        assert t.sum() == 0.0


class TestFocalLoss:
    def test_gamma_zero_alpha_half_is_half_bce(self):
        rng = np.random.Generator(np.random.Philox(key=6))
        logits = rng.standard_normal((4, 5)) * 3
        targets = (rng.uniform(size=(4, 5)) < 0.4).astype(np.float64)
        loss = focal_loss(ad.Var(logits), targets, alpha=0.5, gamma=0.0)
        p = 1.0 / (1.0 + np.exp(-logits))
        bce = -(targets * np.log(p) + (1 - targets) * np.log(1 - p))
        assert float(loss.value) == pytest.approx(0.5 * bce.mean(), abs=1e-10)

    def test_saturated_positive_contributes_nothing(self):
        loss = focal_loss(ad.Var(np.array([[100.0]])), np.array([[1.0]]),
                          alpha=0.25, gamma=2.0)
        assert float(loss.value) < 1e-8

    def test_direct_formula_oracle(self):
        rng = np.random.Generator(np.random.Philox(key=7))
        logits = rng.standard_normal((2, 3)) * 2
        targets = np.array([[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        alpha, gamma = 0.25, 2.0
        loss = float(focal_loss(ad.Var(logits), targets, alpha, gamma).value)
        p = 1.0 / (1.0 + np.exp(-logits))
        p_t = np.where(targets == 1.0, p, 1.0 - p)
        a_t = np.where(targets == 1.0, alpha, 1.0 - alpha)
        expected = float(np.mean(-a_t * (1.0 - p_t) ** gamma * np.log(p_t)))
        assert loss == pytest.approx(expected, abs=1e-10)

    def test_finite_at_extreme_logits(self):
        logits = np.array([[100.0, -100.0], [-100.0, 100.0]])
        targets = np.array([[1.0, 0.0], [1.0, 0.0]])
        loss = focal_loss(ad.Var(logits), targets)
        assert np.isfinite(float(loss.value))

    def test_gradient(self):
        rng = np.random.Generator(np.random.Philox(key=8))
        x = ad.Var(rng.standard_normal((3, 4)), requires_grad=True)
        targets = (rng.uniform(size=(3, 4)) < 0.5).astype(np.float64)
        finite_difference_check(lambda: focal_loss(x, targets, 0.25, 2.0),
                                [("logits", x)])

    def test_weighted_matches_manual(self):
        logits = np.array([[0.3, -0.2], [1.0, 0.5]])
        targets = np.array([[1.0, 0.0], [0.0, 1.0]])
        w = np.array([[0.5, 0.5], [0.0, 0.0]])
        weighted = float(focal_loss(ad.Var(logits), targets, weights=w).value)
        per_row = float(focal_loss(ad.Var(logits[:1]), targets[:1]).value)
        assert weighted == pytest.approx(per_row, abs=1e-12)


class TestAdamW:
    def test_zero_grad_zero_decay_keeps_parameters(self):
        store = ParameterStore()
        p = store.create("w", (3,), init="ones")
        p.grad = np.zeros(3)
        AdamW(store, lr=0.1).step()
        np.testing.assert_array_equal(p.value, np.ones(3))

    def test_single_step_hand_value(self):
        # theta=1, g=1, lr=0.1: bias-corrected m_hat = v_hat = 1 -> theta ~ 0.9
        store = ParameterStore()
        p = store.create("w", (), init="ones")
        p.grad = np.array(1.0)
        AdamW(store, lr=0.1).step()
        assert float(p.value) == pytest.approx(0.9, abs=1e-6)

    def test_decoupled_decay_with_zero_grad(self):
        store = ParameterStore()
        p = store.create("w", (), init="ones")
        opt = AdamW(store, lr=0.1, weight_decay=0.5)
        for _ in range(3):
            p.grad = np.array(0.0)
            opt.step()
        assert float(p.value) == pytest.approx((1 - 0.1 * 0.5) ** 3, abs=1e-12)

    def test_missing_gradient_raises(self):
        store = ParameterStore()
        store.create("w", (2,))
        with pytest.raises(MissingGradientError):
            AdamW(store, lr=0.1).step()

    def test_frozen_tensors_untouched(self):
        store = ParameterStore()
        frozen = store.create("frozen", (2,), init="ones", trainable=False)
        p = store.create("w", (2,), init="ones")
        p.grad = np.ones(2)
        AdamW(store, lr=0.5, weight_decay=0.3).step()
        np.testing.assert_array_equal(frozen.value, np.ones(2))

    def test_state_round_trip(self):
        store = ParameterStore(seed=1)
        p = store.create("w", (3,))
        opt = AdamW(store, lr=0.01)
        for _ in range(4):
            p.grad = np.full(3, 0.2)
            opt.step()
        clone_store = ParameterStore(seed=1)
        clone_store.create("w", (3,))
        clone = AdamW(clone_store, lr=0.01)
        clone.load_state_tensors(opt.state_tensors())
        assert clone.t == opt.t
        np.testing.assert_array_equal(clone.m["w"], opt.m["w"])


def small_setup(task="spatial-rule", scenes=12, test_scenes=4, seed=0):
    spec = SynthTaskSpec(task=task, scenes=scenes, test_scenes=test_scenes,
                         num_categories=3, seed=seed, provider_seed=seed,
                         embed_dim=8)
    dataset = generate_synthetic(spec)
    cfg = ModelConfig(d=8, d_v=8, d_t=8, d_b=8, branches=2, steps=2,
                      decoder_layers=1, decoder_heads=2, backbone_grid=3,
                      param_seed=seed)
    model = InteractionModel(cfg, dataset.registry,
                             build_stub_providers(cfg, dataset.provider_seed))
    return dataset, cfg, model


class TestTrainLoop:
    def test_loss_decreases_and_metrics_written(self, tmp_path):
        dataset, cfg, model = small_setup()
        settings = TrainSettings(lr=2e-3, epochs=8, batch_size=4, seed=0)
        result = train(model, dataset, settings, out_dir=str(tmp_path))
        assert result.final_loss < result.loss_history[0]
        lines = (tmp_path / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) == 8

    def test_identical_seeds_identical_curves(self, tmp_path):
        settings = TrainSettings(lr=1e-3, epochs=4, batch_size=4, seed=9)
        curves = []
        for _ in range(2):
            dataset, cfg, model = small_setup(seed=2)
            result = train(model, dataset, settings)
            curves.append(result.loss_history)
        assert curves[0] == curves[1]

    def test_frozen_tensors_bit_identical_after_training(self):
        dataset, cfg, model = small_setup()
        before = model.frozen_fingerprint()
        frozen_before = {n: p.value.copy() for n, p in model.store.items()
                         if not p.requires_grad}
        train(model, dataset, TrainSettings(lr=2e-3, epochs=3, batch_size=4, seed=0))
        assert model.frozen_fingerprint() == before
        for n, v in frozen_before.items():
            np.testing.assert_array_equal(model.store[n].value, v)

    def test_resume_matches_uninterrupted(self, tmp_path):
        settings_full = TrainSettings(lr=2e-3, epochs=6, batch_size=4, seed=4)
        dataset, cfg, model_a = small_setup(seed=5)
        result_full = train(model_a, dataset, settings_full)

        dataset_b, _, model_b = small_setup(seed=5)
        half = TrainSettings(lr=2e-3, epochs=3, batch_size=4, seed=4)
        train(model_b, dataset_b, half, out_dir=str(tmp_path))
        dataset_c, _, model_c = small_setup(seed=5)
        resumed = train(model_c, dataset_c, settings_full,
                        out_dir=str(tmp_path / "resumed"),
                        resume_from=str(tmp_path / "latest"))
        assert resumed.loss_history == result_full.loss_history[3:]
        for name, p in model_a.store.items():
            np.testing.assert_array_equal(p.value, model_c.store[name].value)

    def test_single_scene_overfit_drives_loss_down(self):
        dataset, cfg, model = small_setup(scenes=1, test_scenes=1, seed=7)
        settings = TrainSettings(lr=5e-3, epochs=500, batch_size=1, seed=0,
                                 weight_decay=0.0, checkpoint_every=0)
        result = train(model, dataset, settings)
        assert result.final_loss < 1e-3

    def test_clip_bounds_global_norm(self):
        dataset, cfg, model = small_setup()
        prepared = [model.prepare_scene(s, with_targets=True) for s in dataset.train[:4]]
        out = model.forward(prepared)
        from hoigraph.model import stack_targets
        targets, weights = stack_targets(prepared, out.slices,
                                         model.registry.num_actions)
        loss = focal_loss(out.logits, targets, weights=weights)
        ad.backward(loss)
        from hoigraph.nn import clip_gradients
        clip_gradients(model.store, 0.1)
        assert global_grad_norm(model.store) <= 0.1 + 1e-6

    def test_divergence_dumps_diagnostics(self, tmp_path):
        dataset, cfg, model = small_setup()
        model.store["head.b"].value[...] = np.nan
        with pytest.raises(TrainingDiverged):
            train(model, dataset, TrainSettings(epochs=1, batch_size=4, seed=0),
                  out_dir=str(tmp_path))
        assert (tmp_path / "divergence.json").exists()
