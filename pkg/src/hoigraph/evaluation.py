"""Protocol-faithful HOI mAP.

Matching is greedy per (image, HOI class) in descending score order: a
prediction is a true positive when both boxes overlap an unmatched ground
truth of the same class with IoU above the threshold, each ground truth
matching at most once.  Average precision integrates the precision envelope
over recall exactly (no sampling grid).  Two image-pool settings are
supported for the HICO-style protocol (default and known-object), and two
occluded-object scenarios for the V-COCO-style protocol.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .decoder import HoiPrediction
from .geometry import Box, iou


@dataclass(frozen=True)
class HoiGroundTruth:
    """One annotated triplet; object_box None marks an occluded object."""

    image_key: str
    human_box: Box
    object_box: Optional[Box]
    category: int
    action: int


@dataclass
class SplitRegistry:
    """Rare / non-rare split: rare means fewer training instances than the
    threshold."""

    counts: dict[int, int]
    rare: set[int]
    threshold: int = 10


def build_split_registry(train_gts: Iterable[HoiGroundTruth], class_index: dict,
                         threshold: int = 10) -> SplitRegistry:
    counts = {cid: 0 for cid in class_index.values()}
    for gt in train_gts:
        cid = class_index.get((gt.action, gt.category))
        if cid is None:
            raise KeyError(f"ground truth ({gt.action}, {gt.category}) not in HOI registry")
        counts[cid] += 1
    rare = {cid for cid, c in counts.items() if c < threshold}
    return SplitRegistry(counts=counts, rare=rare, threshold=threshold)


def _pair_quality(pred: HoiPrediction, gt: HoiGroundTruth, iou_thresh: float,
                  scenario: Optional[int]) -> Optional[float]:
    """Matching quality (pair IoU) if the prediction can match this ground
    truth, else None.  Occluded ground truths exist only in the V-COCO
    protocol, where ``scenario`` selects how the missing box is scored."""
    if gt.object_box is None:
        if scenario == 1 and pred.object_box is not None:
            return None  # scenario 1 demands the explicit no-object sentinel
        if scenario not in (1, 2):
            return None
        q = iou(pred.human_box, gt.human_box)
        return q if q > iou_thresh else None
    if pred.object_box is None:
        return None
    q = min(iou(pred.human_box, gt.human_box), iou(pred.object_box, gt.object_box))
    return q if q > iou_thresh else None


def match_predictions(preds: Sequence[HoiPrediction], gts: Sequence[HoiGroundTruth],
                      iou_thresh: float = 0.5, scenario: Optional[int] = None) -> list[bool]:
    """Greedy TP/FP flags for one class.

    ``preds`` must already be sorted by descending score; all entries are
    assumed to belong to one HOI class.  Each prediction grabs the unmatched
    ground truth of its image with the highest pair IoU (ties to the lower
    ground-truth index); every ground truth matches at most once.
    """
    gt_by_image: dict[str, list[int]] = {}
    for i, gt in enumerate(gts):
        gt_by_image.setdefault(gt.image_key, []).append(i)
    matched: set[int] = set()
    flags: list[bool] = []
    for pred in preds:
        best_idx, best_q = -1, -1.0
        for i in gt_by_image.get(pred.image_key, ()):
            if i in matched:
                continue
            q = _pair_quality(pred, gts[i], iou_thresh, scenario)
            if q is not None and q > best_q:
                best_idx, best_q = i, q
        if best_idx >= 0:
            matched.add(best_idx)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: Sequence[bool], num_gt: int) -> Optional[float]:
    """Area under the precision-recall step curve with the precision envelope.

    ``flags`` must follow the global descending-score order for the class.
    Classes without ground truth are not scored (None), so they never drag a
    mean toward zero.
    """
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    if num_gt == 0:
        return None
    if not len(flags):
        return 0.0
    tf = np.asarray(flags, dtype=np.float64)
    tp = np.cumsum(tf)
    fp = np.cumsum(1.0 - tf)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # precision envelope: p(r) := max over r' >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def _sorted_class_preds(preds: list[HoiPrediction]) -> list[HoiPrediction]:
    # stable: equal scores keep insertion order, so appended duplicates sort later
    return sorted(preds, key=lambda p: -p.score)


def evaluate_hico(preds: Sequence[HoiPrediction], gts: Sequence[HoiGroundTruth],
                  class_index: dict, split: Optional[SplitRegistry] = None,
                  setting: str = "default", iou_thresh: float = 0.5) -> dict:
    """HICO-style mAP over (action, object category) classes.

    default: every image's predictions count against every class.
    known-object: a class only sees images that contain at least one ground
    truth object of the class's category, which can only remove false
    positives.
    """
    if setting not in ("default", "known-object"):
        raise ValueError(f"unknown setting {setting!r}")
    preds_by_class: dict[int, list[HoiPrediction]] = {}
    for p in preds:
        cid = class_index.get((p.action, p.object_category))
        if cid is not None:
            preds_by_class.setdefault(cid, []).append(p)
    gts_by_class: dict[int, list[HoiGroundTruth]] = {}
    images_with_category: dict[int, set[str]] = {}
    for gt in gts:
        cid = class_index.get((gt.action, gt.category))
        if cid is None:
            raise KeyError(f"ground truth ({gt.action}, {gt.category}) not in HOI registry")
        gts_by_class.setdefault(cid, []).append(gt)
        images_with_category.setdefault(gt.category, set()).add(gt.image_key)

    per_class: dict[int, float] = {}
    for (action, category), cid in class_index.items():
        class_gts = gts_by_class.get(cid, [])
        if not class_gts:
            continue
        class_preds = preds_by_class.get(cid, [])
        if setting == "known-object":
            pool = images_with_category.get(category, set())
            class_preds = [p for p in class_preds if p.image_key in pool]
        class_preds = _sorted_class_preds(class_preds)
        flags = match_predictions(class_preds, class_gts, iou_thresh)
        per_class[cid] = average_precision(flags, len(class_gts))

    def subset_mean(ids):
        vals = [per_class[c] for c in ids if c in per_class]
        return float(np.mean(vals)) if vals else float("nan")

    all_ids = list(per_class.keys())
    result = {
        "full": subset_mean(all_ids),
        "rare": float("nan"),
        "non_rare": float("nan"),
        "per_class": per_class,
        "setting": setting,
    }
    if split is not None:
        result["rare"] = subset_mean([c for c in all_ids if c in split.rare])
        result["non_rare"] = subset_mean([c for c in all_ids if c not in split.rare])
    return result


def evaluate_vcoco(preds: Sequence[HoiPrediction], gts: Sequence[HoiGroundTruth],
                   scenario: int, iou_thresh: float = 0.5) -> dict:
    """V-COCO-style role AP, one role per action.

    Scenario 1 scores an occluded ground truth only against predictions that
    explicitly carry the no-object sentinel; scenario 2 ignores object
    localization for occluded ground truths entirely.
    """
    if scenario not in (1, 2):
        raise ValueError("scenario must be 1 or 2")
    preds_by_action: dict[int, list[HoiPrediction]] = {}
    for p in preds:
        preds_by_action.setdefault(p.action, []).append(p)
    gts_by_action: dict[int, list[HoiGroundTruth]] = {}
    for gt in gts:
        gts_by_action.setdefault(gt.action, []).append(gt)

    per_action: dict[int, float] = {}
    for action, class_gts in gts_by_action.items():
        class_preds = _sorted_class_preds(preds_by_action.get(action, []))
        flags = match_predictions(class_preds, class_gts, iou_thresh, scenario=scenario)
        per_action[action] = average_precision(flags, len(class_gts))
    vals = list(per_action.values())
    return {
        "role_ap": float(np.mean(vals)) if vals else float("nan"),
        "per_action": per_action,
        "scenario": scenario,
    }


def ablation_run(dataset, model_cfg, train_cfg, stages: Sequence[str],
                 out_dir=None) -> list[dict]:
    """Train and evaluate the vanilla model plus one model per ablated stage.

    Every run shares the dataset, seeds and hyperparameters; only the stage
    flags differ.  Returns one row per run with default-setting mAPs.
    """
    from .graph import StageFlags
    from .model import InteractionModel, build_stub_providers
    from .training import train

    rows: list[dict] = []
    variants = [("vanilla", StageFlags())]
    for stage in stages:
        variants.append((f"w/o {stage}", StageFlags.without(stage)))
    for name, flags in variants:
        providers = build_stub_providers(model_cfg, dataset.provider_seed)
        model = InteractionModel(model_cfg, dataset.registry, providers, stage_flags=flags)
        run_dir = None
        if out_dir is not None:
            import os
            run_dir = os.path.join(out_dir, name.replace("/", "-").replace(" ", "_"))
            os.makedirs(run_dir, exist_ok=True)
        train(model, dataset, train_cfg, out_dir=run_dir)
        preds = model.predict_dataset(dataset.test)
        split = dataset.split_registry()
        metrics = evaluate_hico(preds, dataset.test_ground_truth(),
                                dataset.registry.class_index, split, "default")
        rows.append({
            "name": name,
            "full": metrics["full"],
            "rare": metrics["rare"],
            "non_rare": metrics["non_rare"],
        })
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    lines = [f"{'method':<20} {'full':>8} {'rare':>8} {'non-rare':>9}"]
    for row in rows:
        lines.append(f"{row['name']:<20} {row['full']:>8.4f} "
                     f"{row['rare']:>8.4f} {row['non_rare']:>9.4f}")
    return "\n".join(lines)
