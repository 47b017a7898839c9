"""Static plot rendering: per-class precision-recall curves and decoder
attention heatmaps.  Output is image files only; nothing interactive."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import match_predictions, _sorted_class_preds


def pr_curves(preds, gts, registry, out_dir, iou_thresh: float = 0.5,
              max_classes: int = 32) -> list[str]:
    """One PR-curve PNG per HOI class with ground truth; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    by_class_preds: dict[int, list] = {}
    by_class_gts: dict[int, list] = {}
    for p in preds:
        cid = registry.class_index.get((p.action, p.object_category))
        if cid is not None:
            by_class_preds.setdefault(cid, []).append(p)
    for gt in gts:
        cid = registry.class_index.get((gt.action, gt.category))
        by_class_gts.setdefault(cid, []).append(gt)

    paths = []
    for cid, class_gts in sorted(by_class_gts.items())[:max_classes]:
        class_preds = _sorted_class_preds(by_class_preds.get(cid, []))
        flags = match_predictions(class_preds, class_gts, iou_thresh)
        tp = np.cumsum(np.asarray(flags, dtype=np.float64)) if flags else np.array([])
        n = np.arange(1, len(flags) + 1)
        recall = tp / len(class_gts) if len(flags) else np.array([0.0])
        precision = tp / n if len(flags) else np.array([0.0])
        action, category = registry.hoi_classes[cid]
        label = f"{registry.actions[action]}-{registry.categories[category]}"
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(np.concatenate([[0.0], recall]), np.concatenate([[1.0], precision]),
                drawstyle="steps-post")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.set_title(label, fontsize=9)
        path = os.path.join(out_dir, f"pr_class_{cid:04d}.png")
        fig.tight_layout()
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths


def attention_heatmaps(export: dict, out_dir) -> list[str]:
    """Render each (layer, head) attention map from an attention export.

    Rows are queries (pairs), columns are backbone cells; each query row is
    also reshaped to the backbone grid and averaged over queries.
    """
    os.makedirs(out_dir, exist_ok=True)
    grid = export["grid"]
    paths = []
    for layer in export.get("layers", []):
        for head_idx, matrix in enumerate(layer["heads"]):
            m = np.asarray(matrix, dtype=np.float64)
            fig, axes = plt.subplots(1, 2, figsize=(7, 3))
            axes[0].imshow(m, aspect="auto", cmap="viridis", vmin=0.0)
            axes[0].set_xlabel("backbone cell")
            axes[0].set_ylabel("pair query")
            axes[0].set_title(f"layer {layer['layer']} head {head_idx}", fontsize=9)
            mean_map = m.mean(axis=0).reshape(grid, grid)
            axes[1].imshow(mean_map, cmap="viridis", vmin=0.0)
            axes[1].set_title("mean over queries", fontsize=9)
            path = os.path.join(
                out_dir, f"attn_{export['key']}_l{layer['layer']}_h{head_idx}.png")
            fig.tight_layout()
            fig.savefig(path, dpi=110)
            plt.close(fig)
            paths.append(path)
    return paths
