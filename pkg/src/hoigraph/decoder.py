"""Cross-attention decoder over backbone features and the scoring head.

Refined pair features act as queries against the image's backbone grid;
there is no self-attention among pair queries (pair-pair exchange is the
graph's job), so decoder output rows stay positionally aligned with the
input pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .geometry import Box, DetectionSet, PairTable
from .nn import ATTENTION_MASK_OFF, CrossAttention, LayerNorm, Linear, ParameterStore


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    heads: int = 4
    ff_multiplier: int = 4

    def __post_init__(self):
        if self.layers < 0 or self.heads < 1:
            raise ValueError("decoder needs layers >= 0 and heads >= 1")


@dataclass
class HoiPrediction:
    """One scored <human, action, object> triplet."""

    image_key: str
    human_box: Box
    object_box: Optional[Box]
    object_category: int
    action: int
    score: float
    logit: float
    human_score: float
    object_score: float
    action_prob: float
    pair_index: int = -1


class PairDecoder:
    """L blocks of {cross-attention + residual + LN, feedforward + residual + LN}.

    The backbone rows are projected into the query width once, up front.
    ``last_attention`` holds one (heads x queries x keys) array per layer
    from the most recent call.
    """

    def __init__(self, store: ParameterStore, d_model: int, d_backbone: int,
                 cfg: DecoderConfig):
        if cfg.layers > 0 and d_model % cfg.heads != 0:
            raise ValueError("heads must divide the decoder width")
        self.cfg = cfg
        self.d_model = d_model
        self.backbone_proj = Linear(store, "dec.backbone_proj", d_backbone, d_model)
        self.blocks = []
        ff = cfg.ff_multiplier * d_model
        for layer in range(cfg.layers):
            self.blocks.append({
                "attn": CrossAttention(store, f"dec.l{layer}.attn", d_model, d_model, cfg.heads),
                "ln1": LayerNorm(store, f"dec.l{layer}.ln1", d_model),
                "ff1": Linear(store, f"dec.l{layer}.ff1", d_model, ff),
                "ff2": Linear(store, f"dec.l{layer}.ff2", ff, d_model),
                "ln2": LayerNorm(store, f"dec.l{layer}.ln2", d_model),
            })
        self.last_attention: list[np.ndarray] = []

    def __call__(self, queries: ad.Var, backbone: ad.ArrayLike,
                 mask: Optional[np.ndarray] = None) -> ad.Var:
        x = ad.as_var(queries)
        keys = self.backbone_proj(backbone)
        self.last_attention = []
        for block in self.blocks:
            attended = block["attn"](x, keys, mask=mask)
            self.last_attention.append(block["attn"].last_attention)
            x = block["ln1"](ad.add(x, attended))
            ff = block["ff2"](ad.relu(block["ff1"](x)))
            x = block["ln2"](ad.add(x, ff))
        return x


def block_attention_mask(query_image: np.ndarray, key_image: np.ndarray) -> np.ndarray:
    """Additive mask confining each query to its own image's backbone keys."""
    off = query_image[:, None] != key_image[None, :]
    return np.where(off, ATTENTION_MASK_OFF, 0.0)


class ActionHead:
    """Single linear map from decoded pair features to multi-label action logits."""

    def __init__(self, store: ParameterStore, d_model: int, num_actions: int):
        self.num_actions = num_actions
        self.proj = Linear(store, "head", d_model, num_actions)

    def __call__(self, decoded: ad.ArrayLike) -> ad.Var:
        return self.proj(decoded)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def compose_scores(logits: np.ndarray, pair_table: PairTable, dets: DetectionSet,
                   image_key: str, valid_actions: dict[int, list[int]],
                   detector_exponent: float = 1.0) -> list[HoiPrediction]:
    """Turn pair/action logits into scored triplets.

    score = (s_human * s_object) ** lambda * sigmoid(logit); (action, object
    category) combinations outside the registry are skipped.  Output is
    sorted by descending score (stable, so enumeration order breaks ties).
    """
    if detector_exponent < 0:
        raise ValueError("detector exponent must be >= 0")
    preds: list[HoiPrediction] = []
    scores = dets.scores()
    cats = dets.categories()
    for p in range(len(pair_table)):
        h, o = int(pair_table.h_index[p]), int(pair_table.o_index[p])
        cat = int(cats[o])
        actions = valid_actions.get(cat)
        if not actions:
            continue
        s_h, s_o = float(scores[h]), float(scores[o])
        det_factor = (s_h * s_o) ** detector_exponent
        for a in actions:
            logit = float(logits[p, a])
            prob = _sigmoid(logit)
            preds.append(HoiPrediction(
                image_key=image_key,
                human_box=dets.detections[h].box,
                object_box=dets.detections[o].box,
                object_category=cat,
                action=a,
                score=det_factor * prob,
                logit=logit,
                human_score=s_h,
                object_score=s_o,
                action_prob=prob,
                pair_index=p,
            ))
    preds.sort(key=lambda pr: -pr.score)
    return preds
