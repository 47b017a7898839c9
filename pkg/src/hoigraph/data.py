"""Dataset schemas, the synthetic scene generator, and annotation loading.

Scenes are geometric + embedding-key records, never pixels.  The synthetic
tasks are built so that each refinement stage has a task on which it is the
sole carrier of the label signal, which is what makes stage ablations
falsifiable at desk scale:

* spatial-rule   — the action depends only on pair geometry (IoU and the
                   vertical arrangement of the two boxes).
* visual-rule    — the action depends on the sign of one coordinate of the
                   per-image visual embedding; image keys are fresh at test
                   time, so memorization cannot substitute for reading the
                   embedding.
* category-rule  — scenes hold two persons and one context object; the
                   person-person action is determined by the parity of the
                   context object's category.  Only the per-node category
                   prompts carry that category to the person pair (the
                   pair's own interaction prompt is the constant "person"),
                   so the textual stage is the unique signal path.
* mixed          — one action per rule family, multi-label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .evaluation import HoiGroundTruth, SplitRegistry, build_split_registry
from .geometry import Box, Detection, PERSON_CATEGORY, clamp_box, iou
from .providers import StubProvider, appearance_key

DATASET_FORMAT = "hoigraph-dataset"
DATASET_VERSION = 1
PREDICTIONS_FORMAT = "hoigraph-predictions"

SPATIAL_IOU_CUT = 0.3
SPATIAL_IOU_MARGIN = 0.05
SPATIAL_CENTER_MARGIN = 0.03
SPATIAL_HIGH_BAND = (0.38, 0.85)   # overlap band sampled for half the objects
SPATIAL_LOW_CAP = 0.24             # the other half stays clearly under the cut


class ParseError(Exception):
    """Malformed dataset or prediction record; carries the record index."""


class DatasetVersionError(Exception):
    """Dataset schema version not understood."""


@dataclass
class Registry:
    """Category, action, and HOI-class vocabularies for one dataset."""

    categories: list[str]
    actions: list[str]
    hoi_classes: list[tuple[int, int]]  # (action id, category id)

    def __post_init__(self):
        self.class_index: dict[tuple[int, int], int] = {
            pair: i for i, pair in enumerate(self.hoi_classes)}
        self.valid_actions: dict[int, list[int]] = {}
        for action, category in self.hoi_classes:
            self.valid_actions.setdefault(category, []).append(action)

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    @property
    def num_actions(self) -> int:
        return len(self.actions)


@dataclass
class SceneRecord:
    """One image worth of inputs: detections, ground truth, provider keys.

    ``key`` identifies the image for evaluation and must be unique;
    ``feature_key`` is the provider lookup key for the image-level features
    (visual embedding, backbone map) and defaults to ``key``.  Synthetic
    tasks whose label rule does not involve the image embedding draw the
    feature key from a small shared pool so that image-identity noise
    cannot stand in for the rule.
    """

    key: str
    width: float
    height: float
    detections: list[Detection]
    ground_truth: list[HoiGroundTruth]
    feature_key: Optional[str] = None

    @property
    def provider_image_key(self) -> str:
        return self.feature_key if self.feature_key is not None else self.key


@dataclass
class Dataset:
    task: str
    seed: int
    provider_seed: int
    embed_dims: dict
    registry: Registry
    train: list[SceneRecord]
    test: list[SceneRecord]

    def split_registry(self, threshold: int = 10) -> SplitRegistry:
        return build_split_registry(self.train_ground_truth(),
                                    self.registry.class_index, threshold)

    def train_ground_truth(self) -> list[HoiGroundTruth]:
        return [gt for scene in self.train for gt in scene.ground_truth]

    def test_ground_truth(self) -> list[HoiGroundTruth]:
        return [gt for scene in self.test for gt in scene.ground_truth]


@dataclass(frozen=True)
class SynthTaskSpec:
    """Knobs of the synthetic generator."""

    task: str = "spatial-rule"
    scenes: int = 256
    test_scenes: int = 64
    num_categories: int = 6      # object categories, excluding "person"
    long_tail: float = 0.0       # 0 = balanced; larger skews category frequency
    seed: int = 0
    provider_seed: int = 0
    embed_dim: int = 64

    def __post_init__(self):
        if self.task not in ("spatial-rule", "visual-rule", "category-rule", "mixed"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.scenes < 1 or self.test_scenes < 1:
            raise ValueError("scene counts must be >= 1")
        if self.long_tail < 0:
            raise ValueError("long-tail exponent must be >= 0")
        if self.num_categories < 2:
            raise ValueError("need at least two object categories")


def _task_actions(task: str) -> list[str]:
    if task == "spatial-rule":
        return ["hold", "watch"]
    if task == "visual-rule":
        return ["carry", "inspect"]
    if task == "category-rule":
        return ["greet", "follow"]
    return ["hold", "watch", "carry", "inspect", "greet", "follow"]


def _make_registry(task: str, num_categories: int) -> Registry:
    categories = ["person"] + [f"widget_{i}" for i in range(num_categories)]
    actions = _task_actions(task)
    hoi_classes = [(a, c) for c in range(len(categories)) for a in range(len(actions))]
    return Registry(categories=categories, actions=actions, hoi_classes=hoi_classes)


def _sample_box(rng: np.random.Generator, width: float, height: float,
                min_frac: float = 0.12, max_frac: float = 0.45) -> Box:
    w = rng.uniform(min_frac, max_frac) * width
    h = rng.uniform(min_frac, max_frac) * height
    x1 = rng.uniform(0.0, width - w)
    y1 = rng.uniform(0.0, height - h)
    return Box(x1, y1, x1 + w, y1 + h)


def _spatial_action(h: Box, o: Box) -> int:
    """a0 iff the boxes overlap past the cut AND the human center sits above."""
    above = h.center[1] < o.center[1]
    return 0 if (iou(h, o) > SPATIAL_IOU_CUT and above) else 1


def _spatial_margin_ok(h: Box, o: Box, height: float) -> bool:
    # keep labels away from the decision boundary so the task is cleanly learnable
    v = iou(h, o)
    if abs(v - SPATIAL_IOU_CUT) < SPATIAL_IOU_MARGIN:
        return False
    if v > SPATIAL_IOU_CUT and abs(h.center[1] - o.center[1]) < SPATIAL_CENTER_MARGIN * height:
        return False
    return True


def _overlapping_box(rng: np.random.Generator, anchor: Box,
                     width: float, height: float) -> Box:
    """Place an object either clearly overlapping the anchor person or
    clearly apart, so both sides of the IoU cut are densely represented."""
    want_high = rng.uniform() < 0.5
    for _ in range(256):
        if want_high:
            dx = rng.uniform(-0.35, 0.35) * anchor.width
            dy = rng.uniform(-0.5, 0.5) * anchor.height
            sw = rng.uniform(0.8, 1.25)
            sh = rng.uniform(0.8, 1.25)
            x1 = min(max(anchor.x1 + dx, 0.0), width - 4.0)
            y1 = min(max(anchor.y1 + dy, 0.0), height - 4.0)
            x2 = min(x1 + anchor.width * sw, width)
            y2 = min(y1 + anchor.height * sh, height)
            if x2 - x1 < 2.0 or y2 - y1 < 2.0:
                continue
            cand = Box(x1, y1, x2, y2)
            if SPATIAL_HIGH_BAND[0] <= iou(anchor, cand) <= SPATIAL_HIGH_BAND[1]:
                return cand
        else:
            cand = _sample_box(rng, width, height)
            if iou(anchor, cand) <= SPATIAL_LOW_CAP:
                return cand
    return _sample_box(rng, width, height)


def _category_weights(num: int, exponent: float) -> np.ndarray:
    w = (np.arange(num, dtype=np.float64) + 1.0) ** (-exponent)
    return w / w.sum()


VISUAL_SIGN_MARGIN = 0.06
FEATURE_POOL_SIZE = 16


def _visual_sign(provider_seed: int, embed_dim: int, image_key: str) -> int:
    stub = StubProvider("visual-image", embed_dim, provider_seed)
    return 0 if stub.lookup(image_key)[0] >= 0.0 else 1


def _margin_feature_key(base: str, provider_seed: int, embed_dim: int) -> str:
    """Resample the key suffix until the designated coordinate clears the
    sign margin, so visual-rule labels sit away from the decision boundary."""
    stub = StubProvider("visual-image", embed_dim, provider_seed)
    key = base
    for retry in range(64):
        if abs(stub.lookup(key)[0]) >= VISUAL_SIGN_MARGIN:
            return key
        key = f"{base}~r{retry}"
    return key


def _gen_scene(task: str, rng: np.random.Generator, key: str, feature_key: str,
               registry: Registry, cat_weights: np.ndarray, provider_seed: int,
               embed_dim: int) -> SceneRecord:
    width = float(rng.integers(192, 321))
    height = float(rng.integers(192, 321))
    num_obj_cats = len(registry.categories) - 1

    def draw_category() -> int:
        return int(rng.choice(num_obj_cats, p=cat_weights)) + 1

    persons: list[Box] = []
    objects: list[tuple[Box, int]] = []
    gts: list[HoiGroundTruth] = []

    if task == "category-rule":
        # two persons, one context object; the person-person action follows
        # the parity of the context object's category id
        persons = [_sample_box(rng, width, height) for _ in range(2)]
        cat = draw_category()
        objects = [(_sample_box(rng, width, height), cat)]
        action = 0 if (cat % 2 == 0) else 1
        gts.append(HoiGroundTruth(key, persons[0], persons[1], PERSON_CATEGORY, action))
        gts.append(HoiGroundTruth(key, persons[1], persons[0], PERSON_CATEGORY, action))
    else:
        n_persons = int(rng.integers(1, 3))
        n_objects = int(rng.integers(1, 4))
        persons = [_sample_box(rng, width, height) for _ in range(n_persons)]
        image_sign = _visual_sign(provider_seed, embed_dim, feature_key)
        for _ in range(n_objects):
            cat = draw_category()
            if task in ("spatial-rule", "mixed"):
                for _ in range(512):
                    obox = _overlapping_box(rng, persons[int(rng.integers(n_persons))],
                                            width, height)
                    if all(_spatial_margin_ok(p, obox, height) for p in persons):
                        break
            else:
                obox = _sample_box(rng, width, height)
            objects.append((obox, cat))
            for pbox in persons:
                if task == "spatial-rule":
                    actions = [_spatial_action(pbox, obox)]
                elif task == "visual-rule":
                    actions = [image_sign]
                else:  # mixed: one action per rule family
                    actions = [_spatial_action(pbox, obox),
                               2 + image_sign,
                               4 + (0 if cat % 2 == 0 else 1)]
                for a in actions:
                    gts.append(HoiGroundTruth(key, pbox, obox, cat, a))

    detections: list[Detection] = []
    boxes = [(b, PERSON_CATEGORY) for b in persons] + objects
    # appearance keys are slot-shaped, not image-shaped: unique per-image keys
    # would hand the model a memorization channel that swamps the label rules
    for i, (box, cat) in enumerate(boxes):
        detections.append(Detection(
            box=box, category=cat, score=float(rng.uniform(0.5, 1.0)),
            appearance_key=f"slot{i}"))
    return SceneRecord(key=key, width=width, height=height,
                       detections=detections, ground_truth=gts,
                       feature_key=feature_key)


def _feature_key_for(task: str, key: str, index: int, provider_seed: int,
                     embed_dim: int) -> str:
    if task in ("visual-rule", "mixed"):
        # the image embedding carries the label: unique key, margin enforced
        return _margin_feature_key(key, provider_seed, embed_dim)
    # image features are nuisance for this rule: share a small pool
    return f"ctx-{index % FEATURE_POOL_SIZE:02d}"


def generate_synthetic(spec: SynthTaskSpec) -> Dataset:
    """Seeded scene generation; equal specs give byte-identical datasets."""
    registry = _make_registry(spec.task, spec.num_categories)
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    weights = _category_weights(spec.num_categories, spec.long_tail)
    train = [_gen_scene(spec.task, rng, f"train-{i:05d}",
                        _feature_key_for(spec.task, f"train-{i:05d}", i,
                                         spec.provider_seed, spec.embed_dim),
                        registry, weights, spec.provider_seed, spec.embed_dim)
             for i in range(spec.scenes)]
    test = [_gen_scene(spec.task, rng, f"test-{i:05d}",
                       _feature_key_for(spec.task, f"test-{i:05d}", i,
                                        spec.provider_seed, spec.embed_dim),
                       registry, weights, spec.provider_seed, spec.embed_dim)
            for i in range(spec.test_scenes)]
    dims = {"d_v": spec.embed_dim, "d_t": spec.embed_dim,
            "d_b": spec.embed_dim, "d_node": spec.embed_dim}
    return Dataset(task=spec.task, seed=spec.seed, provider_seed=spec.provider_seed,
                   embed_dims=dims, registry=registry, train=train, test=test)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _box_to_list(box: Optional[Box]) -> list[float]:
    # all-zero box is the on-disk sentinel for "no object box"
    if box is None:
        return [0.0, 0.0, 0.0, 0.0]
    return [box.x1, box.y1, box.x2, box.y2]


def _box_from_list(values, width: float, height: float,
                   allow_sentinel: bool = False) -> tuple[Optional[Box], bool]:
    x1, y1, x2, y2 = (float(v) for v in values)
    if allow_sentinel and x1 == y1 == x2 == y2 == 0.0:
        return None, False
    box, clamped = clamp_box(x1, y1, x2, y2, width, height)
    return box, clamped


def _scene_to_json(scene: SceneRecord) -> dict:
    return {
        "key": scene.key,
        "feature_key": scene.provider_image_key,
        "width": scene.width,
        "height": scene.height,
        "detections": [
            {
                "box": _box_to_list(d.box),
                "category": d.category,
                "score": d.score,
                "appearance_key": d.appearance_key,
                "clamped": d.clamped,
            }
            for d in scene.detections
        ],
        "ground_truth": [
            {
                "human_box": _box_to_list(gt.human_box),
                "object_box": _box_to_list(gt.object_box),
                "category": gt.category,
                "action": gt.action,
            }
            for gt in scene.ground_truth
        ],
    }


def _scene_from_json(record: dict, index: int, registry: Registry) -> SceneRecord:
    try:
        key = record["key"]
        width = float(record["width"])
        height = float(record["height"])
        detections = []
        for i, d in enumerate(record["detections"]):
            category = int(d["category"])
            if category >= registry.num_categories:
                raise ValueError(f"detection {i} category {category} not registered")
            box, clamped = _box_from_list(d["box"], width, height)
            detections.append(Detection(
                box=box, category=category, score=float(d["score"]),
                appearance_key=d.get("appearance_key") or appearance_key(key, i),
                clamped=clamped or bool(d.get("clamped", False))))
        gts = []
        for g in record["ground_truth"]:
            category = int(g["category"])
            action = int(g["action"])
            if category >= registry.num_categories:
                raise ValueError(f"ground truth category {category} not registered")
            if action >= registry.num_actions:
                raise ValueError(f"ground truth action {action} not registered")
            hbox, _ = _box_from_list(g["human_box"], width, height)
            obox, _ = _box_from_list(g["object_box"], width, height, allow_sentinel=True)
            gts.append(HoiGroundTruth(key, hbox, obox, category, action))
        return SceneRecord(key=key, width=width, height=height,
                           detections=detections, ground_truth=gts,
                           feature_key=record.get("feature_key"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"scene record {index}: {exc}") from exc


def save_dataset(path, dataset: Dataset):
    doc = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "task": dataset.task,
        "seed": dataset.seed,
        "provider_seed": dataset.provider_seed,
        "embed_dims": dataset.embed_dims,
        "categories": dataset.registry.categories,
        "actions": dataset.registry.actions,
        "hoi_classes": [list(pair) for pair in dataset.registry.hoi_classes],
        "train": [_scene_to_json(s) for s in dataset.train],
        "test": [_scene_to_json(s) for s in dataset.test],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"not valid JSON: {exc}") from exc
    if doc.get("format") != DATASET_FORMAT:
        raise ParseError(f"not a {DATASET_FORMAT} file")
    if doc.get("version") != DATASET_VERSION:
        raise DatasetVersionError(f"dataset version {doc.get('version')} unsupported")
    registry = Registry(
        categories=list(doc["categories"]),
        actions=list(doc["actions"]),
        hoi_classes=[tuple(p) for p in doc["hoi_classes"]],
    )
    for i, (action, category) in enumerate(registry.hoi_classes):
        if not (0 <= action < registry.num_actions) \
                or not (0 <= category < registry.num_categories):
            raise ParseError(f"hoi class {i}: ({action}, {category}) outside registries")
    train = [_scene_from_json(r, i, registry) for i, r in enumerate(doc["train"])]
    test = [_scene_from_json(r, i, registry) for i, r in enumerate(doc["test"])]
    return Dataset(task=doc["task"], seed=int(doc["seed"]),
                   provider_seed=int(doc["provider_seed"]),
                   embed_dims=dict(doc.get("embed_dims", {})),
                   registry=registry, train=train, test=test)


def save_predictions(path, preds) -> None:
    doc = {
        "format": PREDICTIONS_FORMAT,
        "version": DATASET_VERSION,
        "predictions": [
            {
                "image_key": p.image_key,
                "human_box": _box_to_list(p.human_box),
                "object_box": _box_to_list(p.object_box),
                "category": p.object_category,
                "action": p.action,
                "score": p.score,
                "logit": p.logit,
                "human_score": p.human_score,
                "object_score": p.object_score,
            }
            for p in preds
        ],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_predictions(path):
    from .decoder import HoiPrediction

    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"not valid JSON: {exc}") from exc
    if doc.get("format") != PREDICTIONS_FORMAT:
        raise ParseError(f"not a {PREDICTIONS_FORMAT} file")
    if doc.get("version") != DATASET_VERSION:
        raise DatasetVersionError(f"predictions version {doc.get('version')} unsupported")
    preds = []
    for i, r in enumerate(doc["predictions"]):
        try:
            hx = [float(v) for v in r["human_box"]]
            ox = [float(v) for v in r["object_box"]]
            obox = None if ox == [0.0, 0.0, 0.0, 0.0] else Box(*ox)
            preds.append(HoiPrediction(
                image_key=r["image_key"], human_box=Box(*hx), object_box=obox,
                object_category=int(r["category"]), action=int(r["action"]),
                score=float(r["score"]), logit=float(r.get("logit", 0.0)),
                human_score=float(r.get("human_score", 1.0)),
                object_score=float(r.get("object_score", 1.0)),
                action_prob=float(r.get("score", 0.0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"prediction record {i}: {exc}") from exc
    return preds


def convert_hico_style(records: list[dict], categories: list[str], actions: list[str],
                       category_id_map: Optional[dict[int, int]] = None,
                       hoi_classes: Optional[list[tuple[int, int]]] = None) -> Dataset:
    """Convert HICO-DET-style annotation records into scene records.

    Expected per-record shape: {file_name, width, height,
    annotations: [{bbox: [x1,y1,x2,y2], category_id}],
    hoi_annotation: [{subject_id, object_id, category_id}]} with subject /
    object ids indexing the annotations list and hoi category_id indexing
    the action vocabulary.  Ground-truth boxes double as unit-score
    detections, which is the usual oracle-detection setting.  Any id
    missing from the registries fails here, never later in evaluation.
    """
    category_id_map = category_id_map or {i: i for i in range(len(categories))}
    scenes: list[SceneRecord] = []
    for idx, rec in enumerate(records):
        try:
            key = rec["file_name"]
            width = float(rec["width"])
            height = float(rec["height"])
            dets: list[Detection] = []
            for i, ann in enumerate(rec["annotations"]):
                raw_cat = int(ann["category_id"])
                if raw_cat not in category_id_map:
                    raise ValueError(f"annotation {i}: unregistered category id {raw_cat}")
                cat = category_id_map[raw_cat]
                if cat >= len(categories):
                    raise ValueError(f"annotation {i}: mapped category {cat} out of range")
                box, clamped = _box_from_list(ann["bbox"], width, height)
                dets.append(Detection(box=box, category=cat, score=1.0,
                                      appearance_key=appearance_key(key, i),
                                      clamped=clamped))
            gts: list[HoiGroundTruth] = []
            for h in rec["hoi_annotation"]:
                s, o, a = int(h["subject_id"]), int(h["object_id"]), int(h["category_id"])
                if not (0 <= s < len(dets)) or not (0 <= o < len(dets)):
                    raise ValueError(f"hoi annotation references missing detection {s}/{o}")
                if not (0 <= a < len(actions)):
                    raise ValueError(f"unregistered action id {a}")
                if not dets[s].is_person:
                    raise ValueError(f"hoi subject {s} is not a person")
                gts.append(HoiGroundTruth(key, dets[s].box, dets[o].box,
                                          dets[o].category, a))
            scenes.append(SceneRecord(key=key, width=width, height=height,
                                      detections=dets, ground_truth=gts))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"record {idx}: {exc}") from exc
    if hoi_classes is None:
        hoi_classes = sorted({(gt.action, gt.category) for s in scenes
                              for gt in s.ground_truth})
    registry = Registry(categories=categories, actions=actions, hoi_classes=hoi_classes)
    return Dataset(task="converted", seed=0, provider_seed=0, embed_dims={},
                   registry=registry, train=scenes, test=scenes)
