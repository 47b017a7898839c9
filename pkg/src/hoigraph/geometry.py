"""Box algebra, human-object pair enumeration, and handcrafted spatial features.

Everything here is pure and deterministic: boxes come in as absolute pixel
coordinates and are normalized only inside the spatial feature vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

PERSON_CATEGORY = 0

# Fixed layout of the pairwise spatial feature vector; slot meanings are
# documented in FORMATS.md and must not be reordered (checkpoints depend on it).
SPATIAL_DIM = 36

LOG_EPS = 1e-6


class EmptyPairSetError(Exception):
    """No human-object pair can be formed for this image."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in absolute pixels; zero-area boxes are invalid."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {(self.x1, self.y1, self.x2, self.y2)}")
        if self.x1 < 0 or self.y1 < 0:
            raise ValueError("box coordinates must be non-negative")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class Detection:
    """One detector output: box, 0-based category id (0 = person), confidence."""

    box: Box
    category: int
    score: float
    appearance_key: Optional[str] = None
    clamped: bool = False

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.category < 0:
            raise ValueError("category ids are 0-based and non-negative")

    @property
    def is_person(self) -> bool:
        return self.category == PERSON_CATEGORY


@dataclass
class DetectionSet:
    """Filtered detections in canonical order: persons first, then objects.

    ``source_index`` maps each kept detection back to its position in the raw
    detection list, which is what appearance-embedding keys are tied to.
    """

    detections: list[Detection]
    num_persons: int
    source_index: list[int]

    def __len__(self) -> int:
        return len(self.detections)

    @property
    def num_objects(self) -> int:
        return len(self.detections) - self.num_persons

    def boxes(self) -> np.ndarray:
        return np.stack([d.box.as_array() for d in self.detections]) if self.detections \
            else np.zeros((0, 4), dtype=np.float64)

    def scores(self) -> np.ndarray:
        return np.array([d.score for d in self.detections], dtype=np.float64)

    def categories(self) -> np.ndarray:
        return np.array([d.category for d in self.detections], dtype=np.intp)


@dataclass(frozen=True)
class PairPolicy:
    """Controls which detections are pairable as the object of a pair."""

    persons_as_objects: bool = True


@dataclass
class PairTable:
    """Enumerated human-object pairs plus their spatial features.

    ``h_index``/``o_index`` address rows of the node set (the DetectionSet);
    ``incident_h``/``incident_o`` list, per node, the pairs in which the node
    plays the human / object role.
    """

    h_index: np.ndarray
    o_index: np.ndarray
    spatial: np.ndarray
    incident_h: list[list[int]]
    incident_o: list[list[int]]

    def __len__(self) -> int:
        return len(self.h_index)

    def incident(self, node: int) -> list[tuple[int, str]]:
        return [(p, "human") for p in self.incident_h[node]] + \
               [(p, "object") for p in self.incident_o[node]]


def iou(a: Box, b: Box) -> float:
    """Intersection over union; symmetric, zero for disjoint boxes."""
    ix1, iy1 = max(a.x1, b.x1), max(a.y1, b.y1)
    ix2, iy2 = min(a.x2, b.x2), min(a.y2, b.y2)
    iw, ih = max(ix2 - ix1, 0.0), max(iy2 - iy1, 0.0)
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0.0 else 0.0


def intersection_area(a: Box, b: Box) -> float:
    iw = max(min(a.x2, b.x2) - max(a.x1, b.x1), 0.0)
    ih = max(min(a.y2, b.y2) - max(a.y1, b.y1), 0.0)
    return iw * ih


def spatial_features(h: Box, o: Box, width: float, height: float) -> np.ndarray:
    """36-slot pairwise geometry vector; layout is pinned in FORMATS.md."""
    img_area = width * height
    hcx, hcy = h.center
    ocx, ocy = o.center
    inter = intersection_area(h, o)
    ux1, uy1 = min(h.x1, o.x1), min(h.y1, o.y1)
    ux2, uy2 = max(h.x2, o.x2), max(h.y2, o.y2)

    f = np.empty(SPATIAL_DIM, dtype=np.float64)
    # centers / sizes, normalized
    f[0:4] = (hcx / width, hcy / height, h.width / width, h.height / height)
    f[4:8] = (ocx / width, ocy / height, o.width / width, o.height / height)
    # corners, normalized
    f[8:12] = (h.x1 / width, h.y1 / height, h.x2 / width, h.y2 / height)
    f[12:16] = (o.x1 / width, o.y1 / height, o.x2 / width, o.y2 / height)
    # areas and aspect ratios
    f[16] = h.area / img_area
    f[17] = o.area / img_area
    f[18] = h.width / h.height
    f[19] = o.width / o.height
    f[20] = iou(h, o)
    # center offsets
    f[21] = (ocx - hcx) / width
    f[22] = (ocy - hcy) / height
    # log size ratios
    f[23] = np.log((h.width + LOG_EPS) / (o.width + LOG_EPS))
    f[24] = np.log((h.height + LOG_EPS) / (o.height + LOG_EPS))
    f[25] = np.log((h.area + LOG_EPS) / (o.area + LOG_EPS))
    # enclosing (union) box, normalized, plus its area fraction
    f[26:30] = (ux1 / width, uy1 / height, ux2 / width, uy2 / height)
    f[30] = (ux2 - ux1) * (uy2 - uy1) / img_area
    # intersection over each single box
    f[31] = inter / h.area
    f[32] = inter / o.area
    # log copies of the three area fractions
    f[33] = np.log(f[16] + LOG_EPS)
    f[34] = np.log(f[17] + LOG_EPS)
    f[35] = np.log(f[30] + LOG_EPS)
    return f


def enumerate_pairs(dets: DetectionSet, policy: PairPolicy,
                    width: float, height: float) -> PairTable:
    """Build the pair table: one row per (person, candidate object).

    Candidate objects are every non-person detection, plus other persons when
    the policy allows person-person interactions.  Self-pairs are excluded.
    Raises EmptyPairSetError when no pair can be formed, which callers treat
    as "this image yields no predictions".
    """
    m = dets.num_persons
    total = len(dets)
    h_idx: list[int] = []
    o_idx: list[int] = []
    for h in range(m):
        for o in range(total):
            if o == h:
                continue
            if o < m and not policy.persons_as_objects:
                continue
            h_idx.append(h)
            o_idx.append(o)
    if not h_idx:
        raise EmptyPairSetError(
            f"no pairs: {m} persons, {total - m} objects, "
            f"persons_as_objects={policy.persons_as_objects}")

    spatial = np.stack([
        spatial_features(dets.detections[h].box, dets.detections[o].box, width, height)
        for h, o in zip(h_idx, o_idx)
    ])
    incident_h: list[list[int]] = [[] for _ in range(total)]
    incident_o: list[list[int]] = [[] for _ in range(total)]
    for p, (h, o) in enumerate(zip(h_idx, o_idx)):
        incident_h[h].append(p)
        incident_o[o].append(p)
    return PairTable(
        h_index=np.array(h_idx, dtype=np.intp),
        o_index=np.array(o_idx, dtype=np.intp),
        spatial=spatial,
        incident_h=incident_h,
        incident_o=incident_o,
    )


def clamp_box(x1: float, y1: float, x2: float, y2: float,
              width: float, height: float) -> tuple[Box, bool]:
    """Clamp raw coordinates to the image; flags whether anything moved.

    Raises ValueError if the clamped box has zero area (rejected at ingestion).
    """
    cx1, cy1 = min(max(x1, 0.0), width), min(max(y1, 0.0), height)
    cx2, cy2 = min(max(x2, 0.0), width), min(max(y2, 0.0), height)
    clamped = (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2)
    return Box(cx1, cy1, cx2, cy2), clamped
