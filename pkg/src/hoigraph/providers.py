"""Feature providers: the stand-ins for the frozen detector and the
vision-language encoders.

A provider maps string keys to fixed vectors.  Stub providers derive the
vector from a counter-based PRNG seeded by a hash of (kind, seed, key), so
they are deterministic across platforms and runs; file providers read the
same interface out of a precomputed-embeddings container.  The pipeline
never loads model weights.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import container
from .geometry import Detection, DetectionSet

CATEGORY_PROMPT = "a photo of a {}"
INTERACTION_PROMPT = "a photo of a person interacting with {}"

DEFAULT_BACKBONE_GRID = 7


class MissingEmbeddingError(KeyError):
    """A provider was asked for a key it does not know."""


class UnknownCategoryError(KeyError):
    """Prompt requested for a category missing from the registry."""


@dataclass(frozen=True)
class DetectionPolicy:
    """Score filtering and per-role caps applied to raw detections."""

    score_threshold: float = 0.2
    max_persons: int = 15
    max_objects: int = 15

    def __post_init__(self):
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ValueError("score_threshold must lie in [0, 1]")
        if self.max_persons < 1 or self.max_objects < 1:
            raise ValueError("caps must be >= 1")


def filter_detections(raw: list[Detection], policy: DetectionPolicy) -> DetectionSet:
    """Threshold by score, cap persons/objects separately, order canonically.

    Output order: persons first, then objects, each sorted by descending
    score with the raw-list index breaking ties.
    """
    kept = [(i, d) for i, d in enumerate(raw) if d.score >= policy.score_threshold]
    persons = sorted((t for t in kept if t[1].is_person), key=lambda t: (-t[1].score, t[0]))
    objects = sorted((t for t in kept if not t[1].is_person), key=lambda t: (-t[1].score, t[0]))
    persons = persons[: policy.max_persons]
    objects = objects[: policy.max_objects]
    ordered = persons + objects
    return DetectionSet(
        detections=[d for _, d in ordered],
        num_persons=len(persons),
        source_index=[i for i, _ in ordered],
    )


def _key_hash(kind: str, seed: int, key: str) -> int:
    digest = hashlib.blake2b(f"{kind}|{seed}|{key}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _stub_vector(kind: str, seed: int, key: str, dim: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=_key_hash(kind, seed, key)))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class StubProvider:
    """Deterministic pseudo-random embeddings, unit norm, keyed by string."""

    source = "stub"

    def __init__(self, kind: str, dim: int, seed: int):
        self.kind = kind
        self.dim = dim
        self.seed = seed

    def lookup(self, key: str) -> np.ndarray:
        return _stub_vector(self.kind, self.seed, key, self.dim)


class FileProvider:
    """Embeddings read from a precomputed container; unknown keys fail loudly."""

    source = "file"

    def __init__(self, path, expect_kind: str, expect_dim: int):
        kind, dim, table = container.read_embeddings(path)
        if kind != expect_kind:
            raise ValueError(f"embeddings file holds kind {kind!r}, expected {expect_kind!r}")
        if dim != expect_dim:
            raise ValueError(f"embeddings file dim {dim} != configured dim {expect_dim}")
        self.kind = kind
        self.dim = dim
        self.table = table

    def lookup(self, key: str) -> np.ndarray:
        try:
            return self.table[key]
        except KeyError:
            raise MissingEmbeddingError(f"{self.kind}: no embedding for key {key!r}") from None


def category_prompt(name: str, registry: set[str] | None = None) -> str:
    """Prompt for a category: lowercase, underscores become spaces."""
    if registry is not None and name not in registry:
        raise UnknownCategoryError(name)
    return CATEGORY_PROMPT.format(name.lower().replace("_", " "))


def interaction_prompt(name: str, registry: set[str] | None = None) -> str:
    """Prompt describing a person interacting with the category."""
    if registry is not None and name not in registry:
        raise UnknownCategoryError(name)
    return INTERACTION_PROMPT.format(name.lower().replace("_", " "))


def visual_embedding(provider, image_key: str) -> np.ndarray:
    return provider.lookup(image_key)


def text_embedding(provider, prompt: str) -> np.ndarray:
    return provider.lookup(prompt)


def backbone_map(provider, image_key: str, grid: int = DEFAULT_BACKBONE_GRID) -> np.ndarray:
    """Per-image feature map flattened to (grid*grid) x dim rows."""
    rows = [provider.lookup(f"{image_key}#cell{i}") for i in range(grid * grid)]
    return np.stack(rows)


def appearance_key(image_key: str, det_index: int) -> str:
    return f"{image_key}#det{det_index}"


def node_appearance(provider, image_key: str, det_index: int) -> np.ndarray:
    if det_index < 0:
        raise MissingEmbeddingError(f"appearance index {det_index} out of range")
    return provider.lookup(appearance_key(image_key, det_index))


class BackboneFileProvider:
    """File-backed backbone maps stored row-per-cell under composed keys."""

    source = "file"

    def __init__(self, path, expect_dim: int):
        kind, dim, table = container.read_embeddings(path)
        if kind != "backbone-map":
            raise ValueError(f"embeddings file holds kind {kind!r}, expected 'backbone-map'")
        if dim != expect_dim:
            raise ValueError(f"embeddings file dim {dim} != configured dim {expect_dim}")
        self.kind = kind
        self.dim = dim
        self.table = table

    def lookup(self, key: str) -> np.ndarray:
        try:
            return self.table[key]
        except KeyError:
            raise MissingEmbeddingError(f"backbone-map: no embedding for key {key!r}") from None


@dataclass
class ProviderSet:
    """The full bundle the pipeline consumes: one provider per feature kind."""

    visual: StubProvider | FileProvider
    text: StubProvider | FileProvider
    interaction: StubProvider | FileProvider
    backbone: StubProvider | FileProvider | BackboneFileProvider
    appearance: StubProvider | FileProvider
    backbone_grid: int = DEFAULT_BACKBONE_GRID

    @classmethod
    def stub(cls, seed: int, d_v: int, d_t: int, d_b: int, d_node: int,
             grid: int = DEFAULT_BACKBONE_GRID) -> "ProviderSet":
        return cls(
            visual=StubProvider("visual-image", d_v, seed),
            text=StubProvider("text-category", d_t, seed),
            interaction=StubProvider("text-interaction", d_t, seed),
            backbone=StubProvider("backbone-map", d_b, seed),
            appearance=StubProvider("node-appearance", d_node, seed),
            backbone_grid=grid,
        )


class Adapter:
    """Bottleneck adapter with a learnable residual mix.

    out = rho * up(relu(down(e))) + (1 - rho) * e, with rho clipped to [0, 1]
    in the forward pass.  rho = 0 reduces to the identity bit-for-bit.
    """

    def __init__(self, store, name: str, dim: int, rho_init: float = 0.5,
                 rho_trainable: bool = True):
        if dim % 4 != 0:
            raise ValueError("adapter dim must be divisible by 4")
        hidden = dim // 4
        self.dim = dim
        self.down_w = store.create(f"{name}.down.w", (dim, hidden), init="uniform")
        self.down_b = store.create(f"{name}.down.b", (hidden,), init="zeros")
        self.up_w = store.create(f"{name}.up.w", (hidden, dim), init="uniform")
        self.up_b = store.create(f"{name}.up.b", (dim,), init="zeros")
        self.mix = store.create(f"{name}.mix", (), init=("const", rho_init),
                                trainable=rho_trainable)

    def __call__(self, e: ad.ArrayLike) -> ad.Var:
        e = ad.as_var(e)
        if e.value.shape[-1] != self.dim:
            raise ValueError(f"adapter dim {self.dim} does not match input {e.value.shape}")
        hidden = ad.relu(ad.add(ad.matmul(e, self.down_w), self.down_b))
        up = ad.add(ad.matmul(hidden, self.up_w), self.up_b)
        rho = ad.clip01(self.mix)
        # rho = 0 exactly: 0*up + 1*e reproduces e bit-for-bit.
        return ad.add(ad.mul(rho, up), ad.mul(ad.add(ad.scale(rho, -1.0), 1.0), e))


def export_stub_embeddings(path, provider: StubProvider, keys: list[str]):
    """Materialize a stub provider's vectors into a file container."""
    container.write_embeddings(path, provider.kind, provider.dim,
                               [(k, provider.lookup(k)) for k in keys])


def write_category_key_manifest(path, category_names: list[str]):
    """Sidecar manifest mapping each dataset category to its embedding keys.

    Lets offline exporters (real encoders run elsewhere) know exactly which
    prompt strings this pipeline will look up.
    """
    import json

    names = set(category_names)
    mapping = {
        name: {
            "category_key": category_prompt(name, names),
            "interaction_key": interaction_prompt(name, names),
        }
        for name in category_names
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"format": "hoigraph-embedding-keys", "version": 1,
                   "categories": mapping}, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_category_key_manifest(path) -> dict:
    import json

    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "hoigraph-embedding-keys":
        raise ValueError("not an embedding-key manifest")
    return doc["categories"]
