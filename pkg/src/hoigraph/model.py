"""End-to-end assembly: detections -> pairs -> refinement graph -> decoder
-> scored triplets.

Scenes are prepared once (filtering, pair enumeration, geometry, provider
lookups) and the learned part of the forward pass runs over a whole batch as
one disjoint-union graph, with cross-image attention masked off in the
decoder.  Detector outputs and provider embeddings enter as constants;
category and interaction prompt tables sit in the parameter store as
non-trainable tensors so the frozen contract is auditable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .config import ModelConfig, ProviderConfig, config_hash
from .data import Registry, SceneRecord
from .decoder import (ActionHead, DecoderConfig, HoiPrediction, PairDecoder,
                      block_attention_mask, compose_scores)
from .geometry import (DetectionSet, EmptyPairSetError, PairPolicy, PairTable,
                       SPATIAL_DIM, enumerate_pairs)
from .graph import GraphBlocks, GraphState, StageFlags, StageInputs, run_refinement
from .nn import ParameterStore, load_checkpoint, save_checkpoint
from .providers import (Adapter, BackboneFileProvider, DetectionPolicy, FileProvider,
                        ProviderSet, backbone_map, category_prompt, filter_detections,
                        interaction_prompt, visual_embedding)


def build_stub_providers(cfg: ModelConfig, provider_seed: int) -> ProviderSet:
    return ProviderSet.stub(provider_seed, cfg.d_v, cfg.d_t, cfg.d_b, cfg.d,
                            grid=cfg.backbone_grid)


def build_providers(pcfg: ProviderConfig, cfg: ModelConfig,
                    provider_seed: int) -> ProviderSet:
    if pcfg.source == "stub":
        return build_stub_providers(cfg, provider_seed)
    return ProviderSet(
        visual=FileProvider(pcfg.visual_path, "visual-image", cfg.d_v),
        text=FileProvider(pcfg.text_path, "text-category", cfg.d_t),
        interaction=FileProvider(pcfg.interaction_path, "text-interaction", cfg.d_t),
        backbone=BackboneFileProvider(pcfg.backbone_path, cfg.d_b),
        appearance=FileProvider(pcfg.appearance_path, "node-appearance", cfg.d),
        backbone_grid=cfg.backbone_grid,
    )


@dataclass
class PreparedScene:
    """Everything constant about one image, computed once."""

    key: str
    dets: Optional[DetectionSet]
    pair_table: Optional[PairTable]
    appearance: Optional[np.ndarray]    # (R, d)
    visual: Optional[np.ndarray]        # (d_v,)
    backbone: Optional[np.ndarray]      # (grid^2, d_b)
    category_ids: Optional[np.ndarray]  # (R,)
    pair_category_ids: Optional[np.ndarray]  # (P,)
    targets: Optional[np.ndarray] = None     # (P, A)

    @property
    def empty(self) -> bool:
        return self.pair_table is None

    @property
    def num_pairs(self) -> int:
        return 0 if self.empty else len(self.pair_table)


@dataclass
class BatchOutput:
    logits: Optional[ad.Var]
    edges: Optional[ad.Var]
    scenes: list[PreparedScene]
    slices: list[tuple[int, int, int]]      # (scene position, row start, row end)
    attention: list[np.ndarray] = field(default_factory=list)
    pair_image: Optional[np.ndarray] = None
    key_image: Optional[np.ndarray] = None


class InteractionModel:
    """The trainable interaction predictor over frozen detections."""

    def __init__(self, cfg: ModelConfig, registry: Registry, providers: ProviderSet,
                 stage_flags: StageFlags = StageFlags(),
                 store: Optional[ParameterStore] = None):
        self.cfg = cfg
        self.registry = registry
        self.providers = providers
        self.stage_flags = stage_flags
        self.store = store if store is not None else ParameterStore(cfg.param_seed)
        self.policy = DetectionPolicy(cfg.score_threshold, cfg.max_persons, cfg.max_objects)
        self.pair_policy = PairPolicy(persons_as_objects=cfg.persons_as_objects)

        t_rows, i_rows = [], []
        names = set(registry.categories)
        for name in registry.categories:
            t_rows.append(providers.text.lookup(category_prompt(name, names)))
            i_rows.append(providers.interaction.lookup(interaction_prompt(name, names)))
        self.t_frozen = self.store.create("frozen.text_category",
                                          (len(t_rows), cfg.d_t),
                                          init=("value", np.stack(t_rows)), trainable=False)
        self.i_frozen = self.store.create("frozen.text_interaction",
                                          (len(i_rows), cfg.d_t),
                                          init=("value", np.stack(i_rows)), trainable=False)

        self.blocks = GraphBlocks(self.store, cfg.d, SPATIAL_DIM, cfg.d_v, cfg.d_t,
                                  cfg.branches)
        self.decoder = PairDecoder(self.store, 2 * cfg.d, cfg.d_b,
                                   DecoderConfig(cfg.decoder_layers, cfg.decoder_heads,
                                                 cfg.decoder_ff_multiplier))
        self.head = ActionHead(self.store, 2 * cfg.d, registry.num_actions)
        if cfg.use_adapter:
            self.adapter_v = Adapter(self.store, "adapter_v", cfg.d_v, cfg.adapter_rho_init)
            self.adapter_t = Adapter(self.store, "adapter_t", cfg.d_t, cfg.adapter_rho_init)
            self.adapter_i = Adapter(self.store, "adapter_i", cfg.d_t, cfg.adapter_rho_init)
        else:
            self.adapter_v = self.adapter_t = self.adapter_i = None

    # -- configuration identity -------------------------------------------

    @property
    def config_hash(self) -> str:
        return config_hash(self.cfg, self.registry.num_categories,
                           self.registry.num_actions)

    def save(self, path):
        save_checkpoint(path, self.store, self.config_hash)

    def load(self, path):
        load_checkpoint(path, self.store, self.config_hash)

    def frozen_fingerprint(self) -> str:
        """Digest of every non-trainable tensor, for the frozen-weights audit."""
        h = hashlib.sha256()
        for name, p in self.store.items():
            if not p.requires_grad:
                h.update(name.encode("utf-8"))
                h.update(p.value.tobytes())
        return h.hexdigest()

    # -- scene preparation --------------------------------------------------

    def prepare_scene(self, scene: SceneRecord, with_targets: bool = False) -> PreparedScene:
        dets = filter_detections(scene.detections, self.policy)
        try:
            table = enumerate_pairs(dets, self.pair_policy, scene.width, scene.height)
        except EmptyPairSetError:
            return PreparedScene(scene.key, None, None, None, None, None, None, None)
        appearance = np.stack([
            self.providers.appearance.lookup(dets.detections[i].appearance_key)
            for i in range(len(dets))
        ])
        image_key = getattr(scene, "provider_image_key", scene.key)
        visual = visual_embedding(self.providers.visual, image_key)
        backbone = backbone_map(self.providers.backbone, image_key,
                                self.providers.backbone_grid)
        category_ids = dets.categories()
        pair_category_ids = category_ids[table.o_index]
        targets = None
        if with_targets:
            from .training import build_targets
            targets = build_targets(table, dets, scene.ground_truth,
                                    self.registry.num_actions)
        return PreparedScene(scene.key, dets, table, appearance, visual, backbone,
                             category_ids, pair_category_ids, targets)

    # -- forward -------------------------------------------------------------

    def forward(self, prepared: list[PreparedScene],
                record: Optional[list] = None) -> BatchOutput:
        live = [(i, s) for i, s in enumerate(prepared) if not s.empty]
        if not live:
            return BatchOutput(None, None, prepared, [])
        cfg = self.cfg

        node_offsets, pair_h, pair_o, pair_image, node_image = [], [], [], [], []
        offset = 0
        for b, (_, s) in enumerate(live):
            node_offsets.append(offset)
            pair_h.append(s.pair_table.h_index + offset)
            pair_o.append(s.pair_table.o_index + offset)
            pair_image.append(np.full(len(s.pair_table), b, dtype=np.intp))
            node_image.append(np.full(len(s.dets), b, dtype=np.intp))
            offset += len(s.dets)
        pair_h = np.concatenate(pair_h)
        pair_o = np.concatenate(pair_o)
        pair_image = np.concatenate(pair_image)
        node_image = np.concatenate(node_image)

        nodes = ad.Var(np.concatenate([s.appearance for _, s in live], axis=0))
        spatial = np.concatenate([s.pair_table.spatial for _, s in live], axis=0)
        cat_ids = np.concatenate([s.category_ids for _, s in live])
        pair_cat_ids = np.concatenate([s.pair_category_ids for _, s in live])

        v_images = ad.Var(np.stack([s.visual for _, s in live]))
        t_table: ad.Var = self.t_frozen
        i_table: ad.Var = self.i_frozen
        if self.adapter_v is not None:
            v_images = self.adapter_v(v_images)
            t_table = self.adapter_t(t_table)
            i_table = self.adapter_i(i_table)
        inputs = StageInputs(
            spatial=spatial,
            visual_node=ad.gather_rows(v_images, node_image),
            textual_node=ad.gather_rows(t_table, cat_ids),
            interaction_pair=ad.gather_rows(i_table, pair_cat_ids),
        )
        state = GraphState(nodes=nodes, pair_h=pair_h, pair_o=pair_o)
        state = run_refinement(self.blocks, state, inputs, steps=cfg.steps,
                               flags=self.stage_flags, record=record)

        keys = ad.Var(np.concatenate([s.backbone for _, s in live], axis=0))
        key_image = np.repeat(np.arange(len(live), dtype=np.intp),
                              cfg.backbone_grid * cfg.backbone_grid)
        mask = None
        if len(live) > 1 and cfg.decoder_layers > 0:
            mask = block_attention_mask(pair_image, key_image)
        decoded = self.decoder(state.edges, keys, mask=mask)
        logits = self.head(decoded)

        slices, lo = [], 0
        for i, s in live:
            hi = lo + s.num_pairs
            slices.append((i, lo, hi))
            lo = hi
        return BatchOutput(logits=logits, edges=state.edges, scenes=prepared,
                           slices=slices, attention=self.decoder.last_attention,
                           pair_image=pair_image, key_image=key_image)

    # -- inference -------------------------------------------------------------

    def predict_prepared(self, prepared: list[PreparedScene]) -> list[HoiPrediction]:
        out = self.forward(prepared)
        preds: list[HoiPrediction] = []
        if out.logits is None:
            return preds
        logits = out.logits.value
        for scene_pos, lo, hi in out.slices:
            s = prepared[scene_pos]
            preds.extend(compose_scores(logits[lo:hi], s.pair_table, s.dets, s.key,
                                        self.registry.valid_actions,
                                        self.cfg.detector_exponent))
        return preds

    def predict_dataset(self, scenes: list[SceneRecord],
                        batch_size: int = 16) -> list[HoiPrediction]:
        prepared = [self.prepare_scene(s) for s in scenes]
        preds: list[HoiPrediction] = []
        for lo in range(0, len(prepared), batch_size):
            preds.extend(self.predict_prepared(prepared[lo:lo + batch_size]))
        return preds

    def dump_graph(self, scene: SceneRecord) -> dict:
        """Per-iteration node / edge / gate tensors for one image."""
        prepared = self.prepare_scene(scene)
        if prepared.empty:
            return {"key": scene.key, "empty": True, "iterations": []}
        record: list = []
        self.forward([prepared], record=record)
        return {
            "key": scene.key,
            "empty": False,
            "pairs": [[int(h), int(o)] for h, o in
                      zip(prepared.pair_table.h_index, prepared.pair_table.o_index)],
            "iterations": [
                {"step": r["step"],
                 "nodes": r["nodes"].tolist(),
                 "edges": r["edges"].tolist(),
                 "gates": r["gates"].tolist()}
                for r in record
            ],
        }

    def attention_export(self, scene: SceneRecord) -> dict:
        """Decoder attention maps keyed by (image, layer, head), rows normalized."""
        prepared = self.prepare_scene(scene)
        if prepared.empty:
            return {"key": scene.key, "grid": self.cfg.backbone_grid, "layers": []}
        self.forward([prepared])
        layers = []
        for layer_idx, attn in enumerate(self.decoder.last_attention):
            layers.append({
                "layer": layer_idx,
                "heads": [attn[h].tolist() for h in range(attn.shape[0])],
            })
        return {"key": scene.key, "grid": self.cfg.backbone_grid,
                "pairs": [[int(h), int(o)] for h, o in
                          zip(prepared.pair_table.h_index, prepared.pair_table.o_index)],
                "layers": layers}


def stack_targets(prepared: list[PreparedScene], slices: list[tuple[int, int, int]],
                  num_actions: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-scene target matrices to match forward row order; the weight
    matrix makes the batch loss the mean over scenes of per-scene means."""
    total = slices[-1][2] if slices else 0
    targets = np.zeros((total, num_actions), dtype=np.float64)
    weights = np.zeros((total, num_actions), dtype=np.float64)
    n_scenes = len(slices)
    for scene_pos, lo, hi in slices:
        t = prepared[scene_pos].targets
        if t is None:
            raise ValueError("scene prepared without targets")
        targets[lo:hi] = t
        weights[lo:hi] = 1.0 / (t.size * n_scenes)
    return targets, weights
