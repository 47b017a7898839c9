"""The pair-refinement graph: spatial initialization plus an iterated
visual / textual / interaction message-passing loop over detection nodes
and human-object pair edges.

Node updates are gated per pair: a pair's gate row multiplies the fused
modal feature of each of its two endpoints, the gated messages are averaged
per node over all incident pairs (role-matched), and the node is updated
through a residual layer norm.  Pair features are refreshed from the nodes
and the interaction embedding at the end of every iteration.

Several images can share one state: the index arrays simply address a
disjoint union of nodes and pairs, and the segment averaging never crosses
image boundaries because incidence does not.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .nn import BranchFusion, GateFusion, LayerNorm, Linear, ParameterStore


@dataclass(frozen=True)
class StageFlags:
    """Ablation switches; a disabled stage is skipped wholesale."""

    spatial: bool = True
    visual: bool = True
    textual: bool = True
    interaction: bool = True

    @classmethod
    def without(cls, *names: str) -> "StageFlags":
        valid = {"spatial", "visual", "textual", "interaction"}
        unknown = set(names) - valid
        if unknown:
            raise ValueError(f"unknown stage flags: {sorted(unknown)}")
        return cls(**{n: n not in names for n in valid})

    def disabled(self) -> list[str]:
        return [n for n in ("spatial", "visual", "textual", "interaction")
                if not getattr(self, n)]


@dataclass
class StageInputs:
    """Per-call constants: geometry plus provider embeddings (possibly
    adapter-transformed, hence Vars)."""

    spatial: np.ndarray          # (P, d_s)
    visual_node: ad.Var          # (R, d_v) image embedding repeated per node
    textual_node: ad.Var         # (R, d_t) category-prompt embedding per node
    interaction_pair: ad.Var     # (P, d_t) interaction-prompt embedding per pair


@dataclass
class GraphState:
    """Mutable state threaded through the loop."""

    nodes: ad.Var                # (R, d)
    pair_h: np.ndarray           # (P,) node index of each pair's person
    pair_o: np.ndarray           # (P,) node index of each pair's object
    edges: Optional[ad.Var] = None    # (P, 2d)
    gates: Optional[ad.Var] = None    # (P, d)
    step: int = 0

    @property
    def num_nodes(self) -> int:
        return self.nodes.value.shape[0]

    @property
    def num_pairs(self) -> int:
        return len(self.pair_h)


class GraphBlocks:
    """All learned pieces of the refinement loop, registered on one store.

    Parameters are shared across iterations, matching the single set of
    update equations applied T times.
    """

    def __init__(self, store: ParameterStore, d: int, d_s: int, d_v: int,
                 d_t: int, branches: int = 4):
        self.d = d
        self.pair_init = GateFusion(store, "pair_init", 2 * d, d_s)
        self.mbf_gate = BranchFusion(store, "mbf_gate", 2 * d, d_s, d, branches)
        self.gate_proj = Linear(store, "gate_proj", d, d)
        self.mbf_visual = BranchFusion(store, "mbf_visual", d_v, d, d, branches)
        self.visual_ln = LayerNorm(store, "visual_ln", d)
        self.mbf_textual = BranchFusion(store, "mbf_textual", d_t, d, d, branches)
        self.textual_ln = LayerNorm(store, "textual_ln", d)
        self.interact_proj = Linear(store, "interact_proj", d_t, 2 * d)
        self.interact_ln1 = LayerNorm(store, "interact_ln1", 2 * d)
        self.interact_ln2 = LayerNorm(store, "interact_ln2", 2 * d)


def gather_pairs(state: GraphState) -> tuple[ad.Var, ad.Var]:
    """Pick up each pair's current endpoint rows (recomputed, never cached)."""
    return (ad.gather_rows(state.nodes, state.pair_h),
            ad.gather_rows(state.nodes, state.pair_o))


def _pair_concat(state: GraphState) -> ad.Var:
    h, o = gather_pairs(state)
    return ad.concat([h, o], axis=1)


def spatial_stage_init(blocks: GraphBlocks, state: GraphState,
                       spatial: np.ndarray, enabled: bool = True) -> GraphState:
    """One-time pair-feature initialization from geometry (loop line 0).

    With the spatial stage ablated the pair features fall back to a plain
    layer norm of the concatenated endpoints and geometry never enters.
    """
    if state.step != 0 or state.edges is not None:
        raise ValueError("spatial_stage_init must run exactly once, before the loop")
    ho = _pair_concat(state)
    if enabled:
        edges = blocks.pair_init(ho, spatial)
    else:
        edges = blocks.pair_init.ln(ho)
    return replace(state, edges=edges)


def compute_edge_gates(blocks: GraphBlocks, state: GraphState,
                       spatial: np.ndarray) -> ad.Var:
    """Per-pair gate rows from freshly gathered endpoints and geometry."""
    return blocks.gate_proj(blocks.mbf_gate(_pair_concat(state), spatial))


def _propagate(mbf: BranchFusion, ln: LayerNorm, state: GraphState,
               modal_node: ad.Var) -> ad.Var:
    """Shared body of the visual and textual stages.

    Fuses the modal feature with each node, gates the fused row by every
    incident pair's gate (in both endpoint roles), averages per node, and
    applies the residual layer norm.  Nodes without pairs keep a zero
    message.
    """
    fused = mbf(modal_node, state.nodes)
    endpoints = np.concatenate([state.pair_h, state.pair_o])
    gates2 = ad.concat([state.gates, state.gates], axis=0)
    messages = ad.relu(ad.mul(gates2, ad.gather_rows(fused, endpoints)))
    aggregated = ad.segment_mean(messages, endpoints, state.num_nodes)
    return ln(ad.add(state.nodes, aggregated))


def visual_stage(blocks: GraphBlocks, state: GraphState, visual_node: ad.Var) -> GraphState:
    return replace(state, nodes=_propagate(blocks.mbf_visual, blocks.visual_ln,
                                           state, visual_node))


def textual_stage(blocks: GraphBlocks, state: GraphState, textual_node: ad.Var) -> GraphState:
    return replace(state, nodes=_propagate(blocks.mbf_textual, blocks.textual_ln,
                                           state, textual_node))


def interaction_stage(blocks: GraphBlocks, state: GraphState,
                      interaction_proj: ad.Var) -> GraphState:
    """Pair update: fold in the (freshly gathered) endpoints, then the
    interaction embedding — the order of the two residual norms matters."""
    enriched = blocks.interact_ln1(ad.add(state.edges, _pair_concat(state)))
    return replace(state, edges=blocks.interact_ln2(ad.add(enriched, interaction_proj)))


def run_refinement(blocks: GraphBlocks, state: GraphState, inputs: StageInputs,
                   steps: int = 2, flags: StageFlags = StageFlags(),
                   record: Optional[list] = None) -> GraphState:
    """Initialize pair features, then iterate the four stages ``steps`` times.

    Per iteration: recompute gates, visual node update, textual node update,
    pair update.  With the spatial stage off the gates are fixed open (all
    ones).  ``record`` collects per-iteration snapshots of nodes, edges and
    gates for inspection dumps.
    """
    state = spatial_stage_init(blocks, state, inputs.spatial, enabled=flags.spatial)
    i_proj = blocks.interact_proj(inputs.interaction_pair)
    for _ in range(steps):
        if flags.spatial:
            gates = compute_edge_gates(blocks, state, inputs.spatial)
        else:
            gates = ad.Var(np.ones((state.num_pairs, blocks.d)))
        state = replace(state, gates=gates)
        if flags.visual:
            state = visual_stage(blocks, state, inputs.visual_node)
        if flags.textual:
            state = textual_stage(blocks, state, inputs.textual_node)
        if flags.interaction:
            state = interaction_stage(blocks, state, i_proj)
        state = replace(state, step=state.step + 1)
        if record is not None:
            record.append({
                "step": state.step,
                "nodes": state.nodes.value.copy(),
                "edges": state.edges.value.copy(),
                "gates": state.gates.value.copy(),
            })
    return state
