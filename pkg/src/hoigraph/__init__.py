"""Desk-scale two-stage human-object interaction detection with a multimodal
pair-refinement graph, a cross-attention decoder, focal-loss training, and a
protocol-faithful mAP evaluator."""

__version__ = "0.1.0"
