"""Focal-loss objective, decoupled-weight-decay Adam, and the epoch loop.

Only the interaction predictor trains: detector outputs and provider
embeddings enter the forward pass as constants, and the non-trainable
tensors in the parameter store are never touched by the optimizer.  Per
epoch the scene order is drawn from a stream keyed by (seed, epoch), so a
resumed run shuffles exactly like an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import container
from .config import TrainSettings
from .geometry import DetectionSet, PairTable, iou
from .model import InteractionModel, stack_targets
from .nn import MissingGradientError, clip_gradients


class TrainingDiverged(Exception):
    """Loss became non-finite; diagnostics were dumped next to the run."""


def build_targets(pair_table: PairTable, dets: DetectionSet, gts,
                  num_actions: int, iou_thresh: float = 0.5) -> np.ndarray:
    """Multi-label target matrix: target[p, a] = 1 iff some ground truth with
    action a overlaps both of pair p's boxes above the threshold and the
    object categories agree.  Mirrors the evaluation criterion."""
    targets = np.zeros((len(pair_table), num_actions), dtype=np.float64)
    if not gts:
        return targets
    cats = dets.categories()
    for p in range(len(pair_table)):
        h = dets.detections[int(pair_table.h_index[p])].box
        o_idx = int(pair_table.o_index[p])
        o = dets.detections[o_idx].box
        for gt in gts:
            if gt.object_box is None or gt.category != int(cats[o_idx]):
                continue
            if iou(h, gt.human_box) > iou_thresh and iou(o, gt.object_box) > iou_thresh:
                targets[p, gt.action] = 1.0
    return targets


def focal_loss(logits: ad.ArrayLike, targets: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0, weights: Optional[np.ndarray] = None) -> ad.Var:
    """Mean focal loss over every (pair, action) cell.

    Written in softplus form so nothing overflows for |logit| <= 100:
    positives contribute alpha * (1-p)^gamma * softplus(-x), negatives
    (1-alpha) * p^gamma * softplus(x).  ``weights`` replaces the uniform
    mean with a weighted sum (used to average per scene in a batch).
    """
    x = ad.as_var(logits)
    t = np.asarray(targets, dtype=np.float64)
    if x.value.shape != t.shape:
        raise ValueError(f"logits {x.value.shape} vs targets {t.shape}")
    p = ad.sigmoid(x)
    one_minus_p = ad.add(ad.scale(p, -1.0), 1.0)
    pos = ad.scale(ad.mul(ad.power(one_minus_p, gamma), ad.softplus(ad.scale(x, -1.0))),
                   alpha)
    neg = ad.scale(ad.mul(ad.power(p, gamma), ad.softplus(x)), 1.0 - alpha)
    per_cell = ad.add(ad.mul(pos, t), ad.mul(neg, 1.0 - t))
    if weights is None:
        return ad.mean_all(per_cell)
    return ad.sum_all(ad.mul(per_cell, np.asarray(weights, dtype=np.float64)))


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments.

    The decay multiplies parameters directly (theta <- theta - lr*wd*theta)
    before the moment update, so a zero gradient with nonzero decay still
    shrinks the parameter.  Non-trainable tensors are never touched.
    """

    def __init__(self, store, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in store.trainable_items()}
        self.v = {n: np.zeros_like(p.value) for n, p in store.trainable_items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.store.trainable_items():
            if p.grad is None:
                raise MissingGradientError(f"no gradient for {name!r}")
            value = np.asarray(p.value, dtype=np.float64)
            if self.weight_decay:
                value = value - self.lr * self.weight_decay * value
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / (1.0 - b1 ** self.t)
            v_hat = self.v[name] / (1.0 - b2 ** self.t)
            # keep 0-d parameters as ndarrays (scalar ops would degrade them)
            p.value = np.asarray(value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps),
                                 dtype=np.float64)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"adamw.t": np.array(float(self.t))}
        for n in self.m:
            out[f"adamw.m.{n}"] = self.m[n]
            out[f"adamw.v.{n}"] = self.v[n]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        self.t = int(tensors["adamw.t"])
        for n in self.m:
            self.m[n] = np.asarray(tensors[f"adamw.m.{n}"], dtype=np.float64).copy()
            self.v[n] = np.asarray(tensors[f"adamw.v.{n}"], dtype=np.float64).copy()


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    digest = hashlib.blake2b(f"shuffle|{seed}|{epoch}".encode(), digest_size=8).digest()
    rng = np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))
    return rng.permutation(n)


@dataclass
class TrainResult:
    epochs_run: int
    final_loss: float
    loss_history: list[float]
    eval_history: list[dict]
    checkpoint_path: Optional[str]


def train(model: InteractionModel, dataset, cfg: TrainSettings,
          out_dir: Optional[str] = None,
          resume_from: Optional[str] = None,
          eval_fn: Optional[Callable[[InteractionModel], dict]] = None) -> TrainResult:
    """Epoch loop: shuffle, batch, forward, focal loss, backward, clip, step.

    Writes a checkpoint plus optimizer sidecar every ``checkpoint_every``
    epochs when ``out_dir`` is given, and appends one JSON line per epoch to
    metrics.jsonl.  ``resume_from`` points at a checkpoint basename (without
    extension) and continues exactly where that run left off.
    """
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    prepared = [model.prepare_scene(s, with_targets=True) for s in dataset.train]
    usable = [p for p in prepared if not p.empty]
    if not usable:
        raise ValueError("no trainable scenes: every image has an empty pair set")

    optimizer = AdamW(model.store, lr=cfg.lr, weight_decay=cfg.weight_decay)
    start_epoch = 0
    if resume_from is not None:
        model.load(resume_from + ".ckpt")
        stored_hash, tensors = container.read_tensors(resume_from + ".optim")
        if stored_hash != model.config_hash:
            raise ValueError("optimizer sidecar does not match model config")
        optimizer.load_state_tensors(tensors)
        start_epoch = int(tensors["adamw.epoch"])

    metrics_path = os.path.join(out_dir, "metrics.jsonl") if out_dir else None
    loss_history: list[float] = []
    eval_history: list[dict] = []
    ckpt_path = None

    def write_metrics(record: dict):
        if metrics_path:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def checkpoint(epoch: int):
        nonlocal ckpt_path
        if out_dir is None:
            return
        base = os.path.join(out_dir, "latest")
        model.save(base + ".ckpt")
        tensors = optimizer.state_tensors()
        tensors["adamw.epoch"] = np.array(float(epoch + 1))
        container.write_tensors(base + ".optim", model.config_hash, tensors)
        ckpt_path = base + ".ckpt"

    steps = 0
    for epoch in range(start_epoch, cfg.epochs):
        order = _epoch_permutation(cfg.seed, epoch, len(usable))
        epoch_losses = []
        t0 = time.perf_counter()
        for lo in range(0, len(order), cfg.batch_size):
            batch = [usable[i] for i in order[lo:lo + cfg.batch_size]]
            model.store.zero_grad()
            out = model.forward(batch)
            if out.logits is None:
                continue
            targets, weights = stack_targets(batch, out.slices,
                                             model.registry.num_actions)
            loss = focal_loss(out.logits, targets, cfg.focal_alpha,
                              cfg.focal_gamma, weights)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                _dump_divergence(out_dir, epoch, steps, loss_val, model)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {steps}")
            ad.backward(loss)
            # parameters outside this step's tape (e.g. ablated stages)
            # contribute zero gradient rather than tripping the optimizer
            for _, p in model.store.trainable_items():
                if p.grad is None:
                    p.grad = np.zeros_like(p.value)
            if cfg.clip_norm > 0:
                clip_gradients(model.store, cfg.clip_norm)
            optimizer.step()
            epoch_losses.append(loss_val)
            steps += 1
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        loss_history.append(mean_loss)
        record = {"epoch": epoch, "step": steps, "loss": mean_loss, "lr": cfg.lr,
                  "seconds": round(time.perf_counter() - t0, 4)}
        if eval_fn is not None and cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0:
            snapshot = eval_fn(model)
            eval_history.append({"epoch": epoch, **snapshot})
            record["eval"] = snapshot
        write_metrics(record)
        if cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint(epoch)
    if cfg.epochs > start_epoch and (cfg.checkpoint_every == 0
                                     or cfg.epochs % max(cfg.checkpoint_every, 1) != 0):
        checkpoint(cfg.epochs - 1)
    if eval_fn is not None:
        snapshot = eval_fn(model)
        eval_history.append({"epoch": cfg.epochs - 1, **snapshot})
        write_metrics({"epoch": cfg.epochs - 1, "final_eval": snapshot})
    final_loss = loss_history[-1] if loss_history else float("nan")
    return TrainResult(epochs_run=cfg.epochs - start_epoch, final_loss=final_loss,
                       loss_history=loss_history, eval_history=eval_history,
                       checkpoint_path=ckpt_path)


def _dump_divergence(out_dir: Optional[str], epoch: int, step: int, loss: float,
                     model: InteractionModel):
    if out_dir is None:
        return
    grads = {}
    for name, p in model.store.trainable_items():
        if p.grad is not None:
            grads[name] = float(np.max(np.abs(p.grad)))
    path = os.path.join(out_dir, "divergence.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"epoch": epoch, "step": step, "loss": loss,
                   "max_abs_grad": grads}, fh, sort_keys=True, indent=1)
