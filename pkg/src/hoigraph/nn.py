"""Learned building blocks: parameter store, linear maps, layer normalization,
the two fusion mechanisms, and multi-head cross-attention.

Initialization is a pure function of (store seed, parameter name, shape), so
rebuilding a model from the same seed reproduces every tensor bit-for-bit.
"""

from __future__ import annotations

import hashlib
from typing import Iterable, Optional

import numpy as np

from . import autodiff as ad
from . import container

LN_EPS = 1e-5


class MissingGradientError(Exception):
    """Optimizer stepped before a trainable tensor received a gradient."""


class CheckpointMismatchError(Exception):
    """Checkpoint does not match the model configuration."""


def _init_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"init|{seed}|{name}".encode("utf-8"), digest_size=8).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


class ParameterStore:
    """Named trainable tensors with gradient slots.

    Values live in the ``Var`` leaves, so a single store can be shared by any
    number of forward tapes; gradient accumulation happens in place on the
    leaf ``grad`` slots until ``zero_grad``.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._params: dict[str, ad.Var] = {}

    def create(self, name: str, shape: tuple, init="uniform", trainable: bool = True,
               fan_in: Optional[int] = None) -> ad.Var:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if init == "uniform":
            fan = fan_in if fan_in is not None else (shape[0] if shape else 1)
            bound = 1.0 / np.sqrt(fan)
            value = _init_rng(self.seed, name).uniform(-bound, bound, size=shape)
        elif init == "zeros":
            value = np.zeros(shape, dtype=np.float64)
        elif init == "ones":
            value = np.ones(shape, dtype=np.float64)
        elif isinstance(init, tuple) and init[0] == "const":
            value = np.full(shape, float(init[1]), dtype=np.float64)
        elif isinstance(init, tuple) and init[0] == "value":
            value = np.asarray(init[1], dtype=np.float64)
            if value.shape != tuple(shape):
                raise ValueError(f"value init shape {value.shape} != {shape}")
        else:
            raise ValueError(f"unknown init {init!r}")
        var = ad.Var(value, requires_grad=trainable)
        self._params[name] = var
        return var

    def __getitem__(self, name: str) -> ad.Var:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self) -> Iterable[tuple[str, ad.Var]]:
        return self._params.items()

    def trainable_items(self) -> list[tuple[str, ad.Var]]:
        return [(n, p) for n, p in self._params.items() if p.requires_grad]

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, value in state.items():
            if name not in self._params:
                raise CheckpointMismatchError(f"unexpected tensor {name!r}")
            p = self._params[name]
            if p.value.shape != value.shape:
                raise CheckpointMismatchError(
                    f"tensor {name!r}: shape {value.shape} != {p.value.shape}")
            p.value = np.asarray(value, dtype=np.float64).copy()
        missing = set(self._params) - set(state)
        if missing:
            raise CheckpointMismatchError(f"checkpoint missing tensors: {sorted(missing)}")


def save_checkpoint(path, store: ParameterStore, config_hash: str):
    container.write_tensors(path, config_hash, store.state_dict())


def load_checkpoint(path, store: ParameterStore, config_hash: str):
    stored_hash, tensors = container.read_tensors(path)
    if stored_hash != config_hash:
        raise CheckpointMismatchError(
            f"checkpoint config hash {stored_hash} != model config hash {config_hash}")
    store.load_state_dict(tensors)


def global_grad_norm(store: ParameterStore) -> float:
    total = 0.0
    for _, p in store.trainable_items():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_gradients(store: ParameterStore, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    norm = global_grad_norm(store)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for _, p in store.trainable_items():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Linear:
    """x @ W + b with shape validation against the registered dims."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int):
        self.d_in, self.d_out = d_in, d_out
        self.w = store.create(f"{name}.w", (d_in, d_out))
        self.b = store.create(f"{name}.b", (d_out,), init="zeros")

    def __call__(self, x: ad.ArrayLike) -> ad.Var:
        x = ad.as_var(x)
        if x.value.shape[-1] != self.d_in:
            raise ValueError(f"linear expected last dim {self.d_in}, got {x.value.shape}")
        return ad.add(ad.matmul(x, self.w), self.b)


class LayerNorm:
    """Per-row (x - mean) / sqrt(var + eps) * gain + bias."""

    def __init__(self, store: ParameterStore, name: str, dim: int):
        if dim < 2:
            raise ValueError("layer norm needs width >= 2")
        self.dim = dim
        self.gain = store.create(f"{name}.g", (dim,), init="ones")
        self.bias = store.create(f"{name}.b", (dim,), init="zeros")

    def __call__(self, x: ad.ArrayLike) -> ad.Var:
        x = ad.as_var(x)
        if x.value.shape[-1] != self.dim:
            raise ValueError(f"layer norm expected width {self.dim}, got {x.value.shape}")
        return ad.add(ad.mul(ad.normalize_rows(x, LN_EPS), self.gain), self.bias)


class BranchFusion:
    """Gated multi-branch bimodal fusion.

    Branch k computes relu(a @ U_k) * relu(b @ V_k); branches are stored as
    column blocks of single U / V matrices (elementwise gating makes the
    blocked and fused forms identical), then mixed by an output linear map.
    """

    def __init__(self, store: ParameterStore, name: str, d_a: int, d_b: int,
                 d_out: int, branches: int = 4):
        if d_out % branches != 0:
            raise ValueError(f"out dim {d_out} not divisible by {branches} branches")
        self.d_a, self.d_b, self.d_out = d_a, d_b, d_out
        self.branches = branches
        self.u = store.create(f"{name}.u", (d_a, d_out))
        self.v = store.create(f"{name}.v", (d_b, d_out))
        self.w = store.create(f"{name}.w", (d_out, d_out))
        self.b = store.create(f"{name}.b", (d_out,), init="zeros")

    def __call__(self, a: ad.ArrayLike, b: ad.ArrayLike) -> ad.Var:
        a, b = ad.as_var(a), ad.as_var(b)
        if a.value.shape[-1] != self.d_a or b.value.shape[-1] != self.d_b:
            raise ValueError(
                f"branch fusion dims ({self.d_a},{self.d_b}) vs inputs "
                f"{a.value.shape}, {b.value.shape}")
        if a.value.ndim == 2 and b.value.ndim == 2 and a.value.shape[0] != b.value.shape[0]:
            if a.value.shape[0] == 1:
                a = ad.gather_rows(a, np.zeros(b.value.shape[0], dtype=np.intp))
            else:
                raise ValueError("row counts differ and a is not broadcastable")
        gated = ad.mul(ad.relu(ad.matmul(a, self.u)), ad.relu(ad.matmul(b, self.v)))
        return ad.add(ad.matmul(gated, self.w), self.b)


class GateFusion:
    """Sigmoid-gated modulation with a residual: ln(mlp_x(x) * sig(mlp_s(s)) + x).

    The gate lets the side signal modulate the content without replacing it;
    both branches are one-hidden-layer relu MLPs.
    """

    def __init__(self, store: ParameterStore, name: str, d_x: int, d_s: int,
                 hidden: Optional[int] = None):
        hidden = hidden if hidden is not None else d_x
        self.d_x, self.d_s = d_x, d_s
        self.x1 = Linear(store, f"{name}.x1", d_x, hidden)
        self.x2 = Linear(store, f"{name}.x2", hidden, d_x)
        self.s1 = Linear(store, f"{name}.s1", d_s, hidden)
        self.s2 = Linear(store, f"{name}.s2", hidden, d_x)
        self.ln = LayerNorm(store, f"{name}.ln", d_x)

    def __call__(self, x: ad.ArrayLike, s: ad.ArrayLike) -> ad.Var:
        x, s = ad.as_var(x), ad.as_var(s)
        if x.value.shape[0] != s.value.shape[0]:
            raise ValueError("row counts of content and side input differ")
        content = self.x2(ad.relu(self.x1(x)))
        gate = ad.sigmoid(self.s2(ad.relu(self.s1(s))))
        return self.ln(ad.add(ad.mul(content, gate), x))


class CrossAttention:
    """Multi-head scaled dot-product attention with learned projections.

    Queries come from one sequence, keys/values from another; an optional
    additive mask (broadcast over heads) turns off cross-image key access
    when several images are stacked into one call.  Softmax rows always sum
    to one over the unmasked keys.  The last attention tensor is kept on
    ``self.last_attention`` (heads x queries x keys) for export.
    """

    def __init__(self, store: ParameterStore, name: str, d_q: int, d_kv: int, heads: int):
        if d_q % heads != 0:
            raise ValueError(f"heads {heads} must divide query width {d_q}")
        self.d_q, self.d_kv, self.heads = d_q, d_kv, heads
        self.d_head = d_q // heads
        self.wq = Linear(store, f"{name}.q", d_q, d_q)
        self.wk = Linear(store, f"{name}.k", d_kv, d_q)
        self.wv = Linear(store, f"{name}.v", d_kv, d_q)
        self.wo = Linear(store, f"{name}.o", d_q, d_q)
        self.last_attention: Optional[np.ndarray] = None

    def __call__(self, q: ad.ArrayLike, kv: ad.ArrayLike,
                 mask: Optional[np.ndarray] = None) -> ad.Var:
        q, kv = ad.as_var(q), ad.as_var(kv)
        nq, nk = q.value.shape[0], kv.value.shape[0]
        h, dh = self.heads, self.d_head
        qh = ad.swapaxes(ad.reshape(self.wq(q), (nq, h, dh)), 0, 1)
        kh = ad.swapaxes(ad.reshape(self.wk(kv), (nk, h, dh)), 0, 1)
        vh = ad.swapaxes(ad.reshape(self.wv(kv), (nk, h, dh)), 0, 1)
        scores = ad.scale(ad.matmul(qh, ad.swapaxes(kh, 1, 2)), 1.0 / np.sqrt(dh))
        if mask is not None:
            scores = ad.add(scores, mask.reshape((1, nq, nk)))
        attn = ad.softmax_last(scores)
        self.last_attention = attn.value.copy()
        out = ad.reshape(ad.swapaxes(ad.matmul(attn, vh), 0, 1), (nq, self.d_q))
        return self.wo(out)


# Large negative logit used to mask cross-image attention; exp() underflows
# to exactly zero after the row-max shift.
ATTENTION_MASK_OFF = -1e30
