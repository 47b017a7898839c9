"""Versioned little-endian binary containers for embeddings and checkpoints.

Both file kinds share one record framing; byte-level layout is documented in
FORMATS.md.  Readers reject unknown versions and dimension mismatches up
front rather than failing later inside the math.
"""

from __future__ import annotations

import struct
from typing import Iterable

import numpy as np

EMBED_MAGIC = b"HOGEMB\x00\x00"
CKPT_MAGIC = b"HOGCKPT\x00"
FORMAT_VERSION = 1

DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_IDS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}


class VersionError(Exception):
    """Container version not understood by this reader."""


class ContainerError(Exception):
    """Malformed or truncated container."""


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContainerError(f"truncated container: wanted {n} bytes, got {len(buf)}")
    return buf


def write_embeddings(path, kind: str, dim: int, records: Iterable[tuple[str, np.ndarray]]):
    """Write {key -> float32 vector} records under a kind/dim header."""
    items = list(records)
    with open(path, "wb") as fh:
        kind_b = kind.encode("utf-8")
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<HHIQ", FORMAT_VERSION, len(kind_b), dim, len(items)))
        fh.write(kind_b)
        for key, vec in items:
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (dim,):
                raise ValueError(f"vector for {key!r} has shape {vec.shape}, want ({dim},)")
            key_b = key.encode("utf-8")
            fh.write(struct.pack("<I", len(key_b)))
            fh.write(key_b)
            fh.write(vec.tobytes())


def read_embeddings(path) -> tuple[str, int, dict[str, np.ndarray]]:
    """Read an embeddings container; returns (kind, dim, key -> float64 vector)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(EMBED_MAGIC))
        if magic != EMBED_MAGIC:
            raise ContainerError("not an embeddings container")
        version, kind_len, dim, count = struct.unpack("<HHIQ", _read_exact(fh, 16))
        if version != FORMAT_VERSION:
            raise VersionError(f"embeddings container version {version} unsupported")
        kind = _read_exact(fh, kind_len).decode("utf-8")
        table: dict[str, np.ndarray] = {}
        for _ in range(count):
            (key_len,) = struct.unpack("<I", _read_exact(fh, 4))
            key = _read_exact(fh, key_len).decode("utf-8")
            raw = _read_exact(fh, 4 * dim)
            table[key] = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return kind, dim, table


def write_tensors(path, config_hash: str, tensors: dict[str, np.ndarray]):
    """Checkpoint-style container: named float64 tensors plus a config hash."""
    with open(path, "wb") as fh:
        hash_b = config_hash.encode("ascii")
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HHQ", FORMAT_VERSION, len(hash_b), len(tensors)))
        fh.write(hash_b)
        for name, value in tensors.items():
            arr = np.asarray(value)
            dtype = np.dtype("<f8") if arr.dtype == np.float64 else np.dtype("<f4")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", DTYPE_IDS[dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_tensors(path) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ContainerError("not a tensor container")
        version, hash_len, count = struct.unpack("<HHQ", _read_exact(fh, 12))
        if version != FORMAT_VERSION:
            raise VersionError(f"tensor container version {version} unsupported")
        config_hash = _read_exact(fh, hash_len).decode("ascii")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            dtype_id, ndim = struct.unpack("<BB", _read_exact(fh, 2))
            if dtype_id not in DTYPE_CODES:
                raise ContainerError(f"unknown dtype code {dtype_id}")
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim)) if ndim else ()
            dtype = DTYPE_CODES[dtype_id]
            n = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, dtype.itemsize * n)
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64)
    return config_hash, tensors
