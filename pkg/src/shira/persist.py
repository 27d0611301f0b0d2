"""Little-endian binary formats for adapters (``SHRA``) and model checkpoints (``SHMC``).

See FORMAT.md for the byte layouts.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .adapters import LoraAdapter, ModelAdapter, SparseAdapter
from .nn import ACTIVATIONS, LinearLayer, Mlp

ADAPTER_MAGIC = b"SHRA"
CHECKPOINT_MAGIC = b"SHMC"
FORMAT_VERSION = 1

KIND_CODES = {"sparse": 0, "lora": 1}
STRATEGY_CODES = {"struct": 0, "rand": 1, "wm": 2, "grad": 3, "snip": 4, "fused": 5, "custom": 255}
ACTIVATION_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}

_HEADER = struct.Struct("<4sIBI")  # magic, version, kind, layer_count
_LAYER = struct.Struct("<III")  # layer_id, rows, cols
_SPARSE = struct.Struct("<QdB")  # nnz, alpha, strategy
_LORA = struct.Struct("<Id")  # rank, alpha
_U32 = struct.Struct("<I")
_CKPT_HEADER = struct.Struct("<4sIII")  # magic, version, input_dim, layer_count
_CKPT_LAYER = struct.Struct("<IB")  # out_dim, activation

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Base class for unreadable adapter / checkpoint files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class SortednessError(FormatError):
    pass


class BoundsError(FormatError):
    pass


class LengthMismatchError(FormatError):
    """Declared sizes disagree with the bytes present (e.g. trailing data)."""


class CorruptFieldError(FormatError):
    """An enumerated or structural field holds an invalid value."""


def sparse_layer_bytes(nnz: int) -> int:
    """Bytes taken by one sparse layer record, layer header included."""
    return _LAYER.size + _SPARSE.size + 8 * nnz + 8 * nnz


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = memoryview(buf)
        self.pos = 0

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int, what: str) -> memoryview:
        if n < 0 or n > self.remaining():
            raise TruncatedError(f"need {n} bytes for {what} at offset {self.pos}, {self.remaining()} left")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what: str) -> tuple:
        return st.unpack(self.take(st.size, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize, what), dtype=dtype).copy()


def _meta_bytes(adapter: ModelAdapter) -> bytes:
    meta = {"adapter": adapter.meta, "layers": {str(k): a.meta for k, a in sorted(adapter.layers.items())}}
    return json.dumps(meta, sort_keys=True, default=_json_default).encode("utf-8")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serialisable")


def adapter_to_bytes(adapter: ModelAdapter) -> bytes:
    parts = [_HEADER.pack(ADAPTER_MAGIC, FORMAT_VERSION, KIND_CODES[adapter.kind], len(adapter.layers))]
    for k in sorted(adapter.layers):
        a = adapter.layers[k]
        parts.append(_LAYER.pack(k, a.shape[0], a.shape[1]))
        if isinstance(a, SparseAdapter):
            if a.index.size and np.any(np.diff(a.index) <= 0):
                raise SortednessError(f"layer {k}: coordinates not strictly increasing")
            strategy = STRATEGY_CODES.get(a.meta.get("strategy", "custom"), STRATEGY_CODES["custom"])
            parts.append(_SPARSE.pack(a.nnz, a.alpha_default, strategy))
            rows, cols = np.divmod(a.index, a.cols)
            parts.append(np.stack([rows, cols], axis=1).astype("<u4").tobytes())
            parts.append(a.values.astype("<f8").tobytes())
        else:
            parts.append(_LORA.pack(a.rank, a.alpha_lora))
            parts.append(a.a.astype("<f8").tobytes())
            parts.append(a.b.astype("<f8").tobytes())
    meta = _meta_bytes(adapter)
    parts.append(_U32.pack(len(meta)))
    parts.append(meta)
    return b"".join(parts)


def adapter_from_bytes(data: bytes) -> ModelAdapter:
    r = _Reader(data)
    magic, version, kind_code, layer_count = r.unpack(_HEADER, "header")
    if magic != ADAPTER_MAGIC:
        raise BadMagicError(f"expected {ADAPTER_MAGIC!r}, found {bytes(magic)!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} (supported: {FORMAT_VERSION})")
    kinds = {v: k for k, v in KIND_CODES.items()}
    if kind_code not in kinds:
        raise CorruptFieldError(f"unknown adapter kind code {kind_code}")
    kind = kinds[kind_code]
    strategies = {v: k for k, v in STRATEGY_CODES.items()}
    layers: dict = {}
    prev_id = -1
    for _ in range(layer_count):
        layer_id, rows, cols = r.unpack(_LAYER, "layer header")
        if layer_id <= prev_id:
            raise SortednessError(f"layer id {layer_id} follows {prev_id}")
        prev_id = layer_id
        if rows == 0 or cols == 0:
            raise CorruptFieldError(f"layer {layer_id}: empty shape {rows}x{cols}")
        if kind == "sparse":
            nnz, alpha, strategy = r.unpack(_SPARSE, "sparse payload header")
            if nnz > rows * cols:
                raise LengthMismatchError(f"layer {layer_id}: nnz {nnz} exceeds {rows}x{cols}")
            if 16 * nnz > r.remaining():
                raise TruncatedError(f"layer {layer_id}: nnz {nnz} needs {16 * nnz} bytes, {r.remaining()} left")
            if strategy not in strategies:
                raise CorruptFieldError(f"layer {layer_id}: unknown strategy code {strategy}")
            coords = r.array("<u4", 2 * nnz, "coordinates").reshape(-1, 2).astype(np.int64)
            values = r.array("<f8", nnz, "values")
            if nnz and (coords[:, 0].max() >= rows or coords[:, 1].max() >= cols):
                raise BoundsError(f"layer {layer_id}: coordinate outside {rows}x{cols}")
            index = coords[:, 0] * cols + coords[:, 1]
            if np.any(np.diff(index) <= 0):
                raise SortednessError(f"layer {layer_id}: coordinates not strictly increasing")
            meta = {"strategy": strategies[strategy]}
            layers[layer_id] = SparseAdapter(rows, cols, index, values, alpha, meta)
        else:
            rank, alpha = r.unpack(_LORA, "lora payload header")
            if rank == 0 or rank > min(rows, cols):
                raise CorruptFieldError(f"layer {layer_id}: rank {rank} invalid for {rows}x{cols}")
            a = r.array("<f8", rows * rank, "lora A").reshape(rows, rank)
            b = r.array("<f8", rank * cols, "lora B").reshape(rank, cols)
            layers[layer_id] = LoraAdapter(a, b, alpha)
    (meta_len,) = r.unpack(_U32, "metadata length")
    raw = r.take(meta_len, "metadata")
    if r.remaining():
        raise LengthMismatchError(f"{r.remaining()} trailing bytes after metadata")
    try:
        meta = json.loads(bytes(raw).decode("utf-8"))
        if not isinstance(meta, dict):
            raise ValueError("metadata is not an object")
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptFieldError(f"unreadable metadata block: {exc}") from None
    # metadata only decorates; structure came from the payload above
    for key, layer_meta in (meta.get("layers") or {}).items():
        if key.isdigit() and int(key) in layers and isinstance(layer_meta, dict):
            layers[int(key)].meta = {**layers[int(key)].meta, **layer_meta}
    return ModelAdapter(layers, kind, meta.get("adapter") or {})


def write_adapter(path: PathLike, adapter: ModelAdapter) -> int:
    data = adapter_to_bytes(adapter)
    Path(path).write_bytes(data)
    return len(data)


def read_adapter(path: PathLike) -> ModelAdapter:
    return adapter_from_bytes(Path(path).read_bytes())


def checkpoint_to_bytes(model: Mlp) -> bytes:
    parts = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, model.input_dim, len(model.layers))]
    for layer in model.layers:
        parts.append(_CKPT_LAYER.pack(layer.weight.shape[0], ACTIVATION_CODES[layer.activation]))
    for layer in model.layers:
        parts.append(layer.weight.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> Mlp:
    r = _Reader(data)
    magic, version, input_dim, n_layers = r.unpack(_CKPT_HEADER, "checkpoint header")
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"expected {CHECKPOINT_MAGIC!r}, found {bytes(magic)!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} (supported: {FORMAT_VERSION})")
    if input_dim == 0:
        raise CorruptFieldError("input_dim is zero")
    acts = {v: k for k, v in ACTIVATION_CODES.items()}
    dims = [input_dim]
    activations = []
    for k in range(n_layers):
        out_dim, act = r.unpack(_CKPT_LAYER, "layer descriptor")
        if out_dim == 0 or act not in acts:
            raise CorruptFieldError(f"layer {k}: bad descriptor (out={out_dim}, activation={act})")
        dims.append(out_dim)
        activations.append(acts[act])
    expected = sum(8 * (dims[k] * dims[k + 1] + dims[k + 1]) for k in range(n_layers))
    if expected != r.remaining():
        cls = TruncatedError if expected > r.remaining() else LengthMismatchError
        raise cls(f"descriptor implies {expected} payload bytes, file has {r.remaining()}")
    layers = []
    for k in range(n_layers):
        w = r.array("<f8", dims[k] * dims[k + 1], "weights").reshape(dims[k + 1], dims[k])
        b = r.array("<f8", dims[k + 1], "bias")
        layers.append(LinearLayer(w, b, activations[k]))
    return Mlp(layers, input_dim)


def write_checkpoint(path: PathLike, model: Mlp) -> int:
    data = checkpoint_to_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


def read_checkpoint(path: PathLike) -> Mlp:
    return checkpoint_from_bytes(Path(path).read_bytes())
