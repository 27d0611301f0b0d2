"""Adapter value types and their application to base weights."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .linalg import ShapeError, add_scaled, as_matrix
from .masks import Mask
from .nn import Mlp

SHIRA_MAX_DENSITY = 0.05


class IntegrityError(RuntimeError):
    """Weights changed outside the mask: gradient masking is broken."""


@dataclass
class SparseAdapter:
    """Sparse delta ``S`` stored as sorted row-major linear indices and values."""

    rows: int
    cols: int
    index: np.ndarray
    values: np.ndarray
    alpha_default: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.index = np.ascontiguousarray(self.index, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.index.ndim != 1 or self.values.shape != self.index.shape:
            raise ShapeError(f"{self.values.shape} values for {self.index.shape} coordinates")
        if self.index.size:
            if self.index[0] < 0 or self.index[-1] >= self.rows * self.cols:
                raise ValueError("adapter coordinate out of bounds")
            if np.any(np.diff(self.index) <= 0):
                raise ValueError("adapter coordinates must be strictly increasing")
        if self.meta.get("label") == "shira" and self.density > SHIRA_MAX_DENSITY:
            raise ValueError(f"SHiRA adapter density {self.density:.4f} exceeds {SHIRA_MAX_DENSITY}")

    @classmethod
    def from_coords(cls, rows: int, cols: int, coords, values, **kw) -> SparseAdapter:
        c = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        return cls(rows, cols, c[:, 0] * cols + c[:, 1], values, **kw)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def coords(self) -> np.ndarray:
        return np.stack(np.divmod(self.index, self.cols), axis=1)

    @property
    def nnz(self) -> int:
        return int(self.index.size)

    @property
    def density(self) -> float:
        return self.nnz / (self.rows * self.cols)

    @property
    def mask(self) -> Mask:
        return Mask(self.rows, self.cols, self.index)

    def storage_floats(self) -> int:
        """Values plus two integer coordinates per entry."""
        return 3 * self.nnz


@dataclass
class LoraAdapter:
    a: np.ndarray  # n x r
    b: np.ndarray  # r x m
    alpha_lora: float = 2.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.a, self.b = as_matrix(self.a), as_matrix(self.b)
        if self.a.shape[1] != self.b.shape[0]:
            raise ShapeError(f"factor shapes {self.a.shape} and {self.b.shape} do not chain")
        if self.rank > min(self.shape):
            raise ShapeError(f"rank {self.rank} exceeds min{self.shape}")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.a.shape[0], self.b.shape[1])

    def storage_floats(self) -> int:
        return self.a.size + self.b.size


Adapter = Union[SparseAdapter, LoraAdapter]


@dataclass
class ModelAdapter:
    layers: dict[int, Adapter]
    kind: str  # "sparse" | "lora"
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("sparse", "lora"):
            raise ValueError(f"unknown adapter kind {self.kind!r}")
        expected = SparseAdapter if self.kind == "sparse" else LoraAdapter
        for k, a in self.layers.items():
            if not isinstance(a, expected):
                raise TypeError(f"layer {k}: {type(a).__name__} in a {self.kind} adapter")

    def check(self, model: Mlp) -> None:
        for k, a in self.layers.items():
            if not 0 <= k < len(model.layers):
                raise ShapeError(f"adapter targets layer {k}, model has {len(model.layers)} layers")
            if a.shape != model.layers[k].weight.shape:
                raise ShapeError(f"adapter layer {k} is {a.shape}, model weight is {model.layers[k].weight.shape}")

    def nnz(self) -> int:
        return sum(a.nnz for a in self.layers.values()) if self.kind == "sparse" else 0

    def storage_floats(self) -> int:
        return sum(a.storage_floats() for a in self.layers.values())


def extract_sparse(
    w_base: np.ndarray,
    w_new: np.ndarray,
    mask: Mask,
    meta: dict | None = None,
    values: np.ndarray | None = None,
) -> SparseAdapter:
    """``S = w_new - w_base`` on the mask; raises if anything moved off the mask.

    A float difference does not always add back exactly (``b + (a - b) != a``
    when ``a`` and ``b`` are far apart). Trainers that track the delta itself
    pass it as ``values``; it is then checked to rebuild ``w_new`` bit for bit.
    """
    w_base, w_new = as_matrix(w_base), as_matrix(w_new)
    if w_base.shape != w_new.shape or mask.shape != w_base.shape:
        raise ShapeError(f"base {w_base.shape}, new {w_new.shape}, mask {mask.shape}")
    base, new = w_base.reshape(-1), w_new.reshape(-1)
    off = np.ones(base.size, dtype=bool)
    off[mask.index] = False
    # compare raw values, not the difference: catches any change of value
    moved = np.flatnonzero(off & (new != base))
    if moved.size:
        r, c = divmod(int(moved[0]), w_base.shape[1])
        raise IntegrityError(f"{moved.size} off-mask weights changed, first at ({r}, {c})")
    if values is None:
        values = new[mask.index] - base[mask.index]
    else:
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.shape != mask.index.shape:
            raise ShapeError(f"{values.shape[0]} values for {mask.nnz} coordinates")
        rebuilt = base[mask.index] + values
        bad = np.flatnonzero(rebuilt.view(np.uint64) != new[mask.index].view(np.uint64))
        if bad.size:
            r, c = divmod(int(mask.index[bad[0]]), w_base.shape[1])
            raise IntegrityError(f"{bad.size} on-mask weights differ from base + delta, first at ({r}, {c})")
    meta = dict(meta or {})
    meta.setdefault("density", mask.density)
    return SparseAdapter(mask.rows, mask.cols, mask.index.copy(), values.copy(), meta=meta)


def apply_sparse(w: np.ndarray, adapter: SparseAdapter, alpha: float = 1.0) -> np.ndarray:
    w = as_matrix(w)
    if w.shape != adapter.shape:
        raise ShapeError(f"weight {w.shape} vs adapter {adapter.shape}")
    out = w.copy()
    if alpha != 0:
        flat = out.reshape(-1)
        flat[adapter.index] += alpha * adapter.values
    return out


def lora_delta(adapter: LoraAdapter) -> np.ndarray:
    return adapter.alpha_lora * (adapter.a @ adapter.b)


def fuse_lora(w: np.ndarray, adapter: LoraAdapter, alpha: float = 1.0) -> np.ndarray:
    w = as_matrix(w)
    if w.shape != adapter.shape:
        raise ShapeError(f"weight {w.shape} vs adapter {adapter.shape}")
    return add_scaled(w, lora_delta(adapter), alpha)


def delta_dense(adapter: Adapter) -> np.ndarray:
    """Materialised ``n x m`` delta at alpha = 1."""
    if isinstance(adapter, LoraAdapter):
        return lora_delta(adapter)
    d = np.zeros(adapter.rows * adapter.cols)
    d[adapter.index] = adapter.values
    return d.reshape(adapter.rows, adapter.cols)


def apply_model_adapter(model: Mlp, adapter: ModelAdapter, alpha: float = 1.0) -> Mlp:
    """Offline-materialised copy of ``model`` with the adapter folded in."""
    adapter.check(model)
    out = model.copy()
    for k, a in adapter.layers.items():
        layer = out.layers[k]
        if isinstance(a, SparseAdapter):
            layer.weight = apply_sparse(layer.weight, a, alpha)
        else:
            layer.weight = fuse_lora(layer.weight, a, alpha)
    return out
