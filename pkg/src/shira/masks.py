"""Sparse trainable-entry masks: struct, rand, wm, grad and snip strategies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linalg import SeededRng, ShapeError
from .nn import Batch, GradientSet, Mlp, backward, forward

STRATEGIES = ("struct", "rand", "wm", "grad", "snip")


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class MaskBudget:
    fraction: float

    def __post_init__(self) -> None:
        if not 0 < self.fraction < 1:
            raise BudgetError(f"fraction must lie in (0, 1), got {self.fraction}")

    def count(self, rows: int, cols: int) -> int:
        # floor, with a guard against 0.01*n*m landing a hair under an integer
        exact = self.fraction * rows * cols
        k = math.floor(exact)
        if math.isclose(exact, k + 1, rel_tol=1e-12):
            k += 1
        return k


@dataclass(frozen=True)
class Mask:
    """Trainable entries of a ``rows x cols`` tensor as sorted row-major linear indices."""

    rows: int
    cols: int
    index: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        idx = np.asarray(self.index, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeError("mask index must be 1-D")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.rows * self.cols:
                raise ValueError("mask coordinate out of bounds")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("mask coordinates must be strictly increasing")
        idx.setflags(write=False)
        object.__setattr__(self, "index", idx)

    @classmethod
    def from_coords(cls, rows: int, cols: int, coords) -> Mask:
        c = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        if c.size and (c.min() < 0 or c[:, 0].max() >= rows or c[:, 1].max() >= cols):
            raise ValueError("mask coordinate out of bounds")
        return cls(rows, cols, np.unique(c[:, 0] * cols + c[:, 1]))

    @classmethod
    def full(cls, rows: int, cols: int) -> Mask:
        return cls(rows, cols, np.arange(rows * cols, dtype=np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def coords(self) -> np.ndarray:
        """``(nnz, 2)`` array of (row, col)."""
        return np.stack(np.divmod(self.index, self.cols), axis=1)

    @property
    def nnz(self) -> int:
        return int(self.index.size)

    @property
    def density(self) -> float:
        return self.nnz / (self.rows * self.cols)

    def dense(self) -> np.ndarray:
        m = np.zeros(self.rows * self.cols, dtype=bool)
        m[self.index] = True
        return m.reshape(self.rows, self.cols)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Mask)
            and self.shape == other.shape
            and np.array_equal(self.index, other.index)
        )

    def __hash__(self) -> int:
        return hash((self.rows, self.cols, self.index.tobytes()))


@dataclass
class ModelMask:
    masks: dict[int, Mask]  # keyed by layer index
    strategy: str = "custom"

    @property
    def layers(self) -> list[int]:
        return sorted(self.masks)

    def check(self, model: Mlp) -> None:
        for k, mask in self.masks.items():
            if not 0 <= k < len(model.layers):
                raise ShapeError(f"mask targets layer {k}, model has {len(model.layers)} layers")
            if mask.shape != model.layers[k].weight.shape:
                raise ShapeError(f"mask for layer {k} is {mask.shape}, weight is {model.layers[k].weight.shape}")

    def nnz(self) -> int:
        return sum(m.nnz for m in self.masks.values())


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Sorted linear indices of the ``k`` largest scores.

    Ties go to the lowest row-major index.
    """
    flat = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 0 <= k <= flat.size:
        raise BudgetError(f"cannot select {k} of {flat.size} entries")
    # stable sort on negated scores keeps lower indices first among equals
    order = np.argsort(-flat, kind="stable")
    return np.sort(order[:k])


def make_struct_mask(shape: tuple[int, int], budget: MaskBudget, include_diagonal: bool = True) -> Mask:
    """Evenly spaced full rows plus (optionally) the main diagonal."""
    n, m = shape
    total = budget.fraction * n * m
    diag = min(n, m) if include_diagonal else 0
    if total < diag:
        raise BudgetError(
            f"budget {budget.fraction} gives {total:.1f} entries, fewer than the {diag}-entry diagonal; "
            "use a larger fraction or include_diagonal=False"
        )
    k = min(n, max(1, math.floor((total - diag) / m)))
    stride = max(1, n // k)
    rows = np.arange(k, dtype=np.int64) * stride
    parts = [(rows[:, None] * m + np.arange(m, dtype=np.int64)[None, :]).reshape(-1)]
    if include_diagonal:
        d = np.arange(diag, dtype=np.int64)
        parts.append(d * m + d)
    return Mask(n, m, np.unique(np.concatenate(parts)))


def struct_row_count(shape: tuple[int, int], budget: MaskBudget, include_diagonal: bool = True) -> int:
    n, m = shape
    diag = min(n, m) if include_diagonal else 0
    return min(n, max(1, math.floor((budget.fraction * n * m - diag) / m)))


def make_random_mask(shape: tuple[int, int], budget: MaskBudget, rng: SeededRng) -> Mask:
    n, m = shape
    k = budget.count(n, m)
    if k < 1:
        raise BudgetError(f"budget {budget.fraction} selects no entries of a {n}x{m} tensor")
    return Mask(n, m, rng.choice(n * m, k))


def make_wm_mask(weight: np.ndarray, budget: MaskBudget) -> Mask:
    w = np.asarray(weight, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("weight contains non-finite entries")
    n, m = w.shape
    return Mask(n, m, top_k(np.abs(w), budget.count(n, m)))


def accumulate_abs_grads(model: Mlp, calib: Sequence[Batch], loss_kind: str) -> list[np.ndarray]:
    """Per-layer sum over calibration batches of |dL/dW|."""
    if not calib:
        raise ValueError("calibration set is empty")
    acc = [np.zeros_like(l.weight) for l in model.layers]
    for batch in calib:
        out, cache = forward(model, batch.inputs)
        grads: GradientSet = backward(model, cache, batch.targets, loss_kind)
        for k, g in enumerate(grads.weights):
            if g.shape != acc[k].shape:
                raise ShapeError(f"gradient shape drift in layer {k}: {g.shape} vs {acc[k].shape}")
            acc[k] += np.abs(g)
    return acc


def _resolve_layers(model: Mlp, layers: Sequence[int] | None) -> list[int]:
    return list(range(len(model.layers))) if layers is None else sorted(layers)


def make_grad_mask(
    model: Mlp,
    calib: Sequence[Batch],
    budget: MaskBudget,
    loss_kind: str = "softmax-cross-entropy",
    layers: Sequence[int] | None = None,
) -> ModelMask:
    scores = accumulate_abs_grads(model, calib, loss_kind)
    masks = {}
    for k in _resolve_layers(model, layers):
        n, m = scores[k].shape
        masks[k] = Mask(n, m, top_k(scores[k], budget.count(n, m)))
    return ModelMask(masks, "grad")


def make_snip_mask(
    model: Mlp,
    calib: Sequence[Batch],
    budget: MaskBudget,
    loss_kind: str = "softmax-cross-entropy",
    layers: Sequence[int] | None = None,
) -> ModelMask:
    scores = accumulate_abs_grads(model, calib, loss_kind)
    masks = {}
    for k in _resolve_layers(model, layers):
        n, m = scores[k].shape
        saliency = np.abs(model.layers[k].weight) * scores[k]
        masks[k] = Mask(n, m, top_k(saliency, budget.count(n, m)))
    return ModelMask(masks, "snip")


def make_model_mask(
    strategy: str,
    model: Mlp,
    budget: MaskBudget,
    *,
    layers: Sequence[int] | None = None,
    seed: int = 0,
    calib: Sequence[Batch] | None = None,
    loss_kind: str = "softmax-cross-entropy",
    include_diagonal: bool = True,
) -> ModelMask:
    """Build one mask per adapted layer with the named strategy."""
    targets = _resolve_layers(model, layers)
    if strategy == "struct":
        return ModelMask({k: make_struct_mask(model.layers[k].weight.shape, budget, include_diagonal) for k in targets}, strategy)
    if strategy == "rand":
        rng = SeededRng(seed)
        return ModelMask({k: make_random_mask(model.layers[k].weight.shape, budget, rng.spawn(k)) for k in targets}, strategy)
    if strategy == "wm":
        return ModelMask({k: make_wm_mask(model.layers[k].weight, budget) for k in targets}, strategy)
    if strategy in ("grad", "snip"):
        if not calib:
            raise ValueError(f"{strategy} masks need a non-empty calibration set")
        fn = make_grad_mask if strategy == "grad" else make_snip_mask
        return fn(model, calib, budget, loss_kind, targets)
    raise ValueError(f"unknown mask strategy {strategy!r}; expected one of {STRATEGIES}")
