"""Naive multi-adapter fusion and pairwise interference measures."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .adapters import LoraAdapter, ModelAdapter, SparseAdapter, apply_model_adapter, delta_dense
from .linalg import ShapeError
from .nn import Mlp, accuracy
from .tasks import Dataset


class CollisionError(ValueError):
    """Strict fusion found a coordinate shared by two adapters."""


def fuse_multi(
    adapters: Sequence[ModelAdapter],
    weights: Sequence[float] | None = None,
    strict: bool = False,
) -> ModelAdapter:
    """Coordinate-wise weighted sum of sparse adapters over the union support.

    Colliding coordinates are summed in list order. ``strict=True`` rejects
    any collision instead.
    """
    if len(adapters) < 2:
        raise ValueError("fusion needs at least two adapters")
    if any(a.kind != "sparse" for a in adapters):
        raise TypeError("only sparse adapters can be fused by addition")
    weights = [1.0] * len(adapters) if weights is None else [float(w) for w in weights]
    if len(weights) != len(adapters):
        raise ValueError(f"{len(weights)} weights for {len(adapters)} adapters")
    layer_ids = sorted(set().union(*(a.layers for a in adapters)))
    fused = {}
    for k in layer_ids:
        parts = [(a.layers[k], w) for a, w in zip(adapters, weights) if k in a.layers]
        shapes = {p.shape for p, _ in parts}
        if len(shapes) != 1:
            raise ShapeError(f"layer {k}: adapters disagree on shape {sorted(shapes)}")
        index = np.concatenate([p.index for p, _ in parts])
        values = np.concatenate([w * p.values for p, w in parts])
        union, inverse = np.unique(index, return_inverse=True)
        if strict and union.size != index.size:
            raise CollisionError(f"layer {k}: {index.size - union.size} colliding coordinates")
        # bincount adds contributions in input order, i.e. adapter list order
        summed = np.bincount(inverse, weights=values, minlength=union.size)
        rows, cols = shapes.pop()
        fused[k] = SparseAdapter(
            rows, cols, union, summed, meta={"strategy": "fused", "source_layer": k, "density": union.size / (rows * cols)}
        )
    meta = {"strategy": "fused", "sources": [a.meta for a in adapters], "weights": weights}
    return ModelAdapter(fused, "sparse", meta)


def fuse_lora_deltas(adapters: Sequence[ModelAdapter], weights: Sequence[float] | None = None) -> dict[int, np.ndarray]:
    """Summed dense deltas of LoRA adapters (naive fusion baseline)."""
    weights = [1.0] * len(adapters) if weights is None else list(weights)
    out: dict[int, np.ndarray] = {}
    for a, w in zip(adapters, weights):
        if a.kind != "lora":
            raise TypeError("expected LoRA adapters")
        for k, layer in a.layers.items():
            d = w * delta_dense(layer)
            out[k] = out[k] + d if k in out else d
    return out


@dataclass
class Interference:
    support_a: int
    support_b: int
    overlap: int
    union: int
    overlap_fraction: float
    product_nnz: int
    product_structural_nnz: int
    product_nnz_fraction: float
    product_frobenius: float

    def to_dict(self) -> dict:
        return asdict(self)


def _sparse_gram(a: SparseAdapter, b: SparseAdapter) -> tuple[np.ndarray, np.ndarray]:
    """``a^T b`` and its structural support, touching only rows both adapters use."""
    m = a.cols
    prod = np.zeros((m, m))
    support = np.zeros((m, m), dtype=bool)
    ra, ca = np.divmod(a.index, a.cols)
    rb, cb = np.divmod(b.index, b.cols)
    shared = np.intersect1d(ra, rb)
    # row ranges via searchsorted: coordinates are sorted row-major
    sa, ea = np.searchsorted(ra, shared, "left"), np.searchsorted(ra, shared, "right")
    sb, eb = np.searchsorted(rb, shared, "left"), np.searchsorted(rb, shared, "right")
    for i in range(shared.size):
        cols_a, vals_a = ca[sa[i] : ea[i]], a.values[sa[i] : ea[i]]
        cols_b, vals_b = cb[sb[i] : eb[i]], b.values[sb[i] : eb[i]]
        prod[np.ix_(cols_a, cols_b)] += np.outer(vals_a, vals_b)
        support[np.ix_(cols_a, cols_b)] = True
    return prod, support


def interference(a1: SparseAdapter | LoraAdapter, a2: SparseAdapter | LoraAdapter) -> Interference:
    """Support overlap plus sparsity and magnitude of ``S1^T S2``."""
    if a1.shape != a2.shape:
        raise ShapeError(f"cannot compare {a1.shape} with {a2.shape}")
    n, m = a1.shape
    if isinstance(a1, SparseAdapter) and isinstance(a2, SparseAdapter):
        overlap = int(np.intersect1d(a1.index, a2.index, assume_unique=True).size)
        s1, s2 = a1.nnz, a2.nnz
        prod, support = _sparse_gram(a1, a2)
        structural = int(support.sum())
    else:
        d1, d2 = delta_dense(a1), delta_dense(a2)
        nz1, nz2 = d1 != 0, d2 != 0
        s1, s2 = int(nz1.sum()), int(nz2.sum())
        overlap = int((nz1 & nz2).sum())
        prod = d1.T @ d2
        structural = int(((nz1.T.astype(np.int64) @ nz2.astype(np.int64)) > 0).sum())
    nnz = int(np.count_nonzero(prod))
    union = s1 + s2 - overlap
    return Interference(
        s1,
        s2,
        overlap,
        union,
        overlap / union if union else 0.0,
        nnz,
        structural,
        nnz / (m * m),
        float(np.linalg.norm(prod)),
    )


def fusion_report(adapters: Sequence[ModelAdapter]) -> dict:
    """Pairwise interference per shared layer, JSON-ready."""
    out: dict = {"pairs": []}
    for i in range(len(adapters)):
        for j in range(i + 1, len(adapters)):
            layers = {}
            for k in sorted(set(adapters[i].layers) & set(adapters[j].layers)):
                layers[str(k)] = interference(adapters[i].layers[k], adapters[j].layers[k]).to_dict()
            out["pairs"].append({"a": i, "b": j, "layers": layers})
    return out


def expected_product_density(density: float, rows: int) -> float:
    """P[(S1^T S2)_jk structurally nonzero] for independent random masks."""
    return 1.0 - (1.0 - density * density) ** rows


@dataclass
class MultiEval:
    single: dict[str, float]
    fused: dict[str, float]
    drop_points: float
    drop_percent: float

    def to_dict(self) -> dict:
        return asdict(self)


def percent_drop(single: Mapping[str, float], fused: Mapping[str, float]) -> MultiEval:
    """Average single-adapter accuracy minus average fused accuracy (in points of %)."""
    if not fused:
        raise ValueError("no tasks to evaluate")
    missing = set(fused) - set(single)
    if missing:
        raise KeyError(f"missing single-adapter baselines for {sorted(missing)}")
    s = float(np.mean([single[t] for t in fused])) * 100
    f = float(np.mean([fused[t] for t in fused])) * 100
    return MultiEval(dict(single), dict(fused), s - f, 100 * (s - f) / s if s else 0.0)


def eval_multi(
    model: Mlp,
    fused: ModelAdapter | Mlp,
    tasks: Mapping[str, Dataset],
    single_acc: Mapping[str, float],
    alpha: float = 1.0,
) -> MultiEval:
    """Accuracy of the fused model on every task and the %Drop against single adapters.

    ``fused`` is either a sparse adapter (applied to ``model``) or an already
    fused model, which is how dense LoRA fusion is passed in.
    """
    if not tasks:
        raise ValueError("empty taskset")
    missing = set(tasks) - set(single_acc)
    if missing:
        raise KeyError(f"missing single-adapter baselines for {sorted(missing)}")
    fm = fused if isinstance(fused, Mlp) else apply_model_adapter(model, fused, alpha)
    accs = {name: accuracy(fm, d.x, d.y) for name, d in tasks.items()}
    return percent_drop(single_acc, accs)


def apply_dense_deltas(model: Mlp, deltas: Mapping[int, np.ndarray], alpha: float = 1.0) -> Mlp:
    out = model.copy()
    for k, d in deltas.items():
        if d.shape != out.layers[k].weight.shape:
            raise ShapeError(f"delta {d.shape} vs layer {k} weight {out.layers[k].weight.shape}")
        if alpha != 0:
            out.layers[k].weight = out.layers[k].weight + alpha * d
    return out
