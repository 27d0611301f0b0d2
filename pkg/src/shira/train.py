"""Gradient-masked sparse finetuning, the LoRA baseline, and reference runs."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .adapters import LoraAdapter, ModelAdapter, SparseAdapter, extract_sparse, lora_delta
from .linalg import SeededRng, ShapeError, rand_matrix
from .masks import MaskBudget, ModelMask, make_model_mask
from .nn import GradientSet, LoraFactors, Mlp, accuracy, backward, forward, loss
from .tasks import TaskData


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float) -> None:
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 64
    lr: float = 1e-2
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "linear"
    grad_accum: int = 1
    loss_kind: str = "softmax-cross-entropy"
    seed: int = 0
    adapted_layers: list[int] | None = None
    mask_strategy: str = "wm"
    fraction: float = 0.02
    include_diagonal: bool = True
    calib_batches: int = 8
    calib_batch_size: int = 64
    masking: str = "sparse"  # "sparse" optimizer state or "hook" (dense masked grads)
    rank: int = 16
    alpha_lora: float = 2.0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.steps < 0 or self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("steps, batch_size and grad_accum must be non-negative / positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.masking not in ("sparse", "hook"):
            raise ValueError(f"unknown masking path {self.masking!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def lr_at(self, step: int) -> float:
        if self.schedule == "linear":
            return self.lr * (1.0 - step / max(1, self.steps))
        return self.lr

    def layers_for(self, model: Mlp) -> list[int]:
        if self.adapted_layers is None:
            return list(range(len(model.layers)))
        return sorted(self.adapted_layers)


@dataclass
class TrainReport:
    method: str
    loss_curve: list[float]
    metrics: dict
    params: dict  # total, trainable, changed
    optimizer_state: dict  # dense_equivalent_floats, state_floats
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# ---------------------------------------------------------------- optimizers


def _adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return p - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class SparseOptimState:
    """Adam moments for masked coordinates only, aligned 1:1 with each layer's mask."""

    index: dict[int, np.ndarray]
    m: dict[int, np.ndarray]
    v: dict[int, np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_mask(cls, mask: ModelMask, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> SparseOptimState:
        index = {k: mm.index for k, mm in mask.masks.items()}
        return cls(
            index,
            {k: np.zeros(i.size) for k, i in index.items()},
            {k: np.zeros(i.size) for k, i in index.items()},
            beta1,
            beta2,
            eps,
        )

    def float_count(self) -> int:
        return sum(a.size for a in self.m.values()) + sum(a.size for a in self.v.values())


def adam_sparse_step(
    state: SparseOptimState,
    weights: dict[int, np.ndarray],
    grads_on_coords: dict[int, np.ndarray],
    lr: float,
) -> None:
    """Bias-corrected Adam on mask coordinates; writes only those entries of ``weights``."""
    current = {k: weights[k].reshape(-1)[idx] for k, idx in state.index.items()}
    updated = adam_coord_step(state, current, grads_on_coords, lr)
    for k, idx in state.index.items():
        weights[k].reshape(-1)[idx] = updated[k]


def adam_coord_step(
    state: SparseOptimState,
    values: dict[int, np.ndarray],
    grads_on_coords: dict[int, np.ndarray],
    lr: float,
) -> dict[int, np.ndarray]:
    """One Adam step on coordinate-aligned value vectors; returns the new vectors."""
    state.step += 1
    out = {}
    for k, idx in state.index.items():
        g = grads_on_coords[k]
        if g.shape != idx.shape or values[k].shape != idx.shape:
            raise ShapeError(f"layer {k}: {g.shape[0]} gradients for {idx.size} coordinates")
        out[k] = _adam_update(values[k], g, state.m[k], state.v[k], state.step, lr, state.beta1, state.beta2, state.eps)
    return out


class DenseAdam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        for key, p in params.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            p[...] = _adam_update(p, grads[key], self.m[key], self.v[key], self.t, lr, self.beta1, self.beta2, self.eps)

    def float_count(self) -> int:
        return sum(a.size for a in self.m.values()) * 2


def mask_gradients(grads: GradientSet, mask: ModelMask) -> GradientSet:
    """Hadamard-mask weight gradients; layers without a mask are zeroed.

    Off-mask entries become +0.0 exactly (``np.where`` rather than a multiply,
    which would leave -0.0 behind negative gradients). Bias gradients are zeroed.
    """
    out_w = []
    for k, g in enumerate(grads.weights):
        mm = mask.masks.get(k)
        if mm is None:
            out_w.append(np.zeros_like(g))
            continue
        if mm.shape != g.shape:
            raise ShapeError(f"mask {mm.shape} vs gradient {g.shape} in layer {k}")
        out_w.append(np.where(mm.dense(), g, 0.0))
    return GradientSet(out_w, [np.zeros_like(b) for b in grads.biases])


# ---------------------------------------------------------------- loop helpers


def _accumulated_grads(model, data: TaskData, cfg: TrainConfig, rng: SeededRng, lora=None):
    total, losses = None, []
    n = len(data.train)
    for _ in range(cfg.grad_accum):
        idx = rng.integers(n, cfg.batch_size)
        batch = data.train.batch(idx)
        out, cache = forward(model, batch.inputs, lora)
        losses.append(loss(out, batch.targets, cfg.loss_kind))
        g = backward(model, cache, batch.targets, cfg.loss_kind, lora)
        total = g if total is None else total + g
    if cfg.grad_accum > 1:
        total = total.scale(1.0 / cfg.grad_accum)
    return total, float(np.mean(losses))


def _check_loss(step: int, value: float) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(step, value)


def evaluate(model: Mlp, data: TaskData, lora=None) -> dict:
    return {
        "train_acc": accuracy(model, data.train.x, data.train.y, lora),
        "test_acc": accuracy(model, data.test.x, data.test.y, lora),
    }


def _changed(base: Mlp, new: Mlp) -> int:
    return int(sum(np.count_nonzero(a.weight != b.weight) + np.count_nonzero(a.bias != b.bias) for a, b in zip(base.layers, new.layers)))


# ---------------------------------------------------------------- trainers


def build_mask(model: Mlp, data: TaskData, cfg: TrainConfig) -> ModelMask:
    calib = None
    if cfg.mask_strategy in ("grad", "snip"):
        calib = data.train.batches(cfg.calib_batch_size, cfg.calib_batches)
    return make_model_mask(
        cfg.mask_strategy,
        model,
        MaskBudget(cfg.fraction),
        layers=cfg.layers_for(model),
        seed=cfg.seed,
        calib=calib,
        loss_kind=cfg.loss_kind,
        include_diagonal=cfg.include_diagonal,
    )


def train_shira(
    model: Mlp, mask: ModelMask, data: TaskData, cfg: TrainConfig
) -> tuple[Mlp, ModelAdapter, TrainReport]:
    """Finetune only the masked entries of ``model``'s weights; the input model is not modified."""
    mask.check(model)
    trained = model.copy()
    rng = SeededRng(cfg.seed).spawn(100)
    weights = {k: trained.layers[k].weight.reshape(-1) for k in mask.masks}
    index = {k: mm.index for k, mm in mask.masks.items()}
    base_vals = {k: weights[k][idx].copy() for k, idx in index.items()}
    # the trainable parameter is the delta itself; weights on the mask are
    # always base + delta, so the adapter rebuilds them bit for bit
    if cfg.masking == "hook":
        deltas = {k: np.zeros(model.layers[k].weight.shape) for k in mask.masks}
    else:
        deltas = {k: np.zeros(idx.size) for k, idx in index.items()}
    sparse_state = SparseOptimState.for_mask(mask, cfg.beta1, cfg.beta2, cfg.eps)
    dense_adam = DenseAdam(cfg.beta1, cfg.beta2, cfg.eps)
    curve = []
    for step in range(cfg.steps):
        grads, value = _accumulated_grads(trained, data, cfg, rng)
        _check_loss(step, value)
        curve.append(value)
        lr = cfg.lr_at(step)
        if cfg.masking == "hook":
            masked = mask_gradients(grads, mask)
            gd = {k: masked.weights[k] for k in deltas}
            if cfg.optimizer == "adam":
                dense_adam.step(deltas, gd, lr)
            else:
                for k, d in deltas.items():
                    d -= lr * gd[k]
            on_coords = {k: d.reshape(-1)[index[k]] for k, d in deltas.items()}
        else:
            g = {k: grads.weights[k].reshape(-1)[idx] for k, idx in index.items()}
            if cfg.optimizer == "adam":
                deltas = adam_coord_step(sparse_state, deltas, g, lr)
            else:
                deltas = {k: d - lr * g[k] for k, d in deltas.items()}
            on_coords = deltas
        for k, idx in index.items():
            weights[k][idx] = base_vals[k] + on_coords[k]

    digest = cfg.digest()
    final = {k: (d.reshape(-1)[index[k]] if cfg.masking == "hook" else d) for k, d in deltas.items()}
    layers = {
        k: extract_sparse(
            model.layers[k].weight,
            trained.layers[k].weight,
            mm,
            meta={"strategy": mask.strategy, "source_layer": k, "config_digest": digest, "label": "shira"},
            values=final[k],
        )
        for k, mm in mask.masks.items()
    }
    adapter = ModelAdapter(layers, "sparse", {"strategy": mask.strategy, "config_digest": digest})
    trainable = mask.nnz()
    dense_eq = 2 * sum(model.layers[k].weight.size for k in mask.masks)
    if cfg.optimizer == "sgd":
        state_floats = 0
    elif cfg.masking == "hook":
        state_floats = dense_adam.float_count()
    else:
        state_floats = sparse_state.float_count()
    report = TrainReport(
        f"shira-{mask.strategy}",
        curve,
        evaluate(trained, data),
        {"total": model.num_params(), "trainable": trainable, "changed": _changed(model, trained)},
        {
            "dense_equivalent_floats": dense_eq,
            "state_floats": state_floats,
            "per_layer_density": {str(k): mm.density for k, mm in mask.masks.items()},
        },
        cfg.to_dict(),
    )
    return trained, adapter, report


@dataclass
class LoraModel:
    """Frozen base with unfused low-rank branches attached."""

    base: Mlp
    factors: dict[int, LoraFactors]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return forward(self.base, x, self.factors)[0]

    def adapter(self, meta: dict | None = None) -> ModelAdapter:
        return ModelAdapter(
            {k: LoraAdapter(f.a.copy(), f.b.copy(), f.scale, {"source_layer": k}) for k, f in self.factors.items()},
            "lora",
            dict(meta or {}),
        )


def init_lora(model: Mlp, layers: Sequence[int], rank: int, alpha_lora: float, seed: int) -> dict[int, LoraFactors]:
    rng = SeededRng(seed).spawn(200)
    factors = {}
    for k in layers:
        n, m = model.layers[k].weight.shape
        if rank > min(n, m):
            raise ShapeError(f"rank {rank} exceeds min dimension of layer {k} ({n}x{m})")
        factors[k] = LoraFactors(rand_matrix(rng, n, rank, "gaussian", std=1.0 / math.sqrt(n)), np.zeros((rank, m)), alpha_lora)
    return factors


def train_lora(model: Mlp, data: TaskData, cfg: TrainConfig) -> tuple[LoraModel, ModelAdapter, TrainReport]:
    layers = cfg.layers_for(model)
    factors = init_lora(model, layers, cfg.rank, cfg.alpha_lora, cfg.seed)
    base = model.copy()
    lm = LoraModel(base, factors)
    rng = SeededRng(cfg.seed).spawn(100)
    opt = DenseAdam(cfg.beta1, cfg.beta2, cfg.eps)
    params = {}
    for k, f in factors.items():
        params[(k, "a")] = f.a
        params[(k, "b")] = f.b
    curve = []
    for step in range(cfg.steps):
        grads, value = _accumulated_grads(base, data, cfg, rng, factors)
        _check_loss(step, value)
        curve.append(value)
        gd = {}
        for k in factors:
            gd[(k, "a")], gd[(k, "b")] = grads.lora[k]
        lr = cfg.lr_at(step)
        if cfg.optimizer == "adam":
            opt.step(params, gd, lr)
        else:
            for key, p in params.items():
                p -= lr * gd[key]
    adapter = lm.adapter({"strategy": "lora", "rank": cfg.rank, "config_digest": cfg.digest()})
    trainable = sum(f.a.size + f.b.size for f in factors.values())
    # fused mode overwrites every entry of an adapted weight with a nonzero delta
    changed = sum(int(np.count_nonzero(lora_delta(a))) for a in adapter.layers.values())
    report = TrainReport(
        f"lora-r{cfg.rank}",
        curve,
        evaluate(base, data, factors),
        {"total": model.num_params(), "trainable": trainable, "changed": changed},
        {
            "dense_equivalent_floats": 2 * sum(model.layers[k].weight.size for k in layers),
            "state_floats": 2 * trainable if cfg.optimizer == "adam" else 0,
        },
        cfg.to_dict(),
    )
    return lm, adapter, report


def train_full(model: Mlp, data: TaskData, cfg: TrainConfig) -> tuple[Mlp, TrainReport]:
    """Dense finetune of every weight and bias."""
    trained = model.copy()
    rng = SeededRng(cfg.seed).spawn(100)
    opt = DenseAdam(cfg.beta1, cfg.beta2, cfg.eps)
    params = {}
    for k, layer in enumerate(trained.layers):
        params[(k, "w")] = layer.weight
        params[(k, "b")] = layer.bias
    curve = []
    for step in range(cfg.steps):
        grads, value = _accumulated_grads(trained, data, cfg, rng)
        _check_loss(step, value)
        curve.append(value)
        gd = {}
        for k in range(len(trained.layers)):
            gd[(k, "w")], gd[(k, "b")] = grads.weights[k], grads.biases[k]
        lr = cfg.lr_at(step)
        if cfg.optimizer == "adam":
            opt.step(params, gd, lr)
        else:
            for key, p in params.items():
                p -= lr * gd[key]
    total = model.num_params()
    report = TrainReport(
        "full",
        curve,
        evaluate(trained, data),
        {"total": total, "trainable": total, "changed": _changed(model, trained)},
        {"dense_equivalent_floats": 2 * total, "state_floats": opt.float_count()},
        cfg.to_dict(),
    )
    return trained, report


def train_frozen(model: Mlp, data: TaskData, cfg: TrainConfig | None = None) -> tuple[Mlp, TrainReport]:
    """No training; evaluates the base model as the lower reference."""
    report = TrainReport(
        "frozen",
        [],
        evaluate(model, data),
        {"total": model.num_params(), "trainable": 0, "changed": 0},
        {"dense_equivalent_floats": 0, "state_floats": 0},
        cfg.to_dict() if cfg else {},
    )
    return model.copy(), report
