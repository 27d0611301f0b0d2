"""Small multilayer perceptron with explicit activation caches and manual backprop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import SeededRng, ShapeError, rand_matrix

ACTIVATIONS = ("relu", "tanh", "none")
LOSSES = ("mse", "softmax-cross-entropy")


@dataclass
class LinearLayer:
    weight: np.ndarray  # out x in
    bias: np.ndarray  # out
    activation: str = "relu"

    def __post_init__(self) -> None:
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class Mlp:
    layers: list[LinearLayer]
    input_dim: int

    def __post_init__(self) -> None:
        width = self.input_dim
        for k, layer in enumerate(self.layers):
            if layer.weight.shape[1] != width:
                raise ShapeError(f"layer {k} expects input {layer.weight.shape[1]}, previous width is {width}")
            width = layer.weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def copy(self) -> Mlp:
        return Mlp([LinearLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers], self.input_dim)

    def num_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def weight_shapes(self) -> list[tuple[int, int]]:
        return [l.weight.shape for l in self.layers]


def init_mlp(rng: SeededRng, dims: list[int], activation: str = "relu", output_activation: str = "none") -> Mlp:
    """Kaiming-initialised MLP; ``dims`` = [input, hidden..., output], zero biases."""
    layers = []
    for k, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        act = output_activation if k == len(dims) - 2 else activation
        layers.append(LinearLayer(rand_matrix(rng, d_out, d_in, "kaiming"), np.zeros(d_out), act))
    return Mlp(layers, dims[0])


@dataclass
class LoraFactors:
    """Unfused low-rank branch on one layer: ``scale * a @ b`` (a: out x r, b: r x in)."""

    a: np.ndarray
    b: np.ndarray
    scale: float


@dataclass
class GradientSet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    lora: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, model: Mlp) -> GradientSet:
        return cls([np.zeros_like(l.weight) for l in model.layers], [np.zeros_like(l.bias) for l in model.layers])

    def __add__(self, other: GradientSet) -> GradientSet:
        return GradientSet(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
            {k: (a + other.lora[k][0], b + other.lora[k][1]) for k, (a, b) in self.lora.items()},
        )

    def scale(self, s: float) -> GradientSet:
        return GradientSet(
            [w * s for w in self.weights],
            [b * s for b in self.biases],
            {k: (a * s, b * s) for k, (a, b) in self.lora.items()},
        )


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray  # int class indices (B,) or float regression targets (B, out)

    def __post_init__(self) -> None:
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ShapeError(f"inputs must be a non-empty 2-D array, got {self.inputs.shape}")
        if len(self.targets) != self.inputs.shape[0]:
            raise ShapeError(f"{len(self.targets)} targets for {self.inputs.shape[0]} inputs")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    preacts: list[np.ndarray]
    outputs: np.ndarray
    layer_ids: tuple[int, ...]
    lora_ids: tuple[int, ...]


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(z: np.ndarray, out: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - out * out
    return np.ones_like(z)


def forward(model: Mlp, inputs: np.ndarray, lora: dict[int, LoraFactors] | None = None) -> tuple[np.ndarray, ForwardCache]:
    x = np.ascontiguousarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match model input_dim {model.input_dim}")
    lora = lora or {}
    layer_inputs, preacts = [], []
    for k, layer in enumerate(model.layers):
        layer_inputs.append(x)
        z = x @ layer.weight.T + layer.bias
        if k in lora:
            f = lora[k]
            z = z + f.scale * ((x @ f.b.T) @ f.a.T)
        preacts.append(z)
        x = _act(z, layer.activation)
    cache = ForwardCache(layer_inputs, preacts, x, tuple(id(l) for l in model.layers), tuple(sorted(lora)))
    return x, cache


def predict(model: Mlp, inputs: np.ndarray, lora: dict[int, LoraFactors] | None = None) -> np.ndarray:
    return forward(model, inputs, lora)[0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_targets(outputs: np.ndarray, targets: np.ndarray, kind: str) -> np.ndarray:
    if kind not in LOSSES:
        raise ValueError(f"unknown loss {kind!r}")
    if len(targets) != outputs.shape[0]:
        raise ShapeError(f"{len(targets)} targets for batch of {outputs.shape[0]}")
    if kind == "softmax-cross-entropy":
        t = np.asarray(targets)
        if t.ndim != 1 or not np.issubdtype(t.dtype, np.integer):
            raise ValueError("cross-entropy targets must be a 1-D integer array")
        if t.size and (t.min() < 0 or t.max() >= outputs.shape[1]):
            raise ValueError(f"class index out of range [0, {outputs.shape[1]})")
        return t
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != outputs.shape:
        raise ShapeError(f"mse targets {t.shape} vs outputs {outputs.shape}")
    return t


def loss(outputs: np.ndarray, targets: np.ndarray, kind: str) -> float:
    """Mean over the batch. MSE sums squared error over output units."""
    t = _check_targets(outputs, targets, kind)
    if kind == "mse":
        return float(((outputs - t) ** 2).sum() / outputs.shape[0])
    logp = _log_softmax(outputs)
    return float(-logp[np.arange(len(t)), t].mean())


def _loss_grad(outputs: np.ndarray, targets: np.ndarray, kind: str) -> np.ndarray:
    t = _check_targets(outputs, targets, kind)
    batch = outputs.shape[0]
    if kind == "mse":
        return 2.0 * (outputs - t) / batch
    probs = np.exp(_log_softmax(outputs))
    probs[np.arange(batch), t] -= 1.0
    return probs / batch


def backward(
    model: Mlp,
    cache: ForwardCache,
    targets: np.ndarray,
    kind: str,
    lora: dict[int, LoraFactors] | None = None,
) -> GradientSet:
    """Exact gradients of the mean loss for every weight, bias and LoRA factor."""
    lora = lora or {}
    if cache.layer_ids != tuple(id(l) for l in model.layers) or cache.lora_ids != tuple(sorted(lora)):
        raise ValueError("forward cache does not belong to this model / adapter configuration")
    for k, layer in enumerate(model.layers):
        if cache.inputs[k].shape[1] != layer.weight.shape[1] or cache.preacts[k].shape[1] != layer.weight.shape[0]:
            raise ValueError(f"stale cache: layer {k} shape changed since forward")

    n = len(model.layers)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gl: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    delta = _loss_grad(cache.outputs, targets, kind)
    for k in range(n - 1, -1, -1):
        layer = model.layers[k]
        out = cache.outputs if k == n - 1 else cache.inputs[k + 1]
        dz = delta * _act_grad(cache.preacts[k], out, layer.activation)
        x = cache.inputs[k]
        gw[k] = dz.T @ x
        gb[k] = dz.sum(axis=0)
        dx = dz @ layer.weight
        if k in lora:
            f = lora[k]
            xb = x @ f.b.T  # batch x r
            dza = dz @ f.a  # batch x r
            gl[k] = (f.scale * (dz.T @ xb), f.scale * (dza.T @ x))
            dx = dx + f.scale * (dza @ f.b)
        delta = dx
    return GradientSet(gw, gb, gl)


def finite_diff_grad(
    model: Mlp,
    batch: Batch,
    kind: str,
    h: float = 1e-5,
    lora: dict[int, LoraFactors] | None = None,
) -> GradientSet:
    """Central-difference estimate of every gradient; O(params) forward passes."""
    if h <= 0:
        raise ValueError("h must be positive")

    def f() -> float:
        return loss(predict(model, batch.inputs, lora), batch.targets, kind)

    def probe(arr: np.ndarray) -> np.ndarray:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        return g

    grads = GradientSet([probe(l.weight) for l in model.layers], [probe(l.bias) for l in model.layers])
    for k, factors in (lora or {}).items():
        grads.lora[k] = (probe(factors.a), probe(factors.b))
    return grads


def accuracy(model: Mlp, inputs: np.ndarray, labels: np.ndarray, lora: dict[int, LoraFactors] | None = None) -> float:
    return float((predict(model, inputs, lora).argmax(axis=1) == labels).mean())
