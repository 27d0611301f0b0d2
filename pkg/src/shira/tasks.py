"""Synthetic Gaussian-cluster classification tasks and their "style" variants.

The base task draws samples around ``n_classes`` fixed centres. A style variant
rotates every input by a fixed orthogonal matrix and permutes the labels, so the
base model has to be adapted to solve it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .linalg import SeededRng, orthogonal
from .nn import Batch


@dataclass(frozen=True)
class TaskSpec:
    n_classes: int = 16
    input_dim: int = 32
    n_train: int = 2048
    n_test: int = 1024
    center_scale: float = 1.0
    noise: float = 0.35
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def batch(self, idx: np.ndarray | slice | None = None) -> Batch:
        if idx is None:
            return Batch(self.x, self.y)
        return Batch(self.x[idx], self.y[idx])

    def batches(self, size: int, count: int) -> list[Batch]:
        """First ``count`` contiguous batches (wrapping around)."""
        out = []
        for i in range(count):
            idx = (np.arange(size) + i * size) % len(self)
            out.append(self.batch(idx))
        return out


@dataclass
class TaskData:
    train: Dataset
    test: Dataset
    name: str = "task"


def cluster_centers(spec: TaskSpec) -> np.ndarray:
    rng = SeededRng(spec.seed).spawn(0)
    c = rng.gaussian(spec.n_classes * spec.input_dim).reshape(spec.n_classes, spec.input_dim)
    # unit-norm centres keep class separation independent of input_dim
    return spec.center_scale * c / np.linalg.norm(c, axis=1, keepdims=True)


def _sample(spec: TaskSpec, centers: np.ndarray, rng: SeededRng, n: int) -> Dataset:
    y = rng.integers(spec.n_classes, n)
    x = centers[y] + spec.noise / np.sqrt(spec.input_dim) * rng.gaussian(n * spec.input_dim).reshape(n, spec.input_dim)
    return Dataset(x, y.astype(np.int64))


def make_base_task(spec: TaskSpec) -> TaskData:
    centers = cluster_centers(spec)
    rng = SeededRng(spec.seed).spawn(1)
    return TaskData(_sample(spec, centers, rng, spec.n_train), _sample(spec, centers, rng, spec.n_test), "base")


@dataclass(frozen=True)
class StyleTransform:
    rotation: np.ndarray
    permutation: np.ndarray

    @classmethod
    def from_seed(cls, spec: TaskSpec, style_seed: int) -> StyleTransform:
        rng = SeededRng(style_seed).spawn(7)
        return cls(orthogonal(rng, spec.input_dim), rng.permutation(spec.n_classes))

    def apply(self, data: Dataset) -> Dataset:
        return Dataset(data.x @ self.rotation.T, self.permutation[data.y])


def make_style_task(spec: TaskSpec, style_seed: int) -> TaskData:
    """Fresh samples from the base clusters, rotated and relabelled."""
    centers = cluster_centers(spec)
    rng = SeededRng(spec.seed ^ (style_seed * 0x9E37 + 1)).spawn(2)
    style = StyleTransform.from_seed(spec, style_seed)
    train = style.apply(_sample(spec, centers, rng, spec.n_train))
    test = style.apply(_sample(spec, centers, rng, spec.n_test))
    return TaskData(train, test, f"style-{style_seed}")
