"""Sparse high-rank adapters (and a LoRA baseline) on toy NumPy MLPs."""

from .adapters import LoraAdapter, ModelAdapter, SparseAdapter, apply_model_adapter, extract_sparse
from .fusion import fuse_multi, interference
from .linalg import SeededRng, numerical_rank
from .masks import Mask, MaskBudget, ModelMask, make_model_mask
from .nn import Mlp, init_mlp
from .persist import read_adapter, read_checkpoint, write_adapter, write_checkpoint
from .runtime import AdapterRuntime, bench_switch
from .train import TrainConfig, train_full, train_lora, train_shira

__all__ = [
    "AdapterRuntime",
    "LoraAdapter",
    "Mask",
    "MaskBudget",
    "Mlp",
    "ModelAdapter",
    "ModelMask",
    "SeededRng",
    "SparseAdapter",
    "TrainConfig",
    "apply_model_adapter",
    "bench_switch",
    "extract_sparse",
    "fuse_multi",
    "init_mlp",
    "interference",
    "make_model_mask",
    "numerical_rank",
    "read_adapter",
    "read_checkpoint",
    "train_full",
    "train_lora",
    "train_shira",
    "write_adapter",
    "write_checkpoint",
]
