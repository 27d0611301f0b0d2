"""Adapter hot-swapping on a resident model, plus the switching benchmarks."""

from __future__ import annotations

import csv
import io
import json
import os
import statistics
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numba import njit

from .adapters import LoraAdapter, ModelAdapter, SparseAdapter, lora_delta
from .linalg import SeededRng, ShapeError, rand_matrix
from .nn import Mlp
from .persist import adapter_from_bytes, adapter_to_bytes


class RuntimeStateError(RuntimeError):
    """Load while active, unload while idle, and similar misuse."""


@njit(cache=True)
def _overwrite(flat, index, values, alpha, saved):  # pragma: no cover - compiled
    # one pass per coordinate: save the original, then write original + alpha * value
    for i in range(index.size):
        j = index[i]
        w = flat[j]
        saved[i] = w
        if alpha != 0.0:
            flat[j] = w + alpha * values[i]


@njit(cache=True)
def _restore(flat, index, saved):  # pragma: no cover - compiled
    for i in range(index.size):
        flat[index[i]] = saved[i]


def _flat(weight: np.ndarray) -> np.ndarray:
    if not weight.flags.c_contiguous:
        raise ValueError("resident weights must be C-contiguous for in-place writes")
    return weight.reshape(-1)


def scatter_overwrite(weight: np.ndarray, adapter: SparseAdapter, alpha: float = 1.0) -> np.ndarray:
    """In place ``weight[coords] += alpha * values``; returns the saved originals."""
    saved = np.empty(adapter.nnz)
    _overwrite(_flat(weight), adapter.index, adapter.values, float(alpha), saved)
    return saved


def scatter_restore(weight: np.ndarray, adapter: SparseAdapter, saved: np.ndarray) -> None:
    _restore(_flat(weight), adapter.index, saved)


@dataclass
class ActiveAdapter:
    adapter_id: str
    adapter: ModelAdapter
    alpha: float


class AdapterRuntime:
    """Single-owner mutable model that hosts at most one adapter at a time.

    Sparse adapters are written by indexed overwrite and undone from a buffer
    of saved originals, so unloading is bit-exact. LoRA adapters are fused
    densely and unfused by subtracting the recomputed product.
    Not thread-safe.
    """

    def __init__(self, model: Mlp) -> None:
        self.model = model
        self.active: ActiveAdapter | None = None
        self.restore_buffer: dict[int, np.ndarray] | None = None
        self.writes = 0  # cumulative weight-entry writes
        self.last_writes = 0
        self.last_layer_writes: dict[int, int] = {}

    # ------------------------------------------------------------ loading

    def load(self, adapter: ModelAdapter, alpha: float = 1.0, adapter_id: str | None = None) -> None:
        if adapter.kind == "sparse":
            self.load_sparse(adapter, alpha, adapter_id)
        else:
            self.load_lora(adapter, alpha, adapter_id)

    def _begin(self, adapter: ModelAdapter) -> None:
        if self.active is not None:
            raise RuntimeStateError(f"adapter {self.active.adapter_id!r} is already active")
        adapter.check(self.model)
        for k in adapter.layers:
            _flat(self.model.layers[k].weight)  # fail before any write, not halfway

    def load_sparse(self, adapter: ModelAdapter, alpha: float = 1.0, adapter_id: str | None = None) -> None:
        if adapter.kind != "sparse":
            raise TypeError("load_sparse needs a sparse adapter")
        self._begin(adapter)
        buffer, writes = {}, {}
        for k, a in adapter.layers.items():
            buffer[k] = scatter_overwrite(self.model.layers[k].weight, a, alpha)
            writes[k] = a.nnz
        self.restore_buffer = buffer
        self.active = ActiveAdapter(adapter_id or _default_id(adapter), adapter, alpha)
        self._count(writes)

    def load_lora(self, adapter: ModelAdapter, alpha: float = 1.0, adapter_id: str | None = None) -> None:
        if adapter.kind != "lora":
            raise TypeError("load_lora needs a LoRA adapter")
        self._begin(adapter)
        writes = {}
        for k, a in adapter.layers.items():
            w = self.model.layers[k].weight
            w += alpha * lora_delta(a)
            writes[k] = w.size
        self.restore_buffer = None
        self.active = ActiveAdapter(adapter_id or _default_id(adapter), adapter, alpha)
        self._count(writes)

    # ------------------------------------------------------------ unloading

    def _revert(self) -> dict[int, int]:
        """Put base weights back; leaves the active record in place."""
        if self.active is None:
            raise RuntimeStateError("no adapter is active")
        writes = {}
        if self.active.adapter.kind == "sparse":
            for k, a in self.active.adapter.layers.items():
                scatter_restore(self.model.layers[k].weight, a, self.restore_buffer[k])
                writes[k] = a.nnz
        else:
            for k, a in self.active.adapter.layers.items():
                w = self.model.layers[k].weight
                w -= self.active.alpha * lora_delta(a)
                writes[k] = w.size
        return writes

    def _release(self) -> None:
        self.active = None
        self.restore_buffer = None

    def unload(self) -> None:
        writes = self._revert()
        self._release()
        self._count(writes)

    def switch(self, adapter: ModelAdapter, alpha: float = 1.0, adapter_id: str | None = None) -> int:
        """Unload whatever is active, load ``adapter``; returns elapsed nanoseconds."""
        t0 = time.perf_counter_ns()
        undone: dict[int, int] = {}
        if self.active is not None:
            undone = self._revert()
            self._release()
        self.load(adapter, alpha, adapter_id)
        elapsed = time.perf_counter_ns() - t0
        for k, n in undone.items():
            self.last_layer_writes[k] = self.last_layer_writes.get(k, 0) + n
        self.last_writes += sum(undone.values())
        self.writes += sum(undone.values())
        return elapsed

    def _count(self, writes: dict[int, int]) -> None:
        self.last_layer_writes = dict(writes)
        self.last_writes = sum(writes.values())
        self.writes += self.last_writes


def _default_id(adapter: ModelAdapter) -> str:
    return str(adapter.meta.get("name") or adapter.meta.get("config_digest") or id(adapter))


# ---------------------------------------------------------------- timing


@contextmanager
def single_thread() -> Iterator[None]:
    """Cap BLAS/OpenMP pools at ``SHIRA_THREADS`` (default 1) for the duration."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(os.environ.get("SHIRA_THREADS", "1"))):
        yield


@dataclass
class Timing:
    mean_ns: float
    std_ns: float
    median_ns: float
    trials: int

    @classmethod
    def of(cls, samples: Sequence[int]) -> Timing:
        return cls(
            statistics.fmean(samples),
            statistics.stdev(samples) if len(samples) > 1 else 0.0,
            statistics.median(samples),
            len(samples),
        )


def interleaved(fns: Sequence[Callable[[], None]], trials: int, warmup: int = 2) -> list[Timing]:
    """Time each callable ``trials`` times, alternating a, b, a, b, ... after warm-up."""
    for _ in range(warmup):
        for fn in fns:
            fn()
    samples: list[list[int]] = [[] for _ in fns]
    for _ in range(trials):
        for i, fn in enumerate(fns):
            t0 = time.perf_counter_ns()
            fn()
            samples[i].append(time.perf_counter_ns() - t0)
    return [Timing.of(s) for s in samples]


BENCH_COLUMNS = ("dim", "density_or_rank", "method", "mean_ns", "std_ns", "trials", "speedup")


@dataclass
class BenchResult:
    rows: list[dict] = field(default_factory=list)
    stages: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def speedups(self, density: float) -> dict[int, float]:
        return {
            r["dim"]: r["speedup"]
            for r in self.rows
            if r["method"] == "shira_scatter" and r["density_or_rank"] == density
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def bench_switch(
    dims: Sequence[int] = (512, 1024, 2048, 4096),
    densities: Sequence[float] = (0.01, 0.02),
    lora_rank: int = 64,
    trials: int = 10,
    seed: int = 0,
    alpha: float = 1.0,
) -> BenchResult:
    """LoRA fuse (``W += alpha * A @ B``) against sparse indexed overwrite, per square dim.

    The overwrite is the runtime's load kernel, saving originals included.
    Speedup is the ratio of mean times. Runs pinned to one BLAS thread unless
    ``SHIRA_THREADS`` says otherwise.
    """
    if trials < 10:
        raise ValueError(f"trials must be >= 10, got {trials}")
    result = BenchResult(config={"dims": list(dims), "densities": list(densities), "lora_rank": lora_rank, "trials": trials, "seed": seed})
    with single_thread():
        for dim in dims:
            rng = SeededRng(seed).spawn(dim)
            w = rand_matrix(rng, dim, dim)
            a = rand_matrix(rng, dim, lora_rank, std=0.01)
            b = rand_matrix(rng, lora_rank, dim, std=0.01)
            sparse = []
            for d in densities:
                k = int(d * dim * dim)
                sparse.append((d, SparseAdapter(dim, dim, rng.choice(dim * dim, k), rng.gaussian(k) * 0.01)))

            def lora_fuse() -> None:
                w.__iadd__(alpha * (a @ b))

            fns: list[Callable[[], None]] = [lora_fuse]
            for _, adapter in sparse:

                def scatter(adapter=adapter) -> None:
                    scatter_overwrite(w, adapter, alpha)

                fns.append(scatter)
            timings = interleaved(fns, trials)
            lora_t = timings[0]
            result.rows.append(_row(dim, lora_rank, "lora_fuse", lora_t, 1.0))
            for (d, _), t in zip(sparse, timings[1:]):
                result.rows.append(_row(dim, d, "shira_scatter", t, lora_t.mean_ns / t.mean_ns))
    return result


def _row(dim: int, dr: float, method: str, t: Timing, speedup: float) -> dict:
    return {
        "dim": dim,
        "density_or_rank": dr,
        "method": method,
        "mean_ns": t.mean_ns,
        "std_ns": t.std_ns,
        "median_ns": t.median_ns,
        "trials": t.trials,
        "speedup": speedup,
    }


def bench_stages(model: Mlp, adapters: Sequence[ModelAdapter], trials: int = 20, alpha: float = 1.0) -> dict:
    """Per-stage timings of load (deserialise), fuse/overwrite, unfuse/restore, unload.

    Returns ``{adapter_label: {stage: Timing-dict}}``.
    """
    if not adapters:
        raise ValueError("need at least one adapter")
    if trials < 1:
        raise ValueError("trials must be positive")
    out = {}
    with single_thread():
        for i, adapter in enumerate(adapters):
            blob = adapter_to_bytes(adapter)
            rt = AdapterRuntime(model)
            samples: dict[str, list[int]] = {"load": [], "fuse": [], "unfuse": [], "unload": []}
            for t in range(trials + 2):
                t0 = time.perf_counter_ns()
                loaded = adapter_from_bytes(blob)
                t1 = time.perf_counter_ns()
                rt.load(loaded, alpha)
                t2 = time.perf_counter_ns()
                rt._revert()
                t3 = time.perf_counter_ns()
                rt._release()
                t4 = time.perf_counter_ns()
                if t >= 2:
                    samples["load"].append(t1 - t0)
                    samples["fuse"].append(t2 - t1)
                    samples["unfuse"].append(t3 - t2)
                    samples["unload"].append(t4 - t3)
            label = f"{i}:{adapter.kind}"
            out[label] = {stage: asdict(Timing.of(s)) for stage, s in samples.items()}
    return out
