"""Random adapters/checkpoints and structurally detectable file corruptions."""

import struct

import numpy as np

from shira.adapters import LoraAdapter, ModelAdapter, SparseAdapter
from shira.linalg import SeededRng
from shira.nn import ACTIVATIONS, LinearLayer, Mlp
from shira.persist import (
    BadMagicError,
    CorruptFieldError,
    LengthMismatchError,
    SortednessError,
    BoundsError,
    TruncatedError,
    UnsupportedVersionError,
    STRATEGY_CODES,
)


def random_adapter(rng: SeededRng, kind: str | None = None) -> ModelAdapter:
    kind = kind or ("sparse" if rng.integers(2, 1)[0] == 0 else "lora")
    ids = np.sort(rng.choice(12, int(rng.integers(4, 1)[0]) + 1))
    layers = {}
    for k in ids.tolist():
        n, m = (int(v) + 1 for v in rng.integers(40, 2))
        if kind == "sparse":
            nnz = int(rng.integers(min(n * m, 30) + 1, 1)[0])
            strategy = list(STRATEGY_CODES)[int(rng.integers(len(STRATEGY_CODES), 1)[0])]
            values = rng.gaussian(nnz) * 10.0 ** (int(rng.integers(20, 1)[0]) - 10)
            layers[k] = SparseAdapter(n, m, rng.choice(n * m, nnz), values, float(rng.gaussian(1)[0]), {"strategy": strategy})
        else:
            r = int(rng.integers(min(n, m), 1)[0]) + 1
            layers[k] = LoraAdapter(rng.gaussian(n * r).reshape(n, r), rng.gaussian(r * m).reshape(r, m), float(rng.uniform(1)[0] * 4))
    return ModelAdapter(layers, kind, {"name": f"rand-{int(rng.next_u64(1)[0]) % 1000}", "tags": ["x", "é"]})


def random_checkpoint(rng: SeededRng) -> Mlp:
    dims = [int(v) + 1 for v in rng.integers(20, int(rng.integers(4, 1)[0]) + 2)]
    layers = []
    for k in range(len(dims) - 1):
        act = ACTIVATIONS[int(rng.integers(len(ACTIVATIONS), 1)[0])]
        w = rng.gaussian(dims[k + 1] * dims[k]).reshape(dims[k + 1], dims[k])
        layers.append(LinearLayer(w, rng.gaussian(dims[k + 1]), act))
    return Mlp(layers, dims[0])


def _layout(adapter: ModelAdapter) -> list[dict]:
    """Byte offsets of each layer record in the serialised adapter."""
    pos = 13
    out = []
    for k in sorted(adapter.layers):
        a = adapter.layers[k]
        rec = {"id_at": pos, "payload_at": pos + 12}
        if isinstance(a, SparseAdapter):
            rec["nnz"] = a.nnz
            rec["coords_at"] = pos + 12 + 17
            pos += 12 + 17 + 16 * a.nnz
        else:
            rec["rank_at"] = pos + 12
            pos += 12 + 12 + 8 * (a.a.size + a.b.size)
        out.append(rec)
    return out + [{"meta_at": pos}]


def corrupt_adapter(data: bytes, adapter: ModelAdapter, rng: SeededRng) -> tuple[bytes, type, str]:
    """One random corruption whose rejection class is known in advance."""
    layout = _layout(adapter)
    layers, meta_at = layout[:-1], layout[-1]["meta_at"]
    buf = bytearray(data)
    options = ["truncate", "magic", "version", "kind", "trailing", "meta", "meta_len"]
    sparse = adapter.kind == "sparse"
    with_coords = [r for r in layers if r.get("nnz", 0) >= 1]
    with_pairs = [r for r in layers if r.get("nnz", 0) >= 2]
    if sparse:
        options += ["strategy", "nnz_huge"]
        if with_coords:
            options += ["bounds"]
        if with_pairs:
            options += ["swap", "duplicate"]
    else:
        options += ["rank"]
    if len(layers) >= 2:
        options += ["layer_order"]
    choice = options[int(rng.integers(len(options), 1)[0])]
    pick = lambda seq: seq[int(rng.integers(len(seq), 1)[0])]  # noqa: E731
    if choice == "truncate":
        return bytes(buf[: int(rng.integers(len(buf), 1)[0])]), TruncatedError, choice
    if choice == "magic":
        buf[int(rng.integers(4, 1)[0])] ^= 0x20
        return bytes(buf), BadMagicError, choice
    if choice == "version":
        struct.pack_into("<I", buf, 4, 2 + int(rng.integers(1000, 1)[0]))
        return bytes(buf), UnsupportedVersionError, choice
    if choice == "kind":
        buf[8] = 2 + int(rng.integers(250, 1)[0])
        return bytes(buf), CorruptFieldError, choice
    if choice == "trailing":
        return bytes(buf) + bytes(int(v) for v in rng.integers(256, 1 + int(rng.integers(8, 1)[0]))), LengthMismatchError, choice
    if choice == "meta":
        buf[meta_at + 4] = 0xFF  # invalid UTF-8 start byte
        return bytes(buf), CorruptFieldError, choice
    if choice == "meta_len":
        (n,) = struct.unpack_from("<I", buf, meta_at)
        struct.pack_into("<I", buf, meta_at, n + 1 + int(rng.integers(100, 1)[0]))
        return bytes(buf), TruncatedError, choice
    if choice == "strategy":
        buf[pick(layers)["payload_at"] + 16] = 6 + int(rng.integers(249, 1)[0])
        return bytes(buf), CorruptFieldError, choice
    if choice == "nnz_huge":
        rec = pick(layers)
        rows, cols = struct.unpack_from("<II", buf, rec["id_at"] + 4)
        struct.pack_into("<Q", buf, rec["payload_at"], rows * cols + 1)
        return bytes(buf), LengthMismatchError, choice
    if choice == "bounds":
        rec = pick(with_coords)
        i = int(rng.integers(rec["nnz"], 1)[0])
        # high byte of the row or the column: pushes it past any shape below 2**24
        buf[rec["coords_at"] + 8 * i + 4 * int(rng.integers(2, 1)[0]) + 3] ^= 0x80
        return bytes(buf), BoundsError, choice
    if choice in ("swap", "duplicate"):
        rec = pick(with_pairs)
        i = int(rng.integers(rec["nnz"] - 1, 1)[0])
        at = rec["coords_at"] + 8 * i
        first, second = bytes(buf[at : at + 8]), bytes(buf[at + 8 : at + 16])
        if choice == "swap":
            buf[at : at + 8], buf[at + 8 : at + 16] = second, first
        else:
            buf[at + 8 : at + 16] = first
        return bytes(buf), SortednessError, choice
    if choice == "rank":
        struct.pack_into("<I", buf, pick(layers)["rank_at"], 0)
        return bytes(buf), CorruptFieldError, choice
    if choice == "layer_order":
        i = int(rng.integers(len(layers) - 1, 1)[0])
        prev = struct.unpack_from("<I", buf, layers[i]["id_at"])[0]
        struct.pack_into("<I", buf, layers[i + 1]["id_at"], prev)
        return bytes(buf), SortednessError, choice
    raise AssertionError(choice)


def corrupt_checkpoint(data: bytes, model: Mlp, rng: SeededRng) -> tuple[bytes, type, str]:
    buf = bytearray(data)
    choice = ["truncate", "magic", "version", "activation", "trailing", "zero_dim"][int(rng.integers(6, 1)[0])]
    if choice == "truncate":
        return bytes(buf[: int(rng.integers(len(buf), 1)[0])]), TruncatedError, choice
    if choice == "magic":
        buf[0] ^= 0x01
        return bytes(buf), BadMagicError, choice
    if choice == "version":
        struct.pack_into("<I", buf, 4, 9)
        return bytes(buf), UnsupportedVersionError, choice
    if choice == "activation":
        k = int(rng.integers(len(model.layers), 1)[0])
        buf[16 + 5 * k + 4] = 3 + int(rng.integers(200, 1)[0])
        return bytes(buf), CorruptFieldError, choice
    if choice == "trailing":
        return bytes(buf) + b"\x00" * 8, LengthMismatchError, choice
    k = int(rng.integers(len(model.layers), 1)[0])
    struct.pack_into("<I", buf, 16 + 5 * k, 0)
    return bytes(buf), CorruptFieldError, choice


def same_adapter(a: ModelAdapter, b: ModelAdapter) -> bool:
    if a.kind != b.kind or sorted(a.layers) != sorted(b.layers) or a.meta != b.meta:
        return False
    for k in a.layers:
        x, y = a.layers[k], b.layers[k]
        if isinstance(x, SparseAdapter):
            ok = (
                x.shape == y.shape
                and np.array_equal(x.index, y.index)
                and np.array_equal(x.values.view(np.uint64), y.values.view(np.uint64))
                and np.float64(x.alpha_default).view(np.uint64) == np.float64(y.alpha_default).view(np.uint64)
            )
        else:
            ok = (
                np.array_equal(x.a.view(np.uint64), y.a.view(np.uint64))
                and np.array_equal(x.b.view(np.uint64), y.b.view(np.uint64))
                and x.alpha_lora == y.alpha_lora
            )
        if not ok or x.meta != y.meta:
            return False
    return True


def same_model(a: Mlp, b: Mlp) -> bool:
    return a.input_dim == b.input_dim and len(a.layers) == len(b.layers) and all(
        x.activation == y.activation
        and np.array_equal(x.weight.view(np.uint64), y.weight.view(np.uint64))
        and np.array_equal(x.bias.view(np.uint64), y.bias.view(np.uint64))
        for x, y in zip(a.layers, b.layers)
    )
