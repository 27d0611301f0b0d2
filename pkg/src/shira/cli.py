"""``shira`` command line: pretrain, train-adapter, bench, fuse, eval, inspect."""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .adapters import IntegrityError, ModelAdapter, SparseAdapter, apply_model_adapter, delta_dense
from .fusion import apply_dense_deltas, eval_multi, fuse_lora_deltas, fuse_multi, fusion_report
from .linalg import SeededRng, numerical_rank, rand_matrix
from .masks import STRATEGIES
from .nn import Mlp, accuracy, init_mlp
from .persist import FormatError, read_adapter, read_checkpoint, write_adapter, write_checkpoint
from .runtime import bench_stages, bench_switch
from .tasks import TaskData, TaskSpec, make_base_task, make_style_task
from .train import TrainConfig, TrainingDiverged, build_mask, train_frozen, train_full, train_lora, train_shira

log = logging.getLogger("shira")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
ADAPTER_STRATEGIES = STRATEGIES + ("lora", "full")


class ConfigError(ValueError):
    pass


def _train_defaults(**kw) -> dict:
    return dataclasses.asdict(TrainConfig(**kw))


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out_dir": "runs",
    "checkpoint": None,
    "task": dataclasses.asdict(TaskSpec()),
    "model": {"hidden": [128, 128, 128], "activation": "relu"},
    "pretrain": _train_defaults(steps=1000, lr=3e-3),
    "adapter": {
        **_train_defaults(steps=500, lr=1e-2),
        "strategy": "wm",
        "style_seed": 1,
        "lora_lr": 3e-3,
        "full_lr": 3e-3,
    },
    "bench": {
        "dims": [512, 1024, 2048, 4096],
        "densities": [0.01, 0.02],
        "lora_rank": 64,
        "trials": 10,
        "stage_dim": 1024,
        "stage_layers": 2,
        "stage_trials": 20,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _set_dotted(cfg: dict, dotted: str, value: Any) -> None:
    node = cfg
    keys = dotted.split(".")
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def load_config(path: str | None, overrides: Sequence[tuple[str, Any]] = ()) -> dict:
    """Defaults, then the JSON config file, then flag overrides; unknown keys rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, raw)
    for dotted, value in overrides:
        if value is not None:
            _set_dotted(cfg, dotted, value)
    return cfg


def _train_config(section: dict, **changes) -> TrainConfig:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    kw = {k: v for k, v in section.items() if k in fields}
    kw.update(changes)
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _task_spec(cfg: dict) -> TaskSpec:
    try:
        return TaskSpec(**cfg["task"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_path(cfg: dict) -> Path:
    return Path(cfg["checkpoint"]) if cfg["checkpoint"] else Path(cfg["out_dir"]) / "base.shmc"


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(type(obj).__name__)


# ---------------------------------------------------------------- commands


def cmd_pretrain(cfg: dict) -> Path:
    spec = _task_spec(cfg)
    data = make_base_task(spec)
    dims = [spec.input_dim, *cfg["model"]["hidden"], spec.n_classes]
    model = init_mlp(SeededRng(cfg["seed"]), dims, cfg["model"]["activation"])
    trained, report = train_full(model, data, _train_config(cfg["pretrain"], seed=cfg["seed"]))
    out = _out_dir(cfg)
    ckpt = _checkpoint_path(cfg)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(ckpt, trained)
    metrics = report.metrics
    _write_json(out / "pretrain_report.json", {"report": dataclasses.asdict(report), "effective_config": cfg})
    chance = 1.0 / spec.n_classes
    print(f"pretrained {dims} -> {ckpt}")
    print(f"base task test accuracy {metrics['test_acc']:.4f} (chance {chance:.4f})")
    return ckpt


def matched_lora_rank(model: Mlp, layers: Sequence[int], density: float) -> int:
    """LoRA rank whose trainable parameter count best matches a sparse budget."""
    sparse = sum(density * model.layers[k].weight.size for k in layers)
    per_rank = sum(sum(model.layers[k].weight.shape) for k in layers)
    return max(1, round(sparse / per_rank))


def _param_table(model: Mlp, rows: list[tuple[str, int, int, int]]) -> str:
    total = model.num_params()
    lines = [f"{'method':<14}{'%Params':>10}{'%C':>10}{'%C(adapted)':>14}"]
    for name, trainable, changed, adapted in rows:
        adapted_pct = 100 * changed / adapted if adapted else 0.0
        lines.append(f"{name:<14}{100 * trainable / total:>10.3f}{100 * changed / total:>10.3f}{adapted_pct:>14.3f}")
    return "\n".join(lines)


def cmd_train_adapter(cfg: dict, out_path: str | None = None) -> Path:
    section = cfg["adapter"]
    strategy = section["strategy"]
    if strategy not in ADAPTER_STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {ADAPTER_STRATEGIES}")
    ckpt = _checkpoint_path(cfg)
    model = read_checkpoint(ckpt)
    spec = _task_spec(cfg)
    task = make_style_task(spec, section["style_seed"])
    out = _out_dir(cfg)
    adapted_entries = 0
    if strategy == "full":
        tcfg = _train_config(section, lr=section["full_lr"])
        trained, report = train_full(model, task, tcfg)
        target = Path(out_path) if out_path else out / f"full-style{section['style_seed']}.shmc"
        write_checkpoint(target, trained)
        adapted_entries = model.num_params()
    elif strategy == "lora":
        tcfg = _train_config(section, lr=section["lora_lr"])
        _, adapter, report = train_lora(model, task, tcfg)
        adapter.meta.update({"name": f"lora-style{section['style_seed']}", "style_seed": section["style_seed"]})
        target = Path(out_path) if out_path else out / f"lora-style{section['style_seed']}.shra"
        write_adapter(target, adapter)
        adapted_entries = sum(model.layers[k].weight.size for k in adapter.layers)
    else:
        tcfg = _train_config(section, mask_strategy=strategy)
        if strategy in ("grad", "snip") and tcfg.calib_batches < 1:
            raise ConfigError(f"{strategy} strategy needs calib_batches >= 1")
        mask = build_mask(model, task, tcfg)
        _, adapter, report = train_shira(model, mask, task, tcfg)
        adapter.meta.update({"name": f"{strategy}-style{section['style_seed']}", "style_seed": section["style_seed"]})
        target = Path(out_path) if out_path else out / f"{strategy}-style{section['style_seed']}.shra"
        write_adapter(target, adapter)
        adapted_entries = sum(model.layers[k].weight.size for k in adapter.layers)
    report_path = target.with_suffix(".report.json")
    _write_json(report_path, {"report": dataclasses.asdict(report), "effective_config": cfg})
    p = report.params
    print(_param_table(model, [(report.method, p["trainable"], p["changed"], adapted_entries)]))
    print(f"test accuracy {report.metrics['test_acc']:.4f}; wrote {target}")
    return target


def cmd_bench(cfg: dict) -> dict:
    b = cfg["bench"]
    if b["trials"] < 10:
        raise ConfigError(f"bench trials must be >= 10, got {b['trials']}")
    result = bench_switch(b["dims"], b["densities"], b["lora_rank"], b["trials"], seed=cfg["seed"])
    model, adapters = _stage_fixture(b["stage_dim"], b["stage_layers"], b["densities"][0], b["lora_rank"], cfg["seed"])
    result.stages = bench_stages(model, adapters, b["stage_trials"])
    result.config["effective_config"] = cfg
    out = _out_dir(cfg)
    (out / "bench.csv").write_text(result.to_csv())
    (out / "bench.json").write_text(result.to_json())
    print(f"{'dim':>6}{'density':>9}{'lora ms':>10}{'shira ms':>10}{'speedup':>9}")
    lora = {r["dim"]: r for r in result.rows if r["method"] == "lora_fuse"}
    for r in result.rows:
        if r["method"] == "shira_scatter":
            print(
                f"{r['dim']:>6}{r['density_or_rank']:>9}{lora[r['dim']]['mean_ns'] / 1e6:>10.3f}"
                f"{r['mean_ns'] / 1e6:>10.3f}{r['speedup']:>9.1f}"
            )
    for label, stages in result.stages.items():
        cells = "  ".join(f"{s}={t['median_ns'] / 1e3:.1f}us" for s, t in stages.items())
        print(f"stages {label}: {cells}")
    print(f"wrote {out / 'bench.csv'} and {out / 'bench.json'}")
    return {"csv": str(out / "bench.csv"), "json": str(out / "bench.json")}


def _stage_fixture(dim: int, n_layers: int, density: float, rank: int, seed: int):
    from .adapters import LoraAdapter
    from .nn import LinearLayer

    rng = SeededRng(seed).spawn(999)
    model = Mlp([LinearLayer(rand_matrix(rng, dim, dim, "kaiming"), np.zeros(dim)) for _ in range(n_layers)], dim)
    k = int(density * dim * dim)
    sparse = ModelAdapter(
        {i: SparseAdapter(dim, dim, rng.choice(dim * dim, k), rng.gaussian(k) * 0.01) for i in range(n_layers)}, "sparse"
    )
    lora = ModelAdapter(
        {i: LoraAdapter(rand_matrix(rng, dim, rank, std=0.01), rand_matrix(rng, rank, dim, std=0.01), 1.0) for i in range(n_layers)},
        "lora",
    )
    return model, [sparse, lora]


def cmd_fuse(cfg: dict, paths: Sequence[str], weights: Sequence[float] | None, out_path: str | None, strict: bool) -> Path:
    if len(paths) < 2:
        raise ConfigError("fuse needs at least two adapter files")
    adapters = [read_adapter(p) for p in paths]
    fused = fuse_multi(adapters, weights, strict=strict)
    fused.meta["sources"] = [str(p) for p in paths]
    out = _out_dir(cfg)
    target = Path(out_path) if out_path else out / "fused.shra"
    write_adapter(target, fused)
    report = fusion_report(adapters)
    report["effective_config"] = cfg
    _write_json(target.with_suffix(".fusion.json"), report)
    for pair in report["pairs"]:
        for k, info in pair["layers"].items():
            print(
                f"pair {pair['a']}-{pair['b']} layer {k}: overlap {info['overlap']}/{info['union']} "
                f"S1^T S2 nnz fraction {info['product_nnz_fraction']:.4f} frobenius {info['product_frobenius']:.4g}"
            )
    print(f"fused {len(adapters)} adapters ({fused.nnz()} nonzeros) -> {target}")
    return target


def _task_for(spec: TaskSpec, name: str) -> TaskData:
    if name == "base":
        return make_base_task(spec)
    return make_style_task(spec, int(name))


def _fused_model(model: Mlp, adapters: list[ModelAdapter], alpha: float) -> Mlp:
    if len(adapters) == 1:
        return apply_model_adapter(model, adapters[0], alpha)
    kinds = {a.kind for a in adapters}
    if kinds == {"sparse"}:
        return apply_model_adapter(model, fuse_multi(adapters), alpha)
    if kinds == {"lora"}:
        return apply_dense_deltas(model, fuse_lora_deltas(adapters), alpha)
    raise ConfigError("cannot fuse sparse and LoRA adapters together")


def cmd_eval(
    cfg: dict,
    adapter_paths: Sequence[str],
    tasks: Sequence[str],
    alphas: Sequence[float],
    singles: Sequence[str],
) -> dict:
    if not tasks:
        raise ConfigError("eval needs at least one --task")
    model = read_checkpoint(_checkpoint_path(cfg))
    spec = _task_spec(cfg)
    data = {name: _task_for(spec, name).test for name in tasks}
    adapters = [read_adapter(p) for p in adapter_paths]
    for a in adapters:
        a.check(model)
    result: dict = {"tasks": list(tasks), "alpha_sweep": {}, "effective_config": cfg}
    base_acc = {name: accuracy(model, d.x, d.y) for name, d in data.items()}
    result["base"] = base_acc
    for alpha in alphas:
        fm = _fused_model(model, adapters, alpha) if adapters else model
        accs = {name: accuracy(fm, d.x, d.y) for name, d in data.items()}
        if alpha == 0 and adapters:
            same = all(np.array_equal(fm.layers[k].weight, model.layers[k].weight) for k in range(len(model.layers)))
            result["alpha0_equals_base"] = bool(same)
        result["alpha_sweep"][str(alpha)] = accs
        print(f"alpha {alpha:g}: " + "  ".join(f"{n}={a:.4f}" for n, a in accs.items()))
    if singles:
        if len(singles) != len(tasks):
            raise ConfigError(f"{len(singles)} single-adapter files for {len(tasks)} tasks")
        single_acc = {}
        for name, path in zip(tasks, singles):
            single_acc[name] = accuracy(apply_model_adapter(model, read_adapter(path)), data[name].x, data[name].y)
        fm = _fused_model(model, adapters, 1.0)
        multi = eval_multi(model, fm, data, single_acc)
        result["multi"] = multi.to_dict()
        print(f"%Drop {multi.drop_points:.2f} points ({multi.drop_percent:.2f}% relative)")
    out = _out_dir(cfg)
    _write_json(out / "eval.json", result)
    return result


def inspect_file(path: str) -> str:
    data = Path(path).read_bytes()
    if data[:4] == b"SHMC":
        from .persist import checkpoint_from_bytes

        model = checkpoint_from_bytes(data)
        lines = [f"{path}: checkpoint, input_dim {model.input_dim}, {len(model.layers)} layers, {model.num_params()} params"]
        for k, l in enumerate(model.layers):
            lines.append(f"  layer {k}: {l.weight.shape[0]}x{l.weight.shape[1]} {l.activation}")
        return "\n".join(lines)
    from .persist import adapter_from_bytes

    adapter = adapter_from_bytes(data)
    lines = [f"{path}: {adapter.kind} adapter, {len(adapter.layers)} layers, {len(data)} bytes"]
    for k, a in sorted(adapter.layers.items()):
        rank = numerical_rank(delta_dense(a)) if np.any(delta_dense(a)) else 0
        if isinstance(a, SparseAdapter):
            lines.append(
                f"  layer {k}: {a.rows}x{a.cols} nnz {a.nnz} density {a.density:.5f} "
                f"rank(delta) {rank} alpha {a.alpha_default:g} strategy {a.meta.get('strategy', '?')}"
            )
        else:
            lines.append(f"  layer {k}: {a.shape[0]}x{a.shape[1]} lora rank {a.rank} rank(delta) {rank} alpha {a.alpha_lora:g}")
    if adapter.meta:
        lines.append(f"  meta: {json.dumps(adapter.meta, sort_keys=True, default=str)}")
    return "\n".join(lines)


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shira", description="Sparse high-rank adapters on toy MLPs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out-dir")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--checkpoint")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, JSON value")

    sp = sub.add_parser("pretrain", help="train the base model on the base task")
    common(sp)
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("train-adapter", help="finetune an adapter on a style task")
    common(sp)
    sp.add_argument("--strategy", choices=ADAPTER_STRATEGIES)
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--rank", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--style-seed", type=int)
    sp.add_argument("--calib-batches", type=int)
    sp.add_argument("--out")

    sp = sub.add_parser("bench", help="scatter-vs-fuse switching benchmark")
    common(sp)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--dims", type=int, nargs="+")

    sp = sub.add_parser("fuse", help="naively add sparse adapters")
    common(sp)
    sp.add_argument("adapters", nargs="+")
    sp.add_argument("--weights", type=float, nargs="+")
    sp.add_argument("--strict", action="store_true", help="fail on coordinate collisions")
    sp.add_argument("--out")

    sp = sub.add_parser("eval", help="evaluate adapters on tasks")
    common(sp)
    sp.add_argument("--adapter", action="append", default=[], help="adapter file; several are fused")
    sp.add_argument("--task", action="append", default=[], help="'base' or a style seed")
    sp.add_argument("--alpha", type=float, nargs="+", default=[1.0])
    sp.add_argument("--single", action="append", default=[], help="single-adapter file per --task, for %%Drop")

    sp = sub.add_parser("inspect", help="summarise an adapter or checkpoint file")
    sp.add_argument("path")
    return p


def _overrides(args) -> list[tuple[str, Any]]:
    pairs = [
        ("out_dir", getattr(args, "out_dir", None)),
        ("seed", getattr(args, "seed", None)),
        ("checkpoint", getattr(args, "checkpoint", None)),
    ]
    if args.command == "pretrain":
        pairs.append(("pretrain.steps", args.steps))
    elif args.command == "train-adapter":
        pairs += [
            ("adapter.strategy", args.strategy),
            ("adapter.fraction", args.fraction),
            ("adapter.rank", args.rank),
            ("adapter.steps", args.steps),
            ("adapter.lr", args.lr),
            ("adapter.style_seed", args.style_seed),
            ("adapter.calib_batches", args.calib_batches),
        ]
    elif args.command == "bench":
        pairs += [("bench.trials", args.trials), ("bench.dims", args.dims)]
    for item in getattr(args, "set", []):
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        pairs.append((key, value))
    return pairs


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "inspect":
            print(inspect_file(args.path))
            return EXIT_OK
        cfg = load_config(args.config, _overrides(args))
        if args.command == "pretrain":
            cmd_pretrain(cfg)
        elif args.command == "train-adapter":
            cmd_train_adapter(cfg, args.out)
        elif args.command == "bench":
            cmd_bench(cfg)
        elif args.command == "fuse":
            cmd_fuse(cfg, args.adapters, args.weights, args.out, args.strict)
        elif args.command == "eval":
            cmd_eval(cfg, args.adapter, args.task, args.alpha, args.single)
    except (ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, IntegrityError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
