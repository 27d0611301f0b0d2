import csv
import json

import pytest

from shira.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, load_config, main, matched_lora_rank
from shira.linalg import SeededRng
from shira.masks import MaskBudget
from shira.nn import init_mlp
from shira.persist import read_adapter, read_checkpoint

SMALL = {
    "task": {"n_classes": 8, "input_dim": 16, "n_train": 512, "n_test": 256},
    "model": {"hidden": [48, 48]},
    "pretrain": {"steps": 300},
    "adapter": {"steps": 150},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({**SMALL, "out_dir": str(root / "runs")}))
    assert main(["pretrain", "--config", str(cfg)]) == 0
    return root, cfg


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_pretrain_reproducible_and_beats_chance(workdir, tmp_path):
    root, cfg = workdir
    report = json.loads((root / "runs" / "pretrain_report.json").read_text())
    assert report["report"]["metrics"]["test_acc"] > 3 / 8
    assert report["effective_config"]["task"]["n_classes"] == 8
    assert main(["pretrain", "--config", str(cfg), "--out-dir", str(tmp_path / "new" / "dir")]) == 0
    first = (root / "runs" / "base.shmc").read_bytes()
    assert (tmp_path / "new" / "dir" / "base.shmc").read_bytes() == first


def test_train_wm_fraction_is_floor_exact(workdir, capsys):
    root, cfg = workdir
    code, out = run(capsys, "train-adapter", "--config", cfg, "--strategy", "wm", "--fraction", 0.01)
    assert code == 0 and "%Params" in out.out and "%C" in out.out
    report = json.loads((root / "runs" / "wm-style1.report.json").read_text())
    model = read_checkpoint(root / "runs" / "base.shmc")
    expect = sum(MaskBudget(0.01).count(*l.weight.shape) for l in model.layers)
    assert report["report"]["params"]["trainable"] == expect
    assert report["effective_config"]["adapter"]["fraction"] == 0.01
    code, out = run(capsys, "inspect", root / "runs" / "wm-style1.shra")
    assert code == 0 and "density 0.00" in out.out and "rank(delta)" in out.out


def test_lora_changes_nearly_all_adapted_entries(workdir, capsys):
    root, cfg = workdir
    code, out = run(capsys, "train-adapter", "--config", cfg, "--strategy", "lora", "--rank", 4)
    assert code == 0
    report = json.loads((root / "runs" / "lora-style1.report.json").read_text())["report"]
    model = read_checkpoint(root / "runs" / "base.shmc")
    adapted = sum(l.weight.size for l in model.layers)
    assert report["params"]["changed"] / adapted > 0.99
    assert read_adapter(root / "runs" / "lora-style1.shra").kind == "lora"


@pytest.mark.parametrize("strategy", ["struct", "rand", "grad", "snip", "full"])
def test_other_strategies_run(workdir, capsys, strategy, tmp_path):
    root, cfg = workdir
    out_file = tmp_path / f"{strategy}.out"
    extra = ["--fraction", "0.05", "--set", "adapter.adapted_layers=[0,1]"] if strategy == "struct" else []
    code, _ = run(capsys, "train-adapter", "--config", cfg, "--strategy", strategy, "--steps", 20, "--out", out_file, *extra)
    assert code == 0 and out_file.exists()


def test_fuse_and_eval_print_drop(workdir, capsys):
    root, cfg = workdir
    runs = root / "runs"
    for seed in (1, 2):
        assert main(["train-adapter", "--config", str(cfg), "--strategy", "rand", "--fraction", "0.02", "--style-seed", str(seed)]) == 0
    code, out = run(capsys, "fuse", "--config", cfg, runs / "rand-style1.shra", runs / "rand-style2.shra")
    assert code == 0 and (runs / "fused.shra").exists() and (runs / "fused.fusion.json").exists()
    code, out = run(
        capsys,
        "eval", "--config", cfg, "--adapter", runs / "fused.shra", "--task", 1, "--task", 2,
        "--single", runs / "rand-style1.shra", "--single", runs / "rand-style2.shra", "--alpha", 0, 0.5, 1, 2,
    )
    assert code == 0 and "%Drop" in out.out
    result = json.loads((runs / "eval.json").read_text())
    assert result["alpha0_equals_base"] is True
    assert result["alpha_sweep"]["0.0"] == result["base"]
    assert set(result["multi"]["fused"]) == {"1", "2"}


def test_bench_outputs(workdir, capsys, tmp_path):
    _, cfg = workdir
    code, out = run(
        capsys, "bench", "--config", cfg, "--out-dir", tmp_path, "--dims", 64, 128,
        "--set", "bench.stage_dim=64", "--set", "bench.lora_rank=8",
    )
    assert code == 0 and "speedup" in out.out
    rows = list(csv.DictReader((tmp_path / "bench.csv").open()))
    assert len(rows) == 2 * 3
    assert json.loads((tmp_path / "bench.json").read_text())["stages"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the divergence case overflows on purpose
def test_error_exit_codes(workdir, tmp_path, capsys):
    root, cfg = workdir
    assert run(capsys, "bench", "--config", cfg, "--trials", 3)[0] == EXIT_CONFIG
    assert run(capsys, "train-adapter", "--config", cfg, "--strategy", "grad", "--calib-batches", 0)[0] == EXIT_CONFIG
    assert run(capsys, "pretrain", "--set", "bogus=1")[0] == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text('{"adapter": {"strategy": "magic"}}')
    assert run(capsys, "train-adapter", "--config", bad, "--checkpoint", root / "runs" / "base.shmc")[0] == EXIT_CONFIG
    bad.write_text('{"nope": 1}')
    assert run(capsys, "pretrain", "--config", bad)[0] == EXIT_CONFIG
    bad.write_text("{not json")
    assert run(capsys, "pretrain", "--config", bad)[0] == EXIT_CONFIG
    assert run(capsys, "train-adapter", "--config", cfg, "--checkpoint", tmp_path / "missing.shmc")[0] == EXIT_IO
    garbage = tmp_path / "garbage.shra"
    garbage.write_bytes(b"SHRA" + bytes(3))
    assert run(capsys, "inspect", garbage)[0] == EXIT_IO
    code, out = run(capsys, "train-adapter", "--config", cfg, "--strategy", "full", "--set", "adapter.full_lr=1e300", "--out", tmp_path / "x.shmc")
    assert code == EXIT_NUMERIC and "numeric" in out.err
    with pytest.raises(SystemExit) as info:
        main(["train-adapter", "--strategy", "magic"])
    assert info.value.code == 2


def test_config_layering(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"adapter": {"fraction": 0.05}}))
    cfg = load_config(str(path), [("adapter.steps", 7), ("adapter.lr", None)])
    assert cfg["adapter"]["fraction"] == 0.05 and cfg["adapter"]["steps"] == 7
    assert cfg["adapter"]["lr"] == 1e-2


def test_matched_lora_rank():
    model = init_mlp(SeededRng(0), [32, 128, 128, 128, 16])
    assert matched_lora_rank(model, range(4), 0.02) == 1
    assert matched_lora_rank(model, [1], 0.5) == 32
