import json

import pytest

from mcres.cli import main
from mcres.config import ConfigError, RunConfig
from mcres.splitter import VirtualSplit

TINY_SYN = {"height": 8, "width": 8, "n_shapes": 10, "n_colors": 10, "n_train": 600, "n_test": 150}
TINY_META = {"epochs": 2, "iterations_per_epoch": 3, "embed_dim": 4, "hidden": 8}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps({"synthetic": TINY_SYN, "meta": TINY_META}))
    assert main(["gen", "--config", str(cfg), "--seed", "1", "--out", str(root / "data")]) == 0
    return root, cfg


def test_gen_is_reproducible_and_refuses_overwrite(workspace, tmp_path):
    root, cfg = workspace
    assert main(["gen", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "again")]) == 0
    for name in ("train.jsonl", "test.jsonl", "holdout.json", "synthetic.json"):
        assert (tmp_path / "again" / name).read_bytes() == (root / "data" / name).read_bytes()
    assert main(["gen", "--config", str(cfg), "--seed", "1", "--out", str(root / "data")]) == 2


def test_gen_respects_ban(workspace):
    root, _ = workspace
    banned = {tuple(p) for p in json.loads((root / "data" / "holdout.json").read_text())["banned"]["WW"]}
    text = (root / "data" / "train.jsonl").read_text()
    for color, shape in banned:
        assert f"(ATTR {color}) (NOUN {shape})" not in text


def test_split(workspace, tmp_path, capsys):
    root, _ = workspace
    out = tmp_path / "split.json"
    assert main(["split", "--dataset", str(root / "data"), "--vtr-fraction", "0.6", "--seed", "3",
                 "--out", str(out)]) == 0
    split = VirtualSplit.from_json(out.read_text())
    assert len(split.vtr_ids) == 360
    assert main(["split", "--dataset", str(root / "data"), "--vtr-fraction", "1.0", "--out",
                 str(tmp_path / "bad.json")]) == 1
    assert main(["split", "--dataset", str(root / "data"), "--out", str(out)]) == 2
    assert "error" in capsys.readouterr().err


def test_train_and_report(workspace, tmp_path, capsys):
    root, cfg = workspace
    runs = {}
    for mode in ("baseline", "mcres"):
        runs[mode] = tmp_path / mode
        assert main(["train", "--config", str(cfg), "--dataset", str(root / "data"), "--mode", mode,
                     "--seed", "2", "--out", str(runs[mode])]) == 0
    run = runs["mcres"]
    assert {p.name for p in run.iterdir()} == {"config.json", "splits", "steps.jsonl", "checkpoints", "eval.json"}
    assert len(list((run / "splits").iterdir())) == 2
    assert (run / "checkpoints" / "final.ckpt").is_file()
    snap = json.loads((run / "config.json").read_text())
    assert snap["config_hash"] == RunConfig.from_dict({k: v for k, v in snap.items() if k != "config_hash"}).hash()

    again = tmp_path / "again"
    assert main(["train", "--config", str(cfg), "--dataset", str(root / "data"), "--mode", "mcres",
                 "--seed", "2", "--out", str(again)]) == 0
    assert (again / "eval.json").read_bytes() == (run / "eval.json").read_bytes()
    assert main(["train", "--config", str(cfg), "--dataset", str(root / "data"), "--out", str(run)]) == 2

    capsys.readouterr()
    assert main(["report", str(runs["baseline"]), str(run)]) == 0
    table = capsys.readouterr().out
    lines = table.splitlines()
    assert lines[0].split()[:3] == ["run", "mode", "oIoU"]
    base = json.loads((runs["baseline"] / "eval.json").read_text())
    mine = json.loads((run / "eval.json").read_text())
    assert f"{100 * base['overall']['oIoU']:6.2f}".strip() in lines[2]
    delta = 100 * (mine["overall"]["oIoU"] - base["overall"]["oIoU"])
    assert f"({'+' if delta >= 0 else '-'}{abs(delta):.2f})" in lines[3]
    assert "(" not in lines[2]


def test_report_single_and_incompatible(workspace, tmp_path, capsys):
    root, cfg = workspace
    other_cfg = tmp_path / "other.json"
    other_cfg.write_text(json.dumps({"synthetic": {**TINY_SYN, "n_test": 100}, "meta": TINY_META}))
    assert main(["gen", "--config", str(other_cfg), "--out", str(tmp_path / "d2")]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg), "--dataset", str(root / "data"), "--mode", "baseline",
                 "--out", str(a)]) == 0
    assert main(["train", "--config", str(other_cfg), "--dataset", str(tmp_path / "d2"), "--mode", "baseline",
                 "--out", str(b)]) == 0
    capsys.readouterr()
    assert main(["report", str(a)]) == 0
    assert "(" not in capsys.readouterr().out
    assert main(["report", str(a), str(b)]) == 1


def test_missing_dataset_exit_code(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "run")]) == 2
    assert main(["train", "--out", str(tmp_path / "run")]) == 2


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["train", "--mode", "bogus"])
    assert info.value.code == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"meta": {"alhpa": 1}}))
    assert main(["train", "--config", str(bad), "--dataset", str(tmp_path), "--out", str(tmp_path / "r")]) == 2


def test_config_hash_ignores_key_order():
    a = RunConfig.from_dict({"seed": 3, "mode": "merged", "meta": {"alpha": 2.0, "beta": 0.1}})
    b = RunConfig.from_dict({"meta": {"beta": 0.1, "alpha": 2.0}, "mode": "merged", "seed": 3})
    assert a.hash() == b.hash()
    assert RunConfig.from_dict(json.loads(a.to_json())) == a
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"colour": 1})
    with pytest.raises(ConfigError):
        RunConfig(mode="fast")


def test_modes_map_to_flags():
    base = RunConfig(seed=4)
    assert base.with_overrides(mode="no-meta").effective_meta().meta is False
    assert base.with_overrides(mode="merged").effective_meta().testing_set_mode == "merged"
    assert base.with_overrides(mode="random").effective_meta().testing_set_mode == "random"
    assert base.with_overrides(mode="no-curriculum").effective_meta().curriculum is False
    assert base.effective_meta().seed == 4
