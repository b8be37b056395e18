import hashlib
import json

import pytest

from wsdmil.bagio import read_manifest
from wsdmil.cli import main
from wsdmil.model import load_checkpoint
from wsdmil.trainer import FoldReport

SMALL = {"synth": {"num_bags": 10, "grid_side": 16, "tumor_blob_scales": [2, 3], "seed": 4},
         "train": {"n_clusters": 4}}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["generate", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root, cfg, root / "data" / "manifest.json"


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generate_defaults(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path / "a")]) == 0
    assert "100 bags" in capsys.readouterr().out
    m = read_manifest(tmp_path / "a" / "manifest.json")
    assert len(m.labels) == 100 and m.feature_dim == 16
    assert main(["generate", "--out", str(tmp_path / "b")]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_generate_seed_flag_overrides(tmp_path):
    assert main(["generate", "--num-bags", "3", "--seed", "11", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "synth_spec.json").read_text())["seed"] == 11


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["generate", "--config", str(tmp_path / "nope.json")]) == 2
    assert "not found" in capsys.readouterr().err


def test_bad_spec_value_exits_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"grid_side": 2}}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_missing_manifest_exits_2(tmp_path):
    assert main(["train", str(tmp_path / "missing.json")]) == 2


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2


def test_sample(dataset, tmp_path):
    _, cfg, manifest = dataset
    assert main(["sample", str(manifest), "--config", str(cfg), "--alpha", "20", "--seed", "3",
                 "--out", str(tmp_path)]) == 0
    stats = json.loads((tmp_path / "sampling.json").read_text())
    assert stats["seed"] == 3 and stats["alpha"] == 20
    assert all(b["kept"] < b["n"] for b in stats["bags"])
    sampled = read_manifest(tmp_path / "manifest.json").load_bags()
    assert [b.n for b in sampled] == [b["kept"] for b in stats["bags"]]


@pytest.mark.parametrize("flags", [[], ["--disable-wsda"], ["--disable-serg"], ["--fixed-window-grid", "8"],
                                   ["--aggregator", "max"]])
def test_train_and_eval(dataset, tmp_path, flags, capsys):
    _, cfg, manifest = dataset
    rc = main(["train", str(manifest), "--config", str(cfg), "--epochs", "1", "--folds", "2",
               "--lr", "1e-3", "--alpha", "60", "--seed", "5", "--out", str(tmp_path)] + flags)
    assert rc == 0
    assert "(seed 5)" in capsys.readouterr().out
    report = FoldReport.from_json((tmp_path / "report.json").read_text())
    assert len(report.folds) == 2 and report.metadata["seed"] == 5
    _, meta = load_checkpoint(tmp_path / "fold0.wsdc")
    assert meta["seed"] == 5 and meta["fold"] == 0

    assert main(["eval", str(tmp_path / "fold1.wsdc"), str(manifest), "--config", str(cfg),
                 "--alpha", "60", "--out", str(tmp_path / "eval.json")]) == 0
    ev = FoldReport.from_json((tmp_path / "eval.json").read_text())
    assert ev.folds[0].n_test == 10 and ev.metadata["checkpoint_metadata"]["fold"] == 1


def test_invalid_ablation_combination_exits_2(dataset, tmp_path, capsys):
    _, cfg, manifest = dataset
    rc = main(["train", str(manifest), "--config", str(cfg), "--disable-wsda", "--fixed-window-grid", "8",
               "--out", str(tmp_path)])
    assert rc == 2
    assert "fixed_window_grid" in capsys.readouterr().err
    assert not (tmp_path / "report.json").exists()


def test_bench(tmp_path, capsys):
    assert main(["generate", "--num-bags", "2", "--out", str(tmp_path / "d")]) == 0
    capsys.readouterr()
    rc = main(["bench", str(tmp_path / "d" / "manifest.json"), "--clusters", "4", "--seed", "2",
               "--out", str(tmp_path / "bench.csv")])
    assert rc == 0
    lines = (tmp_path / "bench.csv").read_text().splitlines()
    assert lines[0] == "alpha,peak_bytes,ratio"
    rows = [l.split(",") for l in lines[1:4]]
    assert [r[0] for r in rows] == ["100", "60", "20"] and rows[0][2] == "1.000000"
    assert lines[4] == "# seed=2 clusters=4"
    assert lines[5] == "# ratios non-increasing: yes"


def test_bench_empty_alphas_exits_2(dataset):
    _, _, manifest = dataset
    assert main(["bench", str(manifest), "--alphas", ","]) == 2


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--instances", "32", "--entries", "3"]) == 0
    out = capsys.readouterr().out
    assert out.strip().endswith("PASS") and "seed=0" in out


def test_gradcheck_corrupted_fails_and_names_parameter(capsys):
    rc = main(["gradcheck", "--instances", "32", "--entries", "3", "--corrupt-grad", "cls.weight"])
    assert rc == 1
    out = capsys.readouterr().out
    assert "worst: cls.weight" in out and out.strip().endswith("FAIL")


def test_gradcheck_unknown_parameter_exits_2():
    assert main(["gradcheck", "--corrupt-grad", "no.such.param"]) == 2
