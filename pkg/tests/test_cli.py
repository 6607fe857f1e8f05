import json

import pytest

from gesturefusion.cli import main
from gesturefusion.training import read_predictions
from tests.helpers import tree_bytes

FAST = ["--scale", "0.05", "--timestep", "8", "--image-size", "12",
        "--set", "depth_cnn.epochs=1", "--set", "depth_cnn_lstm.epochs=1",
        "--set", "skeleton_lstm.epochs=1", "--set", "fl_concat.epochs=1"]


@pytest.fixture(scope="module")
def run_dir(tiny_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    code = main(["train", "--dataset", str(tiny_root), "--networks", "fl_concat,skeleton_lstm",
                 "--out", str(out), "--run-id", "r1", *FAST])
    assert code == 0
    return out / "r1"


def test_synth_writes_and_is_idempotent(tmp_path, capsys):
    args = ["synth", "--out", str(tmp_path / "d"), "--subjects", "2", "--trials", "1",
            "--min-frames", "2", "--max-frames", "4", "--height", "16", "--width", "16"]
    assert main(args) == 0
    assert "56 sequences written" in capsys.readouterr().out
    before = tree_bytes(tmp_path / "d")
    assert main(args) == 0
    assert "identical tree already present" in capsys.readouterr().out
    assert tree_bytes(tmp_path / "d") == before
    assert main(args[:-1] + ["20"]) == 1
    assert "different dataset" in capsys.readouterr().err


def test_train_layout_and_manifest(run_dir):
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["trained_networks"] == ["depth_cnn", "skeleton_lstm", "depth_cnn_lstm", "fl_concat"]
    assert manifest["folds"] == [1, 2, 3]
    assert manifest["plans"]["skeleton_lstm"]["optimizer"]["kind"] == "adam"
    for fold in (1, 2, 3):
        for net in manifest["trained_networks"]:
            r = read_predictions(run_dir / f"fold_{fold}" / f"{net}.predictions.csv")
            assert set(r.subjects) == {fold}
            assert r.fingerprint == manifest["spec_fingerprints"][net]


def test_train_resume_skips_verified_folds(run_dir, tiny_root, capsys):
    before = tree_bytes(run_dir)
    code = main(["train", "--dataset", str(tiny_root), "--networks", "fl_concat,skeleton_lstm",
                 "--out", str(run_dir.parent), "--run-id", "r1", *FAST])
    assert code == 0
    assert capsys.readouterr().out.count("verified outputs present, skipping") == 3
    assert tree_bytes(run_dir) == before


def test_fuse_and_report(run_dir, tmp_path, capsys):
    assert main(["fuse", "--mode", "average", "--run", str(run_dir)]) == 0
    assert main(["fuse", "--mode", "max", "--run", str(run_dir)]) == 0
    assert main(["fuse", "--mode", "fl_concat", "--run", str(run_dir)]) == 0
    a = read_predictions(run_dir / "fold_1" / "depth_cnn_lstm.predictions.csv")
    b = read_predictions(run_dir / "fold_1" / "skeleton_lstm.predictions.csv")
    avg = read_predictions(run_dir / "fold_1" / "sl_average.predictions.csv")
    assert (avg.scores == (a.scores + b.scores) / 2).all()
    capsys.readouterr()
    assert main(["report", "--run", str(run_dir), "--out", str(tmp_path / "rep"), "--no-figures"]) == 0
    out = capsys.readouterr().out
    for label in ("SL-fusion-Average", "SL-fusion-Maximum", "FL-fusion-Concat", "Skeleton LSTM"):
        assert label in out


def test_fuse_inputs_by_hand(tmp_path):
    header = "# gesturefusion predictions v1\n# network={n}\n# fingerprint=x\n# class_mode=c14\n# fold=1\n"
    cols = "sequence_id,subject,true_class,predicted_class," + ",".join(f"score_{i}" for i in range(1, 15)) + "\n"

    def write(name, rows):
        path = tmp_path / f"{name}.csv"
        body = "".join(f"{sid},1,{t},{p}," + ",".join(map(str, s)) + "\n" for sid, t, p, s in rows)
        path.write_text(header.format(n=name) + cols + body)
        return path

    z = [0.0] * 12
    a = write("a", [("s1", 1, 1, [0.75, 0.25] + z), ("s2", 2, 1, [0.5, 0.5] + z)])
    b = write("b", [("s1", 1, 2, [0.25, 0.75] + z), ("s2", 2, 2, [0.0, 1.0] + z)])
    assert main(["fuse", "--mode", "average", "--inputs", str(a), str(b), "--output", str(tmp_path / "avg.csv")]) == 0
    fused = read_predictions(tmp_path / "avg.csv")
    assert fused.scores[:, :2].tolist() == [[0.5, 0.5], [0.25, 0.75]]
    assert fused.predicted.tolist() == [1, 2]
    assert main(["fuse", "--mode", "max", "--inputs", str(a), str(b), "--output", str(tmp_path / "mx.csv")]) == 0
    assert read_predictions(tmp_path / "mx.csv").scores[:, :2].tolist() == [[0.75, 0.75], [0.5, 1.0]]


def test_fuse_divergent_sequences(tmp_path, run_dir, capsys):
    a = run_dir / "fold_1" / "skeleton_lstm.predictions.csv"
    b = run_dir / "fold_2" / "skeleton_lstm.predictions.csv"
    assert main(["fuse", "--mode", "average", "--inputs", str(a), str(b), "--output", str(tmp_path / "x.csv")]) == 1
    assert "error:" in capsys.readouterr().err


def test_dry_run_and_config_file(tmp_path, capsys):
    cfg = tmp_path / "exp.ini"
    cfg.write_text("[experiment]\nclass_mode = 28\nscale = 0.5\nnetworks = skeleton_lstm\n\n"
                   "[plans]\nskeleton_lstm.epochs = 7\n")
    assert main(["train", "--config", str(cfg), "--dry-run", "--out", str(tmp_path), "--run-id", "d"]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["config"]["class_mode"] == "c28" and manifest["config"]["scale"] == 0.5
    assert manifest["plans"]["skeleton_lstm"]["epochs"] == 7
    assert "skeleton_lstm: 7 epochs, batch 32" in capsys.readouterr().out


@pytest.mark.parametrize("bad", [["--scale", "0"], ["--scale", "1.5"], ["--timestep", "0"],
                                 ["--networks", "resnet"], ["--set", "skeleton_lstm.momentum=1"]])
def test_invalid_config_rejected(tmp_path, bad, capsys):
    assert main(["train", "--dry-run", "--out", str(tmp_path), *bad]) == 1
    assert "error:" in capsys.readouterr().err


def test_train_missing_dataset(tmp_path, capsys):
    assert main(["train", "--dataset", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    assert "no gesture directories found" in capsys.readouterr().err
