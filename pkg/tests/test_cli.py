import json
import shutil

import numpy as np
import pytest
from PIL import Image

from mscrf.bundle import load_bundle, save_bundle
from mscrf.cli import main


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def model_path(work, tiny_bundle):
    _, bundle = tiny_bundle
    path = work / "model.npz"
    save_bundle(bundle, path)
    return path


def test_train_command(work, tiny_corpus):
    out = work / "trained.npz"
    code = main(
        ["train", "--config", str(tiny_corpus["config"]), "--out", str(out), "--folds", "0,1"]
    )
    assert code == 0
    bundle = load_bundle(out)
    assert bundle.label_names == ("stripe_h", "stripe_v")


def test_train_bad_folds(work, tiny_corpus):
    out = work / "x.npz"
    args = ["train", "--config", str(tiny_corpus["config"]), "--out", str(out)]
    assert main(args + ["--folds", "a,b"]) == 2
    assert main(args + ["--folds", "7"]) == 2


def test_train_missing_config(work):
    code = main(["train", "--config", str(work / "none.json"), "--out", str(work / "x.npz")])
    assert code == 2


def test_segment_stem_convention(work, model_path, tiny_corpus):
    stem = work / "scene"
    shutil.copy(tiny_corpus["images"] / "img03_rgb.png", f"{stem}_rgb.png")
    shutil.copy(tiny_corpus["images"] / "img03_nir.png", f"{stem}_nir.png")
    out = work / "scene_mask.png"
    code = main(["segment", "--model", str(model_path), "--image", str(stem), "--out", str(out)])
    assert code == 0
    mask = np.asarray(Image.open(out))
    assert mask.shape == (36, 36)
    assert set(np.unique(mask)) <= {0, 1}


def test_segment_explicit_paths(work, model_path, tiny_corpus):
    out = work / "explicit_mask.png"
    code = main(
        [
            "segment",
            "--model", str(model_path),
            "--rgb", str(tiny_corpus["images"] / "img04_rgb.png"),
            "--nir", str(tiny_corpus["images"] / "img04_nir.png"),
            "--out", str(out),
            "--lam", "0",
        ]
    )
    assert code == 0
    assert out.exists()


def test_segment_rgb_only(work, model_path, tiny_corpus):
    # the luma-SIFT model never touches NIR, so an RGB-only call must work
    out = work / "rgb_only_mask.png"
    code = main(
        [
            "segment",
            "--model", str(model_path),
            "--rgb", str(tiny_corpus["images"] / "img05_rgb.png"),
            "--out", str(out),
            "--pairwise-mode", "VIS",
        ]
    )
    assert code == 0


def test_segment_missing_inputs(work, model_path):
    code = main(
        ["segment", "--model", str(model_path), "--rgb", str(work / "nope.png"),
         "--out", str(work / "m.png")]
    )
    assert code == 3
    code = main(
        ["segment", "--model", str(work / "no_model.npz"), "--rgb", str(work / "nope.png"),
         "--out", str(work / "m.png")]
    )
    assert code == 3


def test_evaluate_perfect_predictions(work, tiny_corpus):
    out = work / "eval_perfect"
    code = main(
        [
            "evaluate",
            "--pred", str(tiny_corpus["masks"]),
            "--gt", str(tiny_corpus["masks"]),
            "--mode", "outdoor_void",
            "--out", str(out),
        ]
    )
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["overall_accuracy"] == 1.0
    assert metrics["jaccard_index"] == 1.0
    assert metrics["n_labels"] == 2
    assert metrics["n_images"] == 20
    assert metrics["trimap"]["accuracy"][0] == 1.0
    assert (out / "confusion.csv").exists()
    assert (out / "trimap.csv").exists()


def test_evaluate_detects_errors(work, tiny_corpus):
    # flip one prediction entirely; pooled accuracy must drop below 1
    pred_dir = work / "preds_flipped"
    shutil.copytree(tiny_corpus["masks"], pred_dir)
    name = "img04.png"  # a mixed image: half class 0, half class 1
    arr = np.asarray(Image.open(pred_dir / name))
    Image.fromarray((1 - arr).astype(np.uint8)).save(pred_dir / name)
    out = work / "eval_flipped"
    code = main(
        ["evaluate", "--pred", str(pred_dir), "--gt", str(tiny_corpus["masks"]),
         "--mode", "outdoor_void", "--out", str(out)]
    )
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["overall_accuracy"] < 1.0


def test_evaluate_missing_prediction(work, tiny_corpus):
    pred_dir = work / "preds_partial"
    shutil.copytree(tiny_corpus["masks"], pred_dir)
    (pred_dir / "img00.png").unlink()
    code = main(
        ["evaluate", "--pred", str(pred_dir), "--gt", str(tiny_corpus["masks"]),
         "--mode", "outdoor_void", "--out", str(work / "eval_partial")]
    )
    assert code == 3


def test_evaluate_empty_gt_dir(work):
    empty = work / "no_masks"
    empty.mkdir()
    code = main(
        ["evaluate", "--pred", str(empty), "--gt", str(empty),
         "--mode", "outdoor_void", "--out", str(work / "eval_empty")]
    )
    assert code == 3


def test_evaluate_label_count_too_small(work, tiny_corpus):
    code = main(
        ["evaluate", "--pred", str(tiny_corpus["masks"]), "--gt", str(tiny_corpus["masks"]),
         "--mode", "outdoor_void", "--labels", "1", "--out", str(work / "eval_bad")]
    )
    assert code == 3


@pytest.fixture(scope="module")
def protocol_report(work, tiny_corpus):
    out = work / "report_a"
    code = main(
        ["protocol", "--config", str(tiny_corpus["config"]), "--out", str(out),
         "--cache-dir", str(work / "cache")]
    )
    assert code == 0
    return out


def test_protocol_command_writes_report(protocol_report):
    metrics = json.loads((protocol_report / "metrics.json").read_text())
    assert metrics["n_images"] == 20
    assert len(list((protocol_report / "preds").glob("*.png"))) == 20


def test_protocol_bad_config(work, tiny_corpus, tmp_path):
    doc = json.loads(tiny_corpus["config"].read_text())
    doc["descriptor"] = "SURF_rgb"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    # the relative manifest path resolves against the config's directory
    code = main(["protocol", "--config", str(bad), "--out", str(tmp_path / "out")])
    assert code == 2


def test_compare_command(work, protocol_report, capsys):
    other = work / "report_b"
    shutil.copytree(protocol_report, other)
    code = main(["compare", str(protocol_report), str(other), "--out", str(work / "cmp.json")])
    assert code == 0
    table = capsys.readouterr().out
    assert "overall_accuracy" in table
    assert "t = 0.0000" in table
    doc = json.loads((work / "cmp.json").read_text())
    assert doc["paired_t"]["p"] == 1.0


def test_compare_mismatched_reports(work, protocol_report, tmp_path):
    other = tmp_path / "tampered"
    shutil.copytree(protocol_report, other)
    doc = json.loads((other / "metrics.json").read_text())
    doc["manifest_sha"] = "e" * 64
    (other / "metrics.json").write_text(json.dumps(doc))
    code = main(["compare", str(protocol_report), str(other)])
    assert code == 3


def test_unknown_command_exits_via_argparse():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
