import json

import pytest

from glyphs import write_glyph_idx

from ganodet.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    """A small synthetic split plus a trained checkpoint shared by the
    command tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run("prepare", "--dataset", "synthetic", "--n", "192",
               "--defect-rate", "0.15", "--seed", "7",
               "--out", root / "splits") == 0
    split = root / "splits" / "split.json"
    assert run("train", "--split", split, "--out", root / "run",
               "--epochs", "3", "--batch-size", "32", "--seed", "7",
               "--z-dim", "8") == 0
    return root, split, root / "run" / "model.nadt"


# ---- prepare ---------------------------------------------------------------------

def test_prepare_writes_manifest_and_is_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert run("prepare", "--dataset", "synthetic", "--n", "64",
                   "--defect-rate", "0.1", "--seed", "3",
                   "--out", tmp_path / sub) == 0
    blob_a = (tmp_path / "a" / "split.json").read_bytes()
    blob_b = (tmp_path / "b" / "split.json").read_bytes()
    assert blob_a == blob_b
    manifest = json.loads(blob_a)
    assert manifest["format"] == "split-manifest/1"
    assert (tmp_path / "a" / "run-manifest.json").exists()


def test_prepare_missing_idx_path_exits_3(tmp_path, capsys):
    code = run("prepare", "--dataset", "mnist", "--images",
               tmp_path / "nope-images", "--labels", tmp_path / "nope-labels",
               "--out", tmp_path / "out")
    assert code == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"]["exit_code"] == 3


def test_prepare_glyph_idx_files(tmp_path):
    images, labels = write_glyph_idx(tmp_path, per_class=30, seed=5)
    assert run("prepare", "--dataset", "mnist", "--images", images,
               "--labels", labels, "--normal-class", "0", "--seed", "2",
               "--contamination", "0.1", "--out", tmp_path / "out") == 0
    manifest = json.loads((tmp_path / "out" / "split.json").read_text())
    assert manifest["contamination_injected"] == 0.1
    assert len(manifest["normal_train"]) == 21   # 70% of 30


def test_prepare_irmnist(tmp_path):
    images, labels = write_glyph_idx(tmp_path, per_class=12, seed=5)
    assert run("prepare", "--dataset", "irmnist", "--images", images,
               "--labels", labels, "--excluded-digit", "3",
               "--n-train", "6", "--n-test", "2", "--n-abnormal", "3",
               "--seed", "4", "--out", tmp_path / "out") == 0
    manifest = json.loads((tmp_path / "out" / "split.json").read_text())
    assert len(manifest["normal_train"]) == 6
    assert len(manifest["abnormal_train"]) == 3


# ---- train ------------------------------------------------------------------------

def test_train_outputs(prepared):
    root, split, ckpt = prepared
    assert ckpt.exists()
    report = json.loads((root / "run" / "train-report.json").read_text())
    assert report["checkpoint_path"] == "model.nadt"
    assert len(report["per_epoch"]) == 3
    assert {"epoch", "loss_d_adv", "loss_an", "loss_d_total",
            "loss_g"} <= set(report["per_epoch"][0])


def test_train_invalid_gamma_exits_2(prepared, tmp_path):
    _, split, _ = prepared
    assert run("train", "--split", split, "--out", tmp_path / "x",
               "--gamma", "1.5") == 2


def test_train_missing_split_exits_3(tmp_path):
    assert run("train", "--split", tmp_path / "missing.json",
               "--out", tmp_path / "x") == 3


def test_gamma_one_no_abnormal_equivalence(prepared, tmp_path):
    _, split, _ = prepared
    common = ["train", "--split", split, "--epochs", "2", "--batch-size",
              "32", "--seed", "9", "--z-dim", "8", "--gamma", "1.0"]
    assert run(*common, "--out", tmp_path / "with_abn") == 0
    assert run(*common, "--no-abnormal", "--out", tmp_path / "without") == 0
    a = (tmp_path / "with_abn" / "model.nadt").read_bytes()
    b = (tmp_path / "without" / "model.nadt").read_bytes()
    assert a == b


# ---- score ------------------------------------------------------------------------

def test_score_and_eval_pipeline(prepared, tmp_path):
    root, split, ckpt = prepared
    assert run("score", "--ckpt", ckpt, "--split", split,
               "--out", tmp_path / "scores", "--n-iters", "10",
               "--max-per-class", "6", "--seed", "7",
               "--residual-maps") == 0
    csv_path = tmp_path / "scores" / "scores.csv"
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "item_id,label,score,l_r,l_d,d_gz,n_iters_used,seed"
    assert len(lines) == 13          # header + 6 normal + 6 abnormal
    maps = list((tmp_path / "scores" / "maps").glob("*.pgm"))
    assert len(maps) == 12

    assert run("eval", "--scores", csv_path, "--out", tmp_path / "eval") == 0
    report = json.loads((tmp_path / "eval" / "eval-report.json").read_text())
    assert set(report) == {"auc", "best_f1", "best_threshold", "confusion",
                           "histogram"}
    hist_lines = (tmp_path / "eval" / "histogram.csv").read_text().splitlines()
    assert hist_lines[0] == "bin_lo,bin_hi,class,count"


def test_score_single_iteration(prepared, tmp_path):
    root, split, ckpt = prepared
    assert run("score", "--ckpt", ckpt, "--split", split,
               "--out", tmp_path / "s1", "--n-iters", "1",
               "--max-per-class", "2", "--seed", "7") == 0
    lines = (tmp_path / "s1" / "scores.csv").read_text().strip().splitlines()
    assert all(line.split(",")[6] == "1" for line in lines[1:])


def test_score_workers_byte_identical(prepared, tmp_path):
    root, split, ckpt = prepared
    for tag, workers in (("w1", "1"), ("w2", "2")):
        assert run("score", "--ckpt", ckpt, "--split", split,
                   "--out", tmp_path / tag, "--n-iters", "8",
                   "--max-per-class", "4", "--seed", "3",
                   "--workers", workers) == 0
    assert ((tmp_path / "w1" / "scores.csv").read_bytes()
            == (tmp_path / "w2" / "scores.csv").read_bytes())


# ---- eval error paths -----------------------------------------------------------------

def test_eval_single_class_exits_4(tmp_path, capsys):
    csv_path = tmp_path / "one.csv"
    csv_path.write_text(
        "item_id,label,score,l_r,l_d,d_gz,n_iters_used,seed\n"
        "a,1,1.0,1.0,1.0,0.5,5,1\n"
        "b,1,2.0,1.0,1.0,0.5,5,1\n")
    assert run("eval", "--scores", csv_path, "--out", tmp_path / "e") == 4
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"]["type"] == "SingleClassError"


# ---- oracle -----------------------------------------------------------------------------

def test_oracle_passes_and_is_deterministic(tmp_path):
    for sub in ("o1", "o2"):
        assert run("oracle", "--instances", "10", "--seed", "1",
                   "--out", tmp_path / sub) == 0
    a = (tmp_path / "o1" / "oracle-report.json").read_bytes()
    assert a == (tmp_path / "o2" / "oracle-report.json").read_bytes()
    report = json.loads(a)
    assert report["pass"] is True
    assert len(report["checks"]) >= 4


def test_oracle_minimal_support(tmp_path):
    assert run("oracle", "--instances", "10", "--seed", "1",
               "--support-size", "2", "--out", tmp_path / "o") == 0


# ---- replay ---------------------------------------------------------------------------------

def test_replay_reproduces_outputs(prepared, tmp_path):
    root, split, ckpt = prepared
    assert run("replay", "--manifest", root / "run" / "run-manifest.json",
               "--out", tmp_path / "replayed") == 0
    assert ((tmp_path / "replayed" / "model.nadt").read_bytes()
            == ckpt.read_bytes())
    assert ((tmp_path / "replayed" / "train-report.json").read_bytes()
            == (root / "run" / "train-report.json").read_bytes())


def test_run_manifest_records_hashes(prepared):
    root, split, ckpt = prepared
    manifest = json.loads((root / "run" / "run-manifest.json").read_text())
    assert manifest["command"] == "train"
    assert "model.nadt" in manifest["outputs"]
    assert manifest["job"]["config"]["epochs"] == 3
    assert manifest["tool_version"]
