import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from lippass.cli import EXIT_ERROR, EXIT_OK, EXIT_REJECT, main
from lippass.dataset import load_manifest, load_split, write_manifest, UtteranceRecord
from lippass.features import cache_filename, cache_read, cache_write
from lippass.pipeline import derive_seed, load_config

SMALL = ["--dim", "8", "--timesteps", "5", "--hidden", "6,4,4,3", "--epochs", "4", "--batch-size", "32"]


def _run(*args):
    return main([str(a) for a in args])


def _toy(tmp_path, name="run", speakers=4, words=4, takes=6, extra=()):
    out = tmp_path / name
    common = ["--out", out, "--speakers", speakers, "--words", words, "--takes", takes, "--seed", 3, *SMALL, *extra]
    return out, common


def _files(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(Path(directory).rglob("*")) if p.is_file()}


def test_synth_default_shape(tmp_path):
    out = tmp_path / "r"
    assert _run("synth", "--out", out, "--dim", 4, "--timesteps", 3) == EXIT_OK
    assert len(list((out / "cache").glob("*.emb"))) == 1000
    records = load_manifest(out / "manifest.jsonl")
    assert len(records) == 1000
    assert {r.speaker_id for r in records} == {f"s{i}" for i in range(10)}
    assert cache_read(out / "cache" / cache_filename(("s9", "w9", 9)), 3, 4).shape == (3, 4)


def test_synth_rerun_identical(tmp_path):
    a, common_a = _toy(tmp_path, "a")
    b, common_b = _toy(tmp_path, "b")
    assert _run("synth", *common_a) == EXIT_OK
    assert _run("synth", *common_b) == EXIT_OK
    fa, fb = _files(a / "cache"), _files(b / "cache")
    assert fa == fb and len(fa) == 96


def test_config_errors(tmp_path, capsys):
    assert _run("synth", "--out", tmp_path / "x", "--takes", 0) == EXIT_ERROR
    assert "takes" in capsys.readouterr().err
    assert _run("synth", "--config", tmp_path / "missing.ini") == EXIT_ERROR
    with pytest.raises(SystemExit):
        main(["bogus"])


def test_config_file_and_override(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[data]\nspeakers = 3\ndim = 5\n[train]\nepochs = 7\n")
    cfg = load_config(ini, {"dim": "6"})
    assert (cfg.speakers, cfg.dim, cfg.epochs) == (3, 6, 7)
    ini.write_text("[train]\nspeakers = 3\n")
    with pytest.raises(ValueError, match="section"):
        load_config(ini)
    ini.write_text("[data]\nnope = 3\n")
    with pytest.raises(ValueError, match="unknown"):
        load_config(ini)


def test_derive_seed_stages_differ():
    assert derive_seed(0, "split") != derive_seed(0, "train")
    assert derive_seed(5, "split") == derive_seed(5, "split")


def test_eval_before_train(tmp_path, capsys):
    out, common = _toy(tmp_path)
    _run("synth", *common)
    assert _run("eval", *common) == EXIT_ERROR
    assert "model not found" in capsys.readouterr().err
    assert _run("train", *common, "--target-speaker", "s0", "--target-word", "w0") == EXIT_ERROR


def test_split_requires_target(tmp_path, capsys):
    out, common = _toy(tmp_path)
    _run("synth", *common)
    assert _run("split", *common) == EXIT_ERROR
    assert _run("split", *common, "--target-speaker", "s9", "--target-word", "w0") == EXIT_ERROR


def test_full_grid_split_counts(tmp_path, capsys):
    out = tmp_path / "p"
    common = ["--out", out, "--dim", 2, "--timesteps", 2]
    _run("synth", *common)
    capsys.readouterr()
    assert _run("split", *common, "--target-speaker", "s0", "--target-word", "w0") == EXIT_OK
    printed = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    prov = load_split(out / "split.json").provenance
    assert (prov["unseen_holdout"], prov["heldout_word"], prov["working"], prov["working_oversampled"]) == (
        500, 150, 350, 450)
    assert (prov["train"], prov["test"]) == (315, 785)
    assert printed["train"] == "315"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    out, common = _toy(tmp, extra=("--unseen-count", 0, "--heldout-count", 0, "--epochs", 40,
                                   "--hidden", "16,8,8,4", "--dim", 16, "--noise-scale", 0.05,
                                   "--checkpoint-every", 20))
    target = ["--target-speaker", "s0", "--target-word", "w0"]
    assert _run("synth", *common) == EXIT_OK
    assert _run("split", *common, *target) == EXIT_OK
    assert _run("train", *common, *target) == EXIT_OK
    assert _run("eval", *common, *target) == EXIT_OK
    return out, common


def test_train_eval_artifacts(trained):
    out, _ = trained
    for name in ("model.tfam", "train_log.jsonl", "train_timing.jsonl", "report.json", "roc.tsv", "split.json"):
        assert (out / name).is_file(), name
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["epoch_0020.tfam", "epoch_0040.tfam"]
    log = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 40 and "seconds" not in log[0]
    assert "seconds" in json.loads((out / "train_timing.jsonl").read_text().splitlines()[0])
    report = json.loads((out / "report.json").read_text())
    for key in ("accuracy", "sensitivity", "specificity", "far_total", "frr_total", "eer", "auc", "threshold"):
        assert 0.0 <= report[key] <= 1.0 or key == "threshold"
    assert report["at_0.5"]["accuracy"] >= 0.0
    assert report["provenance"]["working"] == 96


def test_eval_twice_identical(trained):
    out, common = trained
    first = (out / "report.json").read_bytes(), (out / "roc.tsv").read_bytes()
    assert _run("eval", *common, "--target-speaker", "s0", "--target-word", "w0") == EXIT_OK
    assert ((out / "report.json").read_bytes(), (out / "roc.tsv").read_bytes()) == first


def test_verify_decisions(trained, capsys):
    out, common = trained
    genuine = out / "cache" / cache_filename(("s0", "w0", 1))
    imposter = out / "cache" / cache_filename(("s2", "w3", 1))
    assert _run("verify", *common, genuine) == EXIT_OK
    assert "decision\taccept" in capsys.readouterr().out
    assert _run("verify", *common, imposter) == EXIT_REJECT
    # Forcing thresholds exercises both outcomes on the same sample.
    assert _run("verify", *common, "--threshold", 0, imposter) == EXIT_OK
    assert _run("verify", *common, "--threshold", 1, genuine) == EXIT_REJECT


def test_verify_white_frames(trained, tmp_path, capsys):
    out, common = trained
    frame = tmp_path / "white.png"
    Image.new("RGB", (40, 30), (255, 255, 255)).save(frame)
    code = _run("verify", *common, "--side", 16, "--grid", 4, frame)
    assert code in (EXIT_OK, EXIT_REJECT)
    assert "score\t" in capsys.readouterr().out


def test_verify_dimension_mismatch(trained, tmp_path, capsys):
    out, common = trained
    bad = tmp_path / "bad.emb"
    cache_write(bad, np.zeros((5, 7), dtype=np.float32))
    assert _run("verify", *common, bad) == EXIT_ERROR
    assert "error" in capsys.readouterr().err
    assert _run("verify", *common, tmp_path / "nothing.emb") == EXIT_ERROR


def test_extract_frame_manifest(tmp_path):
    rng = np.random.default_rng(0)
    records = []
    for s in ("a", "b"):
        for w in ("x", "y"):
            frames = []
            for k in range(3):
                p = tmp_path / f"{s}{w}{k}.png"
                Image.fromarray(rng.integers(0, 255, (20, 20, 3), dtype=np.uint8)).save(p)
                frames.append(str(p))
            records.append(UtteranceRecord(s, w, 0, frames=tuple(frames)))
    write_manifest(records, tmp_path / "frames.jsonl")
    out = tmp_path / "ex"
    args = ["--out", out, "--dim", 12, "--timesteps", 4, "--side", 16, "--grid", 4]
    assert _run("extract", *args, tmp_path / "frames.jsonl") == EXIT_OK
    emb = load_manifest(out / "manifest.jsonl")
    assert len(emb) == 4
    assert cache_read(emb[0].embedding, 4, 12).shape == (4, 12)
    before = _files(out / "cache")
    assert _run("extract", *args, "--jobs", 2, tmp_path / "frames.jsonl") == EXIT_OK
    assert _files(out / "cache") == before


@pytest.mark.filterwarnings("ignore:no samples for categories")
def test_sweep_toy(tmp_path):
    out = tmp_path / "sw"
    common = ["--out", out, "--speakers", 2, "--words", 2, "--takes", 2, *SMALL,
              "--epochs", 1, "--unseen-count", 0, "--heldout-count", 0]
    _run("synth", *common)
    assert _run("sweep", *common) == EXIT_OK
    lines = (out / "sweep.tsv").read_text().splitlines()
    assert len(lines) == 1 + 4
    summary = json.loads((out / "sweep_summary.json").read_text())
    assert summary["pairs"] == 4


def test_sweep_empty_manifest(tmp_path, capsys):
    out = tmp_path / "empty"
    out.mkdir()
    (out / "manifest.jsonl").write_text("")
    assert _run("sweep", "--out", out) == EXIT_ERROR
    assert "empty" in capsys.readouterr().err
