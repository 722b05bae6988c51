"""Acceptance suite: each test covers one numbered criterion at its stated tolerance.

Run on its own with ``pytest tests/test_acceptance.py``; the terminal summary
lists one pass/fail line per criterion.
"""

import json
import struct
import time
from fractions import Fraction

import numpy as np
import pytest

from lippass.cli import EXIT_OK, main
from lippass.dataset import SplitPlan, build_splits, generate_synthetic, load_manifest, select_holdouts
from lippass.errors import (
    BadMagicError,
    FormatError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from lippass.features import EmbeddingIndex, EmbeddingSequence, cache_read, cache_write, variation_report
from lippass.metrics import ConfusionCounts, accuracy, auc, choose_threshold, eer, far_total, frr_total, roc_curve
from lippass.seqmodel import ModelParams, init_params, load_model, loss_and_grad, param_shapes, save_model

from oracles import brute_auc, brute_eer, brute_roc, brute_threshold, finite_difference_grads, max_relative_error


def _run(*args):
    return main([str(a) for a in args])


@pytest.mark.criterion(1, "gradients match central finite differences (rel err < 1e-4, 5 seeds, < 60 s)")
def test_gradient_correctness(record_property):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        params = init_params((6, 5, 4, 3, 2), seed)
        x = rng.standard_normal((7, 6))
        y = float(rng.integers(0, 2))
        _, grads, _ = loss_and_grad(params, x, y)
        numeric = finite_difference_grads(params.arrays(), x, y, step=1e-5)
        worst = max(worst, max_relative_error(grads.arrays(), numeric))
    elapsed = time.perf_counter() - start
    record_property("max_rel_err", f"{worst:.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert worst < 1e-4
    assert elapsed < 60


@pytest.mark.criterion(2, "split counts 500/150/350/450, train 315, test 785 on a 10x10x10 manifest")
def test_split_protocol_exactness(record_property):
    records = generate_synthetic(10, 10, 10, T=2, D=2, seed=0)
    speakers = {r.speaker_id for r in records}
    words = {r.word_id for r in records}
    unseen, heldout = select_holdouts(speakers, words, 5, 3, seed=0, exclude_speaker="s0", exclude_word="w0")
    split = build_splits(records, SplitPlan(("s0", "w0"), unseen, heldout))
    p = split.provenance
    got = (p["unseen_holdout"], p["heldout_word"], p["working"], p["working_oversampled"],
           len(split.train), len(split.test))
    record_property("counts", "/".join(map(str, got)))
    assert got == (500, 150, 350, 450, 315, 785)
    assert len(split.test) == 135 + 650


def _score_set(rng):
    n = int(rng.integers(2, 501))
    labels = rng.integers(0, 2, size=n)
    labels[:2] = (0, 1)
    scores = np.round(rng.random(n) * 0.7 + 0.3 * labels * rng.random(), int(rng.integers(1, 5)))
    return scores, labels


@pytest.mark.criterion(3, "ROC, AUC, EER, threshold match an exhaustive sweep on 100 score sets (1e-9)")
def test_metric_oracle_equivalence(record_property):
    worst = 0.0
    for seed in range(100):
        scores, labels = _score_set(np.random.default_rng(seed))
        curve = roc_curve(scores, labels)
        rows, P, N = brute_roc(scores, labels)
        assert len(rows) == len(curve)
        ours = np.array(curve.points())
        ref = np.array([r[:3] for r in rows], dtype=np.float64)
        diffs = [
            np.max(np.abs(ours - ref)),
            abs(auc(curve) - brute_auc(scores, labels)),
            *np.abs(np.subtract(eer(curve), brute_eer(rows))),
            abs(choose_threshold(curve) - brute_threshold(rows, P, N)),
        ]
        worst = max(worst, max(diffs))
    record_property("max_abs_diff", f"{worst:.1e}")
    assert worst <= 1e-9


def _monotone_transforms(rng):
    out = []
    for _ in range(10):
        kind = int(rng.integers(0, 5))
        a = float(rng.uniform(0.5, 3.0))
        b = float(rng.uniform(-2.0, 2.0))
        out.append({
            0: lambda s, a=a, b=b: a * s + b,
            1: lambda s, a=a: np.exp(a * s),
            2: lambda s, a=a: (s + 0.1) ** a,
            3: lambda s, a=a: np.tanh(a * (s - 0.5)),
            4: lambda s, a=a, b=b: np.log1p(s) * a + b,
        }[kind])
    return out


@pytest.mark.criterion(4, "far_total + frr_total = 1 - accuracy exactly; AUC invariant to monotone maps (1e-12)")
def test_metric_identities(record_property):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        tp, tn, fp, fn = (int(v) for v in rng.integers(0, 10_000, size=4))
        c = ConfusionCounts(tp, tn + 1, fp, fn)
        n = c.total
        assert Fraction(c.fp, n) + Fraction(c.fn, n) == 1 - Fraction(c.tp + c.tn, n)
        assert far_total(c) + frr_total(c) == pytest.approx(1 - accuracy(c), abs=1e-15)

    scores = np.round(rng.random(400), 3)
    labels = (rng.random(400) < 0.3 + 0.4 * scores).astype(int)
    base = auc(roc_curve(scores, labels))
    worst = 0.0
    order = np.argsort(scores, kind="mergesort")
    for f in _monotone_transforms(rng):
        t = f(scores)
        # Strictness survives rounding: same ordering and the same number of distinct values.
        assert np.array_equal(np.argsort(t, kind="mergesort"), order)
        assert len(np.unique(t)) == len(np.unique(scores))
        worst = max(worst, abs(auc(roc_curve(t, labels)) - base))
    record_property("max_auc_shift", f"{worst:.1e}")
    assert worst <= 1e-12


E2E = ["--speakers", 4, "--words", 4, "--takes", 6, "--noise-scale", 0.05, "--dim", 32,
       "--hidden", "16,8,8,4", "--unseen-count", 0, "--heldout-count", 0,
       "--target-speaker", "s0", "--target-word", "w0"]


@pytest.mark.criterion(5, "synthetic end-to-end: test acc >= 0.95, EER <= 0.05, < 5 min; genuine cosine highest")
def test_end_to_end_synthetic(tmp_path, record_property):
    out = tmp_path / "e2e"
    args = ["--out", out, *E2E]
    start = time.perf_counter()
    for cmd in ("synth", "split", "train", "eval"):
        assert _run(cmd, *args) == EXIT_OK
    elapsed = time.perf_counter() - start
    report = json.loads((out / "report.json").read_text())
    log = (out / "train_log.jsonl").read_text().splitlines()

    records = load_manifest(out / "manifest.jsonl")
    index = EmbeddingIndex(records, timesteps=20, dim=32)
    variation = variation_report([EmbeddingSequence(index[r.key], r.key, "cache") for r in records], ("s0", "w0"))
    genuine = variation.mean[0, 0]
    cross = max(variation.mean[i, j] for i in range(4) for j in range(4) if (i, j) != (0, 0))

    record_property("accuracy", f"{report['accuracy']:.4f}")
    record_property("eer", f"{report['eer']:.4f}")
    record_property("seconds", f"{elapsed:.1f}")
    record_property("cosine", f"{genuine:.3f}>{cross:.3f}")
    assert len(log) == 60
    assert report["accuracy"] >= 0.95
    assert report["eer"] <= 0.05
    assert elapsed < 300
    assert genuine > cross


@pytest.mark.criterion(6, "train + eval rerun with identical config reproduces model, log, report bytes")
def test_determinism(tmp_path, record_property):
    small = ["--speakers", 4, "--words", 4, "--takes", 6, "--dim", 16, "--timesteps", 10,
             "--hidden", "8,6,4,4", "--epochs", 15, "--seed", 7,
             "--unseen-count", 1, "--heldout-count", 1,
             "--target-speaker", "s0", "--target-word", "w0"]
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        for cmd in ("synth", "split", "train", "eval"):
            assert _run(cmd, "--out", out, *small) == EXIT_OK
    # Retrain in place too: the second pass must overwrite with identical bytes.
    first = {n: (a / n).read_bytes() for n in ("model.tfam", "train_log.jsonl", "report.json", "roc.tsv")}
    for cmd in ("train", "eval"):
        assert _run(cmd, "--out", a, *small) == EXIT_OK
    for name, data in first.items():
        assert (a / name).read_bytes() == data, name
        assert (b / name).read_bytes() == data, name
    record_property("files", len(first))


def _random_params(rng):
    dims = tuple(int(d) for d in rng.integers(1, 7, size=int(rng.integers(2, 6))))
    arrays = []
    for shape in param_shapes(dims):
        bits = rng.integers(0, 2**64, size=shape, dtype=np.uint64)
        values = bits.view(np.float64)
        values[~np.isfinite(values)] = 0.0
        arrays.append(values.copy())
    return ModelParams.from_arrays(arrays)


@pytest.mark.criterion(7, "model and cache round-trips bitwise over 1000 instances; corruption raises typed errors")
def test_serialization(tmp_path, record_property):
    rng = np.random.default_rng(0)
    model_path, cache_path = tmp_path / "m.tfam", tmp_path / "c.emb"
    for _ in range(1000):
        p = _random_params(rng)
        save_model(p, model_path)
        q = load_model(model_path)
        assert q.dims == p.dims and q.flat().tobytes() == p.flat().tobytes()

        shape = tuple(int(v) for v in rng.integers(1, 30, size=2))
        bits = rng.integers(0, 2**32, size=shape, dtype=np.uint32)
        values = bits.view(np.float32).copy()
        values[~np.isfinite(values)] = 0.0
        cache_write(cache_path, values)
        assert cache_read(cache_path, *shape).tobytes() == values.tobytes()

    corrupt = tmp_path / "x"
    checked = 0
    for path, good_magic, bad_magic in ((model_path, b"TFAM", b"TFAE"), (cache_path, b"TFAE", b"TFAM")):
        raw = path.read_bytes()
        load = load_model if good_magic == b"TFAM" else cache_read
        cases = [
            (raw[:-1], TruncatedFileError),
            (raw[:6], TruncatedFileError),
            (bad_magic + raw[4:], BadMagicError),
            (raw[:4] + struct.pack("<I", 99) + raw[8:], VersionMismatchError),
            (raw + b"\x00", FormatError),
        ]
        for data, error in cases:
            corrupt.write_bytes(data)
            with pytest.raises(error):
                load(corrupt)
            checked += 1
    with pytest.raises(ShapeMismatchError):
        load_model(model_path, input_dim=q.dims[0] + 1)
    with pytest.raises(ShapeMismatchError):
        cache_read(cache_path, shape[0] + 1, shape[1])
    record_property("corruptions", checked + 2)


@pytest.mark.criterion(8, "sweep over the 10x10x10 synthetic manifest emits exactly 35 rows")
def test_sweep_shape(tmp_path, record_property):
    out = tmp_path / "sweep"
    args = ["--out", out, "--dim", 4, "--timesteps", 3, "--hidden", "3,3,2,2", "--epochs", 1, "--jobs", 2]
    assert _run("synth", *args) == EXIT_OK
    assert _run("sweep", *args) == EXIT_OK
    rows = (out / "sweep.tsv").read_text().splitlines()[1:]
    failed = [r for r in rows if not r.endswith("\tok")]
    record_property("rows", len(rows))
    assert len(rows) == 35
    assert not failed
