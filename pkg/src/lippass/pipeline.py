"""Configuration and the end-to-end steps behind each CLI command.

Config files are INI with one section per stage.  Every key can also be set
on the command line as ``--key-name`` (underscores become dashes); flags win
over the file, the file wins over the defaults below.
"""

from __future__ import annotations

import configparser
import json
import time
import zlib
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset as ds
from .errors import LipPassError, UndefinedMetricError
from .features import (
    DeterministicProjection,
    EmbeddingIndex,
    PrecomputedLoader,
    cache_filename,
    cache_write,
    extract_sequence,
)
from .metrics import (
    ScoredSample,
    accuracy,
    confusion,
    evaluate,
    roc_curve,
    choose_threshold,
    operating_threshold,
    sensitivity,
    specificity,
    write_report,
    write_roc,
)
from .seqmodel import load_model, predict, save_model
from .trainer import TrainConfig, stack_samples, train


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_float(v):
    if v is None or str(v).strip().lower() in ("", "none"):
        return None
    return float(v)


def _ints(v):
    if isinstance(v, (tuple, list)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).replace(" ", "").split(",") if x)


def _strs(v):
    if isinstance(v, (tuple, list)):
        return tuple(str(x) for x in v)
    return tuple(x for x in str(v).replace(" ", "").split(",") if x)


# (section, key, parser, default, help)
SCHEMA = [
    ("run", "seed", int, 0, "global seed; every stage derives its own from it"),
    ("run", "out", str, "run", "working directory for all artifacts"),
    ("run", "jobs", int, 1, "worker count for extraction and sweeps"),
    ("data", "manifest", str, "", "manifest path (default: <out>/manifest.jsonl)"),
    ("data", "speakers", int, 10, "synthetic speaker count"),
    ("data", "words", int, 10, "synthetic word count"),
    ("data", "takes", int, 10, "synthetic takes per speaker-word pair"),
    ("data", "timesteps", int, 20, "frames per utterance after preprocessing"),
    ("data", "dim", int, 2622, "feature width"),
    ("data", "noise_scale", float, 0.1, "synthetic per-take noise"),
    ("data", "side", int, 224, "frame side after resizing"),
    ("features", "extractor", str, "projection", "backend for frame manifests: projection | precomputed"),
    ("features", "projection_seed", int, 0, "seed of the projection extractor"),
    ("features", "grid", int, 16, "pooling grid of the projection extractor"),
    ("features", "cache_dir", str, "", "cache directory (default: <out>/cache)"),
    ("split", "target_speaker", str, "", "enrolled speaker"),
    ("split", "target_word", str, "", "enrolled word"),
    ("split", "unseen_speakers", _strs, (), "explicit unseen speakers (comma list)"),
    ("split", "heldout_words", _strs, (), "explicit held-out words (comma list)"),
    ("split", "unseen_count", int, 5, "speakers held out at random when none are listed"),
    ("split", "heldout_count", int, 3, "words held out at random when none are listed"),
    ("split", "train_fraction", float, 0.7, "train share of the working pool"),
    ("split", "oversample_factor", int, 11, "replication factor for positives"),
    ("split", "stratify", _bool, False, "stratify the train/test cut by label"),
    ("split", "calibration_fraction", float, 0.15, "share of train kept for threshold fitting"),
    ("model", "hidden", _ints, (128, 64, 32, 16), "LSTM widths, bottom to top"),
    ("model", "readout", str, "last", "head input: last | mean"),
    ("train", "learning_rate", float, 0.001, "Adam step size"),
    ("train", "epochs", int, 60, "training epochs"),
    ("train", "batch_size", int, 75, "mini-batch size"),
    ("train", "beta1", float, 0.9, "Adam beta1"),
    ("train", "beta2", float, 0.999, "Adam beta2"),
    ("train", "epsilon", float, 1e-8, "Adam epsilon"),
    ("train", "clip_norm", _opt_float, None, "global gradient-norm clip (off by default)"),
    ("train", "checkpoint_every", int, 0, "write a checkpoint every k epochs (0 = off)"),
    ("eval", "threshold", _opt_float, None, "fixed decision threshold; default is calibrated"),
]

_KEYS = {key: (section, parser, default) for section, key, parser, default, _ in SCHEMA}


class Config(dict):
    """Flat key -> value map with attribute access."""

    def __getattr__(self, name):
        try:
            return self[name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def out_dir(self) -> Path:
        return Path(self["out"])

    @property
    def manifest_path(self) -> Path:
        return Path(self["manifest"]) if self["manifest"] else self.out_dir / "manifest.jsonl"

    @property
    def cache_path(self) -> Path:
        return Path(self["cache_dir"]) if self["cache_dir"] else self.out_dir / "cache"

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            adam_beta1=self.beta1,
            adam_beta2=self.beta2,
            adam_epsilon=self.epsilon,
            gradient_clip_norm=self.clip_norm,
            seed=derive_seed(self.seed, "train"),
            readout=self.readout,
        )


def load_config(path=None, overrides: dict | None = None) -> Config:
    cfg = Config({key: default for key, (_, _, default) in _KEYS.items()})
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path, encoding="utf-8")
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in _KEYS:
                    raise ValueError(f"{path}: unknown key [{section}] {key}")
                if _KEYS[key][0] != section:
                    raise ValueError(f"{path}: key {key} belongs in section [{_KEYS[key][0]}]")
                cfg[key] = _KEYS[key][1](raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _KEYS:
            raise ValueError(f"unknown config key {key}")
        cfg[key] = _KEYS[key][1](value)
    _validate(cfg)
    return cfg


def _validate(cfg: Config) -> None:
    for key in ("speakers", "words", "takes", "timesteps", "dim", "side", "grid", "jobs"):
        if cfg[key] < 1:
            raise ValueError(f"{key} must be >= 1, got {cfg[key]}")
    if cfg.noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    if cfg.extractor not in ("projection", "precomputed"):
        raise ValueError(f"unknown extractor {cfg.extractor!r}")
    if not cfg.hidden or any(h < 1 for h in cfg.hidden):
        raise ValueError(f"hidden widths must be positive, got {cfg.hidden}")
    if cfg.unseen_count < 0 or cfg.heldout_count < 0:
        raise ValueError("holdout counts must be >= 0")
    if cfg.checkpoint_every < 0:
        raise ValueError("checkpoint_every must be >= 0")
    cfg.train_config()  # validates optimizer settings


def derive_seed(seed: int, stage: str) -> int:
    """Independent, reproducible per-stage seed."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


def synthesize(cfg: Config) -> list:
    """Write a synthetic corpus as cache files plus a manifest."""
    records = ds.generate_synthetic(
        cfg.speakers, cfg.words, cfg.takes, cfg.timesteps, cfg.dim,
        cfg.noise_scale, derive_seed(cfg.seed, "synth"),
    )
    cache = cfg.cache_path
    cache.mkdir(parents=True, exist_ok=True)
    cfg.manifest_path.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in records:
        path = cache / cache_filename(rec.key)
        cache_write(path, rec.embedding)
        written.append(ds.UtteranceRecord(rec.speaker_id, rec.word_id, rec.take_id, embedding=str(path)))
    ds.write_manifest(written, cfg.manifest_path)
    return written


def make_backend(cfg: Config):
    if cfg.extractor == "precomputed":
        return PrecomputedLoader(cfg.cache_path, cfg.timesteps, cfg.dim)
    return DeterministicProjection(cfg.projection_seed, cfg.side, cfg.dim, cfg.grid)


def extract(cfg: Config, frames_manifest) -> list:
    """Embed every frame-based record; write cache files and an embedding manifest."""
    records = ds.load_manifest(frames_manifest)
    backend = DeterministicProjection(cfg.projection_seed, cfg.side, cfg.dim, cfg.grid)
    cache = cfg.cache_path
    cache.mkdir(parents=True, exist_ok=True)

    def one(rec):
        seq = ds.preprocess_sequence(rec, cfg.timesteps, cfg.side)
        emb = extract_sequence(seq, backend)
        path = cache / cache_filename(rec.key)
        cache_write(path, emb.values)
        return ds.UtteranceRecord(rec.speaker_id, rec.word_id, rec.take_id, embedding=str(path))

    if cfg.jobs > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            out = list(pool.map(one, records))
    else:
        out = [one(r) for r in records]
    ds.write_manifest(out, cfg.manifest_path)
    return out


def load_records(cfg: Config) -> list:
    records = ds.load_manifest(cfg.manifest_path)
    if not records:
        raise ds.SplitError(f"manifest {cfg.manifest_path} is empty")
    return records


def embedding_index(cfg: Config, records) -> EmbeddingIndex:
    backend = make_backend(cfg) if any(r.embedding is None for r in records) else None
    return EmbeddingIndex(records, cfg.timesteps, cfg.dim, backend=backend, side=cfg.side)


def holdouts(cfg: Config, records, target=None):
    speakers = {r.speaker_id for r in records}
    words = {r.word_id for r in records}
    if cfg.unseen_speakers or cfg.heldout_words:
        unseen = frozenset(cfg.unseen_speakers)
        held = frozenset(cfg.heldout_words)
        return unseen, {s: held for s in sorted(speakers - unseen) if held}
    return ds.select_holdouts(
        speakers, words, cfg.unseen_count, cfg.heldout_count,
        derive_seed(cfg.seed, "holdout"),
        exclude_speaker=target[0] if target else None,
        exclude_word=target[1] if target else None,
    )


def make_plan(cfg: Config, target, unseen, heldout) -> ds.SplitPlan:
    return ds.SplitPlan(
        target=target,
        unseen_speakers=unseen,
        heldout_words=heldout,
        train_fraction=cfg.train_fraction,
        oversample_factor=cfg.oversample_factor,
        seed=derive_seed(cfg.seed, "split"),
        stratify=cfg.stratify,
    )


def target_of(cfg: Config) -> tuple:
    if not cfg.target_speaker or not cfg.target_word:
        raise ValueError("--target-speaker and --target-word are required")
    return (cfg.target_speaker, cfg.target_word)


def fit_and_calibration(cfg: Config, split: ds.DatasetSplit):
    return ds.calibration_split(
        split.train, cfg.calibration_fraction, derive_seed(cfg.seed, "calibration")
    )


def train_pair(cfg: Config, split, index, on_epoch=None):
    fit, calib = fit_and_calibration(cfg, split)
    return train(
        fit, index, cfg.train_config(),
        init_seed=derive_seed(cfg.seed, "init"),
        hidden=cfg.hidden,
        validation=calib or None,
        on_epoch=on_epoch,
    )


def score(params, samples, index, readout) -> list:
    x, _ = stack_samples(samples, index)
    probs = np.atleast_1d(predict(params, x, readout))
    return [ScoredSample(float(p), s.label, s.category) for p, s in zip(probs, samples)]


def calibrate_threshold(cfg: Config, params, split, index) -> float:
    if cfg.threshold is not None:
        return cfg.threshold
    _, calib = fit_and_calibration(cfg, split)
    if not calib or len({s.label for s in calib}) < 2:
        raise ds.SplitError("calibration set needs both classes; set --threshold explicitly")
    scored = score(params, calib, index, cfg.readout)
    curve = roc_curve([s.score for s in scored], [s.label for s in scored])
    return operating_threshold(curve)


def _safe(fn, c):
    try:
        return fn(c)
    except UndefinedMetricError:
        return None


def evaluate_pair(cfg: Config, params, split, index):
    threshold = calibrate_threshold(cfg, params, split, index)
    scored = score(params, split.test, index, cfg.readout)
    report = evaluate(scored, threshold)
    c05 = confusion([s.score for s in scored], [s.label for s in scored], 0.5)
    extra = {
        "threshold_source": "fixed" if cfg.threshold is not None else "calibration",
        "at_0.5": {
            "confusion": c05.to_dict(),
            "accuracy": accuracy(c05),
            "sensitivity": _safe(sensitivity, c05),
            "specificity": _safe(specificity, c05),
        },
        "provenance": split.provenance,
        "target": list(split.plan.target) if split.plan else None,
    }
    return report, extra


def write_eval(cfg: Config, report, extra) -> None:
    write_report(report, cfg.path("report.json"), extra)
    write_roc(report.roc, cfg.path("roc.tsv"))


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


SWEEP_COLUMNS = ("speaker", "word", "accuracy", "sensitivity", "specificity",
                 "auc", "eer", "threshold", "status")


@dataclass
class SweepRow:
    speaker: str
    word: str
    values: dict
    status: str = "ok"
    seconds: float = 0.0

    def line(self) -> str:
        cells = [self.speaker, self.word]
        for col in SWEEP_COLUMNS[2:-1]:
            v = self.values.get(col)
            cells.append("" if v is None else f"{v:.6f}")
        cells.append(self.status)
        return "\t".join(cells)


def _run_pair(args):
    cfg, records, target, unseen, heldout = args
    start = time.perf_counter()
    try:
        index = embedding_index(cfg, records)
        split = ds.build_splits(records, make_plan(cfg, target, unseen, heldout))
        params, _ = train_pair(cfg, split, index)
        report, _ = evaluate_pair(cfg, params, split, index)
        values = {
            "accuracy": report.accuracy,
            "sensitivity": report.sensitivity,
            "specificity": report.specificity,
            "auc": report.auc,
            "eer": report.eer,
            "threshold": report.chosen_threshold,
        }
        status = "ok"
    except (LipPassError, ValueError, ArithmeticError) as exc:
        values, status = {}, f"error: {exc}".replace("\t", " ").replace("\n", " ")
    return SweepRow(target[0], target[1], values, status, time.perf_counter() - start)


def sweep(cfg: Config, on_row=None) -> list:
    """Train and evaluate every (speaker, word) pair left after the holdouts."""
    records = load_records(cfg)
    unseen, heldout = holdouts(cfg, records)
    pairs = ds.eligible_pairs(records, unseen, heldout)
    jobs = [(cfg, records, pair, unseen, heldout) for pair in pairs]
    rows = []
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            for row in pool.map(_run_pair, jobs):
                rows.append(row)
                if on_row:
                    on_row(row)
    else:
        for job in jobs:
            row = _run_pair(job)
            rows.append(row)
            if on_row:
                on_row(row)
    return rows


def sweep_means(rows) -> dict:
    ok = [r for r in rows if r.status == "ok"]
    out = {"pairs": len(rows), "succeeded": len(ok)}
    for col in SWEEP_COLUMNS[2:-1]:
        vals = [r.values[col] for r in ok]
        out[col] = float(np.mean(vals)) if vals else None
    return out


def write_sweep(cfg: Config, rows) -> None:
    with open(cfg.path("sweep.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\t".join(SWEEP_COLUMNS) + "\n")
        for row in rows:
            fh.write(row.line() + "\n")
    with open(cfg.path("sweep_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(sweep_means(rows), fh, indent=1, sort_keys=True)
        fh.write("\n")


def save_checkpoint(cfg: Config, epoch: int, params) -> Path:
    d = cfg.path("checkpoints")
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"epoch_{epoch:04d}.tfam"
    save_model(params, path)
    return path


def load_trained(cfg: Config, path=None):
    path = Path(path) if path else cfg.path("model.tfam")
    if not path.is_file():
        raise FileNotFoundError(f"model not found: {path} (run `lippass train` first)")
    return load_model(path, input_dim=cfg.dim)
