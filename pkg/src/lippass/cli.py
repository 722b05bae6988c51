"""``lippass`` command line.

Exit codes: 0 success (or accept for ``verify``), 1 reject (``verify`` only),
2 usage or data error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import pipeline as pl
from .errors import LipPassError
from .features import cache_read, extract_sequence
from .seqmodel import predict, save_model

EXIT_OK = 0
EXIT_REJECT = 1
EXIT_ERROR = 2

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff"}


def _elapsed(start: float, label: str = "elapsed") -> None:
    print(f"{label}: {time.perf_counter() - start:.2f}s", file=sys.stderr)


def cmd_synth(cfg, args) -> int:
    records = pl.synthesize(cfg)
    print(f"wrote {len(records)} utterances to {cfg.manifest_path}")
    return EXIT_OK


def cmd_extract(cfg, args) -> int:
    records = pl.extract(cfg, args.frames_manifest)
    print(f"extracted {len(records)} utterances to {cfg.cache_path}")
    return EXIT_OK


def cmd_split(cfg, args) -> int:
    records = pl.load_records(cfg)
    target = pl.target_of(cfg)
    unseen, heldout = pl.holdouts(cfg, records, target)
    split = ds.build_splits(records, pl.make_plan(cfg, target, unseen, heldout))
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    ds.save_split(split, cfg.path("split.json"))
    for key, value in split.provenance.items():
        print(f"{key}\t{value}")
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    records = pl.load_records(cfg)
    split_path = cfg.path("split.json")
    if not split_path.is_file():
        raise FileNotFoundError(f"split not found: {split_path} (run `lippass split` first)")
    split = ds.load_split(split_path)
    index = pl.embedding_index(cfg, records)
    every = cfg.checkpoint_every

    def on_epoch(epoch, params, rec):
        if every and epoch % every == 0:
            pl.save_checkpoint(cfg, epoch, params)

    start = time.perf_counter()
    params, log = pl.train_pair(cfg, split, index, on_epoch)
    save_model(params, cfg.path("model.tfam"))
    log.write(cfg.path("train_log.jsonl"))
    log.write(cfg.path("train_timing.jsonl"), timing=True)
    last = log.epochs[-1]
    print(f"epochs {len(log.epochs)}  loss {last.loss:.6f}  accuracy {last.accuracy:.4f}")
    _elapsed(start, f"pair {'/'.join(split.plan.target) if split.plan else '?'} train time")
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    params = pl.load_trained(cfg)
    records = pl.load_records(cfg)
    split = ds.load_split(cfg.path("split.json"))
    index = pl.embedding_index(cfg, records)
    report, extra = pl.evaluate_pair(cfg, params, split, index)
    pl.write_eval(cfg, report, extra)
    for key in ("accuracy", "sensitivity", "specificity", "far_total", "frr_total", "auc", "eer"):
        print(f"{key}\t{getattr(report, key):.6f}")
    print(f"threshold\t{report.chosen_threshold:.6f}")
    return EXIT_OK


def _load_sample(cfg, paths):
    paths = [Path(p) for p in paths]
    if len(paths) == 1 and paths[0].suffix == ".emb":
        return cache_read(paths[0], cfg.timesteps, cfg.dim)
    if len(paths) == 1 and paths[0].is_dir():
        paths = sorted(p for p in paths[0].iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not paths:
        raise ds.FrameDecodeError("no frames found for the sample")
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"sample not found: {p}")
    rec = ds.UtteranceRecord("sample", "sample", 0, frames=tuple(str(p) for p in paths))
    seq = ds.preprocess_sequence(rec, cfg.timesteps, cfg.side)
    backend = pl.DeterministicProjection(cfg.projection_seed, cfg.side, cfg.dim, cfg.grid)
    return extract_sequence(seq, backend).values


def cmd_verify(cfg, args) -> int:
    params = pl.load_trained(cfg, args.model)
    x = _load_sample(cfg, args.sample)
    threshold = cfg.threshold
    report_path = cfg.path("report.json")
    if threshold is None and report_path.is_file():
        with open(report_path, encoding="utf-8") as fh:
            threshold = json.load(fh)["threshold"]
    if threshold is None:
        threshold = 0.5
    prob = float(predict(params, x, cfg.readout))
    accepted = prob >= threshold
    print(f"score\t{prob:.6f}")
    print(f"threshold\t{threshold:.6f}")
    print(f"decision\t{'accept' if accepted else 'reject'}")
    return EXIT_OK if accepted else EXIT_REJECT


def cmd_sweep(cfg, args) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)

    def on_row(row):
        print(f"{row.line()}\t{row.seconds:.2f}s", flush=True)

    print("\t".join(pl.SWEEP_COLUMNS) + "\tseconds")
    rows = pl.sweep(cfg, on_row)
    pl.write_sweep(cfg, rows)
    means = pl.sweep_means(rows)
    print("mean\t" + "\t".join(
        "" if means[c] is None else f"{means[c]:.6f}" for c in pl.SWEEP_COLUMNS[2:-1]
    ))
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic embedding corpus"),
    "extract": (cmd_extract, "embed a frame manifest with the projection extractor"),
    "split": (cmd_split, "build the train/test split for one person-word pair"),
    "train": (cmd_train, "train the classifier on a split"),
    "eval": (cmd_eval, "evaluate a trained model on the split's test set"),
    "verify": (cmd_verify, "score one sample and accept or reject it"),
    "sweep": (cmd_sweep, "train and evaluate every eligible person-word pair"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lippass", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="INI config file")
        for section, key, parser_fn, default, key_help in pl.SCHEMA:
            p.add_argument(
                "--" + key.replace("_", "-"), dest=key, default=None,
                help=f"[{section}] {key_help} (default: {default})",
            )
        if name == "extract":
            p.add_argument("frames_manifest", help="manifest whose records list frame images")
        if name == "verify":
            p.add_argument("sample", nargs="+", help=".emb file, frame directory, or image files")
            p.add_argument("--model", help="model file (default: <out>/model.tfam)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.perf_counter()
    try:
        overrides = {key: getattr(args, key) for _, key, *_ in pl.SCHEMA}
        cfg = pl.load_config(args.config, overrides)
        code = COMMANDS[args.command][0](cfg, args)
    except (LipPassError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _elapsed(start)
    return code


if __name__ == "__main__":
    sys.exit(main())
