"""Utterance manifests, frame preprocessing and the train/test split protocol.

A manifest is a JSON-lines file with one utterance per line::

    {"speaker": "s0", "word": "w3", "take": 2, "frames": ["f0.png", "f1.png"]}
    {"speaker": "s0", "word": "w3", "take": 3, "embedding": "cache/s0__w3__3.emb"}

Relative paths are resolved against the manifest's directory.  ``bbox`` is
optional and is either one ``[x, y, w, h]`` rectangle shared by every frame or
a list with one rectangle per frame.
"""

from __future__ import annotations

import enum
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import DuplicateKeyError, FrameDecodeError, ManifestError, SplitError

DEFAULT_TIMESTEPS = 20
DEFAULT_SIDE = 224
WHITE = 255


class ImposterCategory(str, enum.Enum):
    GENUINE = "Genuine"
    SAME_PERSON_WRONG_WORD = "SamePersonWrongWord"
    DIFFERENT_PERSON_SAME_WORD = "DifferentPersonSameWord"
    DIFFERENT_PERSON_WRONG_WORD = "DifferentPersonWrongWord"

    @property
    def label(self) -> int:
        return int(self is ImposterCategory.GENUINE)


def categorize(identity: Sequence, target: Sequence) -> ImposterCategory:
    """Classify an utterance relative to the enrolled (speaker, word) pair.

    Only the first two entries of ``identity`` are used, so a full
    (speaker, word, take) key is accepted as well.
    """
    same_speaker = identity[0] == target[0]
    same_word = identity[1] == target[1]
    if same_speaker and same_word:
        return ImposterCategory.GENUINE
    if same_speaker:
        return ImposterCategory.SAME_PERSON_WRONG_WORD
    if same_word:
        return ImposterCategory.DIFFERENT_PERSON_SAME_WORD
    return ImposterCategory.DIFFERENT_PERSON_WRONG_WORD


# ---------------------------------------------------------------------------
# Records and manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UtteranceRecord:
    """One spoken utterance: either a list of frame images or an embedding.

    ``embedding`` holds a path to a cache file or, for synthetic data, the
    T x D array itself.
    """

    speaker_id: str
    word_id: str
    take_id: int
    frames: tuple = ()
    embedding: object = field(default=None, compare=False, repr=False)
    bbox: tuple | None = None

    def __post_init__(self):
        if not self.frames and self.embedding is None:
            raise ValueError(f"{self.key}: record has neither frames nor embedding")
        if not isinstance(self.take_id, (int, np.integer)) or self.take_id < 0:
            raise ValueError(f"take must be a non-negative integer, got {self.take_id!r}")
        if self.bbox is not None and len(self.bbox) != len(self.frames):
            raise ValueError(f"{self.key}: {len(self.bbox)} boxes for {len(self.frames)} frames")

    @property
    def key(self) -> tuple:
        return (self.speaker_id, self.word_id, int(self.take_id))

    @property
    def has_inline_embedding(self) -> bool:
        return isinstance(self.embedding, np.ndarray)


def _parse_bbox(raw, n_frames):
    if raw is None:
        return None
    if len(raw) == 4 and all(isinstance(v, (int, float)) for v in raw):
        raw = [raw] * n_frames
    boxes = []
    for box in raw:
        if len(box) != 4:
            raise ValueError(f"bbox must have 4 entries (x, y, w, h), got {box!r}")
        x, y, w, h = (int(v) for v in box)
        if x < 0 or y < 0 or w <= 0 or h <= 0:
            raise ValueError(f"invalid bbox {box!r}")
        boxes.append((x, y, w, h))
    return tuple(boxes)


def _record_from_json(obj: dict, base: Path) -> UtteranceRecord:
    for name in ("speaker", "word", "take"):
        if name not in obj:
            raise ValueError(f"missing field {name!r}")
    take = obj["take"]
    if isinstance(take, bool) or not isinstance(take, int):
        raise ValueError(f"take must be an integer, got {take!r}")
    frames = obj.get("frames")
    embedding = obj.get("embedding")
    if frames is None and embedding is None:
        raise ValueError("record needs 'frames' or 'embedding'")
    if frames is not None:
        if not isinstance(frames, list) or not frames:
            raise ValueError("'frames' must be a non-empty list of paths")
        frames = tuple(str(base / f) for f in frames)
    else:
        frames = ()
    if embedding is not None:
        embedding = str(base / embedding)
    bbox = _parse_bbox(obj.get("bbox"), len(frames))
    return UtteranceRecord(
        speaker_id=str(obj["speaker"]),
        word_id=str(obj["word"]),
        take_id=take,
        frames=frames,
        embedding=embedding,
        bbox=bbox,
    )


def load_manifest(path) -> list[UtteranceRecord]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    records = []
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("expected a JSON object")
                rec = _record_from_json(obj, base)
            except (ValueError, TypeError) as exc:
                raise ManifestError(str(exc), line=lineno) from exc
            if rec.key in seen:
                raise DuplicateKeyError(
                    f"duplicate key {rec.key} (first seen on line {seen[rec.key]})",
                    line=lineno,
                )
            seen[rec.key] = lineno
            records.append(rec)
    return records


def write_manifest(records: Iterable[UtteranceRecord], path) -> None:
    """Write records as JSON lines; paths are stored relative to the manifest."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {"speaker": rec.speaker_id, "word": rec.word_id, "take": int(rec.take_id)}
            if rec.frames:
                obj["frames"] = [rel(f) for f in rec.frames]
            if rec.embedding is not None:
                if rec.has_inline_embedding:
                    raise ValueError(f"{rec.key}: inline embeddings must be cached before writing")
                obj["embedding"] = rel(rec.embedding)
            if rec.bbox is not None:
                obj["bbox"] = [list(b) for b in rec.bbox]
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# Frame preprocessing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameSequence:
    frames: np.ndarray = field(repr=False)  # (T, side, side, 3) uint8
    identity: tuple
    source_indices: tuple = ()
    n_padded: int = 0

    def __len__(self):
        return self.frames.shape[0]


def sample_indices(n: int, target_len: int) -> list[int]:
    """Source frame indices kept for an ``n``-frame clip.

    Clips longer than ``target_len`` are thinned at an even rate; shorter
    clips keep every frame (padding happens elsewhere).
    """
    if n < 1 or target_len < 1:
        raise ValueError("frame count and target length must be >= 1")
    if n <= target_len:
        return list(range(n))
    return [i * n // target_len for i in range(target_len)]


_GRAYSCALE_MODES = {"1", "L", "LA", "La", "I", "I;16", "I;16B", "I;16L", "F"}


def decode_frame(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode in _GRAYSCALE_MODES:
                raise FrameDecodeError(f"{path}: grayscale image (mode {img.mode}) not accepted")
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FrameDecodeError:
        raise
    except (OSError, ValueError) as exc:
        raise FrameDecodeError(f"{path}: cannot decode image ({exc})") from exc
    return arr


def _check_rgb(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise FrameDecodeError(f"expected an H x W x 3 RGB frame, got shape {frame.shape}")
    if frame.dtype != np.uint8:
        raise FrameDecodeError(f"expected 8-bit channels, got {frame.dtype}")
    return frame


def _crop_resize(frame: np.ndarray, bbox, side: int) -> np.ndarray:
    if bbox is not None:
        x, y, w, h = bbox
        frame = frame[y:y + h, x:x + w]
        if frame.shape[0] == 0 or frame.shape[1] == 0:
            raise FrameDecodeError(f"bbox {bbox} lies outside the frame")
    if frame.shape[0] == side and frame.shape[1] == side:
        return np.ascontiguousarray(frame)
    img = Image.fromarray(frame, mode="RGB")
    return np.asarray(img.resize((side, side), Image.BILINEAR), dtype=np.uint8)


def preprocess_frames(
    frames: Sequence[np.ndarray],
    target_len: int = DEFAULT_TIMESTEPS,
    side: int = DEFAULT_SIDE,
    bboxes: Sequence | None = None,
    identity: tuple = (),
) -> FrameSequence:
    """Thin or pad decoded frames to ``target_len`` and resize to ``side``.

    Padding frames are pure white and go at the end of the clip.
    """
    if target_len < 1 or side < 1:
        raise ValueError("target_len and side must be >= 1")
    if len(frames) == 0:
        raise FrameDecodeError(f"{identity}: zero frames")
    keep = sample_indices(len(frames), target_len)
    out = np.full((target_len, side, side, 3), WHITE, dtype=np.uint8)
    for row, idx in enumerate(keep):
        box = bboxes[idx] if bboxes is not None else None
        out[row] = _crop_resize(_check_rgb(frames[idx]), box, side)
    return FrameSequence(
        frames=out,
        identity=identity,
        source_indices=tuple(keep),
        n_padded=target_len - len(keep),
    )


def preprocess_sequence(
    record: UtteranceRecord, target_len: int = DEFAULT_TIMESTEPS, side: int = DEFAULT_SIDE
) -> FrameSequence:
    if not record.frames:
        raise FrameDecodeError(f"{record.key}: zero frames")
    keep = sample_indices(len(record.frames), target_len)
    # Only frames that survive thinning are decoded; skipped slots stay None.
    decoded = {i: decode_frame(record.frames[i]) for i in keep}
    frames = [decoded.get(i) for i in range(len(record.frames))]
    return preprocess_frames(frames, target_len, side, record.bbox, identity=record.key)


# ---------------------------------------------------------------------------
# Split protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    target: tuple
    unseen_speakers: frozenset = frozenset()
    heldout_words: Mapping = field(default_factory=dict)
    train_fraction: float = 0.7
    oversample_factor: int = 11
    seed: int = 0
    stratify: bool = False

    def __post_init__(self):
        object.__setattr__(self, "target", (str(self.target[0]), str(self.target[1])))
        object.__setattr__(self, "unseen_speakers", frozenset(self.unseen_speakers))
        object.__setattr__(
            self,
            "heldout_words",
            {str(k): frozenset(v) for k, v in dict(self.heldout_words).items()},
        )
        speaker, word = self.target
        if speaker in self.unseen_speakers:
            raise ValueError(f"target speaker {speaker!r} is in unseen_speakers")
        if word in self.heldout_words.get(speaker, ()):
            raise ValueError(f"target word {word!r} is held out for the target speaker")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if int(self.oversample_factor) != self.oversample_factor or self.oversample_factor < 1:
            raise ValueError(f"oversample_factor must be an integer >= 1, got {self.oversample_factor}")

    def to_dict(self) -> dict:
        return {
            "target": list(self.target),
            "unseen_speakers": sorted(self.unseen_speakers),
            "heldout_words": {k: sorted(v) for k, v in sorted(self.heldout_words.items())},
            "train_fraction": self.train_fraction,
            "oversample_factor": int(self.oversample_factor),
            "seed": int(self.seed),
            "stratify": bool(self.stratify),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(
            target=tuple(d["target"]),
            unseen_speakers=frozenset(d.get("unseen_speakers", ())),
            heldout_words={k: frozenset(v) for k, v in d.get("heldout_words", {}).items()},
            train_fraction=d.get("train_fraction", 0.7),
            oversample_factor=d.get("oversample_factor", 11),
            seed=d.get("seed", 0),
            stratify=d.get("stratify", False),
        )


@dataclass(frozen=True)
class SampleRef:
    """A labelled reference to one utterance; ``replica`` > 0 marks oversampled copies."""

    speaker_id: str
    word_id: str
    take_id: int
    replica: int
    label: int
    category: ImposterCategory

    @property
    def utterance(self) -> tuple:
        return (self.speaker_id, self.word_id, self.take_id)

    @property
    def key(self) -> tuple:
        return (self.speaker_id, self.word_id, self.take_id, self.replica)

    def to_dict(self) -> dict:
        return {
            "speaker": self.speaker_id,
            "word": self.word_id,
            "take": self.take_id,
            "replica": self.replica,
            "label": self.label,
            "category": self.category.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRef":
        return cls(d["speaker"], d["word"], int(d["take"]), int(d["replica"]),
                   int(d["label"]), ImposterCategory(d["category"]))


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    test: tuple
    provenance: dict
    plan: SplitPlan | None = None

    def to_dict(self) -> dict:
        return {
            "plan": self.plan.to_dict() if self.plan is not None else None,
            "provenance": dict(self.provenance),
            "train": [s.to_dict() for s in self.train],
            "test": [s.to_dict() for s in self.test],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        plan = SplitPlan.from_dict(d["plan"]) if d.get("plan") else None
        return cls(
            train=tuple(SampleRef.from_dict(s) for s in d["train"]),
            test=tuple(SampleRef.from_dict(s) for s in d["test"]),
            provenance=dict(d["provenance"]),
            plan=plan,
        )


def save_split(split: DatasetSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(split.to_dict(), fh, indent=1)
        fh.write("\n")


def load_split(path) -> DatasetSplit:
    with open(path, encoding="utf-8") as fh:
        return DatasetSplit.from_dict(json.load(fh))


def _ref(key, replica, target) -> SampleRef:
    cat = categorize(key, target)
    return SampleRef(key[0], key[1], key[2], replica, cat.label, cat)


def train_size(n: int, fraction: float) -> int:
    # round() guards against products like 0.7 * 450 = 314.999...
    return math.floor(round(fraction * n, 9))


def build_splits(records: Sequence[UtteranceRecord], plan: SplitPlan) -> DatasetSplit:
    """Hold out unseen speakers and words, oversample positives, then split.

    The working pool (everything not held out) is labelled against the
    target pair, positives are replicated ``oversample_factor`` times, the
    pool is shuffled with ``plan.seed`` and cut at ``train_fraction``.  Both
    holdout pools are appended to the test set as negatives.
    """
    target = plan.target
    keys = sorted(r.key for r in records)
    if len(set(keys)) != len(keys):
        raise SplitError("records contain duplicate (speaker, word, take) keys")

    unseen, heldout, working = [], [], []
    for key in keys:
        speaker, word, _ = key
        if speaker in plan.unseen_speakers:
            unseen.append(key)
        elif word in plan.heldout_words.get(speaker, ()):
            heldout.append(key)
        else:
            working.append(key)

    positives = [k for k in working if (k[0], k[1]) == target]
    negatives = [k for k in working if (k[0], k[1]) != target]
    if not positives:
        raise SplitError(f"target pair {target} is absent from the working pool")
    if not negatives:
        raise SplitError("working pool has no negative samples")

    factor = int(plan.oversample_factor)
    pos_refs = [_ref(k, r, target) for k in positives for r in range(factor)]
    neg_refs = [_ref(k, 0, target) for k in negatives]

    rng = np.random.default_rng(plan.seed)
    if plan.stratify:
        train, test = [], []
        for group in (pos_refs, neg_refs):
            order = rng.permutation(len(group))
            cut = train_size(len(group), plan.train_fraction)
            train += [group[i] for i in order[:cut]]
            test += [group[i] for i in order[cut:]]
        train = [train[i] for i in rng.permutation(len(train))]
        test = [test[i] for i in rng.permutation(len(test))]
    else:
        pool = pos_refs + neg_refs
        order = rng.permutation(len(pool))
        cut = train_size(len(pool), plan.train_fraction)
        train = [pool[i] for i in order[:cut]]
        test = [pool[i] for i in order[cut:]]

    test += [_ref(k, 0, target) for k in unseen]
    test += [_ref(k, 0, target) for k in heldout]

    provenance = {
        "records": len(keys),
        "unseen_holdout": len(unseen),
        "heldout_word": len(heldout),
        "working": len(working),
        "working_positive": len(positives),
        "oversampled_positive": len(pos_refs),
        "working_oversampled": len(pos_refs) + len(neg_refs),
        "train": len(train),
        "test": len(test),
    }
    return DatasetSplit(train=tuple(train), test=tuple(test), provenance=provenance, plan=plan)


def calibration_split(
    samples: Sequence[SampleRef], fraction: float, seed: int
) -> tuple[list, list]:
    """Carve a threshold-calibration subset out of a training list.

    Whole utterances move together (all replicas of one take land on the
    same side) and each class contributes ``fraction`` of its utterances,
    at least one when the class has two or more.
    Returns (fit, calibration), each in the original order.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"calibration fraction must lie in [0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    chosen = set()
    if fraction > 0:
        for label in (1, 0):
            utts = sorted({s.utterance for s in samples if s.label == label})
            k = math.floor(round(fraction * len(utts), 9))
            if k == 0 and len(utts) >= 2:
                k = 1
            chosen.update(utts[i] for i in rng.permutation(len(utts))[:k])
    fit = [s for s in samples if s.utterance not in chosen]
    calib = [s for s in samples if s.utterance in chosen]
    return fit, calib


def labeling_summary(
    records: Sequence[UtteranceRecord], target: tuple, oversample_factor: int = 11
) -> dict:
    """Category counts over the whole corpus, without any holdouts.

    Reporting view only; :func:`build_splits` is what training uses.
    """
    counts = Counter(categorize(r.key, target) for r in records)
    out = {cat.value: counts.get(cat, 0) for cat in ImposterCategory}
    out["GenuineOversampled"] = counts.get(ImposterCategory.GENUINE, 0) * int(oversample_factor)
    return out


def select_holdouts(
    speakers: Iterable[str],
    words: Iterable[str],
    n_unseen: int,
    n_heldout: int,
    seed: int,
    exclude_speaker: str | None = None,
    exclude_word: str | None = None,
) -> tuple[frozenset, dict]:
    """Pick unseen speakers and a shared set of held-out words at random.

    The same word set is held out for every remaining speaker.
    """
    speakers = sorted(set(speakers))
    words = sorted(set(words))
    rng = np.random.default_rng(seed)
    spk_pool = [s for s in speakers if s != exclude_speaker]
    word_pool = [w for w in words if w != exclude_word]
    if n_unseen > len(spk_pool) or n_heldout > len(word_pool):
        raise SplitError(
            f"cannot hold out {n_unseen} speakers / {n_heldout} words from "
            f"{len(spk_pool)} / {len(word_pool)} candidates"
        )
    unseen = frozenset(spk_pool[i] for i in rng.permutation(len(spk_pool))[:n_unseen])
    held = frozenset(word_pool[i] for i in rng.permutation(len(word_pool))[:n_heldout])
    return unseen, {s: held for s in speakers if s not in unseen and held}


def eligible_pairs(records: Sequence[UtteranceRecord], unseen: frozenset, heldout: Mapping) -> list:
    """All (speaker, word) pairs that remain in the working pool."""
    pairs = {
        (r.speaker_id, r.word_id)
        for r in records
        if r.speaker_id not in unseen and r.word_id not in heldout.get(r.speaker_id, ())
    }
    return sorted(pairs)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def generate_synthetic(
    num_speakers: int,
    num_words: int,
    num_takes: int,
    T: int = DEFAULT_TIMESTEPS,
    D: int = 2622,
    noise_scale: float = 0.1,
    seed: int = 0,
) -> list[UtteranceRecord]:
    """Seeded stand-in corpus with inline float32 embeddings.

    Every take of speaker ``s`` saying word ``w`` is
    ``speaker[s] + trajectory[w][t] + noise``, with standard normal
    signatures and Gaussian noise of the given scale.
    """
    for name, v in (("num_speakers", num_speakers), ("num_words", num_words),
                    ("num_takes", num_takes), ("T", T), ("D", D)):
        if int(v) < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    if noise_scale < 0:
        raise ValueError(f"noise_scale must be >= 0, got {noise_scale}")
    rng = np.random.default_rng(seed)
    speaker_vecs = rng.standard_normal((num_speakers, D))
    trajectories = rng.standard_normal((num_words, T, D))
    records = []
    for s in range(num_speakers):
        for w in range(num_words):
            base = speaker_vecs[s] + trajectories[w]
            for k in range(num_takes):
                noise = rng.standard_normal((T, D)) * noise_scale
                values = (base + noise).astype(np.float32)
                records.append(UtteranceRecord(f"s{s}", f"w{w}", k, embedding=values))
    return records
