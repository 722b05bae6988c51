"""Per-frame embedding extraction, the embedding cache format and cosine analysis.

Cache file layout (one utterance per file, ``<speaker>__<word>__<take>.emb``)::

    offset  size   field
    0       4      magic b"TFAE"
    4       4      format version, uint32 LE
    8       4      T (timesteps), uint32 LE
    12      4      D (feature width), uint32 LE
    16      4*T*D  float32 LE, row-major
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import (
    DEFAULT_SIDE,
    DEFAULT_TIMESTEPS,
    FrameSequence,
    ImposterCategory,
    UtteranceRecord,
    categorize,
    preprocess_sequence,
)
from .errors import (
    BadMagicError,
    CacheMissError,
    FormatError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

DEFAULT_DIM = 2622

CACHE_MAGIC = b"TFAE"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class EmbeddingSequence:
    values: np.ndarray = field(repr=False)  # (T, D) float32
    identity: tuple
    extractor_tag: str

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeMismatchError(f"embedding must be T x D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.identity}: embedding contains non-finite values")

    @property
    def shape(self):
        return self.values.shape


# ---------------------------------------------------------------------------
# Cache files
# ---------------------------------------------------------------------------


def cache_filename(identity: Sequence) -> str:
    speaker, word, take = identity[:3]
    return f"{speaker}__{word}__{int(take)}.emb"


def cache_write(path, values) -> None:
    """Write a T x D matrix as float32.  Float32 input round-trips bit for bit."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeMismatchError(f"expected a T x D matrix, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("refusing to cache non-finite values")
    T, D = values.shape
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, T, D))
        fh.write(payload)


def cache_read(path, timesteps: int | None = None, dim: int | None = None) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _CACHE_HEADER.size:
        raise TruncatedFileError(path, _CACHE_HEADER.size, len(data))
    magic, version, T, D = _CACHE_HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {CACHE_MAGIC!r}")
    if version != CACHE_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {CACHE_VERSION}")
    expected = _CACHE_HEADER.size + 4 * T * D
    if len(data) < expected:
        raise TruncatedFileError(path, expected, len(data))
    if len(data) > expected:
        raise FormatError(f"{path}: {len(data) - expected} trailing bytes after payload")
    if (timesteps is not None and T != timesteps) or (dim is not None and D != dim):
        raise ShapeMismatchError(
            f"{path}: cached shape ({T}, {D}) does not match configured ({timesteps}, {dim})"
        )
    values = np.frombuffer(data, dtype="<f4", count=T * D, offset=_CACHE_HEADER.size)
    return values.reshape(T, D).astype(np.float32)


# ---------------------------------------------------------------------------
# Extractor backends
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrecomputedLoader:
    """Reads embeddings computed elsewhere from a directory of cache files."""

    cache_dir: Path
    timesteps: int = DEFAULT_TIMESTEPS
    dim: int = DEFAULT_DIM

    @property
    def tag(self) -> str:
        return f"precomputed({Path(self.cache_dir).name})"

    def load(self, identity) -> np.ndarray:
        path = Path(self.cache_dir) / cache_filename(identity)
        if not path.is_file():
            raise CacheMissError(f"no cached embedding for {tuple(identity)} at {path}")
        return cache_read(path, self.timesteps, self.dim)

    def extract(self, seq: FrameSequence) -> np.ndarray:
        values = self.load(seq.identity)
        if values.shape[0] != len(seq):
            raise ShapeMismatchError(
                f"{seq.identity}: cache holds {values.shape[0]} steps, sequence has {len(seq)}"
            )
        return values


@dataclass(frozen=True)
class DeterministicProjection:
    """Seeded random-feature extractor standing in for a pretrained face network.

    Each frame is scaled to [-1, 1], average-pooled onto a ``grid`` x ``grid``
    mesh per channel, multiplied by a fixed Gaussian matrix and squashed with
    tanh.  The whole map is a pure function of the pixels and the parameters.
    """

    seed: int = 0
    side: int = DEFAULT_SIDE
    dim: int = DEFAULT_DIM
    grid: int = 16

    def __post_init__(self):
        if self.side < 1 or self.dim < 1 or self.grid < 1:
            raise ValueError("side, dim and grid must be >= 1")
        if self.side % self.grid:
            raise ValueError(f"side {self.side} is not divisible by grid {self.grid}")

    @property
    def tag(self) -> str:
        return f"projection-v1(seed={self.seed},side={self.side},grid={self.grid},dim={self.dim})"

    @cached_property
    def matrix(self) -> np.ndarray:
        fan_in = 3 * self.grid * self.grid
        rng = np.random.default_rng(self.seed)
        return rng.standard_normal((fan_in, self.dim)) / np.sqrt(fan_in)

    def embed_frames(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames)
        if frames.ndim == 3:
            frames = frames[None]
        n, h, w, c = frames.shape
        if (h, w, c) != (self.side, self.side, 3):
            raise ShapeMismatchError(
                f"frames are {h}x{w}x{c}, projection expects {self.side}x{self.side}x3"
            )
        x = frames.astype(np.float64) * (2.0 / 255.0) - 1.0
        b = self.side // self.grid
        pooled = x.reshape(n, self.grid, b, self.grid, b, 3).mean(axis=(2, 4))
        z = pooled.reshape(n, -1) @ self.matrix
        return np.tanh(z).astype(np.float32)

    def extract(self, seq: FrameSequence) -> np.ndarray:
        return self.embed_frames(seq.frames)


def extract_sequence(seq: FrameSequence, backend) -> EmbeddingSequence:
    values = backend.extract(seq)
    if values.shape[1] != backend.dim:
        raise ShapeMismatchError(f"backend produced width {values.shape[1]}, expected {backend.dim}")
    return EmbeddingSequence(values=values, identity=tuple(seq.identity), extractor_tag=backend.tag)


class EmbeddingIndex(Mapping):
    """Lazy map from utterance key to its T x D float32 embedding.

    Records may carry inline arrays, cache-file paths, or raw frames; the
    latter need an extractor ``backend``.
    """

    def __init__(self, records, timesteps=None, dim=None, backend=None, side=DEFAULT_SIDE):
        self._records = {r.key: r for r in records}
        self._cache = {}
        self.timesteps = timesteps
        self.dim = dim
        self.backend = backend
        self.side = side

    def __getitem__(self, key):
        key = tuple(key[:3])
        if key in self._cache:
            return self._cache[key]
        try:
            rec = self._records[key]
        except KeyError:
            raise CacheMissError(f"no record for utterance {key}") from None
        values = self._resolve(rec)
        if (self.timesteps is not None and values.shape[0] != self.timesteps) or (
            self.dim is not None and values.shape[1] != self.dim
        ):
            raise ShapeMismatchError(
                f"{key}: embedding shape {values.shape} does not match "
                f"configured ({self.timesteps}, {self.dim})"
            )
        self._cache[key] = values
        return values

    def _resolve(self, rec: UtteranceRecord) -> np.ndarray:
        if rec.has_inline_embedding:
            return np.asarray(rec.embedding, dtype=np.float32)
        if rec.embedding is not None:
            return cache_read(rec.embedding)
        if self.backend is None:
            raise CacheMissError(f"{rec.key}: frames given but no extractor configured")
        seq = preprocess_sequence(rec, self.timesteps or DEFAULT_TIMESTEPS, self.side)
        return extract_sequence(seq, self.backend).values

    def __iter__(self):
        return iter(self._records)

    def __len__(self):
        return len(self._records)

    def stack(self, keys) -> np.ndarray:
        return np.stack([self[k] for k in keys])


# ---------------------------------------------------------------------------
# Cosine analysis
# ---------------------------------------------------------------------------


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatchError(f"vector lengths differ: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class VariationReport:
    """Mean pairwise cosine similarity between category groups.

    ``per_timestep[i, j, t]`` averages the similarity of timestep-``t`` rows
    over every pair of distinct sequences with one from category ``i`` and
    one from category ``j``.  Cells with no pairs hold NaN.
    """

    categories: tuple
    counts: tuple
    per_timestep: np.ndarray = field(repr=False)

    @property
    def mean(self) -> np.ndarray:
        return self.per_timestep.mean(axis=2)

    def cell(self, a: ImposterCategory, b: ImposterCategory) -> float:
        i, j = self.categories.index(a), self.categories.index(b)
        return float(self.mean[i, j])


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine similarity is undefined for a zero-norm row")
    return x / norms


def variation_report(embeddings: Sequence[EmbeddingSequence], target) -> VariationReport:
    if len(embeddings) < 2:
        raise ValueError("variation_report needs at least two sequences")
    cats = tuple(ImposterCategory)
    groups = {c: [] for c in cats}
    for e in embeddings:
        groups[categorize(e.identity, target)].append(e.values.astype(np.float64))
    T = embeddings[0].values.shape[0]
    units = {c: _unit_rows(np.stack(g)) for c, g in groups.items() if g}
    out = np.full((len(cats), len(cats), T), np.nan)
    for i, ci in enumerate(cats):
        for j in range(i, len(cats)):
            cj = cats[j]
            if ci not in units or cj not in units:
                continue
            sims = np.einsum("atd,btd->tab", units[ci], units[cj])
            if i == j:
                n = sims.shape[1]
                if n < 2:
                    continue
                iu = np.triu_indices(n, k=1)
                vals = sims[:, iu[0], iu[1]].mean(axis=1)
            else:
                vals = sims.reshape(T, -1).mean(axis=1)
            out[i, j] = out[j, i] = np.clip(vals, -1.0, 1.0)
    counts = tuple(len(groups[c]) for c in cats)
    return VariationReport(categories=cats, counts=counts, per_timestep=out)
