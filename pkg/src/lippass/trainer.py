"""Binary cross-entropy, Adam, and the mini-batch training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import DatasetSplit, SampleRef
from .errors import NonFiniteError, ShapeMismatchError, TrainingError
from .seqmodel import (
    DEFAULT_HIDDEN,
    READOUTS,
    ModelParams,
    backward,
    forward,
    init_params,
)

BCE_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 60
    batch_size: int = 75
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    gradient_clip_norm: float | None = None
    seed: int = 0
    readout: str = "last"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError(f"epochs must be an integer >= 1, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be an integer >= 1, got {self.batch_size}")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if not self.adam_epsilon > 0:
            raise ValueError(f"adam_epsilon must be > 0, got {self.adam_epsilon}")
        if self.gradient_clip_norm is not None and not self.gradient_clip_norm > 0:
            raise ValueError(f"gradient_clip_norm must be > 0, got {self.gradient_clip_norm}")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}, got {self.readout!r}")


def bce_loss(y, y_hat, eps: float = BCE_EPS) -> float:
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    y = np.asarray(y, dtype=np.float64).ravel()
    p = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.size != p.size:
        raise ValueError(f"length mismatch: {y.size} labels vs {p.size} predictions")
    if y.size == 0:
        raise ValueError("bce_loss of an empty batch is undefined")
    p = np.clip(p, eps, 1.0 - eps)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()],
                   [np.zeros_like(a) for a in params.arrays()])


def clip_by_global_norm(grads: ModelParams, max_norm: float) -> ModelParams:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.arrays()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return ModelParams.from_arrays([g * scale for g in grads.arrays()])


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, t: int, cfg: TrainConfig,
              learning_rate: float | None = None):
    """One bias-corrected Adam update.  Returns new (params, state); inputs are untouched.

    ``learning_rate`` overrides ``cfg.learning_rate`` for this step and may be
    0 (moments still advance, parameters stay put).
    """
    if t < 1:
        raise ValueError(f"Adam step index must be >= 1, got {t}")
    lr = cfg.learning_rate if learning_rate is None else float(learning_rate)
    if not lr >= 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(g_arrays) or len(state.m) != len(p_arrays):
        raise ShapeMismatchError("params, grads and optimizer state are not congruent")
    for name, p, g, m in zip(params.names(), p_arrays, g_arrays, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatchError(f"{name}: shapes {p.shape}, {g.shape}, {m.shape} differ")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    if cfg.gradient_clip_norm is not None:
        g_arrays = clip_by_global_norm(grads, cfg.gradient_clip_norm).arrays()

    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon))
        new_m.append(m)
        new_v.append(v)
    return ModelParams.from_arrays(new_p), AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    seconds: float = 0.0
    val_loss: float | None = None
    val_accuracy: float | None = None

    def to_dict(self, timing: bool = False) -> dict:
        d = {"epoch": self.epoch, "loss": self.loss, "accuracy": self.accuracy}
        if self.val_loss is not None:
            d["val_loss"] = self.val_loss
            d["val_accuracy"] = self.val_accuracy
        if timing:
            d["seconds"] = self.seconds
        return d


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    params: ModelParams | None = field(default=None, repr=False)

    @property
    def losses(self) -> list:
        return [e.loss for e in self.epochs]

    def write(self, path, timing: bool = False) -> None:
        """JSON lines, one per epoch.  Wall-time is omitted unless ``timing``."""
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.epochs:
                fh.write(json.dumps(e.to_dict(timing)) + "\n")


def stack_samples(samples: Sequence[SampleRef], embeddings: Mapping) -> tuple[np.ndarray, np.ndarray]:
    """(B, T, D) float64 inputs and (B,) labels for a list of sample refs."""
    if not samples:
        raise ValueError("no samples to stack")
    x = np.stack([np.asarray(embeddings[s.utterance], dtype=np.float64) for s in samples])
    y = np.array([s.label for s in samples], dtype=np.float64)
    return x, y


def _evaluate(params, x, y, readout, chunk=512):
    probs = np.concatenate(
        [forward(params, x[i:i + chunk], readout).probs for i in range(0, len(x), chunk)]
    )
    return bce_loss(y, probs), float(np.mean((probs >= 0.5) == (y == 1)))


def train(
    samples,
    embeddings: Mapping,
    cfg: TrainConfig,
    init_seed: int = 0,
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    validation: Sequence[SampleRef] | None = None,
    on_epoch: Callable[[int, ModelParams, EpochRecord], None] | None = None,
    init: ModelParams | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Fit the classifier on ``samples`` (a split or a list of sample refs).

    Each epoch reshuffles with a generator seeded by ``cfg.seed``; the
    reported loss and accuracy are accumulated from the forward passes made
    during the epoch, before each batch's update.
    """
    if isinstance(samples, DatasetSplit):
        samples = samples.train
    samples = list(samples)
    if not samples:
        raise ValueError("training set is empty")
    labels = {s.label for s in samples}
    if labels != {0, 1}:
        raise ValueError(f"training set must contain both classes, got labels {sorted(labels)}")
    x, y = stack_samples(samples, embeddings)
    if validation:
        x_val, y_val = stack_samples(list(validation), embeddings)

    params = init if init is not None else init_params((x.shape[2],) + tuple(hidden), init_seed)
    if params.dims[0] != x.shape[2]:
        raise ShapeMismatchError(f"model width {params.dims[0]} does not match data width {x.shape[2]}")
    state = AdamState.zeros(params)
    rng = np.random.default_rng(cfg.seed)
    log = TrainLog()
    step = 0
    n = len(samples)
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            trace = forward(params, xb, cfg.readout)
            batch_loss = bce_loss(yb, trace.probs)
            if not math.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss_sum += batch_loss * len(idx)
            correct += int(np.sum((trace.probs >= 0.5) == (yb == 1)))
            grads = backward(params, trace, xb, yb)
            step += 1
            try:
                params, state = adam_step(params, grads, state, step, cfg)
            except NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
        rec = EpochRecord(epoch, loss_sum / n, correct / n)
        if validation:
            rec.val_loss, rec.val_accuracy = _evaluate(params, x_val, y_val, cfg.readout)
        rec.seconds = time.perf_counter() - start
        log.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(epoch, params, rec)
    log.params = params
    return params, log
