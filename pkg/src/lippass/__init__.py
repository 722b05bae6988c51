"""Lip-password verification: face-embedding sequences scored by a stacked LSTM."""

from .dataset import (
    DatasetSplit,
    FrameSequence,
    ImposterCategory,
    SampleRef,
    SplitPlan,
    UtteranceRecord,
    build_splits,
    categorize,
    generate_synthetic,
    load_manifest,
    preprocess_sequence,
)
from .features import (
    DeterministicProjection,
    EmbeddingIndex,
    EmbeddingSequence,
    PrecomputedLoader,
    cache_read,
    cache_write,
    cosine_similarity,
    extract_sequence,
    variation_report,
)
from .metrics import EvalReport, RocCurve, ScoredSample, auc, choose_threshold, eer, evaluate, roc_curve
from .seqmodel import ModelParams, backward, forward, init_params, load_model, predict, save_model
from .trainer import TrainConfig, adam_step, bce_loss, train

__version__ = "0.1.0"
