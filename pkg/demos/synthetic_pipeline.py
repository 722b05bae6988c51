"""
Lip-password verification on a synthetic corpus
================================================

Walks the whole pipeline in-process: generate embeddings, split for one
enrolled (speaker, word) pair, train the stacked LSTM, and evaluate at a
threshold fitted on a calibration carve of the training set.

Run with ``python demos/synthetic_pipeline.py``; it takes a few seconds.
"""

import numpy as np

from lippass import dataset as ds
from lippass.features import EmbeddingIndex, EmbeddingSequence, variation_report
from lippass.metrics import ScoredSample, choose_threshold, evaluate, operating_threshold, roc_curve
from lippass.seqmodel import predict
from lippass.trainer import TrainConfig, train

###############################################################################
# A corpus of 4 speakers x 4 words x 6 takes.  Each embedding row is
# speaker vector + word trajectory at that timestep + small noise, so the
# genuine pair is separable by construction.
records = ds.generate_synthetic(4, 4, 6, T=20, D=32, noise_scale=0.05, seed=0)
index = EmbeddingIndex(records, timesteps=20, dim=32)
print(f"{len(records)} utterances, embedding shape {index[records[0].key].shape}")

###############################################################################
# How similar are the four kinds of pairs?  Mean frame-wise cosine, averaged
# over timesteps: the genuine row should dominate.
report = variation_report([EmbeddingSequence(index[r.key], r.key, "synthetic") for r in records], ("s0", "w0"))
for cat, row in zip(report.categories, report.mean):
    print(f"{cat.value:<28s}" + " ".join(f"{v:6.3f}" for v in row))

###############################################################################
# Enrol s0 saying w0.  Positives are replicated 11 times before the 70:30 cut.
split = ds.build_splits(records, ds.SplitPlan(target=("s0", "w0"), seed=0))
print({k: split.provenance[k] for k in ("working_positive", "oversampled_positive", "train", "test")})

###############################################################################
# Keep 15% of the training utterances aside to pick the threshold.
fit, calib = ds.calibration_split(split.train, 0.15, seed=1)
params, log = train(fit, index, TrainConfig(epochs=60, seed=2), init_seed=3, hidden=(16, 8, 8, 4))
print(f"loss {log.losses[0]:.4f} -> {log.losses[-1]:.4f}, train accuracy {log.epochs[-1].accuracy:.3f}")


def scored(samples):
    x = np.stack([index[s.utterance] for s in samples])
    probs = predict(params, x)
    return [ScoredSample(float(p), s.label, s.category) for p, s in zip(probs, samples)]


calib_scores = scored(calib)
curve = roc_curve([s.score for s in calib_scores], [s.label for s in calib_scores])
print(f"Youden threshold {choose_threshold(curve):.6f}, operating threshold {operating_threshold(curve):.6f}")

###############################################################################
# Test-set report at the operating threshold.
result = evaluate(scored(split.test), operating_threshold(curve))
print(f"accuracy {result.accuracy:.4f}  EER {result.eer:.4f}  AUC {result.auc:.4f}")
for cat, stats in result.categories.items():
    print(f"  {cat.value:<28s} n={stats.count:<4d} {stats.metric} {stats.value:.4f}")
