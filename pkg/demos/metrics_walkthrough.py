"""
Reading a verification ROC
==========================

Confusion counts, the population-level FAR/FRR, the ROC, equal error rate,
AUC, and Youden's threshold on a handful of hand-made scores.
"""

from lippass.metrics import (
    accuracy,
    auc,
    choose_threshold,
    confusion,
    eer,
    far_total,
    frr_total,
    roc_curve,
    sensitivity,
    specificity,
)

scores = [0.8, 0.4, 0.6, 0.2]
labels = [1, 1, 0, 0]

###############################################################################
# Accept iff score >= threshold.
c = confusion(scores, labels, 0.5)
print(c.to_dict())
print(f"sensitivity {sensitivity(c)}  specificity {specificity(c)}  accuracy {accuracy(c)}")

# FAR and FRR here divide by every sample, so together they are 1 - accuracy.
print(f"far_total {far_total(c)}  frr_total {frr_total(c)}")

###############################################################################
# One ROC point per distinct score, plus one above the top and one below
# the bottom so the curve runs from (0, 0) to (1, 1).
curve = roc_curve(scores, labels)
for t, fpr, tpr in curve.points():
    print(f"threshold {t!r:<20}  FPR {fpr:.2f}  TPR {tpr:.2f}")

rate, thr = eer(curve)
print(f"EER {rate} at threshold {thr}")
print(f"AUC {auc(curve)}  (3 of 4 positive-negative pairs ranked correctly)")
print(f"Youden threshold {choose_threshold(curve)}")
