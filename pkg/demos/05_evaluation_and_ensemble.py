"""Evaluation reports and three-model ensembles: confusion matrices,
classwise metrics, ROC/AUC, and the two combiners.

Run: python3 demos/05_evaluation_and_ensemble.py
"""

import numpy as np

from voxcnn.ensemble import ensemble_average, ensemble_vote
from voxcnn.metrics import (
    CLASSES,
    auc,
    classwise_metrics,
    confusion_matrix,
    misclassification_histogram,
    overall_accuracy,
    render_confusion,
    roc_curve,
)

rng = np.random.default_rng(3)

print("== a synthetic 60-sample evaluation ==")
# Scores lean toward the true class but with enough spread to make errors.
labels = [i % 3 for i in range(60)]
probs = []
for y in labels:
    raw = rng.uniform(0.05, 0.45, size=3)
    raw[y] += 0.25
    probs.append(raw / raw.sum())
probs = np.array(probs)
preds = [int(np.argmax(p)) for p in probs]

cm = confusion_matrix(preds, labels)
print(render_confusion(cm))
print(f"overall accuracy {overall_accuracy(cm):.3f}")

print()
print("== classwise metrics (rows AD/MCI/CN) ==")
for cname, row in classwise_metrics(cm).items():
    cells = ", ".join(f"{k} {v:.3f}" if v is not None else f"{k} NA"
                      for k, v in row.items())
    print(f"  {cname}: {cells}")

print()
print("== one-vs-rest ROC ==")
for c, cname in enumerate(CLASSES):
    curve = roc_curve(probs[:, c], labels, c)
    print(f"  AUC {cname}: {auc(curve):.4f} ({len(curve.thresholds)} "
          "thresholds)")

print()
print("== where errors go ==")
for true_name, row in misclassification_histogram(preds, labels).items():
    if not row:
        print(f"  {true_name}: no misclassifications")
        continue
    split = ", ".join(f"{pct:.0f}% to {p}" for p, pct in row.items())
    print(f"  {true_name}: {split}")

print()
print("== combining three models ==")
member_probs = [
    np.array([0.6, 0.3, 0.1]),
    np.array([0.2, 0.5, 0.3]),
    np.array([0.1, 0.2, 0.7]),
]
avg = ensemble_average(member_probs)
vote = ensemble_vote(member_probs)
print(f"member argmaxes disagree three ways: "
      f"{[int(np.argmax(p)) for p in member_probs]}")
print(f"average combiner: mean {np.round(avg.probs, 3)} -> "
      f"{CLASSES[avg.class_id]}")
print(f"vote combiner: no majority, falls back to the single highest "
      f"probability -> {CLASSES[vote.class_id]} "
      f"(by_probability={vote.by_probability})")
