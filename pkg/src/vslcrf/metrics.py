"""F1 scores, classification rate and subject-independent fold splitting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import InvalidInputError


@dataclass
class EvalReport:
    per_class_f1: dict
    macro_f1: float
    classification_rate: float
    confusion: np.ndarray  # rows: truth, columns: prediction
    mode: str  # "frame_based" or "sequence_based"
    per_class_recall: dict = field(default_factory=dict)

    def to_text(self, prefix: str = "") -> str:
        """Flat ``key=value`` lines followed by the confusion matrix rows."""
        K = self.confusion.shape[0]
        lines = [f"{prefix}mode={self.mode}",
                 f"{prefix}units={int(self.confusion.sum())}",
                 f"{prefix}classification_rate={self.classification_rate:.6f}",
                 f"{prefix}macro_f1={self.macro_f1:.6f}"]
        for k in range(1, K + 1):
            lines.append(f"{prefix}f1.{k}={self.per_class_f1[k]:.6f}")
        for k in range(1, K + 1):
            lines.append(f"{prefix}recall.{k}={self.per_class_recall[k]:.6f}")
        for k in range(K):
            lines.append(f"{prefix}confusion.{k + 1}=" + " ".join(str(int(v)) for v in self.confusion[k]))
        return "\n".join(lines)


def confusion_matrix(pred, truth, K: Optional[int] = None) -> np.ndarray:
    pred = np.asarray(pred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"prediction/truth length mismatch: {pred.shape} vs {truth.shape}")
    if K is None:
        K = int(max(pred.max(initial=1), truth.max(initial=1)))
    cm = np.zeros((K, K), dtype=int)
    np.add.at(cm, (truth - 1, pred - 1), 1)
    return cm


def _report(cm: np.ndarray, mode: str) -> EvalReport:
    tp = np.diag(cm).astype(float)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        rec = np.where(true_tot > 0, tp / true_tot, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    K = cm.shape[0]
    total = cm.sum()
    rate = float(tp.sum() / total) if total else 0.0
    return EvalReport({k + 1: float(f1[k]) for k in range(K)}, float(f1.mean()), rate, cm, mode,
                      {k + 1: float(rec[k]) for k in range(K)})


def f1_frame(pred, truth, K: Optional[int] = None) -> EvalReport:
    return _report(confusion_matrix(pred, truth, K), "frame_based")


def f1_sequence_weighted(preds, truths, lengths, K: Optional[int] = None) -> EvalReport:
    """Sequence-level F1 with each sequence counted once per frame."""
    preds = np.asarray(preds, dtype=int)
    truths = np.asarray(truths, dtype=int)
    lengths = np.asarray(lengths, dtype=int)
    if not preds.shape == truths.shape == lengths.shape:
        raise InvalidInputError("preds, truths and lengths must be aligned")
    if np.any(lengths < 0):
        raise InvalidInputError("lengths must be non-negative")
    rep = _report(confusion_matrix(np.repeat(preds, lengths), np.repeat(truths, lengths), K),
                  "sequence_based")
    return rep


def classification_rate(preds, truths) -> float:
    preds = np.asarray(preds)
    truths = np.asarray(truths)
    if preds.shape != truths.shape:
        raise InvalidInputError("preds and truths must be aligned")
    if preds.size == 0:
        return 0.0
    return float(np.mean(preds == truths))


def per_class_rate(preds, truths, K: Optional[int] = None) -> dict:
    return f1_frame(preds, truths, K).per_class_recall


def group_kfold(groups, folds: int, seed: int = 0):
    """Split indices so that no group (subject) appears on both sides of a fold.

    Groups are shuffled with ``seed`` and then assigned, largest first, to the
    fold currently holding the fewest sequences.  Returns a list of
    ``(train_index, test_index)`` arrays.
    """
    groups = list(groups)
    if folds < 2:
        raise InvalidInputError("need at least 2 folds")
    uniq = sorted(set(groups))
    if len(uniq) < folds:
        raise InvalidInputError(f"only {len(uniq)} groups for {folds} folds")
    members = {g: [i for i, gi in enumerate(groups) if gi == g] for g in uniq}
    rng = np.random.default_rng(seed)
    order = [uniq[i] for i in rng.permutation(len(uniq))]
    # stable sort keeps the shuffled order among equally sized groups
    order.sort(key=lambda g: -len(members[g]))
    load = np.zeros(folds, dtype=int)
    assign = [[] for _ in range(folds)]
    for g in order:
        f = int(np.argmin(load))
        assign[f].append(g)
        load[f] += len(members[g])
    n = len(groups)
    out = []
    for f in range(folds):
        test = np.sort(np.array([i for g in assign[f] for i in members[g]], dtype=int))
        mask = np.ones(n, dtype=bool)
        mask[test] = False
        out.append((np.flatnonzero(mask), test))
    return out


def dataset_groups(data) -> list:
    """Subject ids, falling back to the sequence id."""
    return [s.subject_id if s.subject_id is not None else s.id for s in data.sequences]


def subset_average(per_class: dict, subset) -> tuple[float, float]:
    """Mean over a flagged class subset, and that mean pooled with each remaining class.

    The second value treats the subset average as one entry alongside the
    classes outside the subset, then averages those entries unweighted.
    """
    subset = sorted(set(int(k) for k in subset))
    missing = [k for k in subset if k not in per_class]
    if not subset or missing:
        raise InvalidInputError(f"subset classes {missing or subset} not in report")
    sub_mean = float(np.mean([per_class[k] for k in subset]))
    rest = [per_class[k] for k in sorted(per_class) if k not in subset]
    return sub_mean, float(np.mean([sub_mean] + rest))
