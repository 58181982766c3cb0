"""Training objectives (dice, cross entropy) and confusion-matrix based scoring.

The "global" F1 of a dataset is computed on the element-wise sum of its
per-record confusion matrices; that generally differs from the mean of the
per-record F1 values, so both aggregations exist side by side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor, make_node

STAGE_NAMES = ("W", "N1", "N2", "N3", "REM")

DICE_SMOOTH = 1e-7
LOG_CLAMP = 1e-12


class LabelError(ValueError):
    """A class label falls outside [0, K)."""


def _flatten_pair(y: Tensor, yhat: Tensor):
    if y.shape != yhat.shape:
        raise DimensionError(f"label shape {y.shape} != prediction shape {yhat.shape}")
    k = y.shape[-1]
    return y.data.reshape(-1, k), yhat.data.reshape(-1, k), k


def dice_loss(y: Tensor, yhat: Tensor, literal: bool = False) -> Tensor:
    """1 - mean per-class dice overlap, smoothed by 1e-7 in both terms.

    `literal` switches to the single-ratio variant that sums every class
    into one numerator and denominator before dividing; that form bottoms
    out at 1 - 1/K for a perfect prediction and exists for comparison only.
    """
    yd, pd, k = _flatten_pair(y, yhat)
    eps = DICE_SMOOTH
    if literal:
        num = float((yd * pd).sum())
        den = float((yd + pd).sum())
        loss = 1.0 - (2.0 / k) * (num + eps) / (den + eps)

        def backward(g):
            if yhat.requires_grad:
                gp = -(2.0 / k) * (yd * (den + eps) - (num + eps)) / (den + eps) ** 2
                yhat.accumulate_grad(float(g) * gp.reshape(yhat.shape))
    else:
        s = (yd * pd).sum(axis=0)
        num = 2.0 * s + eps
        den = yd.sum(axis=0) + pd.sum(axis=0) + eps
        loss = 1.0 - float((num / den).mean())

        def backward(g):
            if yhat.requires_grad:
                gp = -(1.0 / k) * (2.0 * yd * den - num) / den ** 2
                yhat.accumulate_grad(float(g) * gp.reshape(yhat.shape))

    return make_node(np.asarray(loss, dtype=yhat.dtype), [yhat], backward, name="dice_loss")


def cross_entropy(y: Tensor, yhat: Tensor) -> Tensor:
    """Mean negative log-likelihood of the true class, log clamped at 1e-12."""
    yd, pd, _ = _flatten_pair(y, yhat)
    n = yd.shape[0]
    p_true = (yd * pd).sum(axis=1)
    clamped = np.maximum(p_true, LOG_CLAMP)
    loss = -float(np.log(clamped).mean())

    def backward(g):
        if yhat.requires_grad:
            gp = np.zeros_like(pd)
            live = p_true > LOG_CLAMP
            gp[live] = -yd[live] / (p_true[live, None] * n)
            yhat.accumulate_grad(float(g) * gp.reshape(yhat.shape))

    return make_node(np.asarray(loss, dtype=yhat.dtype), [yhat], backward, name="cross_entropy")


# ---------------------------------------------------------------------------
# confusion matrices and F1


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are the true class, columns the predicted one."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DimensionError(f"confusion matrix must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be nonnegative")

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.k != other.k:
            raise DimensionError("cannot add confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)

    @classmethod
    def zeros(cls, k: int) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64))


def confusion(true, pred, k: int) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if true.shape != pred.shape:
        raise DimensionError(f"{true.shape[0]} true labels vs {pred.shape[0]} predictions")
    for name, arr in (("true", true), ("predicted", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            bad = arr[(arr < 0) | (arr >= k)][0]
            raise LabelError(f"{name} label {bad} outside [0, {k})")
    counts = np.bincount(true * k + pred, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts)


@dataclass
class F1Report:
    per_class: list
    mean: float
    zero_support: list = field(default_factory=list)


def f1_from_confusion(cm: ConfusionMatrix) -> F1Report:
    """Per-class F1 = 2TP / (2TP + FP + FN); absent classes score 0 and are flagged."""
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    per_class = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    zero = [int(i) for i in np.where(denom == 0)[0]]
    return F1Report(per_class=[float(v) for v in per_class],
                    mean=float(per_class.mean()),
                    zero_support=zero)


@dataclass
class PerRecordF1:
    """Spread of per-record F1 values, one entry per class."""

    mean: list
    std: list
    min: list
    max: list


def per_record_f1(records, ddof: int = 0) -> PerRecordF1:
    """Aggregate F1 across records; std is population (ddof=0) by default."""
    if not records:
        raise ValueError("per-record F1 needs at least one confusion matrix")
    scores = np.array([f1_from_confusion(cm).per_class for cm in records])
    return PerRecordF1(
        mean=[float(v) for v in scores.mean(axis=0)],
        std=[float(v) for v in scores.std(axis=0, ddof=ddof)],
        min=[float(v) for v in scores.min(axis=0)],
        max=[float(v) for v in scores.max(axis=0)],
    )


# ---------------------------------------------------------------------------
# export formats


def metrics_document(global_cm: ConfusionMatrix, per_record_cms=None,
                     class_names=STAGE_NAMES) -> dict:
    """The metrics.json structure: global F1 plus optional per-record spread."""
    rep = f1_from_confusion(global_cm)
    doc = {
        "global": {
            "per_class": {name: rep.per_class[i] for i, name in enumerate(class_names)},
            "mean": rep.mean,
            "zero_support": [class_names[i] for i in rep.zero_support],
        },
    }
    if per_record_cms:
        spread = per_record_f1(per_record_cms)
        doc["per_record"] = {
            name: {
                "mean": spread.mean[i],
                "std": spread.std[i],
                "min": spread.min[i],
                "max": spread.max[i],
            }
            for i, name in enumerate(class_names)
        }
    return doc


def write_confusion_csv(path, cm: ConfusionMatrix, class_names=STAGE_NAMES) -> None:
    lines = ["class," + ",".join(class_names)]
    for i, name in enumerate(class_names):
        lines.append(name + "," + ",".join(str(int(v)) for v in cm.counts[i]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, encoding="utf-8") as fh:
        rows = [line.strip().split(",") for line in fh if line.strip()]
    counts = [[int(v) for v in row[1:]] for row in rows[1:]]
    return ConfusionMatrix(np.asarray(counts))
