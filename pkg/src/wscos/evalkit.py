"""Segmentation metrics: MAE, adaptive F-measure and IoU."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError

BETA2 = 0.3


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def mae(pred, gt):
    pred, gt = _pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def adaptive_fbeta(pred, gt, beta2=BETA2):
    """F-measure after binarising at min(1, 2 * mean(pred)).

    Pixels at exactly zero never count as positive, so an all-zero
    prediction scores 0.
    """
    pred, gt = _pair(pred, gt)
    fg = gt > 0.5
    if not fg.any():
        raise ContractError("adaptive F-measure needs at least one foreground pixel")
    thr = min(1.0, 2.0 * pred.mean())
    pos = (pred >= thr) & (pred > 0)
    tp = float((pos & fg).sum())
    precision = tp / pos.sum() if pos.any() else 0.0
    recall = tp / fg.sum()
    denom = beta2 * precision + recall
    if denom == 0:
        return 0.0
    return float((1 + beta2) * precision * recall / denom)


def iou_score(pred, gt, threshold=0.5):
    pred, gt = _pair(pred, gt)
    p = pred > threshold
    g = gt > 0.5
    union = (p | g).sum()
    if union == 0:
        return 1.0
    return float((p & g).sum() / union)


@dataclass
class MetricReport:
    mae: float
    f_beta: float
    iou: float
    per_image: list = field(default_factory=list)  # (id, mae, f_beta, iou)

    def to_dict(self):
        return asdict(self)

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def table(self):
        lines = [f"{'image':<16}{'MAE':>10}{'F_beta':>10}{'IoU':>10}"]
        for image_id, m, f, i in self.per_image:
            lines.append(f"{image_id:<16}{m:>10.4f}{f:>10.4f}{i:>10.4f}")
        lines.append(f"{'mean':<16}{self.mae:>10.4f}{self.f_beta:>10.4f}{self.iou:>10.4f}")
        return "\n".join(lines)


def evaluate(preds, gts, ids=None):
    """Aggregate metrics over paired predictions and binary ground truths."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts) or not preds:
        raise ContractError("need equally many (and at least one) predictions and ground truths")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(preds))]
    rows = [(str(i), mae(p, g), adaptive_fbeta(p, g), iou_score(p, g))
            for i, p, g in zip(ids, preds, gts)]
    arr = np.array([r[1:] for r in rows])
    m, f, i = arr.mean(axis=0)
    return MetricReport(mae=float(m), f_beta=float(f), iou=float(i), per_image=rows)
