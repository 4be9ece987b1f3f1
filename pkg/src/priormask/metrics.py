"""Mask IoU and COCO-style average precision with greedy one-to-one matching."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.arange(101) / 100  # correctly rounded, so recall k/n hits r exactly when equal


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask_iou shape mismatch: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


@dataclass
class Prediction:
    image_id: int
    class_id: int
    score: float
    ious: dict[int, float]  # groundtruth index -> IoU, same image and class only


def average_precision(predictions: list[Prediction], n_gt: int, threshold: float) -> float:
    """AP for one class at one IoU threshold, 101-point interpolated.

    Predictions are visited by descending score (stable on ties); each claims the
    unclaimed groundtruth with the highest IoU at or above ``threshold``.
    """
    if n_gt == 0:
        return float("nan")
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i].score)
    claimed = set()
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        best, best_iou = None, threshold
        for g, iou in predictions[i].ious.items():
            if g not in claimed and iou >= best_iou:
                if best is None or iou > best_iou or (iou == best_iou and g < best):
                    best, best_iou = g, iou
        if best is not None:
            claimed.add(best)
            tp[rank] = 1
    if not len(order):
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in RECALL_POINTS:
        idx = np.searchsorted(recall, r, side="left")
        ap += envelope[idx] if idx < len(envelope) else 0.0
    return float(ap / len(RECALL_POINTS))


@dataclass
class EvalReport:
    split: str
    n_instances: int
    mean_iou: float
    class_iou: dict[int, float] = field(default_factory=dict)
    ap50: float = 0.0
    ap75: float = 0.0
    ap: float = 0.0
    class_ap: dict[int, float] = field(default_factory=dict)

    def rows(self, label: str = ""):
        """CSV rows: (label, split, class, metric, value); class 'all' for the means."""
        out = []
        for cid in sorted(self.class_iou):
            out.append((label, self.split, str(cid), "iou", self.class_iou[cid]))
            if cid in self.class_ap:
                out.append((label, self.split, str(cid), "ap", self.class_ap[cid]))
        out += [(label, self.split, "all", "iou", self.mean_iou), (label, self.split, "all", "ap50", self.ap50),
                (label, self.split, "all", "ap75", self.ap75), (label, self.split, "all", "ap", self.ap)]
        return out


def coco_summary(predictions: list[Prediction], gt_counts: dict[int, int]) -> tuple[float, float, float, dict]:
    """(AP50, AP75, AP averaged over 0.50:0.05:0.95, per-class AP) averaged over classes."""
    per_class = {}
    table = {}
    for cid, n_gt in sorted(gt_counts.items()):
        preds = [p for p in predictions if p.class_id == cid]
        table[cid] = {t: average_precision(preds, n_gt, t) for t in IOU_THRESHOLDS}
        per_class[cid] = float(np.mean(list(table[cid].values())))
    if not table:
        return 0.0, 0.0, 0.0, {}
    ap50 = float(np.mean([table[c][0.5] for c in table]))
    ap75 = float(np.mean([table[c][0.75] for c in table]))
    return ap50, ap75, float(np.mean(list(per_class.values()))), per_class
