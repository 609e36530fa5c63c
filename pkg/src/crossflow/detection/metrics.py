"""Greedy detection matching, 101-point interpolated AP and mAP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from crossflow.detection.boxes import Box, iou
from crossflow.errors import ContractError, ValidationError

MAP50 = (0.5,)
MAP5095 = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = tuple(i / 100 for i in range(101))


def _score_order(preds: Sequence[Box]) -> list[int]:
    # stable: equal scores keep input order
    return sorted(range(len(preds)), key=lambda i: -float(preds[i].score or 0.0))


def match_detections(preds: Sequence[Box], gts: Sequence[Box], iou_thresh: float) -> list[bool]:
    """TP flags for ``preds`` in descending-score order.

    Each prediction takes the highest-IoU unmatched ground truth of its
    class with IoU >= ``iou_thresh``; the first such gt wins IoU ties.
    """
    matched = [False] * len(gts)
    flags = []
    for i in _score_order(preds):
        p = preds[i]
        best, best_iou = -1, iou_thresh
        for j, g in enumerate(gts):
            if matched[j] or g.class_id != p.class_id:
                continue
            v = iou(p, g)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            matched[best] = True
        flags.append(best >= 0)
    return flags


def average_precision(flags: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP for score-ordered TP flags."""
    if n_gt < 1:
        raise ContractError("average precision needs at least one ground truth")
    if not len(flags):
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.int64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    picked = []
    for r in RECALL_POINTS:
        idx = np.searchsorted(recall, r, side="left")
        picked.append(float(envelope[idx]) if idx < len(recall) else 0.0)
    # fsum keeps the result independent of summation order
    return math.fsum(picked) / len(RECALL_POINTS)


@dataclass
class MapResult:
    map50: float
    map5095: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)
    absent_classes: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "map50": self.map50,
            "map5095": self.map5095,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "absent_classes": self.absent_classes,
        }


def _class_ap(preds_by_image, gts_by_image, image_ids, cls: int, thresh: float) -> float:
    scored: list[tuple[float, int, bool]] = []
    n_gt = 0
    order = 0
    for image_id in image_ids:
        gts = [g for g in gts_by_image[image_id] if g.class_id == cls]
        preds = [p for p in preds_by_image.get(image_id, []) if p.class_id == cls]
        n_gt += len(gts)
        flags = match_detections(preds, gts, thresh)
        for i, flag in zip(_score_order(preds), flags):
            scored.append((-float(preds[i].score or 0.0), order, flag))
            order += 1
    scored.sort(key=lambda s: (s[0], s[1]))
    return average_precision([s[2] for s in scored], n_gt)


def evaluate_map(
    preds_by_image: Mapping[str, Sequence[Box]],
    gts_by_image: Mapping[str, Sequence[Box]],
    classes: Sequence[int] | None = None,
) -> MapResult:
    """mAP@0.50 and mAP@[0.50:0.95], averaged over classes present in ground truth.

    Images are visited in sorted-id order so the result does not depend on
    mapping order; score ties across images resolve in that order.
    """
    unknown = sorted(set(preds_by_image) - set(gts_by_image))
    if unknown:
        raise ValidationError(f"predictions for unknown image ids: {unknown[:5]}")
    image_ids = sorted(gts_by_image)
    present = sorted({g.class_id for gs in gts_by_image.values() for g in gs})
    candidates = sorted(set(classes) if classes is not None else set(present))
    absent = [c for c in candidates if c not in present]
    per_class: dict[int, dict[str, float]] = {}
    for cls in present:
        aps = [_class_ap(preds_by_image, gts_by_image, image_ids, cls, t) for t in MAP5095]
        per_class[cls] = {"ap50": aps[0], "ap5095": float(np.mean(aps))}
    if not per_class:
        return MapResult(0.0, 0.0, {}, absent)
    return MapResult(
        float(np.mean([v["ap50"] for v in per_class.values()])),
        float(np.mean([v["ap5095"] for v in per_class.values()])),
        per_class,
        absent,
    )
