"""Triplet recall@K for the PredCls, SGCls and SGGen protocols.

Recall is computed per image as the fraction of ground-truth triples hit
by at least one of the top-K predicted tuples, then averaged over images
that have ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

MODES = ("predcls", "sgcls", "sggen")
IOU_MATCH = 0.5

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class ImagePrediction:
    """Ranked ``(subj, pred, obj, score)`` tuples with the labels/boxes they refer to."""

    tuples: tuple[tuple[int, int, int, float], ...]
    labels: tuple[int, ...] | None = None
    boxes: tuple[Box, ...] | None = None


@dataclass(frozen=True)
class ImageTruth:
    triples: tuple[tuple[int, int, int], ...]
    labels: tuple[int, ...] | None = None
    boxes: tuple[Box, ...] | None = None


@dataclass
class EvalResult:
    mode: str
    ks: tuple[int, ...]
    per_image: dict[int, list[float | None]] = field(default_factory=dict)
    mean: dict[int, float] = field(default_factory=dict)
    n_gt: int = 0
    matched: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"mode": self.mode, "ks": list(self.ks), "gt_triples": self.n_gt}
        for k in self.ks:
            out[f"recall@{k}"] = self.mean[k]
            out[f"matched@{k}"] = self.matched[k]
        out["per_image"] = {f"recall@{k}": self.per_image[k] for k in self.ks}
        return out


def exact_iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _matches(mode: str, tup, gt, pred: ImagePrediction, truth: ImageTruth) -> bool:
    i, p, j = tup[:3]
    a, q, b = gt
    if p != q:
        return False
    if mode == "predcls":
        return i == a and j == b
    if pred.labels is None or truth.labels is None:
        raise ValueError(f"{mode} matching needs predicted and ground-truth labels")
    if pred.labels[i] != truth.labels[a] or pred.labels[j] != truth.labels[b]:
        return False
    if mode == "sgcls":
        return i == a and j == b
    if pred.boxes is None or truth.boxes is None:
        raise ValueError("sggen matching needs predicted and ground-truth boxes")
    return exact_iou(pred.boxes[i], truth.boxes[a]) >= IOU_MATCH and exact_iou(pred.boxes[j], truth.boxes[b]) >= IOU_MATCH


def image_recall(pred: ImagePrediction, truth: ImageTruth, k: int, mode: str) -> tuple[int, int]:
    """(matched GT triples, total GT triples) for one image."""
    gts = list(dict.fromkeys(truth.triples))
    top = pred.tuples[:k]
    hit = 0
    for gt in gts:
        if any(_matches(mode, t, gt, pred, truth) for t in top):
            hit += 1
    return hit, len(gts)


def recall_at_k(predictions: Sequence[ImagePrediction], truths: Sequence[ImageTruth],
                ks: int | Sequence[int], mode: str = "predcls") -> EvalResult:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    ks = (ks,) if isinstance(ks, int) else tuple(ks)
    if any(k <= 0 for k in ks):
        raise ValueError("K must be positive")
    if len(predictions) != len(truths):
        raise ValueError("need one prediction per ground-truth image")
    result = EvalResult(mode, ks)
    result.n_gt = sum(len(set(t.triples)) for t in truths)
    for k in ks:
        per, total = [], 0
        for pred, truth in zip(predictions, truths):
            hit, n = image_recall(pred, truth, k, mode)
            per.append(hit / n if n else None)
            total += hit
        valid = [r for r in per if r is not None]
        result.per_image[k] = per
        result.mean[k] = math.fsum(valid) / len(valid) if valid else 0.0
        result.matched[k] = total
    return result
