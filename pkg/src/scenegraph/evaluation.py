"""Triplet recall (PredCls / PhrCls / SGGen) and detection metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box, iou

TASKS = ("PredCls", "PhrCls", "SGGen")
IOU_MATCH = 0.5


@dataclass(frozen=True)
class TripletPrediction:
    subject_box: Box
    subject_label: int
    predicate: int
    object_box: Box
    object_label: int
    score: float
    subject_idx: int = 0
    object_idx: int = 0


@dataclass(frozen=True)
class TripletTruth:
    subject_box: Box
    subject_label: int
    predicate: int
    object_box: Box
    object_label: int


@dataclass
class RecallReport:
    task: str
    k: int
    hits: list[int] = field(default_factory=list)
    totals: list[int] = field(default_factory=list)

    @property
    def n_images(self) -> int:
        return len(self.hits)

    @property
    def recall(self) -> float:
        total = int(np.sum(self.totals))
        return float(np.sum(self.hits)) / total if total else 0.0

    def to_json(self) -> dict:
        return {"task": self.task, "K": self.k, "recall": self.recall, "n_images": self.n_images}

    def __str__(self):
        return f"{self.task:8s} Rec@{self.k:<4d} {100 * self.recall:6.2f}  ({self.n_images} images)"


def triplet_matches(pred: TripletPrediction, gt: TripletTruth, mode: str) -> bool:
    """Match rule per task.

    PredCls compares the predicate; PhrCls and SGGen also compare both object
    labels. Localization (IoU > 0.5 for subject and object) is required in
    every mode; with ground-truth boxes it is trivially satisfied.
    """
    if mode not in TASKS:
        raise ValueError(f"unknown task {mode!r}")
    if pred.predicate != gt.predicate:
        return False
    if mode != "PredCls" and (pred.subject_label != gt.subject_label
                              or pred.object_label != gt.object_label):
        return False
    return iou(pred.subject_box, gt.subject_box) > IOU_MATCH and \
        iou(pred.object_box, gt.object_box) > IOU_MATCH


def rank_predictions(preds: Sequence[TripletPrediction]) -> list[TripletPrediction]:
    """Descending score; ties by (subject_idx, object_idx, predicate)."""
    return sorted(preds, key=lambda p: (-p.score, p.subject_idx, p.object_idx, p.predicate))


def count_hits(preds: Sequence[TripletPrediction], gts: Sequence[TripletTruth], k: int,
               mode: str) -> int:
    """Ground-truth triplets hit by the top-``k`` predictions under one-to-one matching.

    Predictions are visited in rank order and each claims a ground truth via
    an augmenting path, so the result is a maximum matching between the
    top-``k`` set and the ground truth.
    """
    if k <= 0:
        raise ValueError(f"K must be positive, got {k}")
    top = rank_predictions(preds)[:k]
    adj = [[g for g, gt in enumerate(gts) if triplet_matches(p, gt, mode)] for p in top]
    owner = [-1] * len(gts)

    def augment(p, seen):
        for g in adj[p]:
            if g in seen:
                continue
            seen.add(g)
            if owner[g] < 0 or augment(owner[g], seen):
                owner[g] = p
                return True
        return False

    for p in range(len(top)):
        augment(p, set())
    return sum(1 for o in owner if o >= 0)


def recall_at_k(predictions: Sequence[Sequence[TripletPrediction]],
                ground_truth: Sequence[Sequence[TripletTruth]], k: int,
                mode: str) -> RecallReport:
    """Rec@K over a list of images (per-image prediction and truth lists)."""
    if k <= 0:
        raise ValueError(f"K must be positive, got {k}")
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth cover different image counts")
    rep = RecallReport(mode, k)
    for preds, gts in zip(predictions, ground_truth):
        rep.hits.append(count_hits(preds, gts, k, mode))
        rep.totals.append(len(gts))
    return rep


# detection

def average_precision(scores: np.ndarray, is_tp: np.ndarray, n_pos: int) -> float:
    """All-point interpolated AP of a ranked detection list."""
    if n_pos == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    tp = np.cumsum(is_tp.astype(np.float64))
    n = np.arange(1, len(tp) + 1, dtype=np.float64)
    recall = tp / n_pos
    precision = tp / n
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap, prev_r = 0.0, 0.0
    for i in range(len(recall)):
        if recall[i] > prev_r:
            ap += (recall[i] - prev_r) * envelope[i]
            prev_r = recall[i]
    return float(ap)


def match_detections(detections, ground_truth, cls: int):
    """Rank class ``cls`` detections across images and flag true positives.

    ``detections[i]`` holds ``(box, label, score)`` tuples and
    ``ground_truth[i]`` holds ``(box, label)`` tuples for image ``i``. A
    detection is a true positive when its best-IoU unclaimed ground truth of
    the same class has IoU > 0.5.
    """
    dets = [(-float(s), img, n, b) for img, ds in enumerate(detections)
            for n, (b, lab, s) in enumerate(ds) if lab == cls]
    dets.sort(key=lambda t: (t[0], t[1], t[2]))
    gts = {img: [b for b, lab in gs if lab == cls] for img, gs in enumerate(ground_truth)}
    claimed = {img: [False] * len(v) for img, v in gts.items()}
    n_pos = sum(len(v) for v in gts.values())
    flags = []
    for _, img, _, b in dets:
        best, best_g = IOU_MATCH, -1
        for g, gb in enumerate(gts[img]):
            o = iou(b, gb)
            if o > best and not claimed[img][g]:
                best, best_g = o, g
        if best_g >= 0:
            claimed[img][best_g] = True
        flags.append(best_g >= 0)
    return np.array([-d[0] for d in dets]), np.array(flags, dtype=bool), n_pos


def mean_average_precision(detections, ground_truth) -> float:
    classes = sorted({lab for gs in ground_truth for _, lab in gs})
    aps = []
    for c in classes:
        scores, flags, n_pos = match_detections(detections, ground_truth, c)
        aps.append(average_precision(scores, flags, n_pos))
    return float(np.mean(aps)) if aps else 0.0


def topk_accuracy(class_scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    class_scores = np.asarray(class_scores)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    # stable ranking: higher score first, lower class index on ties
    order = np.argsort(-class_scores, axis=1, kind="stable")[:, :k]
    return float(np.mean([lab in row for lab, row in zip(labels, order)]))


def detection_metrics(detections, ground_truth, class_scores=None, labels=None) -> dict:
    """mAP at IoU 0.5 and, given per-box class scores on ground-truth boxes, top-1/top-5 accuracy."""
    out = {"mAP": mean_average_precision(detections, ground_truth)}
    if class_scores is not None:
        out["top1_acc"] = topk_accuracy(class_scores, labels, 1)
        out["top5_acc"] = topk_accuracy(class_scores, labels, 5)
    return out


def format_reports(reports: Sequence[RecallReport]) -> str:
    return "\n".join(str(r) for r in reports) + "\n"


def reports_json(reports: Sequence[RecallReport], extra: dict | None = None) -> str:
    payload = {"recall": [r.to_json() for r in reports]}
    if extra:
        payload.update(extra)
    return json.dumps(payload, sort_keys=True, indent=2)
