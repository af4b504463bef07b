"""Axis-aligned box arithmetic, overlap measures, NMS and anchor clustering.

Boxes are closed real-valued rectangles ``(x1, y1, x2, y2)``; there is no
``+1`` pixel convention anywhere in this package.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"invalid box corners {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def short_edge(self) -> float:
        return min(self.width, self.height)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def union(self, other: "Box") -> "Box":
        """Tight box enclosing both boxes."""
        return Box(min(self.x1, other.x1), min(self.y1, other.y1),
                   max(self.x2, other.x2), max(self.y2, other.y2))

    def clip(self, width: float, height: float) -> "Box":
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        return Box(x1, y1, max(x1, min(self.x2, width)), max(y1, min(self.y2, height)))


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float
    index: int


@dataclass(frozen=True)
class Anchor:
    log_w: float
    log_h: float

    @property
    def size(self) -> tuple[float, float]:
        return (math.exp(self.log_w), math.exp(self.log_h))


def intersection_area(a: Box, b: Box) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when both boxes are degenerate."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def coverage_fraction(inner: Box, outer: Box) -> float:
    """Fraction of ``inner``'s area lying inside ``outer``."""
    if inner.area <= 0:
        raise ValueError(f"degenerate inner box {inner.as_tuple()} has zero area")
    return intersection_area(inner, outer) / inner.area


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box arrays of shape [n, 4] and [m, 4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(candidates: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy non-maximum suppression.

    Candidates are visited by descending score (ties: lower index first); a
    candidate is dropped when its IoU with any already kept box exceeds
    ``iou_threshold``.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    order = sorted(candidates, key=lambda c: (-c.score, c.index))
    if not order:
        return []
    boxes = np.array([c.box.as_tuple() for c in order])
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    for i, cand in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(cand)
        suppressed |= overlaps[i] > iou_threshold
    return kept


def kmeans_anchors(boxes: Sequence[Box], k: int, seed: int,
                   max_iter: int = 100, history: list | None = None) -> list[Anchor]:
    """Cluster boxes in (log w, log h) space with k-means++ seeding and Lloyd steps.

    If ``history`` is given, the within-cluster inertia after each assignment
    step is appended to it.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(boxes) < k:
        raise ValueError(f"need at least k={k} boxes, got {len(boxes)}")
    if any(b.width <= 0 or b.height <= 0 for b in boxes):
        raise ValueError("all boxes need positive width and height")
    pts = np.array([[math.log(b.width), math.log(b.height)] for b in boxes])
    n_distinct = len(np.unique(pts, axis=0))
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds the number of distinct points ({n_distinct})")

    rng = np.random.default_rng(seed)
    centers = [pts[rng.integers(len(pts))]]
    for _ in range(1, k):
        d2 = np.min(((pts[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        centers.append(pts[rng.choice(len(pts), p=d2 / d2.sum())])
    centers = np.array(centers)

    assign = None
    for _ in range(max_iter):
        d2 = ((pts[:, None, :] - centers[None]) ** 2).sum(-1)
        new_assign = d2.argmin(axis=1)
        if history is not None:
            history.append(float(d2[np.arange(len(pts)), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = pts[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return [Anchor(float(c[0]), float(c[1])) for c in centers]


def kmeans_inertia(boxes: Sequence[Box], anchors: Sequence[Anchor]) -> float:
    pts = np.array([[math.log(b.width), math.log(b.height)] for b in boxes])
    cs = np.array([[a.log_w, a.log_h] for a in anchors])
    return float(((pts[:, None, :] - cs[None]) ** 2).sum(-1).min(axis=1).sum())


def encode_box_delta(proposal: Box, target: Box) -> np.ndarray:
    if proposal.width <= 0 or proposal.height <= 0:
        raise ValueError(f"proposal {proposal.as_tuple()} has non-positive size")
    if target.width <= 0 or target.height <= 0:
        raise ValueError(f"target {target.as_tuple()} has non-positive size")
    pcx, pcy = proposal.center
    tcx, tcy = target.center
    return np.array([
        (tcx - pcx) / proposal.width,
        (tcy - pcy) / proposal.height,
        math.log(target.width / proposal.width),
        math.log(target.height / proposal.height),
    ])


def decode_box_delta(proposal: Box, delta) -> Box:
    if proposal.width <= 0 or proposal.height <= 0:
        raise ValueError(f"proposal {proposal.as_tuple()} has non-positive size")
    dx, dy, dw, dh = (float(v) for v in delta)
    pcx, pcy = proposal.center
    cx = pcx + dx * proposal.width
    cy = pcy + dy * proposal.height
    w = proposal.width * math.exp(min(dw, 10.0))
    h = proposal.height * math.exp(min(dh, 10.0))
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
