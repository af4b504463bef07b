"""Task heads, scene-graph matrix decoding and the joint training loss.

Label conventions: object class ``C_obj`` is ``<background>`` and predicate
class ``C_pred`` is ``<irrelevant>`` (each null label is the last logit).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Value
from .geometry import Box, decode_box_delta


def init_params(store: ParamStore, d: int, n_obj_classes: int, n_pred_classes: int,
                rng: np.random.Generator, caption_box_reg: bool = True):
    store.add("head.obj.W", rng.normal(scale=0.01, size=(n_obj_classes + 1, d)))
    store.add("head.obj.b", np.zeros(n_obj_classes + 1))
    store.add("head.pred.W", rng.normal(scale=0.01, size=(n_pred_classes + 1, d)))
    store.add("head.pred.b", np.zeros(n_pred_classes + 1))
    store.add("head.box.W", rng.normal(scale=0.001, size=(4 * n_obj_classes, d)))
    store.add("head.box.b", np.zeros(4 * n_obj_classes))
    if caption_box_reg:
        store.add("head.capbox.W", rng.normal(scale=0.001, size=(4, d)))
        store.add("head.capbox.b", np.zeros(4))


def _head(store: ParamStore, name: str, x: Value) -> Value:
    W = store[f"head.{name}.W"]
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"{name} head expects dim {W.shape[1]}, got {x.shape[-1]}")
    return ad.linear(ad.relu(x), W, store[f"head.{name}.b"])


def classify_objects(store: ParamStore, x_obj: Value) -> Value:
    return _head(store, "obj", x_obj)


def classify_predicates(store: ParamStore, x_phr: Value) -> Value:
    return _head(store, "pred", x_phr)


def regress_boxes(store: ParamStore, x_obj: Value) -> Value:
    return _head(store, "box", x_obj)


def regress_caption_boxes(store: ParamStore, x_cap: Value) -> Value:
    return _head(store, "capbox", x_cap)


def decode_class_boxes(proposals: Sequence[Box], deltas: np.ndarray, labels: np.ndarray,
                       n_obj_classes: int) -> list[Box]:
    """Apply each proposal's class-specific delta; background keeps the proposal."""
    out = []
    for box, row, lab in zip(proposals, np.asarray(deltas), labels):
        if lab >= n_obj_classes:
            out.append(box)
        else:
            out.append(decode_box_delta(box, row[4 * lab:4 * lab + 4]))
    return out


@dataclass
class SceneGraphMatrix:
    """Object labels on the diagonal, predicate labels off the diagonal."""
    labels: np.ndarray        # [n, n] int
    scores: np.ndarray        # [n, n] float
    n_obj_classes: int
    n_pred_classes: int

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def background(self) -> int:
        return self.n_obj_classes

    @property
    def irrelevant(self) -> int:
        return self.n_pred_classes

    @classmethod
    def from_probs(cls, obj_probs: np.ndarray, pred_probs: np.ndarray,
                   endpoints: dict[int, tuple[int, int]]) -> "SceneGraphMatrix":
        n = obj_probs.shape[0]
        labels = np.zeros((n, n), dtype=np.int64)
        scores = np.zeros((n, n))
        labels[np.arange(n), np.arange(n)] = obj_probs.argmax(axis=1)
        scores[np.arange(n), np.arange(n)] = obj_probs.max(axis=1)
        for p, (i, j) in endpoints.items():
            labels[i, j] = pred_probs[p].argmax()
            scores[i, j] = pred_probs[p].max()
        return cls(labels, scores, obj_probs.shape[1] - 1, pred_probs.shape[1] - 1)


@dataclass
class Detection:
    box: Box
    label: int
    score: float


@dataclass
class RelationEdge:
    subject_idx: int
    predicate: int
    object_idx: int
    score: float


@dataclass
class SceneGraphPrediction:
    objects: dict[int, Detection]
    edges: list[RelationEdge]

    def to_json(self, captions: list[dict] | None = None) -> dict:
        keys = sorted(self.objects)
        pos = {k: n for n, k in enumerate(keys)}
        out = {
            "objects": [{"box": list(self.objects[k].box.as_tuple()),
                         "label": int(self.objects[k].label),
                         "score": float(self.objects[k].score)} for k in keys],
            "edges": [{"s": pos[e.subject_idx], "p": int(e.predicate), "o": pos[e.object_idx],
                       "score": float(e.score)} for e in self.edges],
        }
        if captions is not None:
            out["captions"] = captions
        return out

    def to_dot(self, object_names=None, predicate_names=None) -> str:
        def oname(d):
            return object_names[d.label] if object_names else str(d.label)

        def pname(p):
            return predicate_names[p] if predicate_names else str(p)

        lines = ["digraph scene_graph {", "  node [style=filled, fillcolor=red];"]
        for k in sorted(self.objects):
            lines.append(f'  o{k} [label="{oname(self.objects[k])}"];')
        for e in self.edges:
            lines.append(f'  o{e.subject_idx} -> o{e.object_idx} [label="{pname(e.predicate)}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def assemble_scene_graph(matrix: SceneGraphMatrix, boxes: Sequence[Box]) -> SceneGraphPrediction:
    """Keep non-background objects and connect them through non-irrelevant predicates.

    Edge score is the product of the subject, predicate and object scores.
    """
    keep = {i: Detection(boxes[i], int(matrix.labels[i, i]), float(matrix.scores[i, i]))
            for i in range(matrix.n) if matrix.labels[i, i] != matrix.background}
    edges = []
    for i in sorted(keep):
        for j in sorted(keep):
            if i == j or matrix.labels[i, j] == matrix.irrelevant:
                continue
            score = keep[i].score * float(matrix.scores[i, j]) * keep[j].score
            edges.append(RelationEdge(i, int(matrix.labels[i, j]), j, score))
    return SceneGraphPrediction(keep, edges)


def joint_loss(obj_logits: Value | None, obj_labels, box_deltas: Value | None, box_targets,
               positive_mask, pred_logits: Value | None, pred_labels,
               caption_loss: Value | None = None, caption_box_loss: Value | None = None) -> Value:
    """Unit-weighted sum of the task losses.

    Box regression uses the class-specific delta slice of positive objects
    only (``positive_mask``) and is averaged over positives.
    """
    terms = []
    if obj_logits is not None and len(obj_labels):
        terms.append(ad.softmax_cross_entropy(obj_logits, obj_labels))
    if box_deltas is not None:
        pos = np.flatnonzero(np.asarray(positive_mask))
        if len(pos):
            labels = np.asarray(obj_labels)[pos]
            cols = (4 * labels[:, None] + np.arange(4)[None, :])
            picked = ad.index(box_deltas, (pos[:, None], cols))
            reg = ad.smooth_l1(picked, np.asarray(box_targets)[pos])
            terms.append(reg * (1.0 / len(pos)))
    if pred_logits is not None and len(pred_labels):
        terms.append(ad.softmax_cross_entropy(pred_logits, pred_labels))
    for extra in (caption_loss, caption_box_loss):
        if extra is not None:
            terms.append(extra)
    if not terms:
        return Value(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total
