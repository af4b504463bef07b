"""Per-image topology linking object, phrase and caption nodes."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .geometry import Box


class Level(Enum):
    OBJECT = "object"
    PHRASE = "phrase"
    CAPTION = "caption"


@dataclass(frozen=True)
class NodeRef:
    level: Level
    index: int


@dataclass
class GraphTopology:
    n_obj: int
    n_phr: int
    n_cap: int
    edges_sp: list[tuple[int, int]]
    edges_op: list[tuple[int, int]]
    edges_pr: list[tuple[int, int]]
    phrase_endpoints: dict[int, tuple[int, int]]
    phrase_boxes: list[Box] = field(default_factory=list)
    # flat index arrays for vectorized message passing
    phr_subj: np.ndarray = field(init=False, repr=False)
    phr_obj: np.ndarray = field(init=False, repr=False)
    pr_phr: np.ndarray = field(init=False, repr=False)
    pr_cap: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ends = [self.phrase_endpoints[p] for p in range(self.n_phr)]
        self.phr_subj = np.array([e[0] for e in ends], dtype=np.int64)
        self.phr_obj = np.array([e[1] for e in ends], dtype=np.int64)
        self.pr_phr = np.array([e[0] for e in self.edges_pr], dtype=np.int64)
        self.pr_cap = np.array([e[1] for e in self.edges_pr], dtype=np.int64)
        self._as_subject = [[] for _ in range(self.n_obj)]
        self._as_object = [[] for _ in range(self.n_obj)]
        for o, p in self.edges_sp:
            self._as_subject[o].append(p)
        for o, p in self.edges_op:
            self._as_object[o].append(p)

    def incident_phrases(self, object_idx: int, edge_type: str) -> list[int]:
        """Phrases whose subject (``"as_subject"``) or object (``"as_object"``) is ``object_idx``."""
        if not 0 <= object_idx < self.n_obj:
            raise IndexError(f"object index {object_idx} out of range [0, {self.n_obj})")
        if edge_type == "as_subject":
            return list(self._as_subject[object_idx])
        if edge_type == "as_object":
            return list(self._as_object[object_idx])
        raise ValueError(f"unknown edge type {edge_type!r}")

    def check_invariants(self):
        sp = sorted(p for _, p in self.edges_sp)
        op = sorted(p for _, p in self.edges_op)
        assert sp == list(range(self.n_phr)) and op == list(range(self.n_phr))
        for o, p in self.edges_sp:
            assert self.phrase_endpoints[p][0] == o
        for o, p in self.edges_op:
            assert self.phrase_endpoints[p][1] == o
        assert all(s != o for s, o in self.phrase_endpoints.values())
        assert len(set(self.edges_pr)) == len(self.edges_pr)

    def to_dot(self, object_labels: Sequence[str] | None = None,
               phrase_labels: Sequence[str] | None = None,
               caption_labels: Sequence[str] | None = None) -> str:
        """Graphviz rendering: objects red, phrases green, captions yellow."""
        def label(labels, i, prefix):
            return labels[i] if labels is not None else f"{prefix}{i}"

        out = ["digraph topology {", "  node [style=filled];"]
        for i in range(self.n_obj):
            out.append(f'  o{i} [label="{label(object_labels, i, "obj")}", fillcolor=red];')
        for j in range(self.n_phr):
            out.append(f'  p{j} [label="{label(phrase_labels, j, "phr")}", fillcolor=green];')
        for k in range(self.n_cap):
            out.append(f'  r{k} [label="{label(caption_labels, k, "cap")}", fillcolor=yellow];')
        for o, p in self.edges_sp:
            out.append(f'  o{o} -> p{p} [label="subj"];')
        for o, p in self.edges_op:
            out.append(f'  p{p} -> o{o} [label="obj"];')
        for p, r in self.edges_pr:
            out.append(f"  p{p} -> r{r} [dir=none];")
        out.append("}")
        return "\n".join(out) + "\n"


def pair_phrases(object_boxes: Sequence[Box]) -> tuple[list[Box], dict[int, tuple[int, int]]]:
    """All ordered pairs ``(i, j)``, ``i != j``, in row-major order, with union boxes."""
    boxes, ends = [], {}
    n = len(object_boxes)
    for i in range(n):
        for j in range(n):
            if i != j:
                ends[len(boxes)] = (i, j)
                boxes.append(object_boxes[i].union(object_boxes[j]))
    return boxes, ends


def coverage_matrix(inner: Sequence[Box], outer: Sequence[Box]) -> np.ndarray:
    """``M[a, b]`` = fraction of ``inner[a]`` covered by ``outer[b]``."""
    a = np.array([b.as_tuple() for b in inner], dtype=np.float64).reshape(-1, 4)
    b = np.array([b.as_tuple() for b in outer], dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    if np.any(area <= 0):
        raise ValueError("degenerate phrase box with zero area")
    return inter / area[:, None]


def connect_phrase_caption(phrase_boxes: Sequence[Box], caption_boxes: Sequence[Box],
                           threshold: float = 0.7) -> list[tuple[int, int]]:
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    if not phrase_boxes or not caption_boxes:
        return []
    cov = coverage_matrix(phrase_boxes, caption_boxes)
    return [(int(p), int(r)) for p, r in zip(*np.nonzero(cov >= threshold))]


def build_graph(object_boxes: Sequence[Box], caption_boxes: Sequence[Box],
                threshold: float = 0.7) -> GraphTopology:
    phrase_boxes, ends = pair_phrases(object_boxes)
    edges_pr = connect_phrase_caption(phrase_boxes, caption_boxes, threshold)
    return GraphTopology(
        n_obj=len(object_boxes), n_phr=len(phrase_boxes), n_cap=len(caption_boxes),
        edges_sp=[(ends[p][0], p) for p in range(len(phrase_boxes))],
        edges_op=[(ends[p][1], p) for p in range(len(phrase_boxes))],
        edges_pr=edges_pr, phrase_endpoints=ends, phrase_boxes=phrase_boxes)


def incident_phrases(topology: GraphTopology, object_idx: int, edge_type: str) -> list[int]:
    return topology.incident_phrases(object_idx, edge_type)
