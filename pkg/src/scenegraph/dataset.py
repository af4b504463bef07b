"""Synthetic scenes with exact scene graphs, ROI featurization and sampling.

Predicates are a pure function of the two object boxes (see
:func:`geometric_predicate`), so every annotation can be recomputed from
geometry alone. Captions are templated from one relation per described pair.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box, ScoredBox, coverage_fraction, iou_matrix

START, END, UNKNOWN = "<start>", "<end>", "<unknown>"
RESERVED = (START, END, UNKNOWN)

PREDICATES = ("left of", "right of", "above", "below", "contains", "inside")
PREDICATE_WORDS = {
    "left of": ("left", "of"),
    "right of": ("right", "of"),
    "above": ("above",),
    "below": ("below",),
    "contains": ("containing",),
    "inside": ("inside",),
}
CATEGORY_WORDS = ("cup", "table", "dog", "cat", "car", "tree",
                  "lamp", "book", "chair", "bird", "ball", "box")

CORPUS_SCHEMA = "scenegraph-corpus"
CORPUS_VERSION = 1


def category_word(c: int) -> str:
    return CATEGORY_WORDS[c] if c < len(CATEGORY_WORDS) else f"thing{c}"


@dataclass(frozen=True)
class SceneConfig:
    n_obj_classes: int = 12
    n_pred_classes: int = 6
    canvas_w: float = 256.0
    canvas_h: float = 256.0
    min_objects: int = 2
    max_objects: int = 8
    min_size: float = 20.0
    max_size: float = 96.0
    attr_dim: int = 8
    near_gap: float = 0.15       # fraction of the canvas width
    max_captions: int = 3
    caption_pad: float = 0.05    # fraction of the described union box
    max_overlap: float = 0.4     # rejection threshold on pairwise IoU at placement
    prototype_seed: int = 1234


@dataclass
class ObjectInstance:
    box: Box
    category: int
    attributes: np.ndarray


@dataclass(frozen=True)
class RelationTriplet:
    subject_idx: int
    object_idx: int
    predicate: int


@dataclass
class RegionCaption:
    box: Box
    token_ids: list[int]


@dataclass
class SceneAnnotation:
    canvas: tuple[float, float]
    objects: list[ObjectInstance]
    triplets: list[RelationTriplet]
    captions: list[RegionCaption]


class Vocabulary:
    """Bijective token <-> id map with the reserved tokens first."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def start_id(self) -> int:
        return self.ids[START]

    @property
    def end_id(self) -> int:
        return self.ids[END]

    @property
    def unknown_id(self) -> int:
        return self.ids[UNKNOWN]

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.ids.get(w, self.unknown_id) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        vocab = cls([ln for ln in lines if ln])
        if tuple(vocab.tokens[:3]) != tuple(lines[:3]):
            raise ValueError(f"{path}: reserved tokens must come first")
        return vocab


def default_vocabulary(cfg: SceneConfig) -> Vocabulary:
    words = ["a"] + [category_word(c) for c in range(cfg.n_obj_classes)]
    for p in PREDICATES:
        for w in PREDICATE_WORDS[p]:
            if w not in words:
                words.append(w)
    return Vocabulary(list(RESERVED) + words)


def category_prototypes(cfg: SceneConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.prototype_seed)
    return rng.normal(size=(cfg.n_obj_classes, cfg.attr_dim))


def box_gap(a: Box, b: Box) -> float:
    gx = max(0.0, b.x1 - a.x2, a.x1 - b.x2)
    gy = max(0.0, b.y1 - a.y2, a.y1 - b.y2)
    return float(np.hypot(gx, gy))


def geometric_predicate(s: Box, o: Box, near_dist: float) -> int | None:
    """Predicate index for subject box ``s`` and object box ``o``, or None.

    Containment wins; otherwise the pair must be within ``near_dist`` and the
    dominant center offset picks left/right or above/below (image y grows down).
    """
    if coverage_fraction(o, s) >= 0.9:
        return PREDICATES.index("contains")
    if coverage_fraction(s, o) >= 0.9:
        return PREDICATES.index("inside")
    if box_gap(s, o) > near_dist:
        return None
    (sx, sy), (ox, oy) = s.center, o.center
    dx, dy = ox - sx, oy - sy
    if abs(dx) >= abs(dy):
        return PREDICATES.index("left of" if dx > 0 else "right of")
    return PREDICATES.index("above" if dy > 0 else "below")


def caption_words(subj_cat: int, predicate: int, obj_cat: int) -> list[str]:
    return ["a", category_word(subj_cat), *PREDICATE_WORDS[PREDICATES[predicate]],
            "a", category_word(obj_cat)]


def generate_scene(cfg: SceneConfig, seed: int, n_objects: int | None = None) -> SceneAnnotation:
    if cfg.n_pred_classes < len(PREDICATES):
        raise ValueError(f"n_pred_classes={cfg.n_pred_classes} is smaller than the "
                         f"{len(PREDICATES)} geometric predicate rules")
    rng = np.random.default_rng(seed)
    protos = category_prototypes(cfg)
    vocab = default_vocabulary(cfg)
    if n_objects is None:
        n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))

    objects: list[ObjectInstance] = []
    for _ in range(n_objects):
        for _attempt in range(50):
            w, h = rng.uniform(cfg.min_size, cfg.max_size, size=2)
            x1 = rng.uniform(0, cfg.canvas_w - w)
            y1 = rng.uniform(0, cfg.canvas_h - h)
            box = Box(float(x1), float(y1), float(x1 + w), float(y1 + h))
            if not objects:
                break
            others = np.array([o.box.as_tuple() for o in objects])
            if iou_matrix(np.array([box.as_tuple()]), others).max() <= cfg.max_overlap:
                break
        else:
            continue
        cat = int(rng.integers(cfg.n_obj_classes))
        attrs = protos[cat] + 0.1 * rng.normal(size=cfg.attr_dim)
        objects.append(ObjectInstance(box, cat, attrs))

    triplets = relations_from_geometry([o.box for o in objects], cfg.near_gap * cfg.canvas_w)

    pairs = sorted({(min(t.subject_idx, t.object_idx), max(t.subject_idx, t.object_idx))
                    for t in triplets})
    captions = []
    if pairs:
        n_cap = min(cfg.max_captions, len(pairs))
        chosen = sorted(rng.choice(len(pairs), size=n_cap, replace=False))
        by_pair = {(t.subject_idx, t.object_idx): t for t in triplets}
        for c in chosen:
            i, j = pairs[c]
            # the larger object is the described subject
            if objects[j].box.area > objects[i].box.area:
                i, j = j, i
            t = by_pair[(i, j)]
            u = objects[i].box.union(objects[j].box)
            pad_w, pad_h = cfg.caption_pad * u.width, cfg.caption_pad * u.height
            cbox = Box(u.x1 - pad_w, u.y1 - pad_h, u.x2 + pad_w, u.y2 + pad_h)
            cbox = cbox.clip(cfg.canvas_w, cfg.canvas_h)
            words = caption_words(objects[i].category, t.predicate, objects[j].category)
            captions.append(RegionCaption(cbox, vocab.encode(words) + [vocab.end_id]))
    return SceneAnnotation((cfg.canvas_w, cfg.canvas_h), objects, triplets, captions)


def relations_from_geometry(boxes: Sequence[Box], near_dist: float) -> list[RelationTriplet]:
    out = []
    for i, a in enumerate(boxes):
        for j, b in enumerate(boxes):
            if i == j:
                continue
            p = geometric_predicate(a, b, near_dist)
            if p is not None:
                out.append(RelationTriplet(i, j, p))
    return out


def generate_corpus(cfg: SceneConfig, n_scenes: int, seed: int) -> list[SceneAnnotation]:
    seeds = np.random.SeedSequence(seed).spawn(n_scenes)
    return [generate_scene(cfg, int(s.generate_state(1)[0])) for s in seeds]


# featurization

def roi_inputs(scene: SceneAnnotation, boxes: Sequence[Box], n_classes: int) -> np.ndarray:
    """Generative input vectors [one-hot category | box geometry | mean attributes].

    The one-hot is the category of the best-IoU object when that IoU is at
    least 0.5 (zeros otherwise). The attribute part averages the attribute
    vectors of objects lying at least 70% inside the ROI.
    """
    W, H = scene.canvas
    attr_dim = scene.objects[0].attributes.shape[0] if scene.objects else 0
    rb = np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)
    n = len(rb)
    onehot = np.zeros((n, n_classes))
    attrs = np.zeros((n, attr_dim))
    if scene.objects and n:
        ob = np.array([o.box.as_tuple() for o in scene.objects])
        cats = np.array([o.category for o in scene.objects])
        ov = iou_matrix(rb, ob)
        best = ov.argmax(axis=1)
        hit = ov[np.arange(n), best] >= 0.5
        onehot[np.arange(n)[hit], cats[best[hit]]] = 1.0
        iw = np.minimum(rb[:, None, 2], ob[None, :, 2]) - np.maximum(rb[:, None, 0], ob[None, :, 0])
        ih = np.minimum(rb[:, None, 3], ob[None, :, 3]) - np.maximum(rb[:, None, 1], ob[None, :, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        area = (ob[:, 2] - ob[:, 0]) * (ob[:, 3] - ob[:, 1])
        inside = (inter / area[None, :]) >= 0.7
        A = np.stack([o.attributes for o in scene.objects])
        cnt = inside.sum(axis=1, keepdims=True)
        attrs = np.divide(inside @ A, cnt, out=np.zeros((n, attr_dim)), where=cnt > 0)
    geo = np.column_stack([rb[:, 0] / W, rb[:, 1] / H, rb[:, 2] / W, rb[:, 3] / H,
                           (rb[:, 2] - rb[:, 0]) / W, (rb[:, 3] - rb[:, 1]) / H])
    return np.hstack([onehot, geo, attrs])


def make_projection(d_in: int, n_classes: int, attr_dim: int, seed: int) -> np.ndarray:
    n_inputs = n_classes + 6 + attr_dim
    rng = np.random.default_rng(seed)
    return rng.normal(scale=1.0 / np.sqrt(n_inputs), size=(d_in, n_inputs))


def featurize_rois(scene: SceneAnnotation, boxes: Sequence[Box], projection: np.ndarray,
                   noise_sigma: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Fixed random linear projection of :func:`roi_inputs` plus Gaussian noise."""
    n_classes = projection.shape[1] - 6 - (scene.objects[0].attributes.shape[0]
                                           if scene.objects else 0)
    if n_classes <= 0:
        raise ValueError(f"projection with {projection.shape[1]} input columns does not "
                         "match the scene's attribute dimension")
    u = roi_inputs(scene, boxes, n_classes)
    if u.shape[1] != projection.shape[1]:
        raise ValueError(f"projection expects {projection.shape[1]} inputs, got {u.shape[1]}")
    feats = u @ projection.T
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        feats = feats + rng.normal(scale=noise_sigma, size=feats.shape)
    return feats


def _jitter_box(box: Box, jitter: float, rng: np.random.Generator, canvas) -> Box:
    if jitter == 0:
        return box
    d = rng.uniform(-jitter, jitter, size=4) * np.array([box.width, box.height] * 2)
    x1, y1, x2, y2 = np.array(box.as_tuple()) + d
    W, H = canvas
    x1, x2 = np.clip([x1, x2], 0, W)
    y1, y2 = np.clip([y1, y2], 0, H)
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        return box
    return Box(float(x1), float(y1), float(x2), float(y2))


def _random_box(rng, canvas, lo=16.0, hi=96.0) -> Box:
    W, H = canvas
    w, h = rng.uniform(lo, min(hi, W), size=2)
    x1, y1 = rng.uniform(0, W - w), rng.uniform(0, H - h)
    return Box(float(x1), float(y1), float(x1 + w), float(y1 + h))


def perturb_ground_truth_proposals(scene: SceneAnnotation, jitter: float, seed: int,
                                   copies: int = 2, n_distractors: int = 3,
                                   score_noise: float = 0.05):
    """Jittered copies of every ground-truth box plus random distractors.

    Returns ``(object_rois, caption_rois)``; each score is the IoU with the
    source box (distractors: best IoU with any ground-truth box) plus noise.
    """
    rng = np.random.default_rng(seed)

    def branch(gt_boxes: list[Box]) -> list[ScoredBox]:
        out = []
        for b in gt_boxes:
            for _ in range(copies):
                jb = _jitter_box(b, jitter, rng, scene.canvas)
                s = float(iou_matrix(np.array([jb.as_tuple()]), np.array([b.as_tuple()]))[0, 0])
                if score_noise and jitter > 0:
                    s += rng.normal(scale=score_noise)
                out.append(ScoredBox(jb, float(np.clip(s, 0.0, 1.0)), len(out)))
        for _ in range(n_distractors):
            db = _random_box(rng, scene.canvas)
            s = 0.0
            if gt_boxes:
                s = float(iou_matrix(np.array([db.as_tuple()]),
                                     np.array([g.as_tuple() for g in gt_boxes])).max())
            s += rng.normal(scale=score_noise) if score_noise else 0.0
            out.append(ScoredBox(db, float(np.clip(s, 0.0, 1.0)), len(out)))
        return out

    obj = branch([o.box for o in scene.objects])
    cap = branch([c.box for c in scene.captions])
    return obj, cap


# cleansing

def apply_cleansing_filters(scenes: Sequence[SceneAnnotation], vocab: Vocabulary,
                            min_obj_edge: float = 16, min_cap_edge: float = 32,
                            top_obj: int = 150, top_pred: int = 50,
                            top_words: int = 10000) -> list[SceneAnnotation]:
    """Size filters, frequent-category filters and vocabulary truncation."""
    sized = []
    for sc in scenes:
        keep = [i for i, o in enumerate(sc.objects) if o.box.short_edge >= min_obj_edge]
        sized.append((sc, keep))

    obj_counts = Counter(sc.objects[i].category for sc, keep in sized for i in keep)
    kept_cats = _top_k(obj_counts, top_obj)

    staged = []
    for sc, keep in sized:
        keep = [i for i in keep if sc.objects[i].category in kept_cats]
        remap = {old: new for new, old in enumerate(keep)}
        trip = [RelationTriplet(remap[t.subject_idx], remap[t.object_idx], t.predicate)
                for t in sc.triplets if t.subject_idx in remap and t.object_idx in remap]
        staged.append((sc, [sc.objects[i] for i in keep], trip))

    pred_counts = Counter(t.predicate for _, _, trip in staged for t in trip)
    kept_preds = _top_k(pred_counts, top_pred)

    caps_all = [[c for c in sc.captions if c.box.short_edge >= min_cap_edge]
                for sc, _, _ in staged]
    reserved = {vocab.ids[t] for t in RESERVED}
    word_counts = Counter(t for caps in caps_all for c in caps for t in c.token_ids
                          if t not in reserved)
    kept_words = _top_k(word_counts, top_words) | reserved

    out = []
    for (sc, objs, trip), caps in zip(staged, caps_all):
        trip = [t for t in trip if t.predicate in kept_preds]
        caps = [RegionCaption(c.box, [t if t in kept_words else vocab.unknown_id
                                      for t in c.token_ids]) for c in caps]
        out.append(SceneAnnotation(sc.canvas, list(objs), trip, caps))
    return out


def _top_k(counts: Counter, k: int) -> set:
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {key for key, _ in ranked[:k]}


# mini-batch sampling

@dataclass
class MinibatchSample:
    objects: np.ndarray
    captions: np.ndarray
    phrases: np.ndarray


def sample_minibatch(obj_labels: np.ndarray, phrase_labels: np.ndarray, n_captions: int,
                     background: int, irrelevant: int, seed: int, n_obj: int = 256,
                     n_cap: int = 128, n_phrase: int = 512,
                     positive_fraction: float = 0.25) -> MinibatchSample:
    """Index sets for one image.

    Objects and captions are subsampled uniformly when more than the budget
    exist. Phrases get at most ``positive_fraction`` positives; the positive
    count is reduced when there are too few negatives to keep that ratio.
    """
    obj_labels = np.asarray(obj_labels)
    phrase_labels = np.asarray(phrase_labels)
    if len(obj_labels) == 0 and n_captions == 0:
        raise ValueError("cannot sample a mini-batch from zero proposals")
    rng = np.random.default_rng(seed)

    def take(idx, n):
        idx = np.asarray(idx, dtype=np.int64)
        if len(idx) <= n:
            return idx
        return np.sort(rng.choice(idx, size=n, replace=False))

    objs = take(np.arange(len(obj_labels)), n_obj)
    caps = take(np.arange(n_captions), n_cap)

    pos = np.flatnonzero(phrase_labels != irrelevant)
    neg = np.flatnonzero(phrase_labels == irrelevant)
    n_pos = min(len(pos), int(round(positive_fraction * n_phrase)))
    n_neg = min(len(neg), n_phrase - n_pos)
    max_pos = int(np.floor(positive_fraction * n_neg / (1 - positive_fraction)))
    n_pos = min(n_pos, max_pos)
    phr = np.sort(np.concatenate([take(pos, n_pos), take(neg, n_neg)]))
    return MinibatchSample(objs, caps, phr)


# serialization

def _box_list(b: Box) -> list[float]:
    return [float(v) for v in b.as_tuple()]


def scene_to_record(sc: SceneAnnotation) -> dict:
    return {
        "canvas": [float(sc.canvas[0]), float(sc.canvas[1])],
        "objects": [{"box": _box_list(o.box), "category": int(o.category),
                     "attributes": [float(a) for a in o.attributes]} for o in sc.objects],
        "triplets": [{"s": t.subject_idx, "o": t.object_idx, "p": t.predicate}
                     for t in sc.triplets],
        "captions": [{"box": _box_list(c.box), "tokens": [int(t) for t in c.token_ids]}
                     for c in sc.captions],
    }


def scene_from_record(rec: dict) -> SceneAnnotation:
    objs = [ObjectInstance(Box(*o["box"]), int(o["category"]),
                           np.asarray(o.get("attributes", []), dtype=np.float64))
            for o in rec["objects"]]
    trip = [RelationTriplet(int(t["s"]), int(t["o"]), int(t["p"])) for t in rec["triplets"]]
    for t in trip:
        if not (0 <= t.subject_idx < len(objs) and 0 <= t.object_idx < len(objs)) \
                or t.subject_idx == t.object_idx:
            raise ValueError(f"triplet {t} references invalid objects")
    caps = [RegionCaption(Box(*c["box"]), [int(x) for x in c["tokens"]])
            for c in rec["captions"]]
    return SceneAnnotation(tuple(rec["canvas"]), objs, trip, caps)


def save_corpus(path, scenes: Sequence[SceneAnnotation], meta: dict | None = None):
    header = {"schema": CORPUS_SCHEMA, "version": CORPUS_VERSION,
              "fields": ["canvas", "objects", "triplets", "captions"], **(meta or {})}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sc in scenes:
            fh.write(json.dumps(scene_to_record(sc), sort_keys=True) + "\n")


def load_corpus(path) -> tuple[dict, list[SceneAnnotation]]:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: corrupt header line: {e}") from None
    if header.get("schema") != CORPUS_SCHEMA:
        raise ValueError(f"{path}: not a scene corpus (schema={header.get('schema')!r})")
    if header.get("version") != CORPUS_VERSION:
        raise ValueError(f"{path}: unsupported corpus version {header.get('version')}")
    scenes = []
    for n, ln in enumerate(lines[1:], start=2):
        try:
            scenes.append(scene_from_record(json.loads(ln)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{path}:{n}: bad scene record: {e}") from None
    return header, scenes

