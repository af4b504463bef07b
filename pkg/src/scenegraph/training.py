"""Proposal preparation, label assignment, the training loop and evaluation runs."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig
from .dataset import (SceneAnnotation, Vocabulary, featurize_rois, make_projection,
                      perturb_ground_truth_proposals, sample_minibatch)
from .evaluation import (TASKS, TripletPrediction, TripletTruth, detection_metrics,
                         recall_at_k)
from .geometry import Box, ScoredBox, encode_box_delta, iou_matrix, nms
from .graph import GraphTopology, build_graph
from .heads import SceneGraphMatrix, assemble_scene_graph, decode_class_boxes, joint_loss
from .model import SceneGraphModel

log = logging.getLogger(__name__)


def scene_seed(base: int, *parts: int) -> int:
    return int(np.random.SeedSequence([base, *parts]).generate_state(1)[0])


def projection_for(cfg: ExperimentConfig) -> np.ndarray:
    return make_projection(cfg.d_in, cfg.n_obj_classes, cfg.attr_dim, cfg.projection_seed)


@dataclass
class PreparedScene:
    obj_boxes: list[Box]
    cap_boxes: list[Box]
    topology: GraphTopology
    obj_in: np.ndarray
    phr_in: np.ndarray
    cap_in: np.ndarray
    obj_match: np.ndarray = field(default=None)     # matched gt object or -1
    obj_labels: np.ndarray = field(default=None)
    obj_targets: np.ndarray = field(default=None)
    phr_labels: np.ndarray = field(default=None)
    cap_tokens: list = field(default=None)
    cap_targets: np.ndarray = field(default=None)
    cap_positive: np.ndarray = field(default=None)


def _nms_boxes(rois: list[ScoredBox], threshold: float, cap: int) -> list[Box]:
    return [r.box for r in nms(rois, threshold)[:cap]]


def prepare_scene(scene: SceneAnnotation, cfg: ExperimentConfig, projection: np.ndarray,
                  seed: int, mode: str, vocab: Vocabulary | None = None) -> PreparedScene:
    """Proposals, graph, ROI features and (for training) labels of one scene.

    ``mode`` is ``"train"`` (jittered proposals, training NMS), ``"gt"``
    (ground-truth object and caption boxes) or ``"test"``
    (jittered proposals for both branches, test NMS).
    """
    rng = np.random.default_rng(seed)
    obj_rois, cap_rois = perturb_ground_truth_proposals(
        scene, cfg.jitter, int(rng.integers(2**31)), copies=cfg.proposal_copies,
        n_distractors=cfg.n_distractors)
    if mode == "train":
        obj_boxes = _nms_boxes(obj_rois, cfg.train_nms_obj, cfg.max_proposals)
        cap_boxes = _nms_boxes(cap_rois, cfg.train_nms_cap, cfg.max_proposals)
    elif mode in ("gt", "test"):
        if mode == "gt":
            obj_boxes = [o.box for o in scene.objects]
            cap_boxes = [c.box for c in scene.captions]
        else:
            obj_boxes = _nms_boxes(obj_rois, cfg.test_nms_obj, cfg.max_proposals)
            cap_boxes = _nms_boxes(cap_rois, cfg.test_nms_cap, cfg.max_proposals)
    else:
        raise ValueError(f"unknown preparation mode {mode!r}")
    if not cfg.caption_branch:
        cap_boxes = []

    topo = build_graph(obj_boxes, cap_boxes, cfg.coverage_threshold)
    noise = cfg.noise_sigma
    obj_in = featurize_rois(scene, obj_boxes, projection, noise, rng)
    phr_in = featurize_rois(scene, topo.phrase_boxes, projection, noise, rng)
    cap_in = featurize_rois(scene, cap_boxes, projection, noise, rng)
    prep = PreparedScene(obj_boxes, cap_boxes, topo, obj_in, phr_in, cap_in)
    assign_labels(prep, scene, cfg, vocab)
    return prep


def assign_labels(prep: PreparedScene, scene: SceneAnnotation, cfg: ExperimentConfig,
                  vocab: Vocabulary | None):
    bg, irr = cfg.n_obj_classes, cfg.n_pred_classes
    n = len(prep.obj_boxes)
    match = np.full(n, -1, dtype=np.int64)
    labels = np.full(n, bg, dtype=np.int64)
    targets = np.zeros((n, 4))
    if scene.objects and n:
        ov = iou_matrix([b.as_tuple() for b in prep.obj_boxes],
                        [o.box.as_tuple() for o in scene.objects])
        best = ov.argmax(axis=1)
        for i in range(n):
            if ov[i, best[i]] >= 0.5:
                match[i] = best[i]
                labels[i] = scene.objects[best[i]].category
                targets[i] = encode_box_delta(prep.obj_boxes[i], scene.objects[best[i]].box)
    rel = {(t.subject_idx, t.object_idx): t.predicate for t in scene.triplets}
    phr = np.full(prep.topology.n_phr, irr, dtype=np.int64)
    for p in range(prep.topology.n_phr):
        a, b = match[prep.topology.phr_subj[p]], match[prep.topology.phr_obj[p]]
        if a >= 0 and b >= 0 and a != b:
            phr[p] = rel.get((int(a), int(b)), irr)
    prep.obj_match, prep.obj_labels, prep.obj_targets, prep.phr_labels = match, labels, targets, phr

    m = len(prep.cap_boxes)
    end_id = vocab.end_id if vocab is not None else 1
    prep.cap_tokens = [[end_id] for _ in range(m)]
    prep.cap_targets = np.zeros((m, 4))
    prep.cap_positive = np.zeros(m, dtype=bool)
    if scene.captions and m:
        ov = iou_matrix([b.as_tuple() for b in prep.cap_boxes],
                        [c.box.as_tuple() for c in scene.captions])
        best = ov.argmax(axis=1)
        for k in range(m):
            if ov[k, best[k]] >= 0.5:
                cap = scene.captions[best[k]]
                prep.cap_tokens[k] = list(cap.token_ids[:cfg.max_caption_len])
                if prep.cap_tokens[k][-1] != end_id:
                    prep.cap_tokens[k][-1] = end_id
                prep.cap_targets[k] = encode_box_delta(prep.cap_boxes[k], cap.box)
                prep.cap_positive[k] = True


def scene_loss(model: SceneGraphModel, prep: PreparedScene, seed: int) -> ad.Value:
    """Joint loss on one sampled mini-batch of a prepared scene."""
    cfg = model.cfg
    sample = sample_minibatch(prep.obj_labels, prep.phr_labels, len(prep.cap_boxes),
                              model.background, model.irrelevant, seed,
                              cfg.sample_obj, cfg.sample_cap, cfg.sample_phrase)
    out = model.forward(prep.topology, prep.obj_in, prep.phr_in, prep.cap_in)
    so, sp, sc = sample.objects, sample.phrases, sample.captions
    obj_logits = ad.take_rows(out.obj_logits, so) if len(so) else None
    deltas = ad.take_rows(out.box_deltas, so) if len(so) else None
    pred_logits = ad.take_rows(out.pred_logits, sp) if len(sp) else None
    cap_loss = cap_box = None
    if cfg.caption_branch and cfg.caption_supervision and len(sc):
        x_cap = ad.take_rows(out.features.x_cap, sc)
        cap_loss = model.caption_loss(x_cap, [prep.cap_tokens[k] for k in sc])
        pos = sc[prep.cap_positive[sc]]
        if out.cap_box_deltas is not None and len(pos):
            cap_box = ad.smooth_l1(ad.take_rows(out.cap_box_deltas, pos),
                                   prep.cap_targets[pos]) * (1.0 / len(pos))
    return joint_loss(obj_logits, prep.obj_labels[so], deltas, prep.obj_targets[so],
                      prep.obj_labels[so] != model.background, pred_logits,
                      prep.phr_labels[sp], cap_loss, cap_box)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)


def learning_rate(cfg: ExperimentConfig, step: int, base: float) -> float:
    if step >= int(cfg.decay_at * cfg.steps):
        return base * cfg.decay_factor
    return base


def train(model: SceneGraphModel, scenes: Sequence[SceneAnnotation], vocab: Vocabulary,
          steps: int | None = None, log_every: int = 0, callback=None) -> TrainLog:
    """SGD with gradient clipping on vision parameters, Adam on the language model.

    One scene per step; scenes are visited in a fresh seeded permutation each epoch.
    """
    cfg = model.cfg
    steps = cfg.steps if steps is None else steps
    projection = projection_for(cfg)
    lm_opt = ad.Adam(model.language_params(), lr=cfg.lm_lr, clip_norm=cfg.clip_norm)
    vision = model.vision_params()
    if cfg.optimizer == "adam":
        vision_opt = ad.Adam(vision, lr=cfg.lr, clip_norm=cfg.clip_norm)
    else:
        vision_opt = ad.SGD(vision, lr=cfg.lr, momentum=cfg.momentum, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.train_seed)
    order: list[int] = []
    history = TrainLog()
    for step in range(steps):
        if not order:
            order = list(rng.permutation(len(scenes)))
        idx = int(order.pop())
        prep = prepare_scene(scenes[idx], cfg, projection,
                             scene_seed(cfg.train_seed, idx, step), "train", vocab)
        model.store.zero_grad()
        # divergence surfaces as a non-finite loss below rather than as warnings
        with np.errstate(over="ignore", invalid="ignore"):
            loss = scene_loss(model, prep, scene_seed(cfg.train_seed, idx, step, 1))
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        ad.backward(loss)
        vision_opt.step(learning_rate(cfg, step, cfg.lr))
        if cfg.caption_branch and cfg.caption_supervision:
            lm_opt.step(learning_rate(cfg, step, cfg.lm_lr))
        history.losses.append(value)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d  loss %.4f", step + 1,
                     float(np.mean(history.losses[-log_every:])))
        if callback is not None:
            callback(step, value)
    return history


# inference

@dataclass
class SceneResult:
    predictions: dict[str, list[TripletPrediction]]
    truth: list[TripletTruth]
    detections: list[tuple[Box, int, float]]
    gt_objects: list[tuple[Box, int]]
    gt_class_scores: np.ndarray
    gt_pred_labels: np.ndarray
    gt_pred_argmax: np.ndarray
    captions: list[tuple[list[int], list[int]]]


def _probs(logits: ad.Value) -> np.ndarray:
    return ad.softmax(logits.data) if logits.data.size else np.zeros(logits.shape)


def rank_triplets(obj_labels: np.ndarray, obj_scores: np.ndarray, boxes: Sequence[Box],
                  pred_probs: np.ndarray, topo: GraphTopology,
                  keep: np.ndarray | None = None) -> list[TripletPrediction]:
    """One candidate per ordered pair: the best real predicate, scored by the
    product of subject, predicate and object scores."""
    out = []
    n_real = pred_probs.shape[1] - 1
    for p in range(topo.n_phr):
        i, j = int(topo.phr_subj[p]), int(topo.phr_obj[p])
        if keep is not None and not (keep[i] and keep[j]):
            continue
        pred = int(pred_probs[p, :n_real].argmax())
        score = float(obj_scores[i] * pred_probs[p, pred] * obj_scores[j])
        out.append(TripletPrediction(boxes[i], int(obj_labels[i]), pred, boxes[j],
                                     int(obj_labels[j]), score, i, j))
    return out


def evaluate_scene(model: SceneGraphModel, scene: SceneAnnotation, projection: np.ndarray,
                   seed: int, vocab: Vocabulary | None = None,
                   with_captions: bool = False) -> SceneResult:
    cfg = model.cfg
    bg = model.background
    truth = [TripletTruth(scene.objects[t.subject_idx].box, scene.objects[t.subject_idx].category,
                          t.predicate, scene.objects[t.object_idx].box,
                          scene.objects[t.object_idx].category) for t in scene.triplets]
    gt_cats = np.array([o.category for o in scene.objects], dtype=np.int64)

    gt = prepare_scene(scene, cfg, projection, scene_seed(seed, 0), "gt", vocab)
    out = model.forward(gt.topology, gt.obj_in, gt.phr_in, gt.cap_in)
    obj_p, pred_p = _probs(out.obj_logits), _probs(out.pred_logits)
    real = obj_p[:, :bg]
    predcls = rank_triplets(gt_cats, np.ones(len(gt_cats)), gt.obj_boxes, pred_p, gt.topology)
    phrcls = rank_triplets(real.argmax(axis=1), real.max(axis=1), gt.obj_boxes, pred_p,
                           gt.topology)

    captions = []
    if with_captions and cfg.caption_branch and gt.topology.n_cap:
        decoded = model.decode_captions(out.features.x_cap)
        for k, (toks, _) in enumerate(decoded):
            if gt.cap_positive[k]:
                captions.append((toks, [t for t in gt.cap_tokens[k] if t != model.end_id]))

    det = prepare_scene(scene, cfg, projection, scene_seed(seed, 1), "test", vocab)
    dout = model.forward(det.topology, det.obj_in, det.phr_in, det.cap_in)
    dp = _probs(dout.obj_logits)
    labels = dp[:, :bg].argmax(axis=1) if len(dp) else np.zeros(0, dtype=np.int64)
    scores = dp[:, :bg].max(axis=1) if len(dp) else np.zeros(0)
    keep = dp.argmax(axis=1) != bg if len(dp) else np.zeros(0, dtype=bool)
    boxes = decode_class_boxes(det.obj_boxes, dout.box_deltas.data, labels, cfg.n_obj_classes)
    sggen = rank_triplets(labels, scores, boxes, _probs(dout.pred_logits), det.topology, keep)
    detections = [(boxes[i], int(labels[i]), float(scores[i])) for i in range(len(boxes)) if keep[i]]

    pred_arg = pred_p.argmax(axis=1) if len(pred_p) else np.zeros(0, dtype=np.int64)
    return SceneResult({"PredCls": predcls, "PhrCls": phrcls, "SGGen": sggen}, truth, detections,
                       [(o.box, o.category) for o in scene.objects], real,
                       gt.phr_labels, pred_arg, captions)


def evaluate(model: SceneGraphModel, scenes: Sequence[SceneAnnotation],
             vocab: Vocabulary | None = None, tasks: Sequence[str] = TASKS,
             with_captions: bool = False, workers: int = 1) -> dict:
    """Recall for each task and K, detection metrics and caption exact-match rate."""
    cfg = model.cfg
    projection = projection_for(cfg)
    seeds = [scene_seed(cfg.eval_seed, i) for i in range(len(scenes))]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(
                lambda a: evaluate_scene(model, a[0], projection, a[1], vocab, with_captions),
                zip(scenes, seeds)))
    else:
        results = [evaluate_scene(model, sc, projection, s, vocab, with_captions)
                   for sc, s in zip(scenes, seeds)]
    reports = []
    for task in tasks:
        for k in cfg.k_values:
            reports.append(recall_at_k([r.predictions[task] for r in results],
                                       [r.truth for r in results], k, task))
    scores = np.concatenate([r.gt_class_scores for r in results]) if results else np.zeros((0, 1))
    labels = np.concatenate([[c for _, c in r.gt_objects] for r in results]).astype(np.int64) \
        if results else np.zeros(0, dtype=np.int64)
    det = detection_metrics([r.detections for r in results], [r.gt_objects for r in results],
                            scores, labels)
    pl = np.concatenate([r.gt_pred_labels for r in results]) if results else np.zeros(0)
    pa = np.concatenate([r.gt_pred_argmax for r in results]) if results else np.zeros(0)
    rel = pl != cfg.n_pred_classes
    out = {
        "reports": reports,
        "detection": det,
        "predicate_acc": float(np.mean(pa[rel] == pl[rel])) if rel.any() else 0.0,
        "predicate_acc_all_pairs": float(np.mean(pa == pl)) if len(pl) else 0.0,
    }
    if with_captions:
        caps = [c for r in results for c in r.captions]
        out["caption_exact_match"] = float(np.mean([a == b for a, b in caps])) if caps else 0.0
    return out


def metrics_payload(result: dict) -> dict:
    payload = {"recall": [r.to_json() for r in result["reports"]],
               "detection": result["detection"],
               "predicate_acc": result["predicate_acc"],
               "predicate_acc_all_pairs": result["predicate_acc_all_pairs"]}
    if "caption_exact_match" in result:
        payload["caption_exact_match"] = result["caption_exact_match"]
    return payload


def predict_scene(model: SceneGraphModel, scene: SceneAnnotation, seed: int,
                  vocab: Vocabulary | None = None):
    """Scene graph from test-time proposals, plus decoded captions for caption proposals.

    Returns ``(prediction, captions, topology)``; each caption is a dict with
    ``box``, ``tokens`` (or ``text`` when a vocabulary is given) and ``score``.
    """
    cfg = model.cfg
    prep = prepare_scene(scene, cfg, projection_for(cfg), seed, "test", vocab)
    out = model.forward(prep.topology, prep.obj_in, prep.phr_in, prep.cap_in)
    obj_p, pred_p = _probs(out.obj_logits), _probs(out.pred_logits)
    labels = obj_p[:, :model.background].argmax(axis=1) if len(obj_p) else np.zeros(0, dtype=np.int64)
    boxes = decode_class_boxes(prep.obj_boxes, out.box_deltas.data, labels, cfg.n_obj_classes)
    endpoints = {p: (int(prep.topology.phr_subj[p]), int(prep.topology.phr_obj[p]))
                 for p in range(prep.topology.n_phr)}
    matrix = SceneGraphMatrix.from_probs(obj_p, pred_p, endpoints)
    prediction = assemble_scene_graph(matrix, boxes)
    captions = []
    if cfg.caption_branch and prep.topology.n_cap:
        for box, (toks, score) in zip(prep.cap_boxes, model.decode_captions(out.features.x_cap)):
            entry = {"box": [float(v) for v in box.as_tuple()], "score": score}
            if vocab is not None:
                entry["text"] = " ".join(vocab.decode(toks))
            else:
                entry["tokens"] = toks
            captions.append(entry)
    return prediction, captions, prep.topology
