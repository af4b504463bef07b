"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 5, 6 and 9 train full-size models on 2000 scenes and take several
minutes each on one CPU core.
"""
import hashlib
import json
import time

import numpy as np
import pytest

from scenegraph import autodiff as ad
from scenegraph import refine
from scenegraph.autodiff import Value
from scenegraph.config import ABLATIONS, ExperimentConfig
from scenegraph.dataset import (ObjectInstance, RegionCaption, RelationTriplet, SceneAnnotation,
                                default_vocabulary, generate_corpus)
from scenegraph.evaluation import TASKS, mean_average_precision, recall_at_k
from scenegraph.geometry import Box
from scenegraph.graph import build_graph
from scenegraph.model import SceneGraphModel
from scenegraph.training import (evaluate, metrics_payload, prepare_scene, projection_for,
                                 scene_loss, train)

from oracles import (rand_int_box, random_detection_instance, random_recall_instance, ref_graph,
                     ref_map, ref_recall)

N_TRAIN, TRAIN_SEED = 2000, 0
N_TEST, TEST_SEED = 1000, 99


@pytest.fixture
def report(capsys):
    def emit(n, name, ok, detail=""):
        with capsys.disabled():
            print(f"\ncriterion {n} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"criterion {n} failed: {detail}"
    return emit


def _recall(payload, task, k):
    return next(r["recall"] for r in payload["recall"] if r["task"] == task and r["K"] == k)


# 1

def _toy_scene(vocab):
    objs = [ObjectInstance(Box(20, 20, 60, 70), 0, np.full(8, 0.3)),
            ObjectInstance(Box(70, 25, 120, 65), 3, np.full(8, -0.2)),
            ObjectInstance(Box(40, 90, 100, 140), 5, np.linspace(-1, 1, 8))]
    trip = [RelationTriplet(0, 1, 0), RelationTriplet(1, 0, 1), RelationTriplet(0, 2, 2)]
    caps = [RegionCaption(Box(15, 15, 125, 75), vocab.encode(["cup", "left", "of", "cat", "<end>"])),
            RegionCaption(Box(15, 15, 105, 145), vocab.encode(["cup", "above", "tree", "<end>"]))]
    return SceneAnnotation((256.0, 256.0), objs, trip, caps)


def test_criterion_1_joint_loss_gradient(report):
    t0 = time.time()
    cfg = ExperimentConfig(d=8, d_in=8, n_gates=2, embed_dim=4, hidden_dim=6, **ABLATIONS[4])
    vocab = default_vocabulary(cfg.scene_config())
    model = SceneGraphModel(cfg, len(vocab), vocab.start_id, vocab.end_id)
    rng = np.random.default_rng(0)
    for p in model.store.select():
        p.data[...] = rng.normal(scale=0.3, size=p.shape)
    prep = prepare_scene(_toy_scene(vocab), cfg, projection_for(cfg), 0, "gt", vocab)
    assert (prep.topology.n_obj, prep.topology.n_cap) == (3, 2) and prep.topology.edges_pr
    res = ad.grad_check(lambda: scene_loss(model, prep, 0), model.store.select(), eps=1e-3)
    elapsed = time.time() - t0
    ok = res["max_rel_error"] < 1e-4 and elapsed < 60
    report(1, "joint-loss finite differences",
           ok, f"max rel err {res['max_rel_error']:.2e} (abs {res['max_abs_error']:.2e}, "
               f"unfloored {res['max_unfloored_rel_error']:.2e}) over "
               f"{res['n_checked']} scalars, {elapsed:.1f}s")


# 2

def test_criterion_2_residual_identity(report):
    cfg = ExperimentConfig()
    store = ad.ParamStore()
    refine.init_params(store, cfg.d_in, cfg.d, cfg.n_gates, np.random.default_rng(0), 0.5, 0.5)
    for d in refine.DIRECTIONS:
        store[f"refine.F.{d}"].data[...] = 0
    rng = np.random.default_rng(1)
    failures = []
    for trial in range(5):
        objs = [rand_int_box(rng, canvas=200, lo=10, hi=60) for _ in range(int(rng.integers(2, 8)))]
        caps = [rand_int_box(rng, canvas=200, lo=40, hi=150) for _ in range(3)]
        topo = build_graph(objs, caps)
        feats = refine.NodeFeatures(Value(rng.normal(size=(topo.n_obj, cfg.d))),
                                    Value(rng.normal(size=(topo.n_phr, cfg.d))),
                                    Value(rng.normal(size=(topo.n_cap, cfg.d))))
        for T in (1, 2, 3):
            out = refine.run_refinement(store, topo, feats, T)
            for a, b in ((out.x_obj, feats.x_obj), (out.x_phr, feats.x_phr), (out.x_cap, feats.x_cap)):
                if a.data.tobytes() != b.data.tobytes():
                    failures.append((trial, T))
    report(2, "zero transforms give bitwise identity", not failures,
           f"5 graphs x T in {{1,2,3}}, mismatches {failures}")


# 3

def test_criterion_3_graph_oracle(report):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        objs = [rand_int_box(rng, canvas=30, lo=1, hi=10) for _ in range(int(rng.integers(0, 11)))]
        caps = [rand_int_box(rng, canvas=30, lo=4, hi=26) for _ in range(int(rng.integers(0, 6)))]
        topo = build_graph(objs, caps)
        pairs, unions, edges = ref_graph(objs, caps)
        got_pairs = [topo.phrase_endpoints[p] for p in range(topo.n_phr)]
        got_unions = [b.as_tuple() for b in topo.phrase_boxes]
        same = (got_pairs == pairs and got_unions == unions and set(topo.edges_pr) == edges
                and len(topo.edges_pr) == len(edges)
                and topo.edges_sp == [(i, p) for p, (i, _) in enumerate(pairs)]
                and topo.edges_op == [(j, p) for p, (_, j) in enumerate(pairs)])
        mismatches += not same
    report(3, "graph construction equals brute force", mismatches == 0,
           f"{mismatches} mismatches over 1000 instances")


# 4

def test_criterion_4_metric_oracles(report):
    recall_bad = order_bad = map_bad = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        preds, gts = random_recall_instance(rng)
        got = {}
        for mode in TASKS:
            for k in (50, 100):
                got[mode, k] = recall_at_k(preds[mode], gts, k, mode).recall
                recall_bad += got[mode, k] != ref_recall(preds[mode], gts, k, mode)
            order_bad += not got[mode, 100] >= got[mode, 50]
        for k in (50, 100):
            order_bad += not got["PredCls", k] >= got["PhrCls", k] >= got["SGGen", k]
        dets, dgts = random_detection_instance(np.random.default_rng(1000 + seed))
        want = ref_map(dets, dgts)
        map_bad += not abs(mean_average_precision(dets, dgts) - want) <= 1e-12 * max(1.0, abs(want))
    report(4, "recall and mAP oracles, metric orderings",
           recall_bad == 0 and map_bad == 0 and order_bad == 0,
           f"recall mismatches {recall_bad}, mAP mismatches {map_bad}, ordering violations {order_bad}")


# 5, 6, 9: full-size ablation models

@pytest.fixture(scope="module")
def corpora():
    base = ExperimentConfig()
    vocab = default_vocabulary(base.scene_config())
    return (base, vocab, generate_corpus(base.scene_config(), N_TRAIN, TRAIN_SEED),
            generate_corpus(base.scene_config(), N_TEST, TEST_SEED))


@pytest.fixture(scope="module")
def trained(corpora):
    base, vocab, scenes, test = corpora
    cache = {}

    def get(row):
        if row not in cache:
            cfg = base.with_(**ABLATIONS[row])
            model = SceneGraphModel(cfg, len(vocab), vocab.start_id, vocab.end_id)
            train(model, scenes, vocab)
            payload = metrics_payload(evaluate(model, test, vocab, with_captions=cfg.caption_branch))
            cache[row] = (model, payload)
        return cache[row]
    return get


def test_criterion_5_message_passing_helps(trained, report):
    r1 = _recall(trained(1)[1], "PredCls", 50)
    r2 = _recall(trained(2)[1], "PredCls", 50)
    report(5, "message passing improves PredCls R@50", 100 * (r2 - r1) >= 5,
           f"model 1 {100 * r1:.2f}, model 2 {100 * r2:.2f}, gain {100 * (r2 - r1):+.2f} points")


def test_criterion_6_caption_supervision(trained, report):
    r3 = _recall(trained(3)[1], "SGGen", 50)
    r4 = _recall(trained(4)[1], "SGGen", 50)
    report(6, "caption supervision does not hurt SGGen R@50", r4 >= r3,
           f"model 3 {100 * r3:.2f}, model 4 {100 * r4:.2f}")


def test_criterion_9_checkpoint_round_trip(trained, corpora, tmp_path, report):
    _, vocab, _, test = corpora
    model, before = trained(4)
    model.save(tmp_path / "ck")
    loaded = SceneGraphModel.load(tmp_path / "ck")
    after = metrics_payload(evaluate(loaded, test, vocab, with_captions=True))
    a, b = json.dumps(before, sort_keys=True), json.dumps(after, sort_keys=True)
    report(9, "checkpoint round trip preserves evaluation", a == b,
           f"{len(after['recall'])} recall numbers, detection and caption metrics "
           f"{'identical' if a == b else 'differ'}")


# 7

def test_criterion_7_overfit(report):
    t0 = time.time()
    cfg = ExperimentConfig(steps=2000, **ABLATIONS[4])
    vocab = default_vocabulary(cfg.scene_config())
    scenes = generate_corpus(cfg.scene_config(), 10, 0)
    model = SceneGraphModel(cfg, len(vocab), vocab.start_id, vocab.end_id)
    train(model, scenes, vocab)
    res = evaluate(model, scenes, vocab, with_captions=True)
    elapsed = time.time() - t0
    obj, pred, cap = res["detection"]["top1_acc"], res["predicate_acc"], res["caption_exact_match"]
    report(7, "overfit 10 scenes in 2000 steps",
           obj >= 0.95 and pred >= 0.90 and cap >= 0.90 and elapsed < 300,
           f"object acc {obj:.3f}, predicate acc {pred:.3f}, captions exact {cap:.3f}, {elapsed:.0f}s")


# 8

def _full_run():
    cfg = ExperimentConfig(steps=400, **ABLATIONS[4])
    vocab = default_vocabulary(cfg.scene_config())
    scenes = generate_corpus(cfg.scene_config(), 40, 5)
    model = SceneGraphModel(cfg, len(vocab), vocab.start_id, vocab.end_id)
    train(model, scenes, vocab)
    payload = metrics_payload(evaluate(model, generate_corpus(cfg.scene_config(), 20, 6), vocab,
                                       with_captions=True, workers=4))
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def test_criterion_8_determinism(report):
    a, b = _full_run(), _full_run()
    report(8, "identical seeds give hash-equal metrics", a == b, f"{a[:16]} vs {b[:16]}")
