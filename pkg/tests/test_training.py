import json

import numpy as np
import pytest

from scenegraph.config import ABLATIONS, ConfigError, ExperimentConfig
from scenegraph.dataset import default_vocabulary, generate_corpus
from scenegraph.geometry import Box
from scenegraph.graph import build_graph
from scenegraph.model import SceneGraphModel
from scenegraph.training import (evaluate, learning_rate, metrics_payload, prepare_scene,
                                 predict_scene, projection_for, rank_triplets, train)

TINY = dict(d=16, n_gates=4, d_in=16, embed_dim=8, hidden_dim=16, steps=30)


def tiny_setup(n=4, **kw):
    cfg = ExperimentConfig(**{**TINY, **kw})
    vocab = default_vocabulary(cfg.scene_config())
    scenes = generate_corpus(cfg.scene_config(), n, 3)
    return cfg, vocab, scenes


def test_gt_mode_labels_are_ground_truth():
    cfg, vocab, scenes = tiny_setup()
    sc = scenes[0]
    prep = prepare_scene(sc, cfg, projection_for(cfg), 0, "gt", vocab)
    assert prep.obj_labels.tolist() == [o.category for o in sc.objects]
    assert np.allclose(prep.obj_targets, 0)
    rel = {(t.subject_idx, t.object_idx): t.predicate for t in sc.triplets}
    for p in range(prep.topology.n_phr):
        key = (int(prep.topology.phr_subj[p]), int(prep.topology.phr_obj[p]))
        assert prep.phr_labels[p] == rel.get(key, cfg.n_pred_classes)
    assert prep.cap_positive.all()
    assert [t[-1] for t in prep.cap_tokens] == [vocab.end_id] * len(sc.captions)


def test_train_mode_proposals_and_labels():
    cfg, vocab, scenes = tiny_setup()
    prep = prepare_scene(scenes[1], cfg, projection_for(cfg), 5, "train", vocab)
    assert prep.obj_in.shape == (len(prep.obj_boxes), cfg.d_in)
    assert prep.phr_in.shape == (prep.topology.n_phr, cfg.d_in)
    assert (prep.obj_labels == cfg.n_obj_classes).any()  # distractors become background
    pos = prep.obj_match >= 0
    assert np.array_equal(prep.obj_labels[~pos], np.full((~pos).sum(), cfg.n_obj_classes))


def test_unknown_mode():
    cfg, vocab, scenes = tiny_setup()
    with pytest.raises(ValueError):
        prepare_scene(scenes[0], cfg, projection_for(cfg), 0, "val", vocab)


def test_no_caption_branch_drops_captions():
    cfg, vocab, scenes = tiny_setup(**ABLATIONS[2])
    prep = prepare_scene(scenes[0], cfg, projection_for(cfg), 0, "gt", vocab)
    assert prep.topology.n_cap == 0


def test_rank_triplets_best_real_predicate():
    boxes = [Box(0, 0, 10, 10), Box(20, 0, 30, 10)]
    topo = build_graph(boxes, [])
    pred_probs = np.array([[0.2, 0.1, 0.7], [0.3, 0.4, 0.3]])  # last column is irrelevant
    out = rank_triplets(np.array([1, 2]), np.array([0.5, 0.8]), boxes, pred_probs, topo)
    by_pair = {(t.subject_idx, t.object_idx): t for t in out}
    assert by_pair[0, 1].predicate == 0 and by_pair[0, 1].score == pytest.approx(0.5 * 0.2 * 0.8)
    assert by_pair[1, 0].predicate == 1 and by_pair[1, 0].score == pytest.approx(0.8 * 0.4 * 0.5)
    kept = rank_triplets(np.array([1, 2]), np.ones(2), boxes, pred_probs, topo, np.array([True, False]))
    assert kept == []


def test_learning_rate_decay():
    cfg = ExperimentConfig(steps=30, decay_at=0.5, decay_factor=0.1)
    assert learning_rate(cfg, 14, 1.0) == 1.0
    assert learning_rate(cfg, 15, 1.0) == pytest.approx(0.1)


def test_config_validation():
    with pytest.raises(ConfigError, match="lr"):
        ExperimentConfig(lr=-1.0)
    with pytest.raises(ConfigError, match="n_gates"):
        ExperimentConfig.loads("schema_version = 1\nn_gates = \"many\"\n")
    with pytest.raises(ConfigError, match="schema_version"):
        ExperimentConfig.loads("d = 4\n")
    cfg = ExperimentConfig(k_values=(20, 50))
    assert ExperimentConfig.loads(cfg.dumps()) == cfg


def _run(cfg, vocab, scenes):
    model = SceneGraphModel(cfg, len(vocab), vocab.start_id, vocab.end_id)
    log = train(model, scenes, vocab)
    payload = metrics_payload(evaluate(model, scenes, vocab, with_captions=True))
    return model, log, json.dumps(payload, sort_keys=True)


def test_training_is_deterministic():
    cfg, vocab, scenes = tiny_setup()
    _, log_a, a = _run(cfg, vocab, scenes)
    _, log_b, b = _run(cfg, vocab, scenes)
    assert log_a.losses == log_b.losses and a == b
    _, log_c, _ = _run(cfg.with_(train_seed=1), vocab, scenes)
    assert log_a.losses != log_c.losses


def test_training_reduces_loss():
    cfg, vocab, scenes = tiny_setup(n=2, steps=200)
    model = SceneGraphModel(cfg, len(vocab), vocab.start_id, vocab.end_id)
    losses = train(model, scenes, vocab).losses
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])


def test_checkpoint_round_trip(tmp_path):
    cfg, vocab, scenes = tiny_setup()
    model, _, before = _run(cfg, vocab, scenes)
    model.save(tmp_path / "ck")
    loaded = SceneGraphModel.load(tmp_path / "ck")
    assert loaded.cfg == cfg
    after = json.dumps(metrics_payload(evaluate(loaded, scenes, vocab, with_captions=True)), sort_keys=True)
    assert after == before
    for name in model.store.names():
        assert np.array_equal(model.store[name].data, loaded.store[name].data)


def test_predict_scene_output():
    cfg, vocab, scenes = tiny_setup()
    model = SceneGraphModel(cfg, len(vocab), vocab.start_id, vocab.end_id)
    pred, caps, topo = predict_scene(model, scenes[0], 0, vocab)
    assert topo.n_phr == len(topo.phrase_endpoints)
    assert all(isinstance(c["text"], str) for c in caps)
    assert all(e.subject_idx in pred.objects and e.object_idx in pred.objects for e in pred.edges)
