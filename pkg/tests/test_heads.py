import numpy as np
import pytest

from scenegraph import autodiff as ad
from scenegraph import heads
from scenegraph.autodiff import ParamStore, Value
from scenegraph.geometry import Box


def store_with_heads(d=6, c_obj=4, c_pred=3, seed=0):
    store = ParamStore()
    heads.init_params(store, d, c_obj, c_pred, np.random.default_rng(seed))
    return store


def test_head_shapes():
    store = store_with_heads()
    x = Value(np.ones((5, 6)))
    assert heads.classify_objects(store, x).shape == (5, 5)
    assert heads.classify_predicates(store, x).shape == (5, 4)
    assert heads.regress_boxes(store, x).shape == (5, 16)
    assert heads.regress_caption_boxes(store, x).shape == (5, 4)


def test_zero_weights_give_uniform_softmax():
    store = store_with_heads()
    store["head.obj.W"].data[...] = 0
    probs = ad.softmax(heads.classify_objects(store, Value(np.ones((2, 6)))).data)
    assert np.allclose(probs, 0.2)


def test_head_dim_mismatch():
    with pytest.raises(ValueError):
        heads.classify_objects(store_with_heads(), Value(np.ones((2, 7))))


def test_zero_deltas_decode_to_proposal():
    boxes = [Box(0, 0, 10, 10), Box(5, 5, 25, 15)]
    out = heads.decode_class_boxes(boxes, np.zeros((2, 16)), np.array([1, 3]), 4)
    for a, b in zip(out, boxes):
        assert np.allclose(a.as_tuple(), b.as_tuple())


def test_background_keeps_proposal():
    box = Box(0, 0, 10, 10)
    out = heads.decode_class_boxes([box], np.ones((1, 16)), np.array([4]), 4)
    assert out[0] == box


def test_class_specific_delta_slice():
    box = Box(0, 0, 10, 10)
    deltas = np.zeros((1, 16))
    deltas[0, 4:6] = [0.5, 0.0]  # shift x by half a width for class 1
    out = heads.decode_class_boxes([box], deltas, np.array([1]), 4)[0]
    assert out.center[0] == pytest.approx(box.center[0] + 0.5 * box.width)
    assert heads.decode_class_boxes([box], deltas, np.array([0]), 4)[0].center == pytest.approx(box.center)


def _matrix(labels, scores, c_obj=3, c_pred=2):
    return heads.SceneGraphMatrix(np.array(labels), np.array(scores, dtype=float), c_obj, c_pred)


def test_assemble_two_objects():
    m = _matrix([[0, 1], [2, 1]], [[0.9, 0.5], [0.7, 0.8]])
    boxes = [Box(0, 0, 1, 1), Box(2, 2, 3, 3)]
    g = heads.assemble_scene_graph(m, boxes)
    assert sorted(g.objects) == [0, 1]
    # (1, 0) carries the irrelevant label, so only 0 -> 1 survives
    assert len(g.edges) == 1
    e = g.edges[0]
    assert (e.subject_idx, e.predicate, e.object_idx) == (0, 1, 1)
    assert e.score == pytest.approx(0.9 * 0.5 * 0.8)


def test_assemble_drops_background_and_its_edges():
    m = _matrix([[3, 0, 0], [0, 1, 1], [0, 0, 2]], np.full((3, 3), 0.5))
    g = heads.assemble_scene_graph(m, [Box(0, 0, 1, 1)] * 3)
    assert sorted(g.objects) == [1, 2]
    assert {(e.subject_idx, e.object_idx) for e in g.edges} == {(1, 2), (2, 1)}


def test_all_irrelevant_gives_no_edges():
    m = _matrix([[0, 2], [2, 0]], np.ones((2, 2)))
    g = heads.assemble_scene_graph(m, [Box(0, 0, 1, 1)] * 2)
    assert len(g.objects) == 2 and g.edges == []


def test_from_probs():
    obj = np.array([[0.1, 0.7, 0.1, 0.1], [0.6, 0.2, 0.1, 0.1]])
    pred = np.array([[0.2, 0.5, 0.3], [0.1, 0.1, 0.8]])
    m = heads.SceneGraphMatrix.from_probs(obj, pred, {0: (0, 1), 1: (1, 0)})
    assert m.labels.tolist() == [[1, 1], [2, 0]]
    assert m.scores[0, 1] == 0.5 and m.scores[1, 1] == 0.6
    assert (m.background, m.irrelevant) == (3, 2)


def test_to_json_and_dot():
    m = _matrix([[0, 1], [2, 1]], [[0.9, 0.5], [0.7, 0.8]])
    g = heads.assemble_scene_graph(m, [Box(0, 0, 1, 1), Box(2, 2, 3, 3)])
    js = g.to_json(captions=[{"box": [0, 0, 3, 3], "text": "x", "score": -0.1}])
    assert js["objects"][1]["box"] == [2, 2, 3, 3]
    assert js["edges"] == [{"s": 0, "p": 1, "o": 1, "score": pytest.approx(0.36)}]
    assert js["captions"][0]["text"] == "x"
    dot = g.to_dot(["a", "b", "c"], ["on", "by"])
    assert 'o0 -> o1 [label="by"]' in dot and "fillcolor=red" in dot


def test_joint_loss_sums_terms():
    rng = np.random.default_rng(0)
    obj_logits = Value(rng.normal(size=(3, 5)))
    pred_logits = Value(rng.normal(size=(4, 4)))
    deltas = Value(rng.normal(size=(3, 16)))
    targets = rng.normal(size=(3, 4))
    obj_labels, pred_labels = [1, 4, 2], [0, 3, 3, 1]
    pos = np.array([True, False, True])
    total = heads.joint_loss(obj_logits, obj_labels, deltas, targets, pos, pred_logits, pred_labels,
                             Value(0.25), Value(0.5))
    ce_o = float(ad.softmax_cross_entropy(obj_logits, obj_labels).data)
    ce_p = float(ad.softmax_cross_entropy(pred_logits, pred_labels).data)
    d = deltas.data
    reg = (float(ad.smooth_l1(Value(d[0, 4:8]), targets[0]).data)
           + float(ad.smooth_l1(Value(d[2, 8:12]), targets[2]).data)) / 2
    assert float(total.data) == pytest.approx(ce_o + ce_p + reg + 0.75, rel=1e-12)


def test_joint_loss_uniform_logits():
    loss = heads.joint_loss(Value(np.zeros((2, 5))), [0, 4], None, None, None, None, [])
    assert float(loss.data) == pytest.approx(np.log(5))


def test_joint_loss_gradients():
    rng = np.random.default_rng(1)
    store = store_with_heads(seed=1)
    for n in ("head.obj.W", "head.pred.W", "head.box.W"):
        store[n].data[...] = rng.normal(scale=0.5, size=store[n].shape)
    x = Value(rng.normal(size=(3, 6)))
    targets = rng.normal(scale=0.3, size=(3, 4))

    def f():
        return heads.joint_loss(heads.classify_objects(store, x), [0, 2, 4],
                                heads.regress_boxes(store, x), targets, [True, True, False],
                                heads.classify_predicates(store, x), [1, 3, 0])
    rep = ad.grad_check(f, [store[n] for n in ("head.obj.W", "head.pred.W", "head.box.W")])
    assert rep["max_rel_error"] < 1e-4
