import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scenegraph.geometry import (Box, ScoredBox, coverage_fraction, decode_box_delta,
                                 encode_box_delta, iou, kmeans_anchors, kmeans_inertia, nms)

from conftest import random_box

coord = st.floats(0, 200, allow_nan=False)


@st.composite
def boxes(draw, positive=True):
    x1, y1 = draw(coord), draw(coord)
    lo = 0.5 if positive else 0.0
    w = draw(st.floats(lo, 100)), draw(st.floats(lo, 100))
    return Box(x1, y1, x1 + w[0], y1 + w[1])


def test_box_rejects_inverted_corners():
    with pytest.raises(ValueError):
        Box(5, 0, 1, 1)


@pytest.mark.parametrize("a,b,expected", [
    ((0, 0, 10, 10), (0, 0, 10, 10), 1.0),
    ((0, 0, 10, 10), (20, 20, 30, 30), 0.0),
    ((0, 0, 10, 10), (5, 5, 15, 15), 25 / 175),
])
def test_iou_examples(a, b, expected):
    assert iou(Box(*a), Box(*b)) == pytest.approx(expected, abs=1e-12)


def test_iou_degenerate_is_zero():
    assert iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


@given(boxes())
def test_iou_self_is_one(a):
    assert iou(a, a) == pytest.approx(1.0)


@pytest.mark.parametrize("outer,expected", [
    ((0, 0, 8, 10), 0.8),
    ((0, 0, 10, 10), 1.0),
    ((50, 50, 60, 60), 0.0),
])
def test_coverage_examples(outer, expected):
    assert coverage_fraction(Box(0, 0, 10, 10), Box(*outer)) == pytest.approx(expected)


def test_coverage_degenerate_inner_raises():
    with pytest.raises(ValueError, match="zero area"):
        coverage_fraction(Box(0, 0, 0, 5), Box(0, 0, 10, 10))


@given(boxes(), st.floats(0, 20), st.floats(0, 20), st.floats(0, 20), st.floats(0, 20))
def test_coverage_one_when_contained(inner, l, t, r, b):
    outer = Box(inner.x1 - l, inner.y1 - t, inner.x2 + r, inner.y2 + b)
    assert coverage_fraction(inner, outer) == 1.0


def brute_force_greedy(cands, thr):
    remaining = sorted(cands, key=lambda c: (-c.score, c.index))
    kept = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [c for c in remaining if iou(best.box, c.box) <= thr]
    return kept


def test_nms_empty():
    assert nms([], 0.5) == []


def test_nms_duplicates():
    b = Box(0, 0, 10, 10)
    out = nms([ScoredBox(b, 0.8, 1), ScoredBox(b, 0.9, 0)], 0.5)
    assert [c.index for c in out] == [0]


def test_nms_tie_break_by_index():
    b = Box(0, 0, 10, 10)
    out = nms([ScoredBox(b, 0.5, 3), ScoredBox(b, 0.5, 1)], 0.5)
    assert [c.index for c in out] == [1]


def test_nms_rejects_bad_threshold():
    with pytest.raises(ValueError):
        nms([], 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_nms_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    cands = [ScoredBox(random_box(rng), float(rng.uniform()), i) for i in range(10)]
    out = nms(cands, 0.5)
    assert out == brute_force_greedy(cands, 0.5)
    assert all(iou(a.box, b.box) <= 0.5 for i, a in enumerate(out) for b in out[i + 1:])
    assert [c.score for c in out] == sorted((c.score for c in out), reverse=True)


@given(st.integers(0, 10_000), st.integers(0, 15), st.floats(0.1, 1.0))
def test_nms_subset_and_idempotent(seed, n, thr):
    rng = np.random.default_rng(seed)
    cands = [ScoredBox(random_box(rng), float(rng.uniform()), i) for i in range(n)]
    once = nms(cands, thr)
    assert set(once) <= set(cands)
    assert nms(once, thr) == once


def test_kmeans_distinct_points_are_centers():
    bxs = [Box(0, 0, 10, 20), Box(0, 0, 40, 5), Box(0, 0, 3, 3)]
    anchors = kmeans_anchors(bxs, 3, seed=0)
    got = sorted((round(a.log_w, 12), round(a.log_h, 12)) for a in anchors)
    want = sorted((round(math.log(b.width), 12), round(math.log(b.height), 12)) for b in bxs)
    assert got == want


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_inertia_non_increasing(seed):
    rng = np.random.default_rng(seed)
    bxs = [random_box(rng) for _ in range(60)]
    hist = []
    kmeans_anchors(bxs, 4, seed=seed, history=hist)
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_kmeans_deterministic():
    rng = np.random.default_rng(1)
    bxs = [random_box(rng) for _ in range(30)]
    assert kmeans_anchors(bxs, 3, seed=5) == kmeans_anchors(bxs, 3, seed=5)


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans_anchors([Box(0, 0, 1, 1)] * 3, 2, seed=0)
    with pytest.raises(ValueError):
        kmeans_anchors([Box(0, 0, 1, 1)], 2, seed=0)
    with pytest.raises(ValueError):
        kmeans_anchors([Box(0, 0, 0, 1), Box(0, 0, 2, 2)], 1, seed=0)


def _restart_oracle(pts, k, restarts=100, seed=0):
    """Best of many random-initialization Lloyd runs (plain, no k-means++)."""
    rng = np.random.default_rng(seed)
    best, best_c = np.inf, None
    for _ in range(restarts):
        c = pts[rng.choice(len(pts), k, replace=False)].copy()
        for _ in range(100):
            a = ((pts[:, None] - c[None]) ** 2).sum(-1).argmin(1)
            new = np.array([pts[a == j].mean(0) if np.any(a == j) else c[j] for j in range(k)])
            if np.allclose(new, c):
                break
            c = new
        inertia = ((pts[:, None] - c[None]) ** 2).sum(-1).min(1).sum()
        if inertia < best:
            best, best_c = inertia, c
    return best_c


def test_kmeans_three_modes_match_restart_oracle():
    rng = np.random.default_rng(3)
    modes = [(10, 40), (60, 15), (30, 30)]
    bxs = []
    for i in range(50):
        w, h = modes[i % 3]
        w *= math.exp(rng.normal(scale=0.05))
        h *= math.exp(rng.normal(scale=0.05))
        bxs.append(Box(0, 0, w, h))
    anchors = kmeans_anchors(bxs, 3, seed=0)
    pts = np.array([[math.log(b.width), math.log(b.height)] for b in bxs])
    oracle = _restart_oracle(pts, 3)
    got = np.array(sorted((a.log_w, a.log_h) for a in anchors))
    want = np.array(sorted(map(tuple, oracle)))
    assert np.abs(got - want).max() < 0.05
    assert kmeans_inertia(bxs, anchors) <= ((pts[:, None] - oracle[None]) ** 2).sum(-1).min(1).sum() + 1e-9


def test_encode_identity_and_example():
    p = Box(0, 0, 10, 10)
    assert np.array_equal(encode_box_delta(p, p), np.zeros(4))
    d = encode_box_delta(p, Box(0, 0, 20, 10))
    assert d == pytest.approx([0.5, 0.0, math.log(2), 0.0])


def test_encode_rejects_degenerate():
    with pytest.raises(ValueError):
        encode_box_delta(Box(0, 0, 10, 10), Box(0, 0, 0, 10))
    with pytest.raises(ValueError):
        decode_box_delta(Box(0, 0, 0, 10), np.zeros(4))


def test_round_trip_1000_pairs():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        p, t = random_box(rng), random_box(rng)
        back = decode_box_delta(p, encode_box_delta(p, t))
        assert np.abs(np.array(back.as_tuple()) - np.array(t.as_tuple())).max() < 1e-9
