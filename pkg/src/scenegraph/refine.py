"""Feature specialization and gated merge-and-refine message passing.

Six edge directions carry messages::

    p2s, p2o   phrase -> object   (object is the subject / the object of the phrase)
    s2p, o2p   object -> phrase
    r2p        caption -> phrase
    p2r        phrase -> caption

Each direction owns a gate matrix ``[G, 2D]`` and a transform ``[D, D]``.
A merge averages gated source features over the target's incident edges of
that direction; the update adds ``W @ relu(merged)`` to the current feature.
All updates within an iteration read the features of the previous step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Value
from .graph import GraphTopology

BRANCHES = ("obj", "phr", "cap")
DIRECTIONS = ("p2s", "p2o", "s2p", "o2p", "r2p", "p2r")


@dataclass
class NodeFeatures:
    x_obj: Value
    x_phr: Value
    x_cap: Value
    step: int = 0

    def check(self, topo: GraphTopology):
        rows = (self.x_obj.shape[0], self.x_phr.shape[0], self.x_cap.shape[0])
        if rows != (topo.n_obj, topo.n_phr, topo.n_cap):
            raise ValueError(f"feature rows {rows} do not match topology "
                             f"{(topo.n_obj, topo.n_phr, topo.n_cap)}")


def init_params(store: ParamStore, d_in: int, d: int, n_gates: int,
                rng: np.random.Generator, transform_std: float = 0.01,
                gate_std: float = 0.01):
    for br in BRANCHES:
        store.add(f"spec.{br}.W1", rng.normal(scale=np.sqrt(2.0 / d_in), size=(d, d_in)))
        store.add(f"spec.{br}.b1", np.zeros(d))
        store.add(f"spec.{br}.W2", rng.normal(scale=np.sqrt(1.0 / d), size=(d, d)))
        store.add(f"spec.{br}.b2", np.zeros(d))
    for dr in DIRECTIONS:
        store.add(f"refine.gate.{dr}", rng.normal(scale=gate_std, size=(n_gates, 2 * d)))
        store.add(f"refine.F.{dr}", rng.normal(scale=transform_std, size=(d, d)))


def specialize_branch(store: ParamStore, branch: str, x) -> Value:
    """Two dense layers with a ReLU between; the output stays pre-activation."""
    x = ad.as_value(x)
    W1 = store[f"spec.{branch}.W1"]
    if x.shape[-1] != W1.shape[1]:
        raise ValueError(f"{branch} input dim {x.shape[-1]} != expected {W1.shape[1]}")
    h = ad.relu(ad.linear(x, W1, store[f"spec.{branch}.b1"]))
    return ad.linear(h, store[f"spec.{branch}.W2"], store[f"spec.{branch}.b2"])


def specialize(store: ParamStore, obj_in, phr_in, cap_in) -> NodeFeatures:
    return NodeFeatures(specialize_branch(store, "obj", obj_in),
                        specialize_branch(store, "phr", phr_in),
                        specialize_branch(store, "cap", cap_in), step=0)


def gate_value(x_a, x_b, w, normalize: bool = False) -> Value:
    """Sum over gate templates of ``sigmoid(w_g . [x_a, x_b])``.

    Accepts single vectors or row-aligned matrices (one gate per row).
    """
    z = ad.linear(ad.concat([ad.as_value(x_a), ad.as_value(x_b)], axis=-1), ad.as_value(w))
    g = ad.sum(ad.sigmoid(z), axis=-1)
    if normalize:
        g = g * (1.0 / w.shape[0])
    return g


def _direction_edges(topo: GraphTopology, direction: str):
    """(target index array, source index array, target count, target level, source level)."""
    n_phr = topo.n_phr
    all_phr = np.arange(n_phr, dtype=np.int64)
    if direction == "p2s":
        return topo.phr_subj, all_phr, topo.n_obj, "obj", "phr"
    if direction == "p2o":
        return topo.phr_obj, all_phr, topo.n_obj, "obj", "phr"
    if direction == "s2p":
        return all_phr, topo.phr_subj, n_phr, "phr", "obj"
    if direction == "o2p":
        return all_phr, topo.phr_obj, n_phr, "phr", "obj"
    if direction == "r2p":
        return topo.pr_phr, topo.pr_cap, n_phr, "phr", "cap"
    if direction == "p2r":
        return topo.pr_cap, topo.pr_phr, topo.n_cap, "cap", "phr"
    raise ValueError(f"unknown direction {direction!r}")


def merge_all(store: ParamStore, topo: GraphTopology, feats: NodeFeatures, direction: str,
              normalize_gate: bool = False) -> Value:
    """Merged messages for every target node of one direction, ``[n_target, D]``.

    Targets with no incident edge of this direction receive the zero vector.
    """
    tgt, src, n_tgt, tgt_level, src_level = _direction_edges(topo, direction)
    x = {"obj": feats.x_obj, "phr": feats.x_phr, "cap": feats.x_cap}
    d = feats.x_obj.shape[1]
    if len(tgt) == 0:
        return Value(np.zeros((n_tgt, d)))
    x_tgt = ad.take_rows(x[tgt_level], tgt)
    x_src = ad.take_rows(x[src_level], src)
    gates = gate_value(x_tgt, x_src, store[f"refine.gate.{direction}"], normalize_gate)
    msgs = ad.mul(x_src, ad.reshape(gates, (-1, 1)))
    counts = np.bincount(tgt, minlength=n_tgt).astype(np.float64)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    return ad.mul(ad.segment_sum(msgs, tgt, n_tgt), inv[:, None])


def merge(store: ParamStore, topo: GraphTopology, feats: NodeFeatures, target,
          direction: str, normalize_gate: bool = False) -> Value:
    """Merged message for a single target node (a :class:`NodeRef` or index)."""
    idx = getattr(target, "index", target)
    return ad.index(merge_all(store, topo, feats, direction, normalize_gate), idx)


def _transform(store: ParamStore, direction: str, merged: Value) -> Value:
    return ad.matmul(ad.relu(merged), ad.transpose(store[f"refine.F.{direction}"]))


def _refine(store, topo, feats, current: Value, directions, normalize_gate) -> Value:
    out = current
    for dr in directions:
        out = ad.add(out, _transform(store, dr, merge_all(store, topo, feats, dr, normalize_gate)))
    return out


def refine_objects(store, topo, feats, normalize_gate=False) -> Value:
    feats.check(topo)
    return _refine(store, topo, feats, feats.x_obj, ("p2s", "p2o"), normalize_gate)


def refine_phrases(store, topo, feats, normalize_gate=False) -> Value:
    feats.check(topo)
    return _refine(store, topo, feats, feats.x_phr, ("s2p", "o2p", "r2p"), normalize_gate)


def refine_captions(store, topo, feats, normalize_gate=False) -> Value:
    feats.check(topo)
    return _refine(store, topo, feats, feats.x_cap, ("p2r",), normalize_gate)


def run_refinement(store: ParamStore, topo: GraphTopology, feats: NodeFeatures, iterations: int,
                   normalize_gate: bool = False) -> NodeFeatures:
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    for _ in range(iterations):
        feats = NodeFeatures(refine_objects(store, topo, feats, normalize_gate),
                             refine_phrases(store, topo, feats, normalize_gate),
                             refine_captions(store, topo, feats, normalize_gate),
                             step=feats.step + 1)
    return feats
