"""The full network: specialization, refinement, task heads and caption decoder."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import caption, heads, refine
from .autodiff import ParamStore, Value
from .config import ExperimentConfig
from .graph import GraphTopology


@dataclass
class ModelOutputs:
    features: refine.NodeFeatures
    obj_logits: Value
    box_deltas: Value
    pred_logits: Value
    cap_box_deltas: Value | None


class SceneGraphModel:
    def __init__(self, cfg: ExperimentConfig, vocab_size: int, start_id: int = 0,
                 end_id: int = 1):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.start_id, self.end_id = start_id, end_id
        self.store = ParamStore()
        rng = np.random.default_rng(cfg.init_seed)
        refine.init_params(self.store, cfg.d_in, cfg.d, cfg.n_gates, rng)
        heads.init_params(self.store, cfg.d, cfg.n_obj_classes, cfg.n_pred_classes, rng,
                          caption_box_reg=cfg.caption_box_reg)
        caption.init_params(self.store, cfg.d, vocab_size, cfg.embed_dim, cfg.hidden_dim, rng)

    @property
    def background(self) -> int:
        return self.cfg.n_obj_classes

    @property
    def irrelevant(self) -> int:
        return self.cfg.n_pred_classes

    def vision_params(self) -> list[Value]:
        return self.store.select(exclude=caption.PREFIX)

    def language_params(self) -> list[Value]:
        return self.store.select(prefix=caption.PREFIX)

    def forward(self, topo: GraphTopology, obj_in, phr_in, cap_in) -> ModelOutputs:
        feats = refine.specialize(self.store, obj_in, phr_in, cap_in)
        feats = refine.run_refinement(self.store, topo, feats, self.cfg.refine_iters,
                                      self.cfg.gate_normalize)
        cap_deltas = None
        if self.cfg.caption_box_reg and topo.n_cap:
            cap_deltas = heads.regress_caption_boxes(self.store, feats.x_cap)
        return ModelOutputs(
            features=feats,
            obj_logits=heads.classify_objects(self.store, feats.x_obj),
            box_deltas=heads.regress_boxes(self.store, feats.x_obj),
            pred_logits=heads.classify_predicates(self.store, feats.x_phr),
            cap_box_deltas=cap_deltas,
        )

    def caption_loss(self, x_cap: Value, token_seqs) -> Value:
        return caption.caption_loss(self.store, x_cap, token_seqs, self.start_id)

    def decode_captions(self, x_cap, max_len: int | None = None):
        return caption.decode_greedy(self.store, x_cap, max_len or self.cfg.max_caption_len,
                                     self.start_id, self.end_id)

    def save(self, path):
        path = Path(path)
        self.store.save(path)
        self.cfg.save(path / "config.txt")
        (path / "model.txt").write_text(
            f"vocab_size = {self.vocab_size}\nstart_id = {self.start_id}\nend_id = {self.end_id}\n")

    @classmethod
    def load(cls, path) -> "SceneGraphModel":
        path = Path(path)
        cfg = ExperimentConfig.load(path / "config.txt")
        meta = {}
        for line in (path / "model.txt").read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = int(v)
        model = cls(cfg, meta["vocab_size"], meta["start_id"], meta["end_id"])
        model.store.load(path)
        return model

