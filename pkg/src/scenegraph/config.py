"""Experiment configuration and its ``key = value`` file format.

Each non-comment line is ``key = <json value>``; the first key must be
``schema_version``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .dataset import SceneConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset
    n_obj_classes: int = 12
    n_pred_classes: int = 6
    n_scenes: int = 2000
    data_seed: int = 0
    canvas_w: float = 256.0
    canvas_h: float = 256.0
    min_objects: int = 2
    max_objects: int = 8
    attr_dim: int = 8
    d_in: int = 64
    noise_sigma: float = 0.05
    projection_seed: int = 7
    jitter: float = 0.1
    proposal_copies: int = 2
    n_distractors: int = 3
    max_proposals: int = 2000
    min_obj_edge: float = 16.0
    min_cap_edge: float = 32.0
    # model
    d: int = 64
    n_gates: int = 16
    fr_iters: int = 1
    message_passing: bool = True
    caption_branch: bool = True
    caption_supervision: bool = True
    caption_box_reg: bool = True
    gate_normalize: bool = False
    embed_dim: int = 32
    hidden_dim: int = 64
    max_caption_len: int = 12
    coverage_threshold: float = 0.7
    init_seed: int = 0
    # optimizer
    optimizer: str = "sgd"      # vision parameters: "sgd" or "adam"
    lr: float = 0.01
    momentum: float = 0.9
    lm_lr: float = 0.002
    clip_norm: float = 10.0
    steps: int = 30000
    decay_at: float = 0.6667
    decay_factor: float = 0.1
    train_seed: int = 0
    # sampling and inference
    train_nms_obj: float = 0.7
    train_nms_cap: float = 0.75
    test_nms_obj: float = 0.35
    test_nms_cap: float = 0.45
    sample_obj: int = 256
    sample_cap: int = 128
    sample_phrase: int = 512
    # eval
    k_values: tuple = (50, 100)
    eval_seed: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "bool" and not isinstance(v, bool):
                raise ConfigError(f"{f.name}: expected a boolean, got {v!r}")
            if f.type == "int" and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigError(f"{f.name}: expected an integer, got {v!r}")
            if f.type == "float" and (isinstance(v, bool) or not isinstance(v, (int, float))):
                raise ConfigError(f"{f.name}: expected a number, got {v!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer: expected 'sgd' or 'adam', got {self.optimizer!r}")
        if isinstance(self.k_values, list):
            object.__setattr__(self, "k_values", tuple(self.k_values))
        if not self.k_values or any(not isinstance(k, int) or k <= 0 for k in self.k_values):
            raise ConfigError(f"k_values: expected positive integers, got {self.k_values!r}")
        for name in ("d", "d_in", "n_gates", "embed_dim", "hidden_dim", "n_obj_classes",
                     "n_pred_classes", "max_caption_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.fr_iters < 0:
            raise ConfigError("fr_iters: must be >= 0")
        for name in ("lr", "lm_lr", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be > 0")
        for name in ("momentum", "decay_at", "decay_factor", "coverage_threshold", "train_nms_obj",
                     "train_nms_cap", "test_nms_obj", "test_nms_cap"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name}: must lie in [0, 1]")
        if self.steps < 0 or self.n_scenes < 0:
            raise ConfigError("steps and n_scenes must be >= 0")
        if self.caption_supervision and not self.caption_branch:
            raise ConfigError("caption_supervision: requires caption_branch")

    @property
    def refine_iters(self) -> int:
        return self.fr_iters if self.message_passing else 0

    def scene_config(self) -> SceneConfig:
        return SceneConfig(n_obj_classes=self.n_obj_classes, n_pred_classes=self.n_pred_classes,
                           canvas_w=self.canvas_w, canvas_h=self.canvas_h,
                           min_objects=self.min_objects, max_objects=self.max_objects,
                           attr_dim=self.attr_dim)

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_values"] = list(self.k_values)
        return d

    def dumps(self) -> str:
        lines = [f"schema_version = {SCHEMA_VERSION}"]
        for k, v in self.to_dict().items():
            lines.append(f"{k} = {json.dumps(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        values, version = {}, None
        known = {f.name: f for f in fields(cls)}
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                parsed = json.loads(val)
            except json.JSONDecodeError:
                raise ConfigError(f"{key}: value {val!r} is not valid JSON") from None
            if key == "schema_version":
                version = parsed
                continue
            if key not in known:
                raise ConfigError(f"{key}: unknown configuration field")
            if known[key].type == "float" and isinstance(parsed, int) and not isinstance(parsed, bool):
                parsed = float(parsed)
            values[key] = parsed
        if version is None:
            raise ConfigError("schema_version: missing")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: unsupported version {version!r}")
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())


# numbered ablation rows: message passing, caption branch, caption supervision, iterations
ABLATIONS = {
    1: dict(message_passing=False, caption_branch=False, caption_supervision=False, fr_iters=0),
    2: dict(message_passing=True, caption_branch=False, caption_supervision=False, fr_iters=1),
    3: dict(message_passing=True, caption_branch=True, caption_supervision=False, fr_iters=1),
    4: dict(message_passing=True, caption_branch=True, caption_supervision=True, fr_iters=1),
    5: dict(message_passing=True, caption_branch=True, caption_supervision=True, fr_iters=2),
    6: dict(message_passing=True, caption_branch=True, caption_supervision=True, fr_iters=3),
}
