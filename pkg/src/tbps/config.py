"""Run configuration: profiles, overrides and deterministic seed derivation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any


class ConfigError(ValueError):
    """Raised for unknown keys, bad values or inconsistent settings."""


@dataclass
class DataConfig:
    image_size: int = 128
    num_identities: int = 40
    train_scenes: int = 300
    gallery_scenes: int = 100
    query_boxes: int = 30          # each query box carries two captions
    min_persons: int = 2
    max_persons: int = 3
    caption_clauses: int = 3
    background_noise: int = 14
    queried_fraction: float = 0.6  # identities eligible as queries; rest are distractors


@dataclass
class ModelConfig:
    base_channels: int = 48        # backbone output channels
    id_channels: int = 96          # identity-branch channels
    embed_dim: int = 128           # shared visual/textual feature dimension
    stride: int = 8
    roi_size: int = 6              # pooled grid, divisible by 2 and 3 stripes
    roi_sampling: int = 2          # bilinear samples per pooled bin edge
    reduction: int = 16            # channel-excitation bottleneck ratio
    anchor_scales: tuple[int, ...] = (2, 4, 7)
    anchor_ratios: tuple[float, ...] = (1.0, 2.0)
    text_layers: int = 2
    text_heads: int = 4
    max_tokens: int = 48
    fuse_logits: bool = False      # sum branch logits instead of probabilities
    sdrpn_use_deltas: bool = False # semantic branch predicts deltas; unused unless set


@dataclass
class LossWeights:
    rpn_cls: float = 1.0
    rpn_reg: float = 1.0
    cls: float = 1.0
    reg: float = 1.0
    oim: float = 1.0
    cmpm: float = 1.0
    cmpc: float = 1.0
    csal: float = 0.1


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 4
    flip_prob: float = 0.5
    pre_nms: int = 1000
    post_nms: int = 128
    nms_threshold: float = 0.7
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    det_rois: int = 32
    det_pos_iou: float = 0.5
    id_rois_per_identity: int = 4
    id_roi_iou: float = 0.5
    unlabeled_per_image: int = 2
    include_gt_rois: bool = True
    oim_feed_unlabeled: bool = True
    oim_momentum: float = 0.5
    oim_temperature: float = 0.1
    oim_queue: int = 32
    # epoch index at which embedding-neck batch statistics freeze; the
    # affine keeps training but train/eval transforms become identical,
    # so OIM prototypes accumulate in the same space retrieval runs in
    neck_freeze_epoch: int = 1
    # detection lr above ~5e-3 churns the shared trunk faster than the
    # identity embedding can track it
    lr_detection: float = 2e-3
    lr_identification: float = 1e-3
    lr_projection: float = 1e-3
    sgd_momentum: float = 0.9
    use_sdrpn: bool = True
    use_csal: bool = True
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class EvalConfig:
    gallery_size: int = 50
    pre_nms: int = 1000
    post_nms: int = 80
    nms_threshold: float = 0.7
    score_threshold: float = 0.5
    similarity: str = "mixed"      # "mixed" (cross-attention) or "global" (cosine)
    cmc_ranks: tuple[int, ...] = (1, 5, 10)


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def desk_profile() -> RunConfig:
    """Small configuration: full acceptance run in minutes on one CPU."""
    return RunConfig(profile="desk")


def paper_profile() -> RunConfig:
    """Published recipe: 768-d features, ResNet-scale channels and budgets."""
    cfg = RunConfig(profile="paper")
    cfg.data = DataConfig(image_size=512, num_identities=200, train_scenes=2000,
                          gallery_scenes=1000, query_boxes=200)
    cfg.model = ModelConfig(base_channels=1024, id_channels=2048, embed_dim=768,
                            stride=16, anchor_scales=(8, 16, 32),
                            anchor_ratios=(1.0, 2.0), max_tokens=64)
    cfg.train = TrainConfig(epochs=12, pre_nms=12000, post_nms=2000,
                            rpn_batch=256, det_rois=256, oim_queue=5000,
                            oim_temperature=1.0 / 30.0, lr_detection=1e-4,
                            lr_identification=1e-3, lr_projection=1e-4)
    cfg.eval = EvalConfig(gallery_size=100, pre_nms=6000, post_nms=300)
    return cfg


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def load_profile(name: str) -> RunConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile '{name}' (choose from {sorted(PROFILES)})")
    return PROFILES[name]()


def _coerce(raw: str, target: Any) -> Any:
    if isinstance(target, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from '{raw}'")
    if isinstance(target, int):
        return int(raw)
    if isinstance(target, float):
        return float(raw)
    if isinstance(target, tuple):
        parts = [p for p in raw.split(",") if p]
        elem = target[0] if target else 1
        return tuple(type(elem)(p) for p in parts)
    return raw


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply flat dotted-key overrides like {"train.epochs": "3"} in place.

    Unknown keys raise ConfigError naming the key.
    """
    for key, raw in overrides.items():
        parts = key.split(".")
        node: Any = cfg
        for part in parts[:-1]:
            if not dataclasses.is_dataclass(node) or part not in {f.name for f in fields(node)}:
                raise ConfigError(f"unknown config key '{key}'")
            node = getattr(node, part)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(node) or leaf not in {f.name for f in fields(node)}:
            raise ConfigError(f"unknown config key '{key}'")
        current = getattr(node, leaf)
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"config key '{key}' is a section, not a value")
        setattr(node, leaf, _coerce(raw, current))
    return cfg


def config_to_dict(cfg: Any) -> Any:
    if dataclasses.is_dataclass(cfg):
        return {f.name: config_to_dict(getattr(cfg, f.name)) for f in fields(cfg)}
    if isinstance(cfg, tuple):
        return list(cfg)
    return cfg


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    def build(cls: Any, payload: dict[str, Any]) -> Any:
        ref = cls()
        names = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in payload.items():
            if key not in names:
                raise ConfigError(f"unknown config key '{key}'")
            current = getattr(ref, key)
            if dataclasses.is_dataclass(current):
                kwargs[key] = build(type(current), value)
            elif isinstance(current, tuple):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    payload = dict(data)
    out = RunConfig(profile=payload.pop("profile", "desk"), seed=payload.pop("seed", 0))
    for section, cls in (("data", DataConfig), ("model", ModelConfig),
                         ("train", TrainConfig), ("eval", EvalConfig)):
        if section in payload:
            setattr(out, section, build(cls, payload.pop(section)))
    if payload:
        raise ConfigError(f"unknown config keys {sorted(payload)}")
    return out


def config_json(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_json(cfg).encode("utf-8")).hexdigest()[:16]


def derive_seed(seed: int, *tags: Any) -> int:
    """Stable 63-bit seed for a named sub-stream of the run seed."""
    text = ":".join([str(seed)] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
