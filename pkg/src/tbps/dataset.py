"""Synthetic full-scene benchmark: generation, annotation I/O and vocabulary.

Scenes are integer rasters with layered rectangle/ellipse persons whose
colors encode identity attributes, so a small convnet can learn the
caption-to-appearance mapping end to end. Generation uses integer
arithmetic only and per-scene seed streams, making output byte-identical
across runs and platforms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, DataConfig

SHIRT_COLORS = {
    "red": (200, 30, 30),
    "blue": (40, 60, 210),
    "green": (40, 170, 60),
    "yellow": (230, 210, 40),
    "purple": (150, 50, 190),
    "orange": (235, 130, 30),
}
PANTS_COLORS = {
    "black": (22, 22, 28),
    "white": (235, 235, 235),
    "blue": (45, 70, 200),
    "red": (185, 40, 40),
    "green": (45, 150, 70),
    "khaki": (190, 170, 110),
}
ACCESSORY_KINDS = ("bag", "hat")
ACCESSORY_COLORS = {
    "black": (18, 18, 18),
    "white": (240, 240, 240),
    "red": (210, 35, 35),
    "yellow": (235, 215, 45),
}
BUILDS = ("slim", "wide")
SKIN = (205, 165, 135)

SPLIT_TRAIN, SPLIT_GALLERY, STREAM_PLAN, STREAM_QUERY = 0, 1, 2, 3


@dataclass(frozen=True)
class BBox:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        if self.x1 < 0 or self.y1 < 0 or self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ValueError(f"invalid box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    def to_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class Attributes:
    shirt: str
    pants: str
    accessory_kind: str
    accessory_color: str
    build: str

    def as_tuple(self) -> tuple[str, str, str, str, str]:
        return (self.shirt, self.pants, self.accessory_kind,
                self.accessory_color, self.build)


@dataclass(frozen=True)
class PersonIdentity:
    id: int
    attributes: Attributes


@dataclass
class SceneSample:
    image: np.ndarray                       # H x W x 3 uint8
    boxes: list[tuple[BBox, PersonIdentity]]
    captions: list[list[str]]               # per box, >= 1 each

    def __post_init__(self) -> None:
        if len(self.boxes) != len(self.captions):
            raise ValueError("one caption list per box required")
        if any(len(c) == 0 for c in self.captions):
            raise ValueError("every box needs at least one caption")


@dataclass(frozen=True)
class Query:
    caption: str
    scene_index: int
    box: BBox
    identity: int


@dataclass
class DatasetSplit:
    train: list[SceneSample]
    gallery: list[SceneSample]
    queries: list[Query]
    identities: list[PersonIdentity]
    config: DataConfig = field(default_factory=DataConfig)
    seed: int = 0


def _scene_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, index)))


def attribute_space() -> list[Attributes]:
    out = []
    for shirt in SHIRT_COLORS:
        for pants in PANTS_COLORS:
            for kind in ACCESSORY_KINDS:
                for color in ACCESSORY_COLORS:
                    for build in BUILDS:
                        out.append(Attributes(shirt, pants, kind, color, build))
    return out


def build_identities(config: DataConfig, rng: np.random.Generator) -> list[PersonIdentity]:
    space = attribute_space()
    if config.num_identities > len(space):
        raise ConfigError(
            f"num_identities={config.num_identities} exceeds attribute space of {len(space)}")
    picks = rng.permutation(len(space))[: config.num_identities]
    return [PersonIdentity(i, space[int(p)]) for i, p in enumerate(picks)]


def _accessory_clause(attrs: Attributes, variant: int) -> str:
    if attrs.accessory_kind == "bag":
        verb = "carrying" if variant == 0 else "holding"
        return f"{verb} a {attrs.accessory_color} bag"
    verb = "wearing" if variant == 0 else "topped with"
    return f"{verb} a {attrs.accessory_color} hat"


def make_caption(attrs: Attributes, clauses: int, variant: int = 0) -> str:
    if not 1 <= clauses <= 3:
        raise ConfigError("caption_clauses must be between 1 and 3")
    if variant == 0:
        parts = [f"a {attrs.build} person wearing a {attrs.shirt} shirt",
                 f"{attrs.pants} pants",
                 _accessory_clause(attrs, 0)]
    else:
        parts = [f"a {attrs.build} person in a {attrs.shirt} shirt",
                 f"with {attrs.pants} pants",
                 _accessory_clause(attrs, 1)]
    return ", ".join(parts[:clauses])


def parse_caption(caption: str) -> dict[str, str]:
    """Recover the attributes named by a generated caption (faithfulness checks)."""
    words = caption.replace(",", " ").split()
    out: dict[str, str] = {}
    for i, word in enumerate(words):
        if word == "shirt" and i > 0:
            out["shirt"] = words[i - 1]
        elif word == "pants" and i > 0:
            out["pants"] = words[i - 1]
        elif word in ("bag", "hat") and i > 0:
            out["accessory_kind"] = word
            out["accessory_color"] = words[i - 1]
        elif word in BUILDS:
            out["build"] = word
    return out


def _fill_ellipse(image: np.ndarray, cx: int, cy: int, rx: int, ry: int,
                  color: tuple[int, int, int]) -> None:
    rx, ry = max(rx, 1), max(ry, 1)
    h, w = image.shape[:2]
    ys = np.arange(h, dtype=np.int64)[:, None]
    xs = np.arange(w, dtype=np.int64)[None, :]
    mask = (xs - cx) ** 2 * ry * ry + (ys - cy) ** 2 * rx * rx <= rx * rx * ry * ry
    image[mask] = color


def _fill_rect(image: np.ndarray, x1: int, y1: int, x2: int, y2: int,
               color: tuple[int, int, int]) -> None:
    h, w = image.shape[:2]
    image[max(y1, 0):min(y2, h), max(x1, 0):min(x2, w)] = color


def render_person(image: np.ndarray, box: BBox, attrs: Attributes) -> None:
    """Layered head/torso/legs/accessory drawing inside the box."""
    x1, y1, x2, y2 = box.x1, box.y1, box.x2, box.y2
    w, h = box.width, box.height
    cx = (x1 + x2) // 2
    body_w = (w * (55 if attrs.build == "slim" else 90)) // 100
    bx1 = cx - body_w // 2
    bx2 = bx1 + body_w

    head_r = max(w // 6, 2)
    head_cy = y1 + h * 12 // 100
    torso_top = y1 + h * 20 // 100
    torso_bot = y1 + h * 55 // 100
    leg_bot = y1 + h * 97 // 100

    _fill_ellipse(image, cx, head_cy, head_r, head_r, SKIN)
    _fill_rect(image, bx1, torso_top, bx2, torso_bot, SHIRT_COLORS[attrs.shirt])
    leg_w = max(body_w * 35 // 100, 2)
    gap = max(body_w // 8, 1)
    _fill_rect(image, cx - gap - leg_w, torso_bot, cx - gap, leg_bot,
               PANTS_COLORS[attrs.pants])
    _fill_rect(image, cx + gap, torso_bot, cx + gap + leg_w, leg_bot,
               PANTS_COLORS[attrs.pants])

    acc_color = ACCESSORY_COLORS[attrs.accessory_color]
    if attrs.accessory_kind == "hat":
        _fill_ellipse(image, cx, y1 + h * 5 // 100, head_r + head_r // 2,
                      max(head_r // 2, 1), acc_color)
    else:
        bag_w = max(w // 4, 3)
        bag_x1 = max(x1, bx1 - bag_w)
        _fill_rect(image, bag_x1, y1 + h * 45 // 100, bag_x1 + bag_w,
                   y1 + h * 68 // 100, acc_color)


def _textured_background(size: int, noise: int, rng: np.random.Generator) -> np.ndarray:
    base = int(rng.integers(105, 136))
    block = 8
    cells = (size + block - 1) // block
    grain = rng.integers(-noise, noise + 1, size=(cells, cells, 3))
    texture = np.repeat(np.repeat(grain, block, axis=0), block, axis=1)[:size, :size]
    return np.clip(base + texture, 0, 255).astype(np.uint8)


def _sample_boxes(size: int, count: int, rng: np.random.Generator) -> list[BBox]:
    """Boxes with pairwise IoU < 0.7, checked in exact integer arithmetic."""
    out: list[BBox] = []
    attempts = 0
    while len(out) < count and attempts < 200:
        attempts += 1
        h = int(rng.integers(size * 42 // 100, size * 68 // 100))
        w = h * int(rng.integers(34, 47)) // 100
        x1 = int(rng.integers(1, size - w - 1))
        y1 = int(rng.integers(1, size - h - 1))
        cand = BBox(x1, y1, x1 + w, y1 + h)
        ok = True
        for prev in out:
            ix = min(cand.x2, prev.x2) - max(cand.x1, prev.x1)
            iy = min(cand.y2, prev.y2) - max(cand.y1, prev.y1)
            inter = max(ix, 0) * max(iy, 0)
            union = cand.width * cand.height + prev.width * prev.height - inter
            if 10 * inter >= 7 * union:
                ok = False
                break
        if ok:
            out.append(cand)
    return out


def _assign_identities(plan_rng: np.random.Generator, slot_counts: list[int],
                       ids: list[int], min_occurrences: int) -> list[list[int]]:
    """Fill per-scene identity slots; an identity appears at most once per scene."""
    total = sum(slot_counts)
    pool: list[int] = []
    for identity in ids:
        pool.extend([identity] * min_occurrences)
    cycle = list(ids)
    while len(pool) < total:
        order = plan_rng.permutation(len(cycle))
        pool.extend(cycle[int(i)] for i in order)
    pool = pool[:total]
    order = plan_rng.permutation(len(pool))
    pool = [pool[int(i)] for i in order]

    scenes: list[list[int]] = [[] for _ in slot_counts]
    leftovers: list[int] = []
    scene_idx = 0
    for identity in pool:
        placed = False
        for offset in range(len(scenes)):
            idx = (scene_idx + offset) % len(scenes)
            if len(scenes[idx]) < slot_counts[idx] and identity not in scenes[idx]:
                scenes[idx].append(identity)
                scene_idx = (idx + 1) % len(scenes)
                placed = True
                break
        if not placed:
            leftovers.append(identity)
    for identity in leftovers:
        for idx in range(len(scenes)):
            if len(scenes[idx]) < slot_counts[idx]:
                scenes[idx].append(identity)
                break
    return scenes


def _generate_scenes(config: DataConfig, seed: int, split: int, count: int,
                     assignment: list[list[int]],
                     identities: list[PersonIdentity],
                     captions_per_box: int) -> list[SceneSample]:
    scenes = []
    for idx in range(count):
        rng = _scene_rng(seed, split, idx)
        image = _textured_background(config.image_size, config.background_noise, rng)
        wanted = assignment[idx]
        boxes = _sample_boxes(config.image_size, len(wanted), rng)
        pairs = []
        captions = []
        for box, identity_id in zip(boxes, wanted):
            person = identities[identity_id]
            render_person(image, box, person.attributes)
            pairs.append((box, person))
            if captions_per_box == 1:
                # single-caption boxes draw their phrasing so both variants
                # occur in training text
                variants = [int(rng.integers(0, 2))]
            else:
                variants = list(range(captions_per_box))
            captions.append([make_caption(person.attributes, config.caption_clauses, v)
                             for v in variants])
        scenes.append(SceneSample(image=image, boxes=pairs, captions=captions))
    return scenes


def generate_dataset(config: DataConfig, seed: int) -> DatasetSplit:
    """Deterministic synthetic benchmark for a (config, seed) pair."""
    if config.min_persons < 1 or config.max_persons < config.min_persons:
        raise ConfigError("persons-per-scene range must satisfy 1 <= min <= max")
    plan_rng = _scene_rng(seed, STREAM_PLAN, 0)
    identities = build_identities(config, plan_rng)
    ids = [p.id for p in identities]

    def slot_counts(count: int) -> list[int]:
        return [int(plan_rng.integers(config.min_persons, config.max_persons + 1))
                for _ in range(count)]

    train_slots = slot_counts(config.train_scenes)
    gallery_slots = slot_counts(config.gallery_scenes)
    train_assign = _assign_identities(plan_rng, train_slots, ids, min_occurrences=2)
    gallery_assign = _assign_identities(plan_rng, gallery_slots, ids, min_occurrences=2)

    train = _generate_scenes(config, seed, SPLIT_TRAIN, config.train_scenes,
                             train_assign, identities, captions_per_box=1)
    gallery = _generate_scenes(config, seed, SPLIT_GALLERY, config.gallery_scenes,
                               gallery_assign, identities, captions_per_box=2)

    query_rng = _scene_rng(seed, STREAM_QUERY, 0)
    n_queried = max(1, int(round(config.num_identities * config.queried_fraction)))
    queried = set(int(i) for i in query_rng.permutation(len(ids))[:n_queried])
    candidates = []
    for scene_index, scene in enumerate(gallery):
        for (box, person), _ in zip(scene.boxes, scene.captions):
            if person.id in queried:
                candidates.append((scene_index, box, person.id))
    if not candidates:
        raise ConfigError("no gallery boxes available for the queried identities")
    take = min(config.query_boxes, len(candidates))
    chosen = query_rng.permutation(len(candidates))[:take]
    queries = []
    for pick in sorted(int(c) for c in chosen):
        scene_index, box, identity = candidates[pick]
        for caption in gallery[scene_index].captions[_box_index(gallery[scene_index], box)]:
            queries.append(Query(caption, scene_index, box, identity))
    return DatasetSplit(train=train, gallery=gallery, queries=queries,
                        identities=identities, config=config, seed=seed)


def _box_index(scene: SceneSample, box: BBox) -> int:
    for i, (b, _) in enumerate(scene.boxes):
        if b == box:
            return i
    raise ValueError("box not found in scene")


# --------------------------------------------------------------------------
# Annotation persistence
# --------------------------------------------------------------------------

class DatasetError(ValueError):
    """Raised for malformed annotation files."""


def _scene_record(scene: SceneSample, image_path: str) -> dict:
    return {
        "image": image_path,
        "boxes": [b.to_list() for b, _ in scene.boxes],
        "identities": [p.id for _, p in scene.boxes],
        "captions": scene.captions,
    }


def write_dataset(split: DatasetSplit, root: str | Path) -> Path:
    """Persist annotations (sorted-key UTF-8 JSON) and lossless PNG rasters."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    doc: dict = {
        "meta": {
            "image_w": split.config.image_size,
            "image_h": split.config.image_size,
            "seed": split.seed,
            "config": _data_config_dict(split.config),
        },
        "identities": [
            {"id": p.id, "attributes": list(p.attributes.as_tuple())}
            for p in split.identities
        ],
        "train": [],
        "gallery": [],
        "queries": [
            {"caption": q.caption, "scene": q.scene_index,
             "box": q.box.to_list(), "identity": q.identity}
            for q in split.queries
        ],
    }
    for name, scenes in (("train", split.train), ("gallery", split.gallery)):
        for idx, scene in enumerate(scenes):
            rel = f"images/{name}_{idx:05d}.png"
            Image.fromarray(scene.image).save(root / rel)
            doc[name].append(_scene_record(scene, rel))
    path = root / "annotations.json"
    path.write_text(json.dumps(doc, sort_keys=True, ensure_ascii=False, indent=1),
                    encoding="utf-8")
    return path


def _data_config_dict(config: DataConfig) -> dict:
    from .config import config_to_dict
    return config_to_dict(config)


def load_dataset(root: str | Path) -> DatasetSplit:
    root = Path(root)
    path = root / "annotations.json"
    if not path.exists():
        raise DatasetError(f"no annotations.json under {root}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    try:
        meta = doc["meta"]
        config = _config_from_meta(meta)
    except KeyError as exc:
        raise DatasetError(f"annotation meta missing key {exc}") from exc

    identities = []
    for rec in doc.get("identities", []):
        identities.append(PersonIdentity(int(rec["id"]), Attributes(*rec["attributes"])))

    def read_scenes(name: str) -> list[SceneSample]:
        scenes = []
        for idx, rec in enumerate(doc.get(name, [])):
            where = f"{name}[{idx}]"
            if "captions" not in rec:
                raise DatasetError(f"{where}: missing captions array")
            image = np.asarray(Image.open(root / rec["image"]).convert("RGB"))
            boxes = []
            for j, raw in enumerate(rec["boxes"]):
                x1, y1, x2, y2 = (int(v) for v in raw)
                if x2 <= x1 or y2 <= y1:
                    raise DatasetError(f"{where}: box {j} has non-positive extent {raw}")
                if x1 < 0 or y1 < 0 or x2 > image.shape[1] or y2 > image.shape[0]:
                    raise DatasetError(f"{where}: box {j} outside image bounds {raw}")
                identity = identities[int(rec["identities"][j])]
                boxes.append((BBox(x1, y1, x2, y2), identity))
            captions = [list(c) for c in rec["captions"]]
            if len(captions) != len(boxes) or any(len(c) == 0 for c in captions):
                raise DatasetError(f"{where}: captions do not cover every box")
            scenes.append(SceneSample(image=image, boxes=boxes, captions=captions))
        return scenes

    train = read_scenes("train")
    gallery = read_scenes("gallery")
    queries = []
    for idx, rec in enumerate(doc.get("queries", [])):
        box = BBox(*(int(v) for v in rec["box"]))
        queries.append(Query(rec["caption"], int(rec["scene"]), box, int(rec["identity"])))
        if queries[-1].scene_index >= len(gallery):
            raise DatasetError(f"queries[{idx}]: scene index out of range")
    return DatasetSplit(train=train, gallery=gallery, queries=queries,
                        identities=identities, config=config,
                        seed=int(meta.get("seed", 0)))


def _config_from_meta(meta: dict) -> DataConfig:
    raw = dict(meta.get("config", {}))
    config = DataConfig()
    for key, value in raw.items():
        if not hasattr(config, key):
            raise DatasetError(f"unknown data config key '{key}' in annotations")
        setattr(config, key, type(getattr(config, key))(value))
    return config


def caption_vocabulary(split: DatasetSplit):
    """Frequency-then-lexicographic vocabulary over every caption in the split."""
    from .tokenizer import Vocabulary, split_words
    texts: list[str] = []
    for scene in split.train + split.gallery:
        for caps in scene.captions:
            texts.extend(caps)
    texts.extend(q.caption for q in split.queries)
    if not texts:
        raise DatasetError("cannot build a vocabulary from an empty split")
    counts: dict[str, int] = {}
    for text in texts:
        for token in split_words(text):
            counts[token] = counts.get(token, 0) + 1
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(ordered)
