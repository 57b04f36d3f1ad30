"""Inference pipeline and detection-gated retrieval metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import clip_boxes, decode_boxes, iou, min_side_filter
from .config import EvalConfig, derive_seed
from .dataset import DatasetSplit, Query
from .model import PersonSearchModel, image_to_tensor
from .rpn import select_proposals

IOU_GATE = 0.5          # strict: a candidate counts only when iou > this
MIN_BOX_SIDE = 1.0      # refined boxes thinner than this are dropped


class EvaluationError(ValueError):
    pass


@dataclass
class Detection:
    scene_index: int
    det_index: int
    box: np.ndarray                 # (4,) refined and clipped
    score: float                    # person probability
    embedding: torch.Tensor         # (D,) unit norm
    parts: torch.Tensor             # (6, D)


@dataclass
class RankedEntry:
    scene_index: int
    det_index: int
    box: np.ndarray
    similarity: float


@dataclass
class RankedResult:
    query_id: int
    entries: list[RankedEntry]

    def __post_init__(self) -> None:
        sims = [e.similarity for e in self.entries]
        if any(a < b for a, b in zip(sims, sims[1:])):
            raise EvaluationError("ranked similarities must be non-increasing")


@dataclass
class MetricReport:
    gallery_size: int
    num_queries: int
    map_score: float
    cmc: dict[int, float]
    baseline_map: float = 0.0
    baseline_cmc: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        values = [self.map_score] + list(self.cmc.values())
        if any(v < -1e-12 or v > 1 + 1e-12 for v in values):
            raise EvaluationError("metric values must lie in [0, 1]")
        ordered = [self.cmc[k] for k in sorted(self.cmc)]
        if any(a > b + 1e-12 for a, b in zip(ordered, ordered[1:])):
            raise EvaluationError("cmc must be non-decreasing in K")

    def to_dict(self) -> dict:
        return {
            "gallery_size": self.gallery_size,
            "num_queries": self.num_queries,
            "mAP": self.map_score,
            "cmc": {str(k): v for k, v in sorted(self.cmc.items())},
            "baseline_mAP": self.baseline_map,
            "baseline_cmc": {str(k): v for k, v in sorted(self.baseline_cmc.items())},
        }


class Searcher:
    """Query-conditioned detection and ranking over a fixed gallery.

    Scene feature maps and the standard proposal branch are computed once;
    only the text-conditioned branch, NMS and the heads run per query.
    """

    def __init__(self, model: PersonSearchModel, scenes: list,
                 cfg: EvalConfig, use_sdrpn: bool = True) -> None:
        if cfg.similarity not in ("mixed", "global"):
            raise EvaluationError(f"unknown similarity mode {cfg.similarity!r}")
        self.model = model
        self.cfg = cfg
        self.use_sdrpn = use_sdrpn
        self.scenes = scenes
        model.eval()
        self._fm: list[torch.Tensor] = []
        self._logits: list[torch.Tensor] = []
        self._decoded: list[np.ndarray] = []
        self._sizes: list[tuple[int, int]] = []
        with torch.no_grad():
            for scene in scenes:
                image = image_to_tensor(scene.image).unsqueeze(0)
                fm = model.features(image)[0]
                logits, deltas, _ = model.proposals.branch_outputs(fm, None)
                anchors = model.proposals.anchors_for(fm.shape[1], fm.shape[2])
                self._fm.append(fm)
                self._logits.append(logits)
                self._decoded.append(
                    decode_boxes(anchors, deltas.double().numpy()))
                self._sizes.append((scene.image.shape[0], scene.image.shape[1]))

    def encode_query(self, caption: str):
        with torch.no_grad():
            return self.model.encode_caption(caption)

    def detect_scene(self, scene_index: int, z: torch.Tensor | None) -> list[Detection]:
        model = self.model
        cfg = self.cfg
        fm = self._fm[scene_index]
        height, width = self._sizes[scene_index]
        with torch.no_grad():
            logits = self._logits[scene_index]
            sd_logits = None
            if z is not None and self.use_sdrpn:
                gated = fm * model.proposals.gates(z).reshape(-1, 1, 1)
                sd_logits, _ = model.proposals.sdrpn_head(gated)
            fused = model.proposals.fused_scores(logits, sd_logits)
            _, boxes = select_proposals(
                self._decoded[scene_index], fused.double().numpy(),
                cfg.pre_nms, cfg.post_nms, cfg.nms_threshold, width, height)
            boxes = boxes[min_side_filter(boxes, MIN_BOX_SIDE)]
            if len(boxes) == 0:
                return []
            rois = torch.from_numpy(boxes.astype(np.float32))
            det_logits, det_deltas = model.det(model.pool(fm, rois))
            probs = torch.softmax(det_logits, dim=1)[:, 1].numpy()
            keep = np.flatnonzero(probs >= cfg.score_threshold)
            if len(keep) == 0:
                return []
            refined = decode_boxes(boxes[keep],
                                   det_deltas[keep].double().numpy())
            refined = clip_boxes(refined, width, height)
            valid = np.flatnonzero(
                (refined[:, 2] - refined[:, 0] >= MIN_BOX_SIDE)
                & (refined[:, 3] - refined[:, 1] >= MIN_BOX_SIDE))
            if len(valid) == 0:
                return []
            keep = keep[valid]
            refined = refined[valid]
            pooled = model.pool(fm, torch.from_numpy(refined.astype(np.float32)))
            global_feats = model.visual.global_feature(pooled)
            embeds = F.normalize(global_feats, dim=1, eps=1e-12)
            parts = model.visual.parts_with_global(pooled, global_feats, None)
        return [Detection(scene_index, i, refined[i], float(probs[keep[i]]),
                          embeds[i], parts[i])
                for i in range(len(refined))]

    def detect_gallery(self, caption: str,
                       scene_indices: list[int]) -> dict[int, list[Detection]]:
        sem = self.encode_query(caption)
        z = sem.sentence if self.use_sdrpn else None
        return {s: self.detect_scene(s, z) for s in scene_indices}

    def rank(self, query_id: int, caption: str,
             scene_indices: list[int]) -> RankedResult:
        sem = self.encode_query(caption)
        z = sem.sentence if self.use_sdrpn else None
        detections: list[Detection] = []
        for s in scene_indices:
            detections.extend(self.detect_scene(s, z))
        if not detections:
            return RankedResult(query_id, [])
        with torch.no_grad():
            if self.cfg.similarity == "mixed":
                visual = torch.stack([d.parts for d in detections])
                sims, _ = self.model.attn.similarity_to_text(visual, sem.parts)
                scores = sims.numpy()
            else:
                embeds = torch.stack([d.embedding for d in detections])
                text = F.normalize(sem.sentence, dim=0, eps=1e-12)
                scores = (embeds @ text).numpy()
        order = sorted(range(len(detections)),
                       key=lambda i: (-scores[i], detections[i].scene_index,
                                      detections[i].det_index))
        entries = [RankedEntry(detections[i].scene_index, detections[i].det_index,
                               detections[i].box, float(scores[i]))
                   for i in order]
        return RankedResult(query_id, entries)


# ---- metrics ----------------------------------------------------------------


def _true_positive_flags(result: RankedResult,
                         gt: list[tuple[int, np.ndarray]]) -> list[bool]:
    """One-to-one greedy matching down the ranked list; strict iou gate."""
    matched = [False] * len(gt)
    flags = []
    for entry in result.entries:
        best, best_iou = -1, IOU_GATE
        for j, (scene, box) in enumerate(gt):
            if matched[j] or scene != entry.scene_index:
                continue
            overlap = iou(entry.box, box)
            if overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0:
            matched[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: list[bool], num_gt: int) -> float:
    if num_gt <= 0:
        raise EvaluationError("average precision needs at least one gt instance")
    hits = 0
    total = 0.0
    for rank, flag in enumerate(flags, start=1):
        if flag:
            hits += 1
            total += hits / rank
    return total / num_gt


def evaluate(results: list[RankedResult],
             ground_truth: dict[int, list[tuple[int, np.ndarray]]],
             cmc_ranks: tuple[int, ...] = (1, 5, 10),
             gallery_size: int = 0) -> MetricReport:
    if not results:
        raise EvaluationError("no ranked results to evaluate")
    aps = []
    cmc_hits = {k: 0 for k in cmc_ranks}
    for result in results:
        gt = ground_truth.get(result.query_id, [])
        if not gt:
            raise EvaluationError(
                f"query {result.query_id} has no ground truth in the gallery")
        flags = _true_positive_flags(result, gt)
        aps.append(average_precision(flags, len(gt)))
        for k in cmc_ranks:
            if any(flags[:k]):
                cmc_hits[k] += 1
    n = len(results)
    return MetricReport(gallery_size, n, float(np.mean(aps)),
                        {k: cmc_hits[k] / n for k in cmc_ranks})


# ---- analytic random-ranking baseline ---------------------------------------


def expected_random_ap(total: int, positives: int) -> Fraction:
    """Exact E[AP] when `positives` of `total` candidates are shuffled uniformly."""
    if positives <= 0 or total <= 0 or positives > total:
        raise EvaluationError("invalid gallery composition")
    denom = comb(total, positives)
    acc = Fraction(0)
    for c in range(1, positives + 1):
        for r in range(c, total - positives + c + 1):
            ways = comb(r - 1, c - 1) * comb(total - r, positives - c)
            acc += Fraction(c, r) * Fraction(ways, denom)
    return acc / positives


def expected_random_cmc(total: int, positives: int, k: int) -> Fraction:
    """Exact P(at least one positive in the top k) under a uniform shuffle."""
    if positives <= 0 or total <= 0 or positives > total:
        raise EvaluationError("invalid gallery composition")
    k = min(k, total)
    if k > total - positives:
        return Fraction(1)
    return 1 - Fraction(comb(total - positives, k), comb(total, k))


def random_baseline(compositions: list[tuple[int, int]],
                    cmc_ranks: tuple[int, ...]) -> tuple[float, dict[int, float]]:
    """Expected mAP and CMC of a random ranker over per-query (total, positives)."""
    if not compositions:
        raise EvaluationError("baseline needs at least one query composition")
    n = len(compositions)
    base_map = sum(expected_random_ap(t, g) for t, g in compositions) / n
    base_cmc = {
        k: float(sum(expected_random_cmc(t, g, k) for t, g in compositions) / n)
        for k in cmc_ranks}
    return float(base_map), base_cmc


# ---- orchestration ----------------------------------------------------------


def query_galleries(split: DatasetSplit, size: int,
                    seed: int) -> list[list[int]]:
    """Per-query gallery scene samples; each always contains the gt scene."""
    total = len(split.gallery)
    if size < 1 or size > total:
        raise EvaluationError(
            f"gallery size {size} outside [1, {total}]")
    out = []
    for qid, query in enumerate(split.queries):
        rng = np.random.default_rng(derive_seed(seed, "gallery", size, qid))
        others = [i for i in range(total) if i != query.scene_index]
        picked = rng.choice(len(others), size=size - 1, replace=False)
        scenes = sorted([query.scene_index] + [others[int(i)] for i in picked])
        out.append(scenes)
    return out


def gallery_ground_truth(split: DatasetSplit, query: Query,
                         scene_indices: list[int]) -> list[tuple[int, np.ndarray]]:
    gt = []
    for s in scene_indices:
        for box, person in split.gallery[s].boxes:
            if person.id == query.identity:
                gt.append((s, np.asarray(box.to_list(), dtype=np.float64)))
    return gt


def gallery_composition(split: DatasetSplit, query: Query,
                        scene_indices: list[int]) -> tuple[int, int]:
    total = sum(len(split.gallery[s].boxes) for s in scene_indices)
    positives = sum(1 for s in scene_indices
                    for _, person in split.gallery[s].boxes
                    if person.id == query.identity)
    return total, positives


def run_evaluation(searcher: Searcher, split: DatasetSplit, seed: int,
                   sizes: list[int] | None = None,
                   out_dir: str | Path | None = None) -> list[MetricReport]:
    cfg = searcher.cfg
    sizes = list(sizes) if sizes else [cfg.gallery_size]
    reports = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    for size in sizes:
        galleries = query_galleries(split, size, seed)
        results, gt_map, compositions = [], {}, []
        rows = []
        for qid, query in enumerate(split.queries):
            scenes = galleries[qid]
            result = searcher.rank(qid, query.caption, scenes)
            gt = gallery_ground_truth(split, query, scenes)
            results.append(result)
            gt_map[qid] = gt
            compositions.append(gallery_composition(split, query, scenes))
            flags = _true_positive_flags(result, gt)
            for rank, (entry, flag) in enumerate(zip(result.entries, flags), 1):
                rows.append([qid, rank, entry.scene_index,
                             f"{entry.box[0]:.2f}", f"{entry.box[1]:.2f}",
                             f"{entry.box[2]:.2f}", f"{entry.box[3]:.2f}",
                             f"{entry.similarity:.6f}", int(flag)])
        report = evaluate(results, gt_map, cfg.cmc_ranks, gallery_size=size)
        report.baseline_map, report.baseline_cmc = random_baseline(
            compositions, cfg.cmc_ranks)
        reports.append(report)
        if out_path is not None:
            with open(out_path / f"results_g{size}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["query_id", "rank", "scene_id",
                                 "x1", "y1", "x2", "y2", "score", "correct"])
                writer.writerows(rows)
    if out_path is not None:
        (out_path / "report.json").write_text(
            json.dumps([r.to_dict() for r in reports], indent=2),
            encoding="utf-8")
    return reports
