"""Joint training loop: sampling, the eight-term loss, three optimizers."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import decode_boxes, encode_boxes, iou_matrix, min_side_filter
from .config import RunConfig, config_hash, config_to_dict, derive_seed
from .crossmodal import cmpc_loss, cmpm_loss, csal_loss, match_matrix
from .dataset import DatasetSplit, SceneSample
from .model import PersonSearchModel, image_to_tensor
from .rpn import NEGATIVE, POSITIVE, assign_anchor_labels, select_proposals


class TrainingDiverged(RuntimeError):
    """Raised when a loss component stops being finite."""


LOSS_NAMES = ("rpn_cls", "rpn_reg", "cls", "reg", "oim", "cmpm", "cmpc", "csal")


@dataclass
class LossBundle:
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor
    cls: torch.Tensor
    reg: torch.Tensor
    oim: torch.Tensor
    cmpm: torch.Tensor
    cmpc: torch.Tensor
    csal: torch.Tensor

    def components(self) -> dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def total(self, weights) -> torch.Tensor:
        for name, value in self.components().items():
            if not bool(torch.isfinite(value)):
                raise TrainingDiverged(f"non-finite {name} loss component")
        return sum(getattr(weights, name) * value
                   for name, value in self.components().items())


def flip_horizontal(image: np.ndarray, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror an H x W x 3 raster and its boxes around the vertical axis."""
    width = image.shape[1]
    flipped = np.ascontiguousarray(image[:, ::-1])
    out = np.asarray(boxes, dtype=np.float64).copy()
    if len(out):
        out[:, [0, 2]] = width - np.asarray(boxes, dtype=np.float64)[:, [2, 0]]
    return flipped, out


def sample_rpn_anchors(labels: np.ndarray, batch: int, pos_fraction: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Balanced anchor indices for the objectness loss."""
    positives = np.flatnonzero(labels == POSITIVE)
    negatives = np.flatnonzero(labels == NEGATIVE)
    n_pos = min(len(positives), int(batch * pos_fraction))
    if len(positives) > n_pos:
        positives = rng.choice(positives, size=n_pos, replace=False)
    n_neg = min(len(negatives), batch - n_pos)
    if len(negatives) > n_neg:
        negatives = rng.choice(negatives, size=n_neg, replace=False)
    return np.concatenate([positives, negatives])


def sample_id_rois(boxes: np.ndarray, scores: np.ndarray, gt_boxes: np.ndarray,
                   gt_ids: np.ndarray, iou_threshold: float = 0.5,
                   per_identity: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Top-scoring proposals per identity above the overlap threshold.

    Each proposal is considered only for its argmax-IoU identity so no box
    is double-counted. Returns (selected boxes, identity labels).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0 or len(gt_boxes) == 0:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    overlaps = iou_matrix(boxes, gt_boxes)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(len(boxes)), best_gt]
    sel_boxes, sel_ids = [], []
    for j, identity in enumerate(np.asarray(gt_ids, dtype=np.int64)):
        cand = np.flatnonzero((best_gt == j) & (best_iou >= iou_threshold))
        if len(cand) == 0:
            continue
        order = cand[np.argsort(-scores[cand], kind="stable")][:per_identity]
        sel_boxes.append(boxes[order])
        sel_ids.extend([identity] * len(order))
    if not sel_boxes:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    return np.concatenate(sel_boxes), np.asarray(sel_ids, dtype=np.int64)


def unlabeled_rois(boxes: np.ndarray, scores: np.ndarray, gt_boxes: np.ndarray,
                   count: int, max_iou: float = 0.3) -> np.ndarray:
    """Highest-scoring background-overlapping proposals (queue fodder)."""
    if count <= 0 or len(boxes) == 0:
        return np.zeros((0, 4))
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes):
        best = iou_matrix(boxes, np.asarray(gt_boxes, dtype=np.float64)).max(axis=1)
    else:
        best = np.zeros(len(boxes))
    keep = np.flatnonzero(best < max_iou)
    order = keep[np.argsort(-scores[keep], kind="stable")][:count]
    return boxes[order]


class Trainer:
    def __init__(self, model: PersonSearchModel, split: DatasetSplit,
                 run: RunConfig, run_dir: str | Path) -> None:
        self.model = model
        self.split = split
        self.run = run
        self.cfg = run.train
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        groups = model.parameter_groups()
        self._assert_partition(groups)
        self.opt_detection = torch.optim.SGD(
            groups["detection"], lr=self.cfg.lr_detection,
            momentum=self.cfg.sgd_momentum)
        self.opt_identification = torch.optim.Adam(
            groups["identification"], lr=self.cfg.lr_identification)
        self.opt_projection = torch.optim.Adam(
            groups["projection"], lr=self.cfg.lr_projection)
        self.step_idx = 0
        self.start_epoch = 0
        self.log_path = self.run_dir / "loss_log.csv"
        self.checkpoint_path = self.run_dir / "checkpoint.pt"

    def _assert_partition(self, groups: dict) -> None:
        seen: set[int] = set()
        total = 0
        for params in groups.values():
            for p in params:
                if id(p) in seen:
                    raise ValueError("parameter appears in two optimizer groups")
                seen.add(id(p))
                total += 1
        model_params = [p for p in self.model.parameters() if p.requires_grad]
        if total != len(model_params):
            raise ValueError("optimizer groups do not cover every parameter")

    # ---- loss assembly ----------------------------------------------------

    def _prepare_scene(self, scene: SceneSample, rng: np.random.Generator):
        boxes = np.array([b.to_list() for b, _ in scene.boxes], dtype=np.float64)
        ids = np.array([p.id for _, p in scene.boxes], dtype=np.int64)
        pick = int(rng.integers(len(scene.boxes)))
        variant = int(rng.integers(len(scene.captions[pick])))
        caption = scene.captions[pick][variant]
        image = scene.image
        if self.cfg.flip_prob > 0 and rng.random() < self.cfg.flip_prob:
            image, boxes = flip_horizontal(image, boxes)
        return image, boxes, ids, caption, pick

    def step(self, scenes: list[SceneSample], rng: np.random.Generator,
             stripe_gen: torch.Generator) -> LossBundle:
        model = self.model
        cfg = self.cfg
        prepared = [self._prepare_scene(s, rng) for s in scenes]
        images = torch.stack([image_to_tensor(p[0]) for p in prepared])
        fms = model.features(images)
        height, width = images.shape[2], images.shape[3]

        sem = model.encode_captions([p[3] for p in prepared])
        use_sdrpn = cfg.use_sdrpn

        rpn_cls_terms, rpn_reg_terms, cls_terms, reg_terms = [], [], [], []
        roi_pooled, oim_labels, roi_meta = [], [], []
        pair_parts, pair_captions, pair_ids = [], [], []

        for i, (image, boxes, ids, caption, pick) in enumerate(prepared):
            fm = fms[i]
            z = sem[i].sentence if use_sdrpn else None
            logits, deltas, sd_logits = model.proposals.branch_outputs(fm, z)
            anchors = model.proposals.anchors_for(fm.shape[1], fm.shape[2])

            # objectness + regression on the standard branch
            labels_all = assign_anchor_labels(anchors, boxes, "all-persons")
            sampled = sample_rpn_anchors(labels_all, cfg.rpn_batch,
                                         cfg.rpn_pos_fraction, rng)
            target = torch.from_numpy(
                (labels_all[sampled] == POSITIVE).astype(np.float32))
            rpn_cls = F.binary_cross_entropy_with_logits(logits[sampled], target)

            if sd_logits is not None:
                labels_text = assign_anchor_labels(
                    anchors, boxes[pick:pick + 1], "text-relevant")
                sampled_t = sample_rpn_anchors(labels_text, cfg.rpn_batch,
                                               cfg.rpn_pos_fraction, rng)
                target_t = torch.from_numpy(
                    (labels_text[sampled_t] == POSITIVE).astype(np.float32))
                rpn_cls = rpn_cls + F.binary_cross_entropy_with_logits(
                    sd_logits[sampled_t], target_t)
            rpn_cls_terms.append(rpn_cls)

            pos = sampled[labels_all[sampled] == POSITIVE]
            if len(pos):
                match = iou_matrix(anchors[pos], boxes).argmax(axis=1)
                reg_target = torch.from_numpy(
                    encode_boxes(anchors[pos], boxes[match]).astype(np.float32))
                rpn_reg_terms.append(F.smooth_l1_loss(deltas[pos], reg_target))
            else:
                rpn_reg_terms.append(deltas.sum() * 0.0)

            with torch.no_grad():
                fused = model.proposals.fused_scores(logits, sd_logits)
            decoded_np = decode_boxes(anchors, deltas.detach().double().numpy())
            fused_np = fused.detach().double().numpy()
            kept, prop_boxes = select_proposals(
                decoded_np, fused_np, cfg.pre_nms, cfg.post_nms,
                cfg.nms_threshold, width, height)
            prop_scores = fused_np[kept]
            wide = min_side_filter(prop_boxes, 1.0)
            prop_boxes, prop_scores = prop_boxes[wide], prop_scores[wide]

            # detection head: top proposals (plus gt) labeled by overlap
            det_boxes = prop_boxes[: cfg.det_rois]
            if cfg.include_gt_rois:
                det_boxes = np.concatenate([boxes, det_boxes])
            det_overlap = iou_matrix(det_boxes, boxes)
            det_labels = (det_overlap.max(axis=1) >= cfg.det_pos_iou).astype(np.int64)
            det_t = torch.from_numpy(det_boxes.astype(np.float32))
            det_logits, det_deltas = model.det(model.pool(fm, det_t))
            cls_terms.append(F.cross_entropy(
                det_logits, torch.from_numpy(det_labels)))
            pos_rois = np.flatnonzero(det_labels == 1)
            if len(pos_rois):
                match = det_overlap[pos_rois].argmax(axis=1)
                reg_target = torch.from_numpy(encode_boxes(
                    det_boxes[pos_rois], boxes[match]).astype(np.float32))
                reg_terms.append(F.smooth_l1_loss(det_deltas[pos_rois], reg_target))
            else:
                reg_terms.append(det_deltas.sum() * 0.0)

            # identity rois: gt boxes ride along with top scores
            aug_boxes = np.concatenate([boxes, prop_boxes])
            aug_scores = np.concatenate(
                [np.full(len(boxes), 3.0), prop_scores])
            id_boxes, id_labels = sample_id_rois(
                aug_boxes, aug_scores, boxes, ids,
                cfg.id_roi_iou, cfg.id_rois_per_identity)
            extra = unlabeled_rois(prop_boxes, prop_scores, boxes,
                                   cfg.unlabeled_per_image)
            if len(extra):
                id_boxes = np.concatenate([id_boxes, extra])
                id_labels = np.concatenate(
                    [id_labels, np.full(len(extra), -1, dtype=np.int64)])
            if len(id_boxes) == 0:
                continue
            id_t = torch.from_numpy(id_boxes.astype(np.float32))
            roi_pooled.append(model.pool(fm, id_t))
            oim_labels.append(torch.from_numpy(id_labels))
            target_id = int(ids[pick])
            roi_meta.append((i, np.flatnonzero(id_labels == target_id), target_id))

        n = len(scenes)
        bundle_parts = {
            "rpn_cls": sum(rpn_cls_terms) / n,
            "rpn_reg": sum(rpn_reg_terms) / n,
            "cls": sum(cls_terms) / n,
            "reg": sum(reg_terms) / n,
        }
        if roi_pooled:
            # one pass so the embedding neck sees the whole step's rois
            all_pooled = torch.cat(roi_pooled)
            all_global = model.visual.global_feature(all_pooled)
            bundle_parts["oim"] = self.model.oim(
                F.normalize(all_global, dim=1, eps=1e-12),
                torch.cat(oim_labels))
            # matched roi-caption pairs drive the cross-modal losses
            offset = 0
            for pooled_i, (img, matched, target_id) in zip(roi_pooled, roi_meta):
                count = len(pooled_i)
                if len(matched):
                    block = slice(offset, offset + count)
                    parts = model.visual.parts_with_global(
                        all_pooled[block][matched], all_global[block][matched],
                        stripe_gen)
                    for row in range(parts.shape[0]):
                        pair_parts.append(parts[row])
                        pair_captions.append(sem[img])
                        pair_ids.append(target_id)
                offset += count
        else:
            bundle_parts["oim"] = fms.sum() * 0.0

        if pair_parts:
            visual = torch.stack(pair_parts)                 # (B, 6, D)
            i_global = visual[:, 0, :]
            t_global = torch.stack([c.sentence for c in pair_captions])
            ids_t = torch.as_tensor(pair_ids, dtype=torch.long)
            labels = match_matrix(ids_t, ids_t).to(i_global.dtype)
            bundle_parts["cmpm"] = cmpm_loss(i_global, t_global, labels)
            bundle_parts["cmpc"] = cmpc_loss(i_global, t_global, ids_t,
                                             self.model.cmpc_weight)
            if cfg.use_csal:
                caption_parts = [c.parts for c in pair_captions]
                s_mat, sp_mat = self.model.attn.similarity_matrices(
                    visual, caption_parts)
                bundle_parts["csal"] = csal_loss(s_mat, sp_mat, labels)
            else:
                bundle_parts["csal"] = i_global.sum() * 0.0
        else:
            zero = fms.sum() * 0.0
            bundle_parts.update(cmpm=zero, cmpc=zero, csal=zero)
        return LossBundle(**bundle_parts)

    # ---- loop -------------------------------------------------------------

    def train(self) -> Path:
        cfg = self.cfg
        writer_mode = "a" if (self.start_epoch and self.log_path.exists()) else "w"
        log_file = open(self.log_path, writer_mode, newline="")
        writer = csv.writer(log_file)
        if writer_mode == "w":
            writer.writerow(["step", "epoch"] + list(LOSS_NAMES) + ["total"])
        try:
            for epoch in range(self.start_epoch, cfg.epochs):
                if epoch >= cfg.neck_freeze_epoch:
                    self.model.freeze_neck_stats()
                rng = np.random.default_rng(
                    derive_seed(self.run.seed, "epoch", epoch))
                stripe_gen = torch.Generator().manual_seed(
                    derive_seed(self.run.seed, "stripes", epoch) % (2 ** 63))
                order = rng.permutation(len(self.split.train))
                for start in range(0, len(order) - cfg.batch_size + 1,
                                   cfg.batch_size):
                    chunk = [self.split.train[int(j)]
                             for j in order[start:start + cfg.batch_size]]
                    bundle = self.step(chunk, rng, stripe_gen)
                    total = bundle.total(cfg.weights)
                    self.opt_detection.zero_grad()
                    self.opt_identification.zero_grad()
                    self.opt_projection.zero_grad()
                    total.backward()
                    self.opt_detection.step()
                    self.opt_identification.step()
                    self.opt_projection.step()
                    row = [self.step_idx, epoch]
                    row += [f"{float(v.detach()):.6f}" for v in
                            bundle.components().values()]
                    row.append(f"{float(total.detach()):.6f}")
                    writer.writerow(row)
                    self.step_idx += 1
                log_file.flush()
                self.save_checkpoint(epoch + 1)
        finally:
            log_file.close()
        return self.checkpoint_path

    # ---- persistence ------------------------------------------------------

    def save_checkpoint(self, epochs_done: int) -> None:
        payload = {
            "model": self.model.state_dict(),
            "optimizers": {
                "detection": self.opt_detection.state_dict(),
                "identification": self.opt_identification.state_dict(),
                "projection": self.opt_projection.state_dict(),
            },
            "epoch": epochs_done,
            "step": self.step_idx,
            "seed": self.run.seed,
            "config": config_to_dict(self.run),
            "config_hash": config_hash(self.run),
            "vocab": self.model.vocab.tokens[3:],
            "num_identities": self.model.oim.num_identities,
        }
        torch.save(payload, self.checkpoint_path)
        manifest = {
            "config_hash": config_hash(self.run),
            "epoch": epochs_done,
            "seed": self.run.seed,
            "use_sdrpn": self.cfg.use_sdrpn,
            "use_csal": self.cfg.use_csal,
        }
        (self.run_dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")

    def resume(self) -> None:
        if not self.checkpoint_path.exists():
            raise FileNotFoundError(f"no checkpoint at {self.checkpoint_path}")
        payload = torch.load(self.checkpoint_path, weights_only=False)
        self.model.load_state_dict(payload["model"])
        self.opt_detection.load_state_dict(payload["optimizers"]["detection"])
        self.opt_identification.load_state_dict(
            payload["optimizers"]["identification"])
        self.opt_projection.load_state_dict(payload["optimizers"]["projection"])
        self.step_idx = payload["step"]
        self.start_epoch = payload["epoch"]
