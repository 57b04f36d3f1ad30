"""Dual proposal generation: a standard RPN and a text-conditioned twin.

The conditioned branch squeezes the caption's sentence vector through a
two-layer bottleneck into per-channel gates, reweights the shared feature
map, and scores the same anchors. Fused objectness is the sum of the two
branch scores; box deltas always come from the standard branch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .boxes import anchor_grid, clip_boxes, decode_boxes, descending_order, iou_matrix, nms

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


class Excitation(nn.Module):
    """Channel gates s = sigmoid(W2 relu(W1 z)) from the sentence vector."""

    def __init__(self, text_dim: int, channels: int, reduction: int = 16) -> None:
        super().__init__()
        if channels % reduction:
            raise ValueError(f"reduction {reduction} must divide channel count {channels}")
        hidden = channels // reduction
        self.squeeze = nn.Linear(text_dim, hidden)
        self.expand = nn.Linear(hidden, channels)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.squeeze.in_features:
            raise ValueError(
                f"expected sentence dim {self.squeeze.in_features}, got {z.shape[-1]}")
        return torch.sigmoid(self.expand(torch.relu(self.squeeze(z))))


def reweight(fm: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Channel-wise product; fm is (C, H, W) or (N, C, H, W), s is (C,)."""
    if fm.shape[-3] != s.shape[-1]:
        raise ValueError("channel counts of feature map and gates disagree")
    return fm * s.reshape(-1, 1, 1)


class RPNHead(nn.Module):
    """Shared 3x3 conv then 1x1 objectness/delta heads, one set per anchor."""

    def __init__(self, channels: int, anchors_per_loc: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.cls = nn.Conv2d(channels, anchors_per_loc, 1)
        self.reg = nn.Conv2d(channels, anchors_per_loc * 4, 1)
        self.anchors_per_loc = anchors_per_loc

    def forward(self, fm: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Logits (A_total,) and deltas (A_total, 4), location-major order."""
        squeeze = fm.dim() == 3
        if squeeze:
            fm = fm.unsqueeze(0)
        x = torch.relu(self.conv(fm))
        a = self.anchors_per_loc
        n, _, h, w = x.shape
        logits = self.cls(x).permute(0, 2, 3, 1).reshape(n, h * w * a)
        deltas = (self.reg(x).reshape(n, a, 4, h, w)
                  .permute(0, 3, 4, 1, 2).reshape(n, h * w * a, 4))
        if squeeze:
            return logits[0], deltas[0]
        return logits, deltas


def assign_anchor_labels(anchors: np.ndarray, gt_boxes: np.ndarray,
                         mode: str = "all-persons") -> np.ndarray:
    """Per-anchor {1, 0, -1} labels (positive / negative / ignore).

    Positive: IoU >= 0.7 with any provided box, or argmax anchor of a box.
    Negative: max IoU < 0.3. Anything else is ignored. In text-relevant
    mode the provided boxes must be the conditioning caption's person(s).
    """
    if mode not in ("all-persons", "text-relevant"):
        raise ValueError(f"unknown assignment mode {mode!r}")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if mode == "text-relevant" and len(gt_boxes) == 0:
        raise ValueError("text-relevant assignment requires at least one target box")
    labels = np.full(len(anchors), IGNORE, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = NEGATIVE
        return labels
    overlaps = iou_matrix(np.asarray(anchors, dtype=np.float64), gt_boxes)
    best = overlaps.max(axis=1)
    labels[best < 0.3] = NEGATIVE
    labels[best >= 0.7] = POSITIVE
    for j in range(gt_boxes.shape[0]):
        top = overlaps[:, j].max()
        if top > 0:
            labels[overlaps[:, j] == top] = POSITIVE
    return labels


def select_proposals(boxes: np.ndarray, scores: np.ndarray, pre_nms: int,
                     post_nms: int, threshold: float,
                     width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Pure select -> NMS -> clamp pipeline.

    Returns (kept indices into the input arrays, clipped boxes), ordered by
    descending score.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    top = descending_order(scores)[:pre_nms]
    keep_local = nms(boxes[top], scores[top], threshold, limit=post_nms)
    kept = top[keep_local]
    return kept, clip_boxes(boxes[kept], width, height)


@dataclass
class ProposalSet:
    boxes: np.ndarray           # (K, 4) clipped, descending fused score
    scores: np.ndarray          # (K,) fused objectness
    source_scores: np.ndarray   # (K, 2) per-branch (standard, conditioned)
    logits: torch.Tensor        # (A_total,) standard-branch logits, grad-carrying
    deltas: torch.Tensor        # (A_total, 4) standard-branch deltas
    sdrpn_logits: torch.Tensor | None   # conditioned-branch logits or None
    anchor_indices: np.ndarray  # (K,) anchor index of each kept proposal


class ProposalEngine(nn.Module):
    """Anchor machinery plus the two scoring branches."""

    def __init__(self, channels: int, text_dim: int, stride: int,
                 scales: tuple[int, ...], ratios: tuple[float, ...],
                 reduction: int = 16, fuse_logits: bool = False) -> None:
        super().__init__()
        per_loc = len(scales) * len(ratios)
        self.rpn_head = RPNHead(channels, per_loc)
        self.sdrpn_head = RPNHead(channels, per_loc)
        self.excite = Excitation(text_dim, channels, reduction)
        self.stride = stride
        self.scales = tuple(scales)
        self.ratios = tuple(ratios)
        self.fuse_logits = fuse_logits
        # test hook: replaces computed gates when set (e.g. exact all-ones)
        self.excitation_override: torch.Tensor | None = None
        self._anchor_cache: dict[tuple[int, int], np.ndarray] = {}

    def anchors_for(self, feat_h: int, feat_w: int) -> np.ndarray:
        key = (feat_h, feat_w)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = anchor_grid(
                feat_h, feat_w, self.stride, self.scales, self.ratios)
        return self._anchor_cache[key]

    def gates(self, z: torch.Tensor) -> torch.Tensor:
        if self.excitation_override is not None:
            return self.excitation_override
        return self.excite(z)

    def branch_outputs(self, fm: torch.Tensor, z: torch.Tensor | None):
        """(rpn logits, rpn deltas, sdrpn logits or None) for one image."""
        logits, deltas = self.rpn_head(fm)
        if z is None:
            return logits, deltas, None
        gated = reweight(fm, self.gates(z))
        sd_logits, _ = self.sdrpn_head(gated)
        return logits, deltas, sd_logits

    def fused_scores(self, logits: torch.Tensor,
                     sd_logits: torch.Tensor | None) -> torch.Tensor:
        if sd_logits is None:
            return torch.sigmoid(logits)
        if self.fuse_logits:
            return logits + sd_logits
        return torch.sigmoid(logits) + torch.sigmoid(sd_logits)

    def propose(self, fm: torch.Tensor, z: torch.Tensor | None,
                pre_nms: int, post_nms: int, threshold: float,
                image_w: int, image_h: int) -> ProposalSet:
        """Score all anchors and keep the fused top set; z=None disables the
        conditioned branch (plain RPN pipeline)."""
        if fm.dim() != 3:
            raise ValueError("propose expects a single C x H x W feature map")
        logits, deltas, sd_logits = self.branch_outputs(fm, z)
        anchors = self.anchors_for(fm.shape[1], fm.shape[2])
        with torch.no_grad():
            fused = self.fused_scores(logits, sd_logits).double().cpu().numpy()
            decoded = decode_boxes(anchors, deltas.double().cpu().numpy())
        kept, boxes = select_proposals(decoded, fused, pre_nms, post_nms,
                                       threshold, image_w, image_h)
        rpn_prob = torch.sigmoid(logits.detach()).double().cpu().numpy()[kept]
        if sd_logits is None:
            sd_prob = np.zeros_like(rpn_prob)
        else:
            sd_prob = torch.sigmoid(sd_logits.detach()).double().cpu().numpy()[kept]
        return ProposalSet(boxes=boxes, scores=fused[kept],
                           source_scores=np.stack([rpn_prob, sd_prob], axis=1),
                           logits=logits, deltas=deltas, sdrpn_logits=sd_logits,
                           anchor_indices=kept)
