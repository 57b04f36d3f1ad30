"""Box geometry: IoU, anchor grids, delta coding, clipping and greedy NMS."""
from __future__ import annotations

import numpy as np


def validate_boxes(boxes: np.ndarray) -> None:
    boxes = np.asarray(boxes)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ValueError(f"expected (N, 4) boxes, got shape {boxes.shape}")
    if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
        raise ValueError("boxes must satisfy x1 < x2 and y1 < y2")


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou(a, b) -> float:
    """IoU of two boxes given as (x1, y1, x2, y2)."""
    return float(iou_matrix(np.asarray(a, dtype=np.float64)[None],
                            np.asarray(b, dtype=np.float64)[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) boxes -> (N, M)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0.0, None) * np.clip(y2 - y1, 0.0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def anchor_grid(feat_h: int, feat_w: int, stride: int,
                scales: tuple[int, ...], ratios: tuple[float, ...]) -> np.ndarray:
    """All anchors for a feature map, location-major then (scale, ratio).

    An anchor at scale s and aspect ratio r (height/width) keeps area
    (s * stride)^2 and is centered on its feature cell in image coordinates.
    Anchors are not clipped here; clipping happens at proposal time.
    """
    shapes = []
    for s in scales:
        side = float(s * stride)
        for r in ratios:
            shapes.append((side / np.sqrt(r), side * np.sqrt(r)))
    shapes_arr = np.asarray(shapes, dtype=np.float64)  # (A, 2) width, height

    cx = (np.arange(feat_w, dtype=np.float64) + 0.5) * stride
    cy = (np.arange(feat_h, dtype=np.float64) + 0.5) * stride
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx.ravel(), cyy.ravel()], axis=1)  # (H*W, 2)

    w = shapes_arr[None, :, 0]
    h = shapes_arr[None, :, 1]
    x = centers[:, None, 0]
    y = centers[:, None, 1]
    anchors = np.stack([x - w / 2, y - h / 2, x + w / 2, y + h / 2], axis=2)
    return anchors.reshape(-1, 4)


def encode_boxes(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Faster-RCNN deltas (dx, dy, dw, dh) taking anchors onto targets."""
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if anchors.shape != targets.shape:
        raise ValueError("anchors and targets must have matching shapes")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchors must have positive width and height")
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tcx = targets[:, 0] + tw / 2
    tcy = targets[:, 1] + th / 2
    return np.stack([(tcx - acx) / aw, (tcy - acy) / ah,
                     np.log(tw / aw), np.log(th / ah)], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of encode_boxes; output is unclipped."""
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if anchors.shape != deltas.shape:
        raise ValueError("anchors and deltas must have matching shapes")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchors must have positive width and height")
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    cx = deltas[:, 0] * aw + acx
    cy = deltas[:, 1] * ah + acy
    w = np.exp(deltas[:, 2]) * aw
    h = np.exp(deltas[:, 3]) * ah
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def clip_boxes(boxes: np.ndarray, width: int, height: int) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).copy()
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, float(width))
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, float(height))
    return boxes


def min_side_filter(boxes: np.ndarray, min_side: float) -> np.ndarray:
    """Indices of boxes at least min_side wide and tall.

    Proposals clipped at an image border can collapse to zero width or
    height, which RoI pooling rejects.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.flatnonzero((boxes[:, 2] - boxes[:, 0] >= min_side)
                          & (boxes[:, 3] - boxes[:, 1] >= min_side))


def descending_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorting scores high to low; ties keep the lower index first."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float,
        limit: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression.

    Returns kept indices sorted by descending score (ties by lower index).
    Stops early once `limit` boxes are kept.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores must have equal length")
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = descending_order(scores)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep: list[int] = []
    for pos, idx in enumerate(order):
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        if limit is not None and len(keep) >= limit:
            break
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        if len(rest) == 0:
            continue
        overlap = iou_matrix(boxes[idx][None], boxes[rest])[0]
        suppressed[rest[overlap > threshold]] = True
    return np.asarray(keep, dtype=np.int64)
