"""Shared-trunk visual backbone, RoI pooling and multi-scale part features.

The trunk is split into a Base-Net (full-image features at a fixed stride)
and an ID-Net (re-encodes pooled RoI maps). Part features come from one
global pass plus split-and-shuffle stripe passes at two granularities, all
through the same ID-Net weights.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = min(8, max(channels // 4, 1))
    while channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


class BaseNet(nn.Module):
    """Full-image feature extractor; three stride-2 stages give stride 8."""

    def __init__(self, out_channels: int = 48, stride: int = 8) -> None:
        super().__init__()
        if stride not in (4, 8, 16):
            raise ValueError(f"unsupported stride {stride}")
        widths = {4: (out_channels // 2, out_channels),
                  8: (out_channels // 3, 2 * out_channels // 3, out_channels),
                  16: (out_channels // 4, out_channels // 2,
                       2 * out_channels // 3, out_channels)}[stride]
        layers: list[nn.Module] = []
        prev = 3
        for width in widths:
            width = max(width, 8)
            layers += [nn.Conv2d(prev, width, 3, stride=2, padding=1),
                       _group_norm(width), nn.ReLU(inplace=True)]
            prev = width
        layers += [nn.Conv2d(prev, out_channels, 3, padding=1),
                   _group_norm(out_channels), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.out_channels = out_channels
        self.stride = stride

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W input, got {tuple(images.shape)}")
        return self.body(images)


class IdNet(nn.Module):
    """Re-encodes pooled RoI maps; replicate padding keeps constant inputs
    constant so identical stripes produce identical features."""

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, padding_mode="replicate"),
            _group_norm(out_channels), nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, padding_mode="replicate"),
            _group_norm(out_channels), nn.ReLU(inplace=True),
        )
        self.out_channels = out_channels

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.body(pooled)


def roi_align(fm: torch.Tensor, boxes: torch.Tensor, stride: int,
              out_size: int, sampling_ratio: int = 2) -> torch.Tensor:
    """Bilinear RoI pooling of image-coordinate boxes from one feature map.

    fm is C x H x W; boxes is N x 4. Sample points live at pixel centers
    (coordinate p maps to pixel p - 0.5), so a box aligned with the feature
    grid at sampling_ratio 1 reproduces the crop exactly. Differentiable in
    both fm and the box coordinates.
    """
    if fm.dim() != 3:
        raise ValueError("feature map must be C x H x W")
    c, h, w = fm.shape
    if h < 2 or w < 2:
        raise ValueError("feature map too small for bilinear sampling")
    boxes = boxes.to(fm.dtype)
    scaled = boxes / float(stride)
    bw = scaled[:, 2] - scaled[:, 0]
    bh = scaled[:, 3] - scaled[:, 1]
    if bool((bw <= 0).any()) or bool((bh <= 0).any()):
        raise ValueError("box has zero area after projection to the feature map")

    n = boxes.shape[0]
    p, r = out_size, sampling_ratio
    # per-bin sample offsets in units of one bin
    offs = (torch.arange(p * r, dtype=fm.dtype, device=fm.device) + 0.5) / r
    xs = scaled[:, 0:1] + offs[None, :] * (bw[:, None] / p)   # (N, P*r)
    ys = scaled[:, 1:2] + offs[None, :] * (bh[:, None] / p)

    def sample_axis(coords: torch.Tensor, limit: int):
        u = (coords - 0.5).clamp(0.0, limit - 1.0)
        i0 = u.floor().clamp(max=limit - 2)
        frac = u - i0
        return i0.long(), frac

    x0, fx = sample_axis(xs, w)
    y0, fy = sample_axis(ys, h)

    # broadcast to full (N, P*r, P*r) sample grids
    y0g = y0[:, :, None].expand(n, p * r, p * r)
    x0g = x0[:, None, :].expand(n, p * r, p * r)
    fyg = fy[:, :, None]
    fxg = fx[:, None, :]

    def gather(yi, xi):
        flat = fm.reshape(c, h * w)
        idx = (yi * w + xi).reshape(n, -1)
        out = flat[:, idx.reshape(-1)].reshape(c, n, p * r, p * r)
        return out.permute(1, 0, 2, 3)

    v00 = gather(y0g, x0g)
    v01 = gather(y0g, x0g + 1)
    v10 = gather(y0g + 1, x0g)
    v11 = gather(y0g + 1, x0g + 1)
    fygb = fyg[:, None, :, :]
    fxgb = fxg[:, None, :, :]
    interp = (v00 * (1 - fygb) * (1 - fxgb) + v01 * (1 - fygb) * fxgb
              + v10 * fygb * (1 - fxgb) + v11 * fygb * fxgb)
    return interp.reshape(n, c, p, r, p, r).mean(dim=(3, 5))


def split_shuffle(pooled: torch.Tensor, k: int,
                  rng: torch.Generator | None = None) -> tuple[torch.Tensor, list[int]]:
    """Permute the k horizontal stripes of a C x P x P pooled map.

    Returns the shuffled map and the permutation: output stripe t holds
    input stripe perm[t]. rng=None means inference and keeps the identity.
    """
    if pooled.dim() != 3:
        raise ValueError("pooled map must be C x P x P")
    p = pooled.shape[1]
    if k < 1 or p % k:
        raise ValueError(f"stripe count {k} must divide pooled height {p}")
    if rng is None:
        perm = list(range(k))
    else:
        perm = torch.randperm(k, generator=rng).tolist()
    rows = pooled.shape[1] // k
    stripes = [pooled[:, i * rows:(i + 1) * rows, :] for i in perm]
    return torch.cat(stripes, dim=1), perm


SCALE_STRIPES = (1, 2, 3)   # global, region, local part counts


class VisualExtractor(nn.Module):
    """ID-Net plus projection producing the 6 multi-scale part vectors."""

    def __init__(self, in_channels: int, id_channels: int, embed_dim: int) -> None:
        super().__init__()
        self.id_net = IdNet(in_channels, id_channels)
        self.proj = nn.Linear(id_channels, embed_dim)
        # batch-centering necks: ReLU features share a large positive component
        # that survives any linear map and clusters normalized embeddings.
        # Global and stripe rows are distinct populations; sharing one neck
        # lets the (6x more numerous) stripe rows drag the running mean off
        # the global rows' center, which breaks eval-mode retrieval.
        self.neck = nn.BatchNorm1d(embed_dim)
        self.stripe_neck = nn.BatchNorm1d(embed_dim)
        self.embed_dim = embed_dim

    def global_feature(self, pooled: torch.Tensor) -> torch.Tensor:
        """ID-Net, spatial mean, projection; shared by retrieval and OIM."""
        return self.neck(self.proj(self.id_net(pooled).mean(dim=(2, 3))))

    def embed(self, pooled: torch.Tensor) -> torch.Tensor:
        """Unit-norm identity embeddings from pooled RoI maps."""
        return F.normalize(self.global_feature(pooled), dim=1, eps=1e-12)

    def _stripe_features(self, pooled: torch.Tensor, k: int,
                         rng: torch.Generator | None) -> torch.Tensor:
        n, _, p, _ = pooled.shape
        shuffled = []
        perms = []
        for i in range(n):
            sh, perm = split_shuffle(pooled[i], k, rng)
            shuffled.append(sh)
            perms.append(perm)
        feats = self.id_net(torch.stack(shuffled))
        rows = p // k
        stripe = feats.reshape(n, feats.shape[1], k, rows, p).mean(dim=(3, 4))
        stripe = stripe.permute(0, 2, 1)                  # (N, k, C_id)
        # undo the shuffle so part t is always the t-th stripe of the person
        canonical = torch.empty_like(stripe)
        for i, perm in enumerate(perms):
            for t, orig in enumerate(perm):
                canonical[i, orig] = stripe[i, t]
        out = self.proj(canonical)
        return self.stripe_neck(out.reshape(-1, self.embed_dim)).reshape(out.shape)

    def parts_with_global(self, pooled: torch.Tensor, global_feats: torch.Tensor,
                          rng: torch.Generator | None = None) -> torch.Tensor:
        """Part features when the global scale was already computed."""
        parts = [global_feats.unsqueeze(1)]
        for k in SCALE_STRIPES[1:]:
            parts.append(self._stripe_features(pooled, k, rng))
        return torch.cat(parts, dim=1)

    def forward(self, pooled: torch.Tensor,
                rng: torch.Generator | None = None) -> torch.Tensor:
        """Part features (N, 6, D): 1 global + 2 region + 3 local."""
        if pooled.dim() != 4:
            raise ValueError("pooled rois must be N x C x P x P")
        return self.parts_with_global(pooled, self.global_feature(pooled), rng)
