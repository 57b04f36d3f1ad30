"""Assembly of the full search network and its image/text preprocessing."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .backbone import BaseNet, VisualExtractor, roi_align
from .config import ModelConfig, TrainConfig
from .crossmodal import CrossModalAttention
from .heads import DetHead, OimLoss
from .rpn import ProposalEngine
from .text_encoder import TextEncoder
from .tokenizer import Vocabulary, tokenize

IMAGE_OFFSET = 0.5  # images are mapped from uint8 to roughly [-0.5, 0.5]


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 uint8 raster to 3 x H x W tensor."""
    arr = torch.from_numpy(np.array(image, copy=True)).to(dtype) / 255.0
    return arr.permute(2, 0, 1) - IMAGE_OFFSET


class PersonSearchModel(nn.Module):
    """Detection, identification and cross-modal embedding in one trunk."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary,
                 num_identities: int, train_config: TrainConfig | None = None,
                 seed: int = 0) -> None:
        super().__init__()
        train_config = train_config or TrainConfig()
        self.config = config
        self.vocab = vocab
        self.base = BaseNet(config.base_channels, config.stride)
        self.visual = VisualExtractor(config.base_channels, config.id_channels,
                                      config.embed_dim)
        self.text = TextEncoder(len(vocab), config.embed_dim, config.text_heads,
                                config.text_layers, config.max_tokens)
        self.proposals = ProposalEngine(
            config.base_channels, config.embed_dim, config.stride,
            config.anchor_scales, config.anchor_ratios, config.reduction,
            config.fuse_logits)
        self.det = DetHead(config.base_channels, config.roi_size)
        self.attn = CrossModalAttention(config.embed_dim)
        self.oim = OimLoss(num_identities, config.embed_dim,
                           queue_size=train_config.oim_queue,
                           momentum=train_config.oim_momentum,
                           temperature=train_config.oim_temperature,
                           seed=seed, feed_unlabeled=train_config.oim_feed_unlabeled)
        self.cmpc_weight = nn.Parameter(
            torch.randn(config.embed_dim, num_identities) * 0.1)
        # same role as the visual neck: sentence and sub-sentence summaries
        # cluster around a shared marker direction (word rows do not)
        self.text_neck = nn.BatchNorm1d(config.embed_dim)

    # ---- feature plumbing -------------------------------------------------

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.base(images)

    def pool(self, fm: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        return roi_align(fm, boxes, self.config.stride, self.config.roi_size,
                         self.config.roi_sampling)

    def freeze_neck_stats(self) -> None:
        """Stop updating embedding-neck batch statistics (affine still trains)."""
        self.visual.neck.eval()
        self.visual.stripe_neck.eval()
        self.text_neck.eval()

    def encode_caption(self, caption: str):
        return self.encode_captions([caption])[0]

    def encode_captions(self, captions: list[str]):
        from .text_encoder import SemanticFeatures
        seqs = [tokenize(c, self.vocab, self.config.max_tokens) for c in captions]
        feats = self.text.encode(seqs)
        rows = self.text_neck(torch.cat(
            [torch.cat([f.sentence.unsqueeze(0), f.subsentences]) for f in feats]))
        out = []
        offset = 0
        for f in feats:
            n_seg = len(f.subsentences)
            out.append(SemanticFeatures(
                sentence=rows[offset],
                subsentences=rows[offset + 1: offset + 1 + n_seg],
                words=f.words))
            offset += 1 + n_seg
        return out

    # ---- parameter grouping ----------------------------------------------

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Disjoint, exhaustive split into detection / identification /
        projection groups for the three optimizers."""
        detection = (list(self.base.parameters())
                     + list(self.proposals.rpn_head.parameters())
                     + list(self.proposals.sdrpn_head.parameters())
                     + list(self.det.parameters()))
        identification = list(self.visual.parameters())
        projection = (list(self.text.parameters())
                      + list(self.text_neck.parameters())
                      + list(self.attn.parameters())
                      + list(self.proposals.excite.parameters())
                      + [self.cmpc_weight])
        return {"detection": detection, "identification": identification,
                "projection": projection}
