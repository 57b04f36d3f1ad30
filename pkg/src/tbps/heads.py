"""Detection head (background rejection + refinement) and the OIM loss."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import _group_norm


class DetHead(nn.Module):
    """Small Det-Net over pooled RoI maps: 2-class logits + 4 deltas."""

    def __init__(self, in_channels: int, roi_size: int, hidden: int = 64) -> None:
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            _group_norm(hidden), nn.ReLU(inplace=True))
        self.fc = nn.Linear(hidden * roi_size * roi_size, hidden * 2)
        self.cls = nn.Linear(hidden * 2, 2)
        self.reg = nn.Linear(hidden * 2, 4)

    def forward(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.conv(pooled)
        x = torch.relu(self.fc(x.flatten(1)))
        return self.cls(x), self.reg(x)


class OimLoss(nn.Module):
    """Online instance matching over a prototype table and unlabeled queue.

    Labeled embeddings incur cross entropy over cosine similarities (scaled
    by 1/temperature) against every table row and queue entry; the table is
    then momentum-updated and unlabeled embeddings enter the FIFO queue.
    The stored vectors never carry gradients.
    """
    UNLABELED = -1

    def __init__(self, num_identities: int, dim: int, queue_size: int = 32,
                 momentum: float = 0.5, temperature: float = 0.1,
                 seed: int = 0, feed_unlabeled: bool = True) -> None:
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        lut = F.normalize(torch.randn(num_identities, dim, generator=gen), dim=1)
        self.register_buffer("lut", lut)
        self.register_buffer("queue", torch.zeros(queue_size, dim))
        self.register_buffer("queue_count", torch.zeros((), dtype=torch.long))
        self.momentum = momentum
        self.temperature = temperature
        self.feed_unlabeled = feed_unlabeled

    @property
    def num_identities(self) -> int:
        return self.lut.shape[0]

    def valid_queue(self) -> torch.Tensor:
        return self.queue[: int(self.queue_count)]

    def similarities(self, embeddings: torch.Tensor) -> torch.Tensor:
        """Cosine similarities (N, L + filled queue) against stored vectors."""
        e = F.normalize(embeddings, dim=1, eps=1e-12)
        table = torch.cat([self.lut, self.valid_queue()]).detach()
        return e @ table.t().to(e.dtype)

    def loss_only(self, embeddings: torch.Tensor,
                  labels: torch.Tensor) -> torch.Tensor:
        """Pure loss term; stored state is read but never written."""
        if embeddings.shape[0] != labels.shape[0]:
            raise ValueError("one label per embedding required")
        if labels.numel() == 0:
            return embeddings.sum() * 0.0
        if int(labels.max()) >= self.num_identities:
            raise ValueError(
                f"label {int(labels.max())} outside identity range {self.num_identities}")
        labeled = labels >= 0
        if not bool(labeled.any()):
            return embeddings.sum() * 0.0
        logits = self.similarities(embeddings[labeled]) / self.temperature
        return F.cross_entropy(logits, labels[labeled])

    def forward(self, embeddings: torch.Tensor,
                labels: torch.Tensor) -> torch.Tensor:
        loss = self.loss_only(embeddings, labels)
        self._update(embeddings.detach(), labels)
        return loss

    @torch.no_grad()
    def _update(self, embeddings: torch.Tensor, labels: torch.Tensor) -> None:
        embeddings = F.normalize(embeddings, dim=1, eps=1e-12).to(self.lut.dtype)
        for emb, label in zip(embeddings, labels.tolist()):
            if label >= 0:
                mixed = self.momentum * self.lut[label] + (1.0 - self.momentum) * emb
                self.lut[label] = F.normalize(mixed, dim=0, eps=1e-12)
            elif self.feed_unlabeled:
                self._push(emb)

    def _push(self, emb: torch.Tensor) -> None:
        size = self.queue.shape[0]
        if size == 0:
            return
        count = int(self.queue_count)
        if count < size:
            self.queue[count] = emb
            self.queue_count += 1
        else:
            self.queue[:-1] = self.queue[1:].clone()
            self.queue[-1] = emb
