"""Cross-modal similarity and alignment losses over mixed part features.

Visual parts (6 per box) and textual parts (sentence + sub-sentences +
words) are projected into query/key/value spaces; each direction attends
over the other modality, measures part-wise cosine relevance, and averages
it into a scalar pair similarity. Batch-level KL/classification losses sit
on top.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-8


def masked_cosine(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine similarity that returns 0 where either vector has zero norm."""
    na = a.norm(dim=dim)
    nb = b.norm(dim=dim)
    dot = (a * b).sum(dim=dim)
    denom = na * nb
    safe = denom > 0
    # divide by 1 where unsafe so the dead branch cannot emit inf/nan grads
    ratio = dot / torch.where(safe, denom, torch.ones_like(denom))
    return torch.where(safe, ratio, torch.zeros_like(dot))


def direction_score(queries: torch.Tensor, keys: torch.Tensor,
                    values_own: torch.Tensor, values_other: torch.Tensor) -> torch.Tensor:
    """Attend queries over the other modality and average part relevance.

    queries/values_own are (m, D) from one modality; keys/values_other are
    (n, D) from the other. Supports a leading batch dimension on the query
    side: (B, m, D) against shared (n, D).
    """
    d = queries.shape[-1]
    weights = torch.softmax(queries @ keys.transpose(-2, -1) / math.sqrt(d), dim=-1)
    attended = weights @ values_other
    return masked_cosine(values_own, attended).mean(dim=-1)


class CrossModalAttention(nn.Module):
    """Holds the six projection layers and computes pair similarities."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.vis_q = nn.Linear(dim, dim)
        self.vis_k = nn.Linear(dim, dim)
        self.vis_v = nn.Linear(dim, dim)
        self.sem_q = nn.Linear(dim, dim)
        self.sem_k = nn.Linear(dim, dim)
        self.sem_v = nn.Linear(dim, dim)

    def pair_similarity(self, visual: torch.Tensor,
                        textual: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(S, S') for one visual part set (m, D) and one caption (n, D)."""
        s, sp = self.similarity_to_text(visual.unsqueeze(0), textual)
        return s[0], sp[0]

    def similarity_to_text(self, visual: torch.Tensor,
                           textual: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Batched similarities of (N, m, D) part sets against one caption.

        Returns S (text-to-image direction) and S' (image-to-text) as (N,)
        tensors.
        """
        if visual.dim() != 3 or textual.dim() != 2:
            raise ValueError("expected (N, m, D) visual and (n, D) textual parts")
        q_vis, k_vis, v_vis = self.vis_q(visual), self.vis_k(visual), self.vis_v(visual)
        q_sem, k_sem, v_sem = (self.sem_q(textual), self.sem_k(textual),
                               self.sem_v(textual))
        s = direction_score(q_vis, k_sem, v_vis, v_sem)
        n = visual.shape[0]
        d = textual.shape[-1]
        # semantic queries attend over each candidate's visual parts
        weights = torch.softmax(
            q_sem.unsqueeze(0) @ k_vis.transpose(-2, -1) / math.sqrt(d), dim=-1)
        attended = weights @ v_vis
        sp = masked_cosine(v_sem.unsqueeze(0).expand(n, -1, -1), attended).mean(dim=-1)
        return s, sp

    def similarity_matrices(self, visual: torch.Tensor,
                            textual: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """All-pairs S and S' matrices, indexed [image i, text j]."""
        cols = [self.similarity_to_text(visual, parts) for parts in textual]
        s = torch.stack([c[0] for c in cols], dim=1)
        sp = torch.stack([c[1] for c in cols], dim=1)
        return s, sp


def _kl_rows(matrix: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Sum over rows with any positive label of KL(softmax(row) || norm labels)."""
    keep = labels.sum(dim=1) > 0
    if not bool(keep.any()):
        return matrix.sum() * 0.0
    logp = torch.log_softmax(matrix[keep], dim=1)
    p = logp.exp()
    q = labels[keep] / labels[keep].sum(dim=1, keepdim=True)
    return (p * (logp - torch.log(q + EPS))).sum()


def csal_loss(s_matrix: torch.Tensor, sp_matrix: torch.Tensor,
              labels: torch.Tensor) -> torch.Tensor:
    """Alignment loss over both similarity matrices.

    Rows of s_matrix are treated as per-image distributions over texts;
    rows of sp_matrix transposed as per-text distributions over images.
    """
    return _kl_rows(s_matrix, labels.to(s_matrix.dtype)) + \
        _kl_rows(sp_matrix.t(), labels.t().to(sp_matrix.dtype))


def cmpm_loss(image_embs: torch.Tensor, text_embs: torch.Tensor,
              labels: torch.Tensor) -> torch.Tensor:
    """Projection-matching loss on global features.

    For each text j the matching distribution over images i is the softmax
    of I_i . normalize(T_j); KL against the identically normalized label
    column, averaged over the batch, summed over both directions.
    """
    labels = labels.to(image_embs.dtype)

    def direction(a: torch.Tensor, b: torch.Tensor, match: torch.Tensor) -> torch.Tensor:
        proj = a @ F.normalize(b, dim=1, eps=1e-12).t()   # (rows i, cols j)
        logp = torch.log_softmax(proj, dim=0)
        p = logp.exp()
        q = match / match.sum(dim=0, keepdim=True).clamp_min(EPS)
        return (p * (logp - torch.log(q + EPS))).sum(dim=0).mean()

    return direction(image_embs, text_embs, labels) + \
        direction(text_embs, image_embs, labels.t())


def cmpc_loss(image_embs: torch.Tensor, text_embs: torch.Tensor,
              labels: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Norm-softmax classification of projected global features.

    weight has one column per identity and is column-normalized before use.
    Each image feature is projected onto its matched normalized text
    feature (and vice versa) before classification.
    """
    if int(labels.max()) >= weight.shape[1] or int(labels.min()) < 0:
        raise ValueError("identity label outside classifier column range")
    wnorm = weight / weight.norm(dim=0, keepdim=True).clamp_min(1e-12)

    def direction(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        bbar = F.normalize(b, dim=1, eps=1e-12)
        proj = (a * bbar).sum(dim=1, keepdim=True) * bbar
        return F.cross_entropy(proj @ wnorm, labels)

    return direction(image_embs, text_embs) + direction(text_embs, image_embs)


def match_matrix(image_ids: torch.Tensor, text_ids: torch.Tensor) -> torch.Tensor:
    """Binary label matrix y[i, j] = 1 iff identities agree."""
    return (image_ids.reshape(-1, 1) == text_ids.reshape(1, -1)).to(torch.float64)
