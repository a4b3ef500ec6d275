"""Branch fusion, frame set-pooling, horizontal part pooling, and the
combined metric-learning / classification loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

_DIST_EPS = 1e-12


def fuse(f_app: torch.Tensor, f_temporal: torch.Tensor, f_projected: torch.Tensor) -> torch.Tensor:
    """Per frame and channel: f_app @ f_temporal + f_projected.

    f_app and f_projected are (..., C, h, w); f_temporal is (..., h, w) and
    must be square for the matrix product to conform.
    """
    h, w = f_app.shape[-2:]
    if h != w:
        raise ValueError(f"fusion requires square maps, got {h}x{w}")
    if f_temporal.shape[-2:] != (h, w) or f_projected.shape[-2:] != (h, w):
        raise ValueError("branch feature maps disagree in spatial size")
    return torch.matmul(f_app, f_temporal.unsqueeze(-3)) + f_projected


def set_pool(frames: torch.Tensor) -> torch.Tensor:
    """Elementwise max over the frame axis: (..., N, C, h, w) -> (..., C, h, w)."""
    if frames.dim() < 4 or frames.shape[-4] < 1:
        raise ValueError("set_pool needs at least one frame on axis -4")
    return frames.amax(dim=-4)


class HorizontalPyramidPooling(nn.Module):
    """Split the pooled map into horizontal strips; per strip, global max plus
    global mean over spatial positions, then an independent linear map."""

    def __init__(self, channels: int = 128, parts: int = 16, part_dim: int = 256):
        super().__init__()
        self.parts = parts
        self.weight = nn.Parameter(torch.empty(parts, channels, part_dim))
        self.bias = nn.Parameter(torch.zeros(parts, part_dim))
        nn.init.normal_(self.weight, std=channels**-0.5)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        """(..., C, H, W) -> (..., parts, part_dim)."""
        c, height, width = pooled.shape[-3:]
        if height % self.parts != 0:
            raise ValueError(f"height {height} not divisible into {self.parts} strips")
        strips = pooled.reshape(*pooled.shape[:-2], self.parts, height // self.parts, width)
        vec = strips.amax(dim=(-2, -1)) + strips.mean(dim=(-2, -1))  # (..., C, parts)
        vec = vec.transpose(-1, -2)  # (..., parts, C)
        return torch.einsum("...pc,pcd->...pd", vec, self.weight) + self.bias


class PartClassifier(nn.Module):
    """Independent identity logits per part, used only by the training loss."""

    def __init__(self, parts: int = 16, part_dim: int = 256, num_ids: int = 2):
        super().__init__()
        self.num_ids = num_ids
        self.weight = nn.Parameter(torch.empty(parts, part_dim, num_ids))
        self.bias = nn.Parameter(torch.zeros(parts, num_ids))
        nn.init.normal_(self.weight, std=part_dim**-0.5)

    def forward(self, parts: torch.Tensor) -> torch.Tensor:
        return torch.einsum("...pd,pdn->...pn", parts, self.weight) + self.bias


def triplet_loss(parts: torch.Tensor, labels: torch.Tensor, margin: float = 0.2) -> torch.Tensor:
    """Batch-all triplet loss on per-part Euclidean distances.

    Averages over violating (positive-loss) triplets within each part, then
    over parts; returns 0 when no triplet violates the margin.
    """
    if parts.dim() != 3:
        raise ValueError("expected embeddings of shape (batch, parts, dim)")
    b = parts.shape[0]
    labels = labels.reshape(b)
    if torch.unique(labels).numel() < 2:
        raise ValueError("triplet loss needs at least two identities in the batch")

    per_part = parts.transpose(0, 1)  # (P, B, D)
    # squared distances via the quadratic form keep gradients finite at zero
    norms = per_part.pow(2).sum(dim=-1)
    sq = norms[:, :, None] + norms[:, None, :] - 2.0 * per_part @ per_part.transpose(1, 2)
    dist = torch.sqrt(sq.clamp(min=0.0) + _DIST_EPS)

    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~torch.eye(b, dtype=torch.bool, device=parts.device)
    neg_mask = ~same
    valid = (pos_mask[:, :, None] & neg_mask[:, None, :]).unsqueeze(0)

    hinge = F.relu(dist[:, :, :, None] - dist[:, :, None, :] + margin) * valid
    violating = (hinge > 0) & valid
    counts = violating.sum(dim=(1, 2, 3)).clamp(min=1)
    return (hinge.sum(dim=(1, 2, 3)) / counts).mean()


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-part softmax cross-entropy averaged over parts and batch."""
    if logits.dim() != 3:
        raise ValueError("expected logits of shape (batch, parts, num_ids)")
    b, p, n = logits.shape
    labels = labels.reshape(b)
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"labels must lie in [0, {n})")
    flat = logits.reshape(b * p, n)
    return F.cross_entropy(flat, labels.repeat_interleave(p))


@dataclass(frozen=True)
class LossBundle:
    total: torch.Tensor
    triplet: torch.Tensor
    ce: torch.Tensor
    alpha: float
    beta: float


def combined_loss(triplet: torch.Tensor, ce: torch.Tensor, alpha: float = 1.0, beta: float = 0.1) -> LossBundle:
    """total = alpha * triplet + beta * ce."""
    for name, value in (("triplet", triplet), ("ce", ce)):
        if not torch.isfinite(torch.as_tensor(value)):
            raise ValueError(f"{name} loss must be finite")
    triplet = torch.as_tensor(triplet)
    ce = torch.as_tensor(ce)
    return LossBundle(total=alpha * triplet + beta * ce, triplet=triplet, ce=ce, alpha=alpha, beta=beta)
