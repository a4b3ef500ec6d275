"""Three-branch recognizer and its ablation variants.

Variants: "appr" (appearance only), "appr+stt" (adds the temporal branch with
a learned joint-to-grid map), "appr+castt" (canonical alignment), and "full"
(adds the projection branch).  Missing branches degenerate the fusion
gracefully: absent temporal matrices act as the identity, absent projection
features as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from .encoder import FEATURE_CHANNELS, FEATURE_SIZE, SilhouetteEncoder
from .head import HorizontalPyramidPooling, PartClassifier, ce_loss, combined_loss, fuse, set_pool, triplet_loss
from .skeleton import CanonicalLayout, default_skeleton, rest_pose_canonical_coords
from .temporal import TemporalBranch
from .deform import SilhouetteGuidedAlign

VARIANTS = ("appr", "appr+stt", "appr+castt", "full")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "full"
    num_ids: int = 2
    channels: int = FEATURE_CHANNELS
    grid: int = FEATURE_SIZE
    token_dim: int = 64
    heads: int = 4
    spatial_layers: int = 2
    temporal_layers: int = 2
    ffn_dim: int = 128
    k_neighbors: int = 7
    parts: int = 16
    part_dim: int = 256
    canonical_h: int = 15
    canonical_w: int = 10
    max_frames: int = 512
    kernel_size: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_ids < 1:
            raise ValueError("num_ids must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class GaitRecognizer(nn.Module):
    def __init__(self, config: ModelConfig, layout: CanonicalLayout | None = None):
        super().__init__()
        self.config = config
        if layout is None:
            layout = rest_pose_canonical_coords(default_skeleton(), config.canonical_h, config.canonical_w)
        self.encoder = SilhouetteEncoder()
        self.hpp = HorizontalPyramidPooling(config.channels, config.parts, config.part_dim)
        self.classifier = PartClassifier(config.parts, config.part_dim, config.num_ids)

        if config.variant in ("appr+stt", "appr+castt", "full"):
            self.temporal = TemporalBranch(
                layout,
                grid=config.grid,
                dim=config.token_dim,
                heads=config.heads,
                spatial_layers=config.spatial_layers,
                temporal_layers=config.temporal_layers,
                ffn_dim=config.ffn_dim,
                k=config.k_neighbors,
                max_frames=config.max_frames,
                alignment="linear" if config.variant == "appr+stt" else "canonical",
            )
        else:
            self.temporal = None
        if config.variant == "full":
            self.projection_encoder = SilhouetteEncoder()
            self.projection_align = SilhouetteGuidedAlign(config.channels, config.kernel_size)
        else:
            self.projection_encoder = None
            self.projection_align = None

    def fused_frames(self, sils: torch.Tensor, projs: torch.Tensor, poses: torch.Tensor) -> torch.Tensor:
        """(B, T, 64, 64) x2 and (B, T, 24, 3) -> fused (B, T, C, g, g)."""
        f_app = self.encoder(sils)
        if self.temporal is not None:
            f_temporal = self.temporal(poses)
        else:
            g = self.config.grid
            eye = torch.eye(g, dtype=f_app.dtype, device=f_app.device)
            f_temporal = eye.expand(*f_app.shape[:-3], g, g)
        if self.projection_align is not None:
            f_pro = self.projection_encoder(projs)
            f_projected = self.projection_align(f_app, f_pro)
        else:
            f_projected = torch.zeros_like(f_app)
        return fuse(f_app, f_temporal, f_projected)

    def embed(self, sils: torch.Tensor, projs: torch.Tensor, poses: torch.Tensor) -> torch.Tensor:
        """Sequence-level part embeddings (B, parts, part_dim)."""
        fused = self.fused_frames(sils, projs, poses)
        return self.hpp(set_pool(fused))

    def forward(self, sils: torch.Tensor, projs: torch.Tensor, poses: torch.Tensor):
        parts = self.embed(sils, projs, poses)
        return parts, self.classifier(parts)

    def training_loss(self, batch_tensors, alpha: float = 1.0, beta: float = 0.1):
        sils, projs, poses, labels = batch_tensors
        parts, logits = self(sils, projs, poses)
        return combined_loss(triplet_loss(parts, labels), ce_loss(logits, labels), alpha, beta)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_ablation_variant(name: str, num_ids: int, **overrides) -> GaitRecognizer:
    """Construct one of the studied model variants by name."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    config = ModelConfig(variant=name, num_ids=num_ids, **overrides)
    return GaitRecognizer(config)
