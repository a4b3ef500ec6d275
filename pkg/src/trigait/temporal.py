"""Temporal branch: per-joint embedding, spatial attention over joints,
temporal attention over frames, rest-pose canonical grid alignment, and the
modulate block that reduces aligned features to one matrix per frame.

The joint-to-grid assignment is precomputed from the skeleton's canonical
layout and stays fixed while pose varies; pose enters only through the
transformer features that get averaged into each grid cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .skeleton import CanonicalLayout


@dataclass(frozen=True)
class AlignmentMap:
    """Binary joint selector per grid region; every row sums to exactly k."""

    omega: np.ndarray  # (N_r, N_j) uint8
    grid_hw: tuple[int, int]
    k: int

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=np.uint8)
        object.__setattr__(self, "omega", omega)
        h, w = self.grid_hw
        if omega.shape[0] != h * w:
            raise ValueError(f"omega has {omega.shape[0]} rows, expected {h * w}")
        if not np.all(omega.sum(axis=1) == self.k):
            raise ValueError("every alignment row must sum to exactly k")


def compute_alignment(layout: CanonicalLayout, h: int, w: int, k: int) -> AlignmentMap:
    """k-nearest-joints selector for every cell of an h x w grid.

    Layout coordinates are proportionally scaled to the grid; region r's own
    coordinate is its integer cell index (row, col), regions enumerated
    row-major.  Distance ties resolve to the lower joint index.
    """
    n_j = layout.num_joints
    if not 1 <= k <= n_j:
        raise ValueError(f"k must lie in [1, {n_j}], got {k}")
    if h < 1 or w < 1:
        raise ValueError("grid dimensions must be positive")
    coords = layout.as_array()
    scaled = np.stack([coords[:, 0] * h / layout.H, coords[:, 1] * w / layout.W], axis=1)

    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    regions = np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1).astype(np.float64)

    diff = regions[:, None, :] - scaled[None, :, :]
    dist = np.einsum("rjk,rjk->rj", diff, diff)
    # stable sort keeps the lower joint index first on exact ties
    order = np.argsort(dist, axis=1, kind="stable")
    omega = np.zeros((h * w, n_j), dtype=np.uint8)
    np.put_along_axis(omega, order[:, :k], 1, axis=1)
    return AlignmentMap(omega=omega, grid_hw=(h, w), k=k)


def canonical_align(tokens: torch.Tensor, amap: AlignmentMap) -> torch.Tensor:
    """Average the k selected joint features into each grid cell.

    (..., N_j, C) tokens -> (..., C, h, w) maps; linear in the tokens.
    """
    n_j = amap.omega.shape[1]
    if tokens.shape[-2] != n_j:
        raise ValueError(f"tokens have {tokens.shape[-2]} joints, alignment expects {n_j}")
    omega = torch.as_tensor(amap.omega, dtype=tokens.dtype, device=tokens.device)
    h, w = amap.grid_hw
    maps = torch.einsum("...jc,rj->...cr", tokens, omega) / amap.k
    return maps.reshape(*tokens.shape[:-2], tokens.shape[-1], h, w)


class EncoderBlock(nn.Module):
    """Post-norm transformer encoder layer (self-attention + feed-forward)."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        attn_out, weights = self.attn(x, x, x, need_weights=return_attention, average_attn_weights=False)
        x = self.norm1(x + attn_out)
        x = self.norm2(x + self.ffn(x))
        return (x, weights) if return_attention else x


class JointEmbedding(nn.Module):
    """Axis-angle -> token: learned linear map plus a per-joint positional
    embedding shared across frames."""

    def __init__(self, num_joints: int = 24, dim: int = 64):
        super().__init__()
        self.num_joints = num_joints
        self.proj = nn.Linear(3, dim)
        self.joint_pos = nn.Parameter(torch.zeros(num_joints, dim))
        nn.init.normal_(self.joint_pos, std=0.02)

    def forward(self, pose: torch.Tensor) -> torch.Tensor:
        if pose.shape[-2:] != (self.num_joints, 3):
            raise ValueError(f"pose must end in ({self.num_joints}, 3), got {tuple(pose.shape[-2:])}")
        if not torch.all(torch.isfinite(pose)):
            raise ValueError("pose input must be finite")
        return self.proj(pose) + self.joint_pos


class SpatialTransformer(nn.Module):
    """Stacked attention over the joint axis; frames are independent."""

    def __init__(self, dim: int = 64, heads: int = 4, layers: int = 2, ffn_dim: int = 128):
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(dim, heads, ffn_dim) for _ in range(layers))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        lead = tokens.shape[:-2]
        x = tokens.reshape(-1, tokens.shape[-2], tokens.shape[-1])
        for block in self.blocks:
            x = block(x)
        return x.reshape(*lead, tokens.shape[-2], tokens.shape[-1])

    def attention_weights(self, tokens: torch.Tensor) -> list[torch.Tensor]:
        lead = tokens.shape[:-2]
        x = tokens.reshape(-1, tokens.shape[-2], tokens.shape[-1])
        weights = []
        for block in self.blocks:
            x, w = block(x, return_attention=True)
            weights.append(w.reshape(*lead, *w.shape[1:]))
        return weights


class TemporalTransformer(nn.Module):
    """Frame-level attention whose per-frame motion embedding is broadcast
    back onto every joint token of its frame."""

    def __init__(self, dim: int = 64, heads: int = 4, layers: int = 2, ffn_dim: int = 128, max_frames: int = 512):
        super().__init__()
        self.max_frames = max_frames
        self.frame_pos = nn.Parameter(torch.zeros(max_frames, dim))
        nn.init.normal_(self.frame_pos, std=0.02)
        self.blocks = nn.ModuleList(EncoderBlock(dim, heads, ffn_dim) for _ in range(layers))

    def motion(self, tokens: torch.Tensor) -> torch.Tensor:
        """(..., T, J, C) -> per-frame motion embedding (..., T, C)."""
        t = tokens.shape[-3]
        if t > self.max_frames:
            raise ValueError(f"sequence length {t} exceeds max_frames {self.max_frames}")
        frames = tokens.mean(dim=-2) + self.frame_pos[:t]
        lead = frames.shape[:-2]
        x = frames.reshape(-1, t, frames.shape[-1])
        for block in self.blocks:
            x = block(x)
        return x.reshape(*lead, t, frames.shape[-1])

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens + self.motion(tokens).unsqueeze(-2)


class ModulateBlock(nn.Module):
    """Pointwise convolution over flattened regions, nonlinearity, then
    channel mean and inverse flatten: (..., C, h, w) -> (..., h, w)."""

    def __init__(self, dim: int = 64):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel_size=1)
        self.act = nn.ReLU(inplace=True)

    def forward(self, aligned: torch.Tensor) -> torch.Tensor:
        if aligned.dim() < 3:
            raise ValueError("aligned maps must have shape (..., C, h, w)")
        c, h, w = aligned.shape[-3:]
        x = aligned.reshape(-1, c, h * w)
        x = self.act(self.conv(x))
        return x.mean(dim=1).reshape(*aligned.shape[:-3], h, w)


class TemporalBranch(nn.Module):
    """Full pipeline from pose windows to the per-frame modulation matrices.

    alignment="canonical" uses the fixed k-NN grid map; alignment="linear"
    replaces it with a learned joint-to-grid linear map (the ablation without
    canonical alignment).
    """

    def __init__(
        self,
        layout: CanonicalLayout,
        grid: int = 16,
        dim: int = 64,
        heads: int = 4,
        spatial_layers: int = 2,
        temporal_layers: int = 2,
        ffn_dim: int = 128,
        k: int = 7,
        max_frames: int = 512,
        alignment: str = "canonical",
    ):
        super().__init__()
        if alignment not in ("canonical", "linear"):
            raise ValueError(f"unknown alignment mode {alignment!r}")
        self.alignment = alignment
        self.grid = grid
        self.embed = JointEmbedding(layout.num_joints, dim)
        self.spatial = SpatialTransformer(dim, heads, spatial_layers, ffn_dim)
        self.temporal = TemporalTransformer(dim, heads, temporal_layers, ffn_dim, max_frames)
        self.modulate = ModulateBlock(dim)
        if alignment == "canonical":
            self.alignment_map = compute_alignment(layout, grid, grid, k)
            omega = torch.as_tensor(self.alignment_map.omega, dtype=torch.float32)
            self.register_buffer("omega", omega)
            self.to_grid = None
        else:
            self.alignment_map = None
            self.omega = None
            self.to_grid = nn.Linear(layout.num_joints, grid * grid)

    def aligned_maps(self, pose: torch.Tensor) -> torch.Tensor:
        tokens = self.embed(pose)
        tokens = self.spatial(tokens)
        tokens = self.temporal(tokens)
        if self.alignment == "canonical":
            omega = self.omega.to(tokens.dtype)
            maps = torch.einsum("...jc,rj->...cr", tokens, omega) / self.alignment_map.k
        else:
            maps = self.to_grid(tokens.transpose(-1, -2))
        return maps.reshape(*tokens.shape[:-2], tokens.shape[-1], self.grid, self.grid)

    def forward(self, pose: torch.Tensor) -> torch.Tensor:
        """(..., T, N_j, 3) pose window -> (..., T, grid, grid) matrices."""
        return self.modulate(self.aligned_maps(pose))
