"""Silhouette-guided deformation: predicts per-pixel offsets and modulation
masks from the concatenated appearance/projection features, then resamples
the projection features with modulated deformable convolution.

Offset channel layout: channel 2k is dy and 2k+1 is dx of tap k; taps are the
kernel positions in row-major order, e.g. (-1,-1) ... (1,1) for 3x3.
Out-of-bounds bilinear samples read as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass
class DeformField:
    offsets: torch.Tensor  # (N, 2K, h, w), feature-map pixel units
    mask: torch.Tensor  # (N, K, h, w), sigmoid outputs in (0, 1)

    def __post_init__(self):
        if self.offsets.shape[-3] != 2 * self.mask.shape[-3]:
            raise ValueError("offsets must carry (dy, dx) per mask channel")
        if self.offsets.shape[:-3] != self.mask.shape[:-3] or self.offsets.shape[-2:] != self.mask.shape[-2:]:
            raise ValueError("offsets and mask disagree in batch or spatial shape")
        if not torch.all(torch.isfinite(self.offsets)):
            raise ValueError("offsets must be finite")

    @property
    def num_taps(self) -> int:
        return self.mask.shape[-3]


def regular_taps(kernel_size: int, device=None, dtype=None) -> torch.Tensor:
    """(K, 2) row-major (dy, dx) kernel tap positions centered at zero."""
    half = (kernel_size - 1) / 2.0
    coords = torch.arange(kernel_size, dtype=dtype or torch.float32, device=device) - half
    dy, dx = torch.meshgrid(coords, coords, indexing="ij")
    return torch.stack([dy.reshape(-1), dx.reshape(-1)], dim=1)


def _gather_bilinear(feat: torch.Tensor, sy: torch.Tensor, sx: torch.Tensor) -> torch.Tensor:
    """Sample feat (N, C, H, W) at fractional (sy, sx) of shape (N, h, w);
    zero padding outside the map."""
    n, c, height, width = feat.shape
    y0f = torch.floor(sy)
    x0f = torch.floor(sx)
    fy = (sy - y0f).unsqueeze(1)
    fx = (sx - x0f).unsqueeze(1)
    y0 = y0f.long()
    x0 = x0f.long()

    flat = feat.reshape(n, c, height * width)
    out = None
    for dy, dx, weight in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yi = y0 + dy
        xi = x0 + dx
        valid = ((yi >= 0) & (yi < height) & (xi >= 0) & (xi < width)).unsqueeze(1)
        idx = (yi.clamp(0, height - 1) * width + xi.clamp(0, width - 1)).reshape(n, 1, -1).expand(n, c, -1)
        vals = flat.gather(2, idx).reshape(n, c, *sy.shape[1:])
        term = vals * weight * valid.to(feat.dtype)
        out = term if out is None else out + term
    return out


def deformable_sample(
    feat: torch.Tensor,
    offsets: torch.Tensor,
    mask: torch.Tensor,
    weight: torch.Tensor,
) -> torch.Tensor:
    """Modulated deformable convolution via explicit bilinear gathering.

    feat (N, C, H, W); offsets (N, 2K, H, W); mask (N, K, H, W);
    weight (C_out, C, kh, kw) with kh*kw == K.  Output (N, C_out, H, W):
    per pixel p and tap k, sample feat at p + tap_k + offset_k, scale by
    mask_k, apply the tap's channel matrix, and sum over taps.
    """
    n, c, height, width = feat.shape
    c_out, c_in, kh, kw = weight.shape
    k = kh * kw
    if c_in != c:
        raise ValueError(f"weight expects {c_in} channels, features have {c}")
    if offsets.shape != (n, 2 * k, height, width) or mask.shape != (n, k, height, width):
        raise ValueError("offset/mask shapes do not match features and kernel size")

    taps = regular_taps(kh, device=feat.device, dtype=feat.dtype)
    ys = torch.arange(height, device=feat.device, dtype=feat.dtype).view(1, height, 1)
    xs = torch.arange(width, device=feat.device, dtype=feat.dtype).view(1, 1, width)

    out = feat.new_zeros(n, c_out, height, width)
    for tap in range(k):
        sy = ys + taps[tap, 0] + offsets[:, 2 * tap]
        sx = xs + taps[tap, 1] + offsets[:, 2 * tap + 1]
        sampled = _gather_bilinear(feat, sy, sx) * mask[:, tap : tap + 1]
        w_tap = weight[:, :, tap // kw, tap % kw]
        out = out + torch.einsum("oc,nchw->nohw", w_tap, sampled)
    return out


class DeformationPredictor(nn.Module):
    """Offset and mask heads over the channel-concatenated branch features.

    Both 3x3 heads start at zero, giving zero offsets and a uniform 0.5 mask
    before training.
    """

    def __init__(self, channels: int = 128, kernel_size: int = 3):
        super().__init__()
        self.kernel_size = kernel_size
        k = kernel_size * kernel_size
        self.conv_offset = nn.Conv2d(2 * channels, 2 * k, 3, padding=1)
        self.conv_mask = nn.Conv2d(2 * channels, k, 3, padding=1)
        nn.init.zeros_(self.conv_offset.weight)
        nn.init.zeros_(self.conv_offset.bias)
        nn.init.zeros_(self.conv_mask.weight)
        nn.init.zeros_(self.conv_mask.bias)

    def forward(self, f_app: torch.Tensor, f_pro: torch.Tensor) -> DeformField:
        if f_app.shape != f_pro.shape:
            raise ValueError(f"branch features disagree: {tuple(f_app.shape)} vs {tuple(f_pro.shape)}")
        both = torch.cat([f_app, f_pro], dim=-3)
        lead = both.shape[:-3]
        x = both.reshape(-1, *both.shape[-3:])
        offsets = self.conv_offset(x)
        mask = torch.sigmoid(self.conv_mask(x))
        return DeformField(
            offsets=offsets.reshape(*lead, *offsets.shape[1:]),
            mask=mask.reshape(*lead, *mask.shape[1:]),
        )


class SilhouetteGuidedAlign(nn.Module):
    """Predict a deformation field from (appearance, projection) features and
    resample the projection features with it."""

    def __init__(self, channels: int = 128, kernel_size: int = 3):
        super().__init__()
        self.predict = DeformationPredictor(channels, kernel_size)
        self.tap_conv = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, f_app: torch.Tensor, f_pro: torch.Tensor) -> torch.Tensor:
        field = self.predict(f_app, f_pro)
        lead = f_pro.shape[:-3]
        flat_pro = f_pro.reshape(-1, *f_pro.shape[-3:])
        flat_off = field.offsets.reshape(-1, *field.offsets.shape[-3:])
        flat_mask = field.mask.reshape(-1, *field.mask.shape[-3:])
        out = deformable_sample(flat_pro, flat_off, flat_mask, self.tap_conv.weight)
        return out.reshape(*lead, *out.shape[1:])
