"""Frozen random-feature backbone for perceptual losses.

A three-stage 3D conv pyramid (channels 8/16/32, stride 2, fixed seed)
whose weights are never trained. Feature-space L1 over its stages serves
as the perceptual term of the reconstruction losses; random frozen
features are a standard stand-in where a pretrained 2D backbone does not
apply to volumetric data.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_SEED = 1234


class FeaturePyramid3d(nn.Module):
    """Frozen 3-stage conv feature extractor for single-channel volumes."""

    def __init__(self, channels=(8, 16, 32), seed: int = DEFAULT_SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_ch = 1
        for out_ch in channels:
            conv = nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                nn.init.kaiming_normal_(conv.weight, a=0.2, generator=gen)
                conv.bias.zero_()
            convs.append(conv)
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """x: (D, H, W) or (N, 1, D, H, W) -> per-stage feature tensors."""
        if x.dim() == 3:
            x = x[None, None]
        out = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            out.append(x)
        return out


def perceptual_l1(backbone: FeaturePyramid3d | None, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Feature-space L1 between two volumes, summed over pyramid stages.

    A None backbone disables the term (returns 0 in the input dtype).
    """
    if backbone is None:
        return torch.zeros((), dtype=a.dtype, device=a.device)
    fa = backbone.features(a)
    fb = backbone.features(b)
    loss = torch.zeros((), dtype=a.dtype, device=a.device)
    for x, y in zip(fa, fb):
        loss = loss + (x - y).abs().mean()
    return loss


def make_backbone(kind: str = "random", seed: int = DEFAULT_SEED, dtype=torch.float32) -> FeaturePyramid3d | None:
    """Backbone factory; `kind` is 'random' or 'none'."""
    if kind == "none":
        return None
    if kind != "random":
        raise ValueError(f"unknown perceptual backbone {kind!r}")
    backbone = FeaturePyramid3d(seed=seed)
    return backbone.to(dtype)
