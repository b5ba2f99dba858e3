"""Conditional pyramid registration network.

Three U-Net-like subnetworks process the input pyramid (full, 1/2, 1/4
resolution of the concatenated T1w and wash-in pairs) with independent
weights. Each has a 6-conv encoder (strides 1,1,2,1,2,1), a conditional
registration module of five residual blocks whose instance norms are
modulated from the regularization weight, and a 2-upsample decoder with
skip connections. Decoder features of each level are upsampled and fused
into the next level's decoder. All three deformation fields live on the
mid-resolution grid: the coarse subnet upsamples its features before
prediction, and the fine subnet downsamples its fusion features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grid_field import DeformationField, resample_field_tensor, warp, warp_tensor
from .metrics import evaluate_pair
from .volume import Volume


class ConditionalInstanceNorm(nn.Module):
    """Instance norm whose per-channel scale/shift come from a 2-layer
    MLP on the normalized regularization weight.

    Normalization is written out by hand so degenerate 1-voxel spatial
    grids (tiny test volumes at the coarsest level) normalize to zero
    instead of erroring.
    """

    def __init__(self, channels: int, hidden: int = 64, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.mlp = nn.Sequential(nn.Linear(1, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, 2 * channels))
        nn.init.zeros_(self.mlp[2].weight)
        nn.init.zeros_(self.mlp[2].bias)

    def forward(self, x: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(2, 3, 4), keepdim=True)
        var = x.var(dim=(2, 3, 4), keepdim=True, unbiased=False)
        normed = (x - mean) / torch.sqrt(var + self.eps)
        style = self.mlp(lam)
        gamma, beta = style.chunk(2, dim=1)
        gamma = gamma[..., None, None, None]
        beta = beta[..., None, None, None]
        return (1.0 + gamma) * normed + beta


class ConditionalResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.cin1 = ConditionalInstanceNorm(channels)
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.cin2 = ConditionalInstanceNorm(channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.leaky_relu(self.cin1(x, lam), 0.2))
        h = self.conv2(F.leaky_relu(self.cin2(h, lam), 0.2))
        return x + h


class PyramidSubnet(nn.Module):
    """One pyramid level: encoder, conditional registration module,
    decoder with skips and an optional fusion input from the previous
    level."""

    def __init__(self, in_ch: int = 4, channels: int = 8, fusion_ch: int = 0):
        super().__init__()
        c = channels
        self.enc1 = nn.Conv3d(in_ch, c, 3, stride=1, padding=1)
        self.enc2 = nn.Conv3d(c, c, 3, stride=1, padding=1)
        self.enc3 = nn.Conv3d(c, 2 * c, 3, stride=2, padding=1)
        self.enc4 = nn.Conv3d(2 * c, 2 * c, 3, stride=1, padding=1)
        self.enc5 = nn.Conv3d(2 * c, 4 * c, 3, stride=2, padding=1)
        self.enc6 = nn.Conv3d(4 * c, 4 * c, 3, stride=1, padding=1)
        self.crm = nn.ModuleList(ConditionalResBlock(4 * c) for _ in range(5))
        self.dec1 = nn.Conv3d(4 * c + 2 * c, 2 * c, 3, padding=1)
        self.dec2 = nn.Conv3d(2 * c, 2 * c, 3, padding=1)
        self.dec3 = nn.Conv3d(2 * c + c + fusion_ch, c, 3, padding=1)
        self.dec4 = nn.Conv3d(c, c, 3, padding=1)

    def forward(self, x: torch.Tensor, lam: torch.Tensor, fusion: torch.Tensor | None = None) -> torch.Tensor:
        a = F.leaky_relu(self.enc2(F.leaky_relu(self.enc1(x), 0.2)), 0.2)
        b = F.leaky_relu(self.enc4(F.leaky_relu(self.enc3(a), 0.2)), 0.2)
        h = F.leaky_relu(self.enc6(F.leaky_relu(self.enc5(b), 0.2)), 0.2)
        for block in self.crm:
            h = block(h, lam)
        h = F.interpolate(h, size=b.shape[2:], mode="trilinear", align_corners=True)
        h = F.leaky_relu(self.dec2(F.leaky_relu(self.dec1(torch.cat([h, b], dim=1)), 0.2)), 0.2)
        h = F.interpolate(h, size=a.shape[2:], mode="trilinear", align_corners=True)
        parts = [h, a] if fusion is None else [h, a, fusion]
        h = F.leaky_relu(self.dec4(F.leaky_relu(self.dec3(torch.cat(parts, dim=1)), 0.2)), 0.2)
        return h


class FlowHead(nn.Module):
    """Bounded field prediction: flow_range * softsign(conv(features)).

    Near-zero initialization keeps the starting fields at sub-voxel
    scale while still passing gradient into the subnet from step one;
    the output scale keeps Adam's per-parameter steps commensurate with
    voxel-scale displacements, and the bound caps runaway fields.
    """

    def __init__(self, channels: int, flow_range: float = 6.0):
        super().__init__()
        self.flow_range = flow_range
        self.conv = nn.Conv3d(channels, 3, 3, padding=1)
        nn.init.normal_(self.conv.weight, 0.0, 1e-2)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.flow_range * F.softsign(self.conv(x))


class CprnModel(nn.Module):
    def __init__(self, channels: int = 8, lambda_g_max: float = 10.0, flow_range: float = 6.0):
        super().__init__()
        c = channels
        self.lambda_g_max = lambda_g_max
        self.sub_lr = PyramidSubnet(4, c, fusion_ch=0)
        self.sub_mr = PyramidSubnet(4, c, fusion_ch=c)
        self.sub_hr = PyramidSubnet(4, c, fusion_ch=c)
        self.head_lr = FlowHead(c, flow_range)
        self.head_mr = FlowHead(c, flow_range)
        self.head_hr = FlowHead(c, flow_range)
        self.register_buffer("trained_flag", torch.zeros(1))

    @property
    def trained(self) -> bool:
        return bool(self.trained_flag.item() > 0)

    def mark_trained(self):
        self.trained_flag.fill_(1.0)

    def forward(
        self,
        t_m: torch.Tensor,
        i_m: torch.Tensor,
        t_f: torch.Tensor,
        i_f: torch.Tensor,
        lambda_g: float,
    ) -> dict[str, torch.Tensor]:
        """Predict the three pyramid deformation fields, each (3, D/2,
        H/2, W/2) in voxel units of the mid-resolution grid."""
        shapes = {t.shape for t in (t_m, i_m, t_f, i_f)}
        if len(shapes) != 1:
            raise ValueError(f"input volumes must share one shape, got {shapes}")
        full = tuple(t_m.shape)
        if any(s % 4 for s in full):
            raise ValueError(f"input shape {full} must be divisible by 4")
        if not np.isfinite(lambda_g):
            raise ValueError(f"lambda_g must be finite, got {lambda_g}")

        x = torch.stack([t_m, i_m, t_f, i_f])[None]
        mid = tuple(s // 2 for s in full)
        low = tuple(s // 4 for s in full)
        x_mr = F.interpolate(x, size=mid, mode="trilinear", align_corners=True)
        x_lr = F.interpolate(x, size=low, mode="trilinear", align_corners=True)
        lam = x.new_tensor([[lambda_g / self.lambda_g_max]])

        f_lr = self.sub_lr(x_lr, lam)
        f_lr_up = F.interpolate(f_lr, size=mid, mode="trilinear", align_corners=True)
        phi_lr = self.head_lr(f_lr_up)[0]

        f_mr = self.sub_mr(x_mr, lam, fusion=f_lr_up)
        phi_mr = self.head_mr(f_mr)[0]

        f_mr_up = F.interpolate(f_mr, size=full, mode="trilinear", align_corners=True)
        f_hr = self.sub_hr(x, lam, fusion=f_mr_up)
        f_hr_down = F.interpolate(f_hr, size=mid, mode="trilinear", align_corners=True)
        phi_hr = self.head_hr(f_hr_down)[0]

        return {"lr": phi_lr, "mr": phi_mr, "hr": phi_hr}


@dataclass
class RegistrationResult:
    field: DeformationField  # phi_hr upsampled to full resolution
    warped_t1w: Volume
    warped_washin: Volume
    warped_tumor_mask: Volume
    report: "object"

    def report_dict(self) -> dict:
        return self.report.to_dict()


def register(model: CprnModel, pair, lambda_g: float = 5.0) -> RegistrationResult:
    """Register a study pair with a trained model at the given
    regularization weight; returns the full-resolution field, warped
    volumes and the metric report."""
    if not model.trained:
        raise RuntimeError("refusing to register with an untrained model; run training first")
    model.eval()
    with torch.no_grad():
        fields = model(
            pair.moving.t1w.to_tensor(),
            pair.moving.washin.to_tensor(),
            pair.fixed.t1w.to_tensor(),
            pair.fixed.washin.to_tensor(),
            lambda_g,
        )
        full_disp = resample_field_tensor(fields["hr"], pair.shape)
    field = DeformationField.from_tensor(full_disp, level="hr")
    warped_t1w = warp(pair.moving.t1w, field)
    warped_washin = warp(pair.moving.washin, field)
    warped_tumor = warp(Volume(pair.moving.tumor_mask.data.astype(np.float32), pair.spacing), field)
    warped_tumor = Volume((warped_tumor.data >= 0.5).astype(np.uint8), pair.spacing)
    report = evaluate_pair(pair, field, lambda_g=lambda_g)
    return RegistrationResult(
        field=field,
        warped_t1w=warped_t1w,
        warped_washin=warped_washin,
        warped_tumor_mask=warped_tumor,
        report=report,
    )


def baseline_warp_field(model: CprnModel, pair, lambda_g: float = 5.0) -> DeformationField:
    """Full-resolution field from a frozen model, used as the pre-warp
    phi_0 for abnormal keypoint detection."""
    model.eval()
    with torch.no_grad():
        fields = model(
            pair.moving.t1w.to_tensor(),
            pair.moving.washin.to_tensor(),
            pair.fixed.t1w.to_tensor(),
            pair.fixed.washin.to_tensor(),
            lambda_g,
        )
        full_disp = resample_field_tensor(fields["hr"], pair.shape)
    return DeformationField.from_tensor(full_disp, level="hr")


def warp_washin_by(pair, field: DeformationField) -> torch.Tensor:
    return warp_tensor(pair.moving.washin.to_tensor(), field.to_tensor())
