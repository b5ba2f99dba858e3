"""Abnormal keypoint network (KN-A).

Detects treatment-changed regions from wash-in images: the moving
wash-in is pre-warped by a frozen baseline field, channel-normalized
encoder features of the warped and fixed images are differenced into a
one-channel error heatmap, NMS peaks become abnormal keypoints, and an
attentional fusion of the two feature grids under the keypoint heatmap
drives the cross-reconstruction losses.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .keypoints import HeatmapStack, KeypointSet, nms_peaks, render_heatmaps_tensor
from .kns import STRIDE, DecoderHead, _conv
from .losses import resample_volume
from .perceptual import FeaturePyramid3d, perceptual_l1


class KnaModel(nn.Module):
    def __init__(self, k_a: int = 1, base_channels: int = 16, sigma: float = 0.2):
        super().__init__()
        bc = base_channels
        self.k_a = k_a
        self.sigma = sigma
        self.feat_channels = 4 * bc
        self.e_a = nn.Sequential(
            _conv(1, bc), nn.LeakyReLU(0.2),
            _conv(bc, 2 * bc, stride=2), nn.LeakyReLU(0.2),
            _conv(2 * bc, 2 * bc), nn.LeakyReLU(0.2),
            _conv(2 * bc, 4 * bc, stride=2), nn.LeakyReLU(0.2),
            _conv(4 * bc, 4 * bc),
        )
        self.error_fuse = nn.Conv3d(self.feat_channels, 1, kernel_size=1)
        # start as the mean squared feature error: NMS blocks gradients
        # into this layer, so the initialization carries the semantics
        with torch.no_grad():
            self.error_fuse.weight.fill_(1.0 / self.feat_channels)
            self.error_fuse.bias.zero_()
        self.d_a = DecoderHead(self.feat_channels)
        self.register_buffer("trained_flag", torch.zeros(1))

    @property
    def trained(self) -> bool:
        return bool(self.trained_flag.item() > 0)

    def mark_trained(self):
        self.trained_flag.fill_(1.0)

    def encode(self, washin: torch.Tensor) -> torch.Tensor:
        if any(s % STRIDE for s in washin.shape[-3:]):
            raise ValueError(f"input shape {tuple(washin.shape[-3:])} not divisible by encoder stride {STRIDE}")
        return self.e_a(washin[None, None])[0]


def _channel_normalize(feat: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return feat / (feat.norm(dim=0, keepdim=True) + eps)


def kna_abnormal_heatmap(model: KnaModel, i_w: torch.Tensor, i_f: torch.Tensor) -> torch.Tensor:
    """One-channel error heatmap at encoder resolution.

    Squared differences of channel-wise L2-normalized features, fused by
    a 1x1x1 conv; exactly zero before the fuse layer for identical inputs.
    """
    if i_w.shape != i_f.shape:
        raise ValueError(f"shape mismatch: {tuple(i_w.shape)} vs {tuple(i_f.shape)}")
    f_w = _channel_normalize(model.encode(i_w))
    f_f = _channel_normalize(model.encode(i_f))
    err = (f_w - f_f) ** 2
    return model.error_fuse(err[None])[0, 0]


def kna_detect(
    model: KnaModel, i_w: torch.Tensor, i_f: torch.Tensor, sigma: float | None = None, window: int = 5
) -> tuple[KeypointSet, HeatmapStack]:
    """NMS peaks of the error heatmap as abnormal keypoints, rendered as
    Gaussian heatmaps at the image resolution (sigma defaults to the
    model's training value; the volume-preserving loss re-renders at its
    own sigma)."""
    sigma = model.sigma if sigma is None else sigma
    with torch.no_grad():
        h = kna_abnormal_heatmap(model, i_w, i_f)
    kps = nms_peaks(h.detach(), model.k_a, window=window, role="abnormal")
    maps = render_heatmaps_tensor(torch.as_tensor(kps.coords, dtype=torch.float64), i_w.shape, sigma)
    return kps, HeatmapStack(maps.numpy().astype("float32"), sigma=sigma)


def kna_afm_reconstruct(
    model: KnaModel, i_w: torch.Tensor, i_f: torch.Tensor, psi_f: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Plain reconstruction of i_w and the attentional-fusion
    cross-reconstruction D(E(i_w)*(1-Psi) + E(i_f)*Psi).

    `psi_f` must already live at the encoder feature resolution.
    """
    f_w = model.encode(i_w)
    if psi_f.shape[-3:] != f_w.shape[1:]:
        raise ValueError(
            f"psi_f shape {tuple(psi_f.shape)} does not match feature grid {tuple(f_w.shape[1:])}"
        )
    f_f = model.encode(i_f)
    i_w_rec = model.d_a(f_w, i_w.shape)
    blended = f_w * (1.0 - psi_f) + f_f * psi_f
    i_wf_rec = model.d_a(blended, i_f.shape)
    return i_w_rec, i_wf_rec


def kna_loss(
    model: KnaModel, i_w: torch.Tensor, i_f: torch.Tensor, backbone: FeaturePyramid3d | None
) -> torch.Tensor:
    """Reconstruction plus AFM cross-reconstruction loss (both with the
    shared perceptual term). Keypoint locations come from the current
    error heatmap; no gradient flows through the NMS."""
    with torch.no_grad():
        h = kna_abnormal_heatmap(model, i_w, i_f)
    kps = nms_peaks(h, model.k_a, role="abnormal")
    feat_shape = tuple(s // STRIDE for s in i_w.shape)
    psi_full = render_heatmaps_tensor(
        torch.as_tensor(kps.coords, dtype=i_w.dtype), i_w.shape, model.sigma
    )
    # channel max keeps the blend weight in [0, 1] when keypoints overlap
    psi_feat = resample_volume(psi_full.amax(dim=0), feat_shape)
    i_w_rec, i_wf_rec = kna_afm_reconstruct(model, i_w, i_f, psi_feat)
    rec = (i_w - i_w_rec).abs().mean() + perceptual_l1(backbone, i_w, i_w_rec)
    cross = (i_f - i_wf_rec).abs().mean() + perceptual_l1(backbone, i_f, i_wf_rec)
    return rec + cross
