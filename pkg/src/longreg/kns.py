"""Structural keypoint network (KN-S).

A feature encoder, a keypoint encoder and a decoder trained with
cross-reconstruction: heatmaps rendered from the soft-argmax keypoints of
one image are swapped with those of its partner before decoding, so the
keypoints must capture the pose-controlling breast structure for the
decoder to succeed. Only T1w pre-contrast images are used.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .keypoints import KeypointSet, render_heatmaps_tensor, soft_argmax_tensor
from .perceptual import FeaturePyramid3d, perceptual_l1
from .volume import Volume

STRIDE = 4  # two stride-2 downsamplings


def _conv(in_ch, out_ch, stride=1):
    return nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)


class KnsModel(nn.Module):
    """Siamese encoder/decoder trio; weights shared across the pair."""

    def __init__(self, k_s: int = 64, base_channels: int = 16, sigma: float = 0.1, temperature: float = 0.05):
        super().__init__()
        bc = base_channels
        self.k_s = k_s
        self.sigma = sigma
        self.temperature = temperature
        self.feat_channels = 4 * bc
        self.e_s = nn.Sequential(
            _conv(1, bc), nn.LeakyReLU(0.2),
            _conv(bc, 2 * bc, stride=2), nn.LeakyReLU(0.2),
            _conv(2 * bc, 2 * bc), nn.LeakyReLU(0.2),
            _conv(2 * bc, 4 * bc, stride=2), nn.LeakyReLU(0.2),
            _conv(4 * bc, 4 * bc),
        )
        self.e_k = nn.Sequential(
            _conv(1, bc), nn.LeakyReLU(0.2),
            _conv(bc, 2 * bc, stride=2), nn.LeakyReLU(0.2),
            _conv(2 * bc, 2 * bc), nn.LeakyReLU(0.2),
            _conv(2 * bc, 4 * bc, stride=2), nn.LeakyReLU(0.2),
            _conv(4 * bc, k_s),
        )
        self.d_s = DecoderHead(self.feat_channels + k_s)
        self.register_buffer("trained_flag", torch.zeros(1))

    @property
    def trained(self) -> bool:
        return bool(self.trained_flag.item() > 0)

    def mark_trained(self):
        self.trained_flag.fill_(1.0)

    def _check_shape(self, t: torch.Tensor):
        if any(s % STRIDE for s in t.shape[-3:]):
            raise ValueError(f"input shape {tuple(t.shape[-3:])} not divisible by encoder stride {STRIDE}")

    def encode(self, t1w: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """T1w (D, H, W) -> (feature grid (C, d, h, w), keypoint coords (K, 3))."""
        self._check_shape(t1w)
        x = t1w[None, None]
        features = self.e_s(x)[0]
        raw = self.e_k(x)[0]
        coords = soft_argmax_tensor(raw, self.temperature)
        return features, coords

    def decode(self, features: torch.Tensor, heatmaps: torch.Tensor, out_shape) -> torch.Tensor:
        return self.d_s(torch.cat([features, heatmaps], dim=0), out_shape)


class DecoderHead(nn.Module):
    """Features + heatmaps at 1/4 resolution back to a full-size image."""

    def __init__(self, in_ch: int):
        super().__init__()
        self.reduce = nn.Conv3d(in_ch, 32, kernel_size=1)
        self.c1 = _conv(32, 32)
        self.c2 = _conv(32, 16)
        self.c3 = _conv(16, 16)
        self.c4 = _conv(16, 8)
        self.out = _conv(8, 1)

    def forward(self, x: torch.Tensor, out_shape) -> torch.Tensor:
        mid_shape = tuple(s // 2 for s in out_shape)
        h = x[None]
        h = F.leaky_relu(self.reduce(h), 0.2)
        h = F.leaky_relu(self.c1(h), 0.2)
        h = F.interpolate(h, size=mid_shape, mode="trilinear", align_corners=True)
        h = F.leaky_relu(self.c2(h), 0.2)
        h = F.leaky_relu(self.c3(h), 0.2)
        h = F.interpolate(h, size=tuple(out_shape), mode="trilinear", align_corners=True)
        h = F.leaky_relu(self.c4(h), 0.2)
        return self.out(h)[0, 0]


def kns_extract(model: KnsModel, t1w: Volume) -> tuple[torch.Tensor, KeypointSet]:
    """Features and structural keypoints of a T1w volume (eval mode)."""
    model.eval()
    with torch.no_grad():
        features, coords = model.encode(t1w.to_tensor())
    return features, KeypointSet(np.clip(coords.numpy(), -1.0, 1.0), role="structural")


def kns_cross_reconstruct(
    model: KnsModel, t_m: torch.Tensor, t_f: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode each image's features under the partner's heatmaps:
    t_fm from (features of t_f, heatmaps of t_m) and vice versa."""
    if t_m.shape != t_f.shape:
        raise ValueError(f"shape mismatch: {tuple(t_m.shape)} vs {tuple(t_f.shape)}")
    feat_m, mu_m = model.encode(t_m)
    feat_f, mu_f = model.encode(t_f)
    hm_shape = feat_m.shape[1:]
    psi_m = render_heatmaps_tensor(mu_m, hm_shape, model.sigma)
    psi_f = render_heatmaps_tensor(mu_f, hm_shape, model.sigma)
    t_fm = model.decode(feat_f, psi_m, t_m.shape)
    t_mf = model.decode(feat_m, psi_f, t_f.shape)
    return t_fm, t_mf


def kns_loss(
    model: KnsModel, t_m: torch.Tensor, t_f: torch.Tensor, backbone: FeaturePyramid3d | None
) -> torch.Tensor:
    """Cross-reconstruction loss: L1 plus perceptual terms for both
    swap directions."""
    t_fm, t_mf = kns_cross_reconstruct(model, t_m, t_f)
    loss = (t_m - t_fm).abs().mean() + (t_f - t_mf).abs().mean()
    loss = loss + perceptual_l1(backbone, t_m, t_fm) + perceptual_l1(backbone, t_f, t_mf)
    return loss


def fit_linear_probe(keypoint_sets: list[KeypointSet], targets: np.ndarray) -> np.ndarray:
    """Least-squares linear map (with bias) from flattened keypoint
    coordinates to a 3D target coordinate. Returns the (3K+1, 3) weights."""
    x = np.stack([k.coords.reshape(-1) for k in keypoint_sets])
    x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    y = np.asarray(targets, dtype=np.float64)
    weights, *_ = np.linalg.lstsq(x, y, rcond=None)
    return weights


def apply_linear_probe(weights: np.ndarray, keypoint_sets: list[KeypointSet]) -> np.ndarray:
    x = np.stack([k.coords.reshape(-1) for k in keypoint_sets])
    x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    return x @ weights
