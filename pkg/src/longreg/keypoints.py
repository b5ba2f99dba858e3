"""Keypoint machinery shared by the detection networks.

Keypoints live in normalized coordinates in [-1, 1]^3 with axis order
(D, H, W): voxel i along an axis of size S maps to 2*i/(S-1) - 1, so the
frame is resolution independent and the same keypoints can be rendered
at any pyramid level.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import maximum_filter

ROLES = ("structural", "abnormal")


def voxel_to_norm(coords: np.ndarray, shape) -> np.ndarray:
    """Fractional voxel coordinates -> normalized [-1, 1] coordinates."""
    coords = np.asarray(coords, dtype=np.float64)
    scale = np.asarray(shape, dtype=np.float64) - 1.0
    return 2.0 * coords / scale - 1.0


def norm_to_voxel(coords: np.ndarray, shape) -> np.ndarray:
    """Normalized [-1, 1] coordinates -> fractional voxel coordinates."""
    coords = np.asarray(coords, dtype=np.float64)
    scale = np.asarray(shape, dtype=np.float64) - 1.0
    return (coords + 1.0) * scale / 2.0


def norm_axis_coords(shape, dtype=torch.float32, device=None) -> list[torch.Tensor]:
    """Per-axis 1D tensors of normalized voxel-center coordinates."""
    return [torch.linspace(-1.0, 1.0, s, dtype=dtype, device=device) for s in shape]


@dataclass
class KeypointSet:
    """K ordered 3D points in normalized coordinates."""

    coords: np.ndarray  # (K, 3) in [-1, 1], order (D, H, W)
    role: str = "structural"

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=np.float64))
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (K, 3), got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("keypoint coordinates must be finite")
        if np.any(np.abs(self.coords) > 1.0 + 1e-6):
            raise ValueError("keypoint coordinates must lie in [-1, 1]")
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")

    @property
    def k(self) -> int:
        return self.coords.shape[0]

    def to_voxel(self, shape) -> np.ndarray:
        return norm_to_voxel(self.coords, shape)

    def to_json(self, sigma: float | None = None) -> str:
        payload = {"coords": self.coords.tolist(), "role": self.role}
        if sigma is not None:
            payload["sigma"] = sigma
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "KeypointSet":
        payload = json.loads(text)
        return cls(np.asarray(payload["coords"]), role=payload.get("role", "structural"))


@dataclass
class HeatmapStack:
    """K-channel Gaussian heatmaps of a keypoint set, peak amplitude 1."""

    maps: np.ndarray  # (K, D, H, W)
    sigma: float

    def __post_init__(self):
        self.maps = np.asarray(self.maps)
        if self.maps.ndim != 4:
            raise ValueError(f"maps must be (K, D, H, W), got {self.maps.shape}")

    @property
    def k(self) -> int:
        return self.maps.shape[0]

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.ascontiguousarray(self.maps), dtype=dtype)


def render_heatmaps_tensor(coords: torch.Tensor, shape, sigma: float) -> torch.Tensor:
    """Render (K, 3) normalized coordinates as (K, D, H, W) Gaussian
    heatmaps exp(-||n(x) - c||^2 / (2 sigma^2)).

    Separable product of per-axis Gaussians; differentiable w.r.t. the
    coordinates.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if coords.dim() != 2 or coords.shape[1] != 3:
        raise ValueError(f"coords must be (K, 3), got {tuple(coords.shape)}")
    axes = norm_axis_coords(shape, dtype=coords.dtype, device=coords.device)
    inv = 1.0 / (2.0 * sigma * sigma)
    g = [torch.exp(-((ax[None, :] - coords[:, i : i + 1]) ** 2) * inv) for i, ax in enumerate(axes)]
    return g[0][:, :, None, None] * g[1][:, None, :, None] * g[2][:, None, None, :]


def render_heatmaps(kps: KeypointSet, shape, sigma: float) -> HeatmapStack:
    maps = render_heatmaps_tensor(torch.as_tensor(kps.coords, dtype=torch.float64), shape, sigma)
    return HeatmapStack(maps.numpy().astype(np.float32), sigma=sigma)


def soft_argmax_tensor(raw: torch.Tensor, temperature: float = 0.05) -> torch.Tensor:
    """Spatial softmax of raw/temperature followed by the expectation of
    normalized coordinates; (K, D, H, W) -> (K, 3), fully differentiable."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not torch.isfinite(raw).all():
        raise ValueError("soft_argmax input must be finite")
    k = raw.shape[0]
    shape = raw.shape[1:]
    p = torch.softmax(raw.reshape(k, -1) / temperature, dim=1).reshape(k, *shape)
    axes = norm_axis_coords(shape, dtype=raw.dtype, device=raw.device)
    e_d = (p * axes[0].view(1, -1, 1, 1)).sum(dim=(1, 2, 3))
    e_h = (p * axes[1].view(1, 1, -1, 1)).sum(dim=(1, 2, 3))
    e_w = (p * axes[2].view(1, 1, 1, -1)).sum(dim=(1, 2, 3))
    return torch.stack([e_d, e_h, e_w], dim=1)


def soft_argmax(raw: np.ndarray | torch.Tensor, temperature: float = 0.05, role: str = "structural") -> KeypointSet:
    coords = soft_argmax_tensor(torch.as_tensor(raw, dtype=torch.float64), temperature)
    # expectation of in-range coordinates; clip fp roundoff at the boundary
    return KeypointSet(np.clip(coords.numpy(), -1.0, 1.0), role=role)


def nms_peaks(heatmap: np.ndarray | torch.Tensor, k: int, window: int = 5, role: str = "abnormal") -> KeypointSet:
    """Top-k local maxima of a 1-channel 3D grid.

    A voxel is a peak when it equals the maximum of its window^3
    neighborhood (clipped at the grid edge). Peaks are ordered by value,
    ties broken by lexicographic voxel index. When fewer than k local
    maxima exist, all found are returned and a warning is issued.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    data = heatmap.detach().cpu().numpy() if isinstance(heatmap, torch.Tensor) else np.asarray(heatmap)
    if data.ndim != 3:
        raise ValueError(f"heatmap must be 3D, got shape {data.shape}")
    local_max = maximum_filter(data, size=window, mode="constant", cval=-np.inf)
    peaks = np.argwhere(data == local_max)
    values = data[tuple(peaks.T)]
    # stable sort on descending value keeps lexicographic order among ties
    order = np.argsort(-values, kind="stable")
    peaks = peaks[order][:k]
    if peaks.shape[0] < k:
        warnings.warn(f"nms_peaks found only {peaks.shape[0]} local maxima, {k} requested")
    return KeypointSet(voxel_to_norm(peaks.astype(np.float64), data.shape), role=role)
