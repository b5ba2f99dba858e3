"""Registration loss family.

All pyramid losses evaluate a field twice: at its native mid resolution
(phi) against the half-resolution image pair, and upsampled to full
resolution (phi') against the full-resolution pair. Wash-in images are
never part of the similarity terms. Intensity losses are per-voxel means
so pyramid levels with different voxel counts contribute comparably;
the structural-keypoint term is a literal L2 norm and the
volume-preserving term a literal heatmap-mass difference, whose scale is
what the paper-calibrated weight multiplies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .grid_field import grad_penalty_tensor, resample_field_tensor, warp_tensor


@dataclass
class LossWeights:
    """Weights and fixed hyperparameters of the total registration loss."""

    lambda_v: float = 3e-5
    lambda_g_train_range: tuple[float, float] = (0.0, 10.0)
    lambda_g_eval: float = 5.0
    mi_bins: int = 32
    # Parzen sigma = scale * bin width. 1.0 gives smooth, trainable MI
    # gradients; narrow kernels (~0.25) make the estimator agree with a
    # hard-histogram computation on quantized data.
    mi_kernel_scale: float = 1.0
    sigma_sk: float = 0.01
    sigma_vp: float = 0.25

    def __post_init__(self):
        # training configs require lambda_v > 0; 0 is allowed here so the
        # loss decomposition identities can be evaluated at lambda_v = 0
        if self.lambda_v < 0:
            raise ValueError(f"lambda_v must be >= 0, got {self.lambda_v}")
        lo, hi = self.lambda_g_train_range
        if not (lo <= self.lambda_g_eval <= hi):
            raise ValueError(
                f"lambda_g_eval={self.lambda_g_eval} outside training range [{lo}, {hi}]"
            )
        if self.mi_bins < 2:
            raise ValueError(f"mi_bins must be >= 2, got {self.mi_bins}")


def gaussian_blur3d(x: torch.Tensor, kernel_size: int = 7, sigma: float = 1.0) -> torch.Tensor:
    """Separable 3D Gaussian blur of (D, H, W) or (C, D, H, W) data."""
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    half = kernel_size // 2
    t = torch.arange(-half, half + 1, dtype=x.dtype, device=x.device)
    k = torch.exp(-(t * t) / (2.0 * sigma * sigma))
    k = k / k.sum()
    c = x.shape[0]
    out = x[None]
    for axis in range(3):
        shape = [1, 1, 1, 1, 1]
        shape[2 + axis] = kernel_size
        pad = [0, 0, 0]
        pad[axis] = half
        out = F.conv3d(out, k.view(shape).expand(c, 1, *shape[2:]), padding=tuple(pad), groups=c)
    out = out[0]
    return out[0] if squeeze else out


def downsample_volume(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Trilinear downsampling of (D, H, W) or (C, D, H, W) data."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    size = tuple(s // factor for s in x.shape[1:])
    out = F.interpolate(x[None], size=size, mode="trilinear", align_corners=True)[0]
    return out[0] if squeeze else out


def resample_volume(x: torch.Tensor, shape) -> torch.Tensor:
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    out = F.interpolate(x[None], size=tuple(shape), mode="trilinear", align_corners=True)[0]
    return out[0] if squeeze else out


def ssd(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).mean()


def parzen_weights(v: torch.Tensor, bins: int = 32, kernel_scale: float = 1.0) -> torch.Tensor:
    """Per-sample soft bin-assignment weights (N, bins) for intensities
    clamped to [0, 1]; Gaussian kernel with sigma = kernel_scale *
    bin_width, rows normalized to sum to 1."""
    flat = v.reshape(-1).clamp(0.0, 1.0)
    centers = (torch.arange(bins, dtype=v.dtype, device=v.device) + 0.5) / bins
    sigma = kernel_scale / bins
    inv = 1.0 / (2.0 * sigma * sigma)
    w = torch.exp(-((flat[:, None] - centers[None, :]) ** 2) * inv)
    return w / w.sum(dim=1, keepdim=True)


def mi_from_weights(wa: torch.Tensor, wb: torch.Tensor) -> torch.Tensor:
    joint = wa.T @ wb / wa.shape[0]
    pa = joint.sum(dim=1)
    pb = joint.sum(dim=0)
    eps = torch.finfo(wa.dtype).tiny
    return (joint * (torch.log(joint + eps) - torch.log(pa[:, None] * pb[None, :] + eps))).sum()


def soft_histogram_mi(
    a: torch.Tensor, b: torch.Tensor, bins: int = 32, kernel_scale: float = 1.0
) -> torch.Tensor:
    """Differentiable mutual information via a Parzen-window soft joint
    histogram with `bins` bins over [0, 1].

    The Gaussian kernel has sigma = kernel_scale * bin_width. The default
    (sigma equal to one bin) gives smooth gradients for training; in the
    narrow-kernel limit (scale ~0.25 and below) the estimator reproduces
    a hard-histogram MI on quantized inputs. Returns MI in nats.
    """
    return mi_from_weights(parzen_weights(a, bins, kernel_scale), parzen_weights(b, bins, kernel_scale))


def soft_dice_loss(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """1 - soft Dice with squared-sum denominator, so the loss is 0 for
    any mask paired with itself (including soft-valued and all-empty
    masks)."""
    num = 2.0 * (a * b).sum() + eps
    den = (a * a).sum() + (b * b).sum() + eps
    return 1.0 - num / den


def loss_pyramid_similarity(
    phi: torch.Tensor,
    t_m: torch.Tensor,
    t_f: torch.Tensor,
    s_m: torch.Tensor,
    s_f: torch.Tensor,
    weights: LossWeights | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Similarity triple (ssd, mi, boundary) for one pyramid field.

    `phi` lives on the mid-resolution grid; images and the pre-smoothed
    breast masks are full resolution and are downsampled internally.
    Returns the intensity SSD, the negated soft-histogram MI and the
    L1+Dice boundary loss, each summed over the two evaluation
    resolutions.
    """
    weights = weights or LossWeights()
    pyr = SimilarityPyramid(t_m, t_f, s_m, s_f)
    return pyr.similarity(phi, weights)


class SimilarityPyramid:
    """Precomputed mid/full-resolution image and mask pairs, so the
    per-field similarity can be evaluated for several fields without
    re-downsampling."""

    def __init__(self, t_m: torch.Tensor, t_f: torch.Tensor, s_m: torch.Tensor, s_f: torch.Tensor):
        if t_m.shape != t_f.shape or s_m.shape != t_m.shape or s_f.shape != t_m.shape:
            raise ValueError("images and masks must share one shape")
        self.t_m_hr, self.t_f_hr = t_m, t_f
        self.s_m_hr, self.s_f_hr = s_m, s_f
        self.t_m_mr = downsample_volume(t_m)
        self.t_f_mr = downsample_volume(t_f)
        self.s_m_mr = downsample_volume(s_m)
        self.s_f_mr = downsample_volume(s_f)
        self.full_shape = tuple(t_m.shape)
        self._fixed_weights: dict[tuple, tuple[torch.Tensor, torch.Tensor]] = {}

    def upsampled(self, phi: torch.Tensor) -> torch.Tensor:
        return resample_field_tensor(phi, self.full_shape)

    def _fixed_parzen(self, weights: LossWeights):
        key = (weights.mi_bins, weights.mi_kernel_scale)
        if key not in self._fixed_weights:
            self._fixed_weights[key] = (
                parzen_weights(self.t_f_mr, *key),
                parzen_weights(self.t_f_hr, *key),
            )
        return self._fixed_weights[key]

    def similarity(self, phi: torch.Tensor, weights: LossWeights):
        phi_up = self.upsampled(phi)
        warped_mr = warp_tensor(self.t_m_mr, phi)
        warped_hr = warp_tensor(self.t_m_hr, phi_up)
        ssd_term = ssd(self.t_f_mr, warped_mr) + ssd(self.t_f_hr, warped_hr)
        wb_mr, wb_hr = self._fixed_parzen(weights)
        mi_term = -(
            mi_from_weights(wb_mr, parzen_weights(warped_mr, weights.mi_bins, weights.mi_kernel_scale))
            + mi_from_weights(wb_hr, parzen_weights(warped_hr, weights.mi_bins, weights.mi_kernel_scale))
        )
        wm_mr = warp_tensor(self.s_m_mr, phi)
        wm_hr = warp_tensor(self.s_m_hr, phi_up)
        boundary = (
            (self.s_f_mr - wm_mr).abs().mean()
            + soft_dice_loss(self.s_f_mr, wm_mr)
            + (self.s_f_hr - wm_hr).abs().mean()
            + soft_dice_loss(self.s_f_hr, wm_hr)
        )
        return ssd_term, mi_term, boundary


def loss_structural_keypoint(phi: torch.Tensor, psi_m: torch.Tensor, psi_f: torch.Tensor) -> torch.Tensor:
    """L2 norm between the fixed heatmaps and the warped moving heatmaps,
    rendered at the field's resolution."""
    if psi_m.shape != psi_f.shape:
        raise ValueError(f"heatmap channel/shape mismatch: {tuple(psi_m.shape)} vs {tuple(psi_f.shape)}")
    return torch.linalg.vector_norm(psi_f - warp_tensor(psi_m, phi))


def loss_volume_preserving(phi: torch.Tensor, psi_a: torch.Tensor) -> torch.Tensor:
    """Absolute difference of total heatmap mass before vs after warping."""
    return (psi_a.sum() - warp_tensor(psi_a, phi).sum()).abs()


def loss_total(
    fields: dict[str, torch.Tensor],
    pyramid: SimilarityPyramid,
    psi_s_m: torch.Tensor | None,
    psi_s_f: torch.Tensor | None,
    psi_a_m: torch.Tensor | None,
    weights: LossWeights,
    lambda_g: float,
    include_keypoint_terms: bool = True,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Total registration loss summed over the pyramid fields.

    With `include_keypoint_terms=False` this is the base-stage objective
    (similarity + smoothness only); otherwise the structural-keypoint and
    weighted volume-preserving terms are added. Raises on non-finite
    components, naming the offender.
    """
    total = None
    parts: dict[str, float] = {}
    for name, phi in fields.items():
        ssd_term, mi_term, boundary = pyramid.similarity(phi, weights)
        phi_up = pyramid.upsampled(phi)
        smooth = grad_penalty_tensor(phi) + grad_penalty_tensor(phi_up)
        term = ssd_term + mi_term + boundary + lambda_g * smooth
        parts[f"{name}/ssd"] = float(ssd_term.detach())
        parts[f"{name}/mi"] = float(mi_term.detach())
        parts[f"{name}/boundary"] = float(boundary.detach())
        parts[f"{name}/grad"] = float(smooth.detach())
        if include_keypoint_terms:
            if psi_s_m is None or psi_s_f is None or psi_a_m is None:
                raise ValueError("keypoint terms require structural and abnormal heatmaps")
            sk = loss_structural_keypoint(phi, psi_s_m, psi_s_f)
            vp = loss_volume_preserving(phi, psi_a_m)
            term = term + sk + weights.lambda_v * vp
            parts[f"{name}/sk"] = float(sk.detach())
            parts[f"{name}/vp"] = float(vp.detach())
        total = term if total is None else total + term
    parts["total"] = float(total.detach())
    for key, value in parts.items():
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss component {key}: {value}")
    return total, parts
