"""Deformation-field numerics.

Displacement convention: a field `phi` stores per-voxel displacements in
voxel units at its own resolution, and warping is pull-back sampling,

    output(x) = input(x + phi(x))

with zero padding outside the grid. Axis order is (D, H, W) and the
displacement channels follow the same order: disp[0] moves along D.

The trilinear warp is written by hand (floor/frac + 8-corner gather)
rather than via `grid_sample` so that the zero field is the identity
operator bit-exactly: integer positions produce frac == 0 and corner
weights of exactly 1 and 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .nifti import read_nifti, write_nifti

LEVELS = ("lr", "mr", "hr")


@dataclass
class DeformationField:
    """Per-voxel 3D displacement grid at some pyramid resolution."""

    disp: np.ndarray  # (3, D, H, W), voxel units
    level: str = "hr"

    def __post_init__(self):
        self.disp = np.asarray(self.disp)
        if self.disp.ndim != 4 or self.disp.shape[0] != 3:
            raise ValueError(f"disp must have shape (3, D, H, W), got {self.disp.shape}")
        if not np.all(np.isfinite(self.disp)):
            raise ValueError("displacement field contains non-finite values")
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}, got {self.level!r}")

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.disp.shape[1:])

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.ascontiguousarray(self.disp), dtype=dtype)

    @classmethod
    def from_tensor(cls, t: torch.Tensor, level: str = "hr") -> "DeformationField":
        return cls(t.detach().cpu().numpy().astype(np.float32), level=level)

    @classmethod
    def zeros(cls, shape: tuple[int, int, int], level: str = "hr") -> "DeformationField":
        return cls(np.zeros((3,) + tuple(shape), dtype=np.float32), level=level)

    def save(self, path: str | Path, spacing: float = 1.0) -> None:
        write_nifti(path, self.disp.astype(np.float32), spacing=spacing, descrip=f"level={self.level}")

    @classmethod
    def load(cls, path: str | Path) -> "DeformationField":
        data, _, descrip = read_nifti(path)
        level = "hr"
        for tag in LEVELS:
            if f"level={tag}" in descrip:
                level = tag
        return cls(data, level=level)


def identity_grid(shape: tuple[int, int, int], dtype=torch.float32, device=None) -> torch.Tensor:
    """Voxel-index grid of shape (3, D, H, W)."""
    axes = [torch.arange(s, dtype=dtype, device=device) for s in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)


def warp_tensor(img: torch.Tensor, disp: torch.Tensor, mode: str = "trilinear") -> torch.Tensor:
    """Warp (C, D, H, W) or (D, H, W) image data by a (3, D, H, W) field.

    Differentiable w.r.t. both inputs in trilinear mode. Out-of-bounds
    samples are zero.
    """
    squeeze = img.dim() == 3
    if squeeze:
        img = img[None]
    if img.dim() != 4:
        raise ValueError(f"img must be (C, D, H, W) or (D, H, W), got {tuple(img.shape)}")
    shape = img.shape[1:]
    if disp.shape != (3,) + shape:
        raise ValueError(f"field shape {tuple(disp.shape)} does not match image shape {tuple(shape)}")

    pos = identity_grid(shape, dtype=disp.dtype, device=disp.device) + disp
    D, H, W = shape

    if mode == "nearest":
        idx = pos.round().long()
        valid = (
            (idx[0] >= 0) & (idx[0] < D) & (idx[1] >= 0) & (idx[1] < H) & (idx[2] >= 0) & (idx[2] < W)
        )
        i = idx[0].clamp(0, D - 1)
        j = idx[1].clamp(0, H - 1)
        k = idx[2].clamp(0, W - 1)
        out = img[:, i, j, k] * valid.to(img.dtype)
    elif mode == "trilinear":
        p0 = pos.floor()
        frac = pos - p0  # gradient w.r.t. disp flows through here
        p0 = p0.long()
        out = torch.zeros_like(img)
        for a in (0, 1):
            wi = frac[0] if a else 1.0 - frac[0]
            ii = p0[0] + a
            vi = (ii >= 0) & (ii < D)
            ii = ii.clamp(0, D - 1)
            for b in (0, 1):
                wj = frac[1] if b else 1.0 - frac[1]
                jj = p0[1] + b
                vj = (jj >= 0) & (jj < H)
                jj = jj.clamp(0, H - 1)
                for c in (0, 1):
                    wk = frac[2] if c else 1.0 - frac[2]
                    kk = p0[2] + c
                    vk = (kk >= 0) & (kk < W)
                    kk = kk.clamp(0, W - 1)
                    w = wi * wj * wk * (vi & vj & vk).to(img.dtype)
                    out = out + img[:, ii, jj, kk] * w
    else:
        raise ValueError(f"mode must be 'trilinear' or 'nearest', got {mode!r}")

    return out[0] if squeeze else out


def warp(vol, field: DeformationField, mode: str = "trilinear"):
    """Warp a Volume by a DeformationField (shapes must match)."""
    from .volume import Volume

    if vol.shape != field.spatial_shape:
        raise ValueError(f"volume shape {vol.shape} does not match field shape {field.spatial_shape}")
    out = warp_tensor(vol.to_tensor(), field.to_tensor(), mode=mode)
    return Volume(out.numpy(), spacing=vol.spacing)


def _power_of_two_ratio(a: int, b: int) -> bool:
    hi, lo = max(a, b), min(a, b)
    return lo > 0 and hi % lo == 0 and (hi // lo) & (hi // lo - 1) == 0


def resample_field_tensor(disp: torch.Tensor, target_shape: tuple[int, int, int]) -> torch.Tensor:
    """Trilinearly resample a (3, D, H, W) field to a new grid, rescaling
    displacement magnitudes by the per-axis resolution ratio so physical
    motion is preserved."""
    src_shape = tuple(disp.shape[1:])
    target_shape = tuple(target_shape)
    if src_shape == target_shape:
        return disp
    for s, t in zip(src_shape, target_shape):
        if not _power_of_two_ratio(s, t):
            raise ValueError(f"resolution ratio must be a power of 2 per axis, got {src_shape} -> {target_shape}")
    out = F.interpolate(disp[None], size=target_shape, mode="trilinear", align_corners=True)[0]
    scale = torch.tensor(
        [t / s for s, t in zip(src_shape, target_shape)], dtype=out.dtype, device=out.device
    )
    return out * scale.view(3, 1, 1, 1)


def resample_field(field: DeformationField, target_shape: tuple[int, int, int], level: str | None = None) -> DeformationField:
    out = resample_field_tensor(field.to_tensor(), target_shape)
    return DeformationField.from_tensor(out, level=level or field.level)


def jacobian_determinant_array(disp: np.ndarray) -> np.ndarray:
    """Per-voxel det(I + grad disp), central differences on the interior
    and one-sided at the boundary. Returns a (D, H, W) float64 map."""
    disp = np.asarray(disp, dtype=np.float64)
    if disp.ndim != 4 or disp.shape[0] != 3:
        raise ValueError(f"disp must be (3, D, H, W), got {disp.shape}")
    if any(s < 3 for s in disp.shape[1:]):
        raise ValueError(f"each spatial axis must have size >= 3, got {disp.shape[1:]}")
    g = np.empty((3, 3) + disp.shape[1:], dtype=np.float64)
    for i in range(3):
        for j in range(3):
            g[i, j] = np.gradient(disp[i], axis=j)
        g[i, i] += 1.0
    det = (
        g[0, 0] * (g[1, 1] * g[2, 2] - g[1, 2] * g[2, 1])
        - g[0, 1] * (g[1, 0] * g[2, 2] - g[1, 2] * g[2, 0])
        + g[0, 2] * (g[1, 0] * g[2, 1] - g[1, 1] * g[2, 0])
    )
    return det


def jacobian_determinant(field: DeformationField):
    from .volume import Volume

    return Volume(jacobian_determinant_array(field.disp))


def ngjd(field: DeformationField | np.ndarray) -> float:
    """Mean Euclidean norm of the spatial gradient of the Jacobian
    determinant, interior voxels only, in percent."""
    disp = field.disp if isinstance(field, DeformationField) else field
    det = jacobian_determinant_array(disp)
    grads = np.gradient(det)
    interior = (slice(1, -1),) * 3
    norm = np.sqrt(sum(g[interior] ** 2 for g in grads))
    return float(norm.mean() * 100.0)


def grad_penalty_tensor(disp: torch.Tensor) -> torch.Tensor:
    """Diffusion regularizer: per spatial axis, the mean squared forward
    difference over all channels and positions, summed over the 3 axes."""
    total = disp.new_zeros(())
    for axis in (1, 2, 3):
        d = disp.narrow(axis, 1, disp.shape[axis] - 1) - disp.narrow(axis, 0, disp.shape[axis] - 1)
        total = total + (d * d).mean()
    return total


def grad_penalty(field: DeformationField) -> float:
    return float(grad_penalty_tensor(field.to_tensor(torch.float64)))


class InversionResult(NamedTuple):
    field: DeformationField
    residual: float
    converged: bool


def invert_field(field: DeformationField, iters: int = 20, tol: float = 0.05) -> InversionResult:
    """Approximate inverse displacement by fixed-point iteration
    psi_{k+1}(x) = -disp(x + psi_k(x)).

    The residual is the mean Euclidean norm of the composed displacement
    disp(x + psi(x)) + psi(x); convergence is reported, not enforced.
    """
    disp = field.to_tensor(torch.float64)
    psi = torch.zeros_like(disp)
    with torch.no_grad():
        for _ in range(iters):
            psi = -warp_tensor(disp, psi)
        comp = warp_tensor(disp, psi) + psi
        residual = float(comp.pow(2).sum(dim=0).sqrt().mean())
    return InversionResult(DeformationField.from_tensor(psi, level=field.level), residual, residual <= tol)


def sample_disp_at_points(disp: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinearly sample a (3, D, H, W) field at fractional voxel
    coordinates (K, 3); out-of-bounds corners contribute zero, matching
    the warp convention."""
    disp = np.asarray(disp, dtype=np.float64)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    shape = disp.shape[1:]
    p0 = np.floor(pts).astype(np.int64)
    frac = pts - p0
    out = np.zeros((pts.shape[0], 3), dtype=np.float64)
    for corner in range(8):
        offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = p0 + offs
        w = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=1)
        valid = np.all((idx >= 0) & (idx < np.array(shape)), axis=1)
        idxc = np.clip(idx, 0, np.array(shape) - 1)
        vals = disp[:, idxc[:, 0], idxc[:, 1], idxc[:, 2]].T
        out += (w * valid)[:, None] * vals
    return out


def field_from_keypoints(kp_moving, kp_fixed, shape: tuple[int, int, int], level: str = "hr") -> DeformationField:
    """Dense field interpolating the keypoint displacements
    (kp_fixed - kp_moving) with Gaussian-windowed inverse-distance
    weights; exact at the keypoint sites.

    Bandwidth is the median pairwise spacing of the moving keypoints.
    Duplicate moving keypoints are merged by averaging their
    displacements.
    """
    from .keypoints import norm_to_voxel

    if kp_moving.k == 0 or kp_fixed.k == 0:
        raise ValueError("field_from_keypoints requires at least one keypoint")
    if kp_moving.k != kp_fixed.k:
        raise ValueError(f"keypoint counts differ: {kp_moving.k} vs {kp_fixed.k}")
    shape = tuple(shape)
    pm = norm_to_voxel(kp_moving.coords, shape).astype(np.float64)
    pf = norm_to_voxel(kp_fixed.coords, shape).astype(np.float64)
    d = pf - pm

    # merge duplicate sites, averaging their displacement vectors
    key = np.round(pm / 1e-9).astype(np.int64)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    if np.any(counts > 1):
        k = counts.size
        pm_m = np.zeros((k, 3))
        d_m = np.zeros((k, 3))
        np.add.at(pm_m, inverse, pm)
        np.add.at(d_m, inverse, d)
        pm = pm_m / counts[:, None]
        d = d_m / counts[:, None]

    k = pm.shape[0]
    if k == 1:
        bandwidth = float(max(shape))
    else:
        diffs = pm[:, None, :] - pm[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1))
        bandwidth = float(np.median(dist[np.triu_indices(k, 1)]))
        bandwidth = max(bandwidth, 1.0)

    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"), axis=-1)
    flat = grid.reshape(-1, 3)
    num = np.zeros((flat.shape[0], 3), dtype=np.float64)
    den = np.zeros(flat.shape[0], dtype=np.float64)
    for i in range(k):
        d2 = ((flat - pm[i]) ** 2).sum(axis=1)
        w = np.exp(-d2 / (2.0 * bandwidth**2)) / (d2 + 1e-12)
        num += w[:, None] * d[i]
        den += w
    disp = (num / den[:, None]).T.reshape((3,) + shape)
    return DeformationField(disp.astype(np.float32), level=level)
