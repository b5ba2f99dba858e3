"""Registration-quality metrics: landmark error, lesion-volume change,
Dice and deformation smoothness, plus the aggregated report."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid_field import DeformationField, ngjd, sample_disp_at_points, warp
from .volume import Volume, as_binary_mask


def landmark_error(
    landmarks_m: np.ndarray,
    landmarks_f: np.ndarray,
    field_: DeformationField | None,
    spacing: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Mean Euclidean landmark distance in mm after mapping the moving
    landmarks through the field (displacement sampled trilinearly at
    each moving landmark). A None field is the rigid (zero) baseline."""
    lm = np.atleast_2d(np.asarray(landmarks_m, dtype=np.float64))
    lf = np.atleast_2d(np.asarray(landmarks_f, dtype=np.float64))
    if lm.size == 0 or lf.size == 0:
        raise ValueError("landmark lists must be nonempty")
    if lm.shape != lf.shape:
        raise ValueError(f"landmark lists must correspond, got {lm.shape} vs {lf.shape}")
    moved = lm if field_ is None else lm + sample_disp_at_points(field_.disp, lm)
    per_landmark = np.linalg.norm(lf - moved, axis=1) * spacing
    return float(per_landmark.mean()), per_landmark


def delta_v(tumor_mask: Volume, field_: DeformationField) -> float:
    """|V(mask warped) - V(mask)| / V(mask) in percent; the mask is warped
    trilinearly and re-binarized at 0.5."""
    mask = as_binary_mask(tumor_mask, "tumor_mask")
    v0 = int(mask.sum())
    if v0 == 0:
        raise ValueError("tumor mask is empty")
    warped = warp(Volume(mask.astype(np.float32), tumor_mask.spacing), field_, mode="trilinear")
    v1 = int((warped.data >= 0.5).sum())
    return float(abs(v1 - v0) / v0 * 100.0)


def dice(mask_a: Volume | np.ndarray, mask_b: Volume | np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); both-empty pairs score 1.0 by convention."""
    a = as_binary_mask(mask_a, "mask_a") if isinstance(mask_a, Volume) else np.asarray(mask_a)
    b = as_binary_mask(mask_b, "mask_b") if isinstance(mask_b, Volume) else np.asarray(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not (np.isin(a, (0, 1)).all() and np.isin(b, (0, 1)).all()):
        raise ValueError("dice requires binary masks")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    inter = int((a * b).sum())
    return 2.0 * inter / total


@dataclass
class MetricReport:
    """The four registration metrics plus per-landmark errors."""

    dsc: float
    d_avg_mm: float
    delta_v_pct: float
    ngjd_pct: float
    per_landmark_mm: list[float] = field(default_factory=list)
    lambda_g: float | None = None

    def __post_init__(self):
        values = [self.dsc, self.d_avg_mm, self.delta_v_pct, self.ngjd_pct]
        if not all(np.isfinite(v) for v in values):
            raise ValueError(f"metric report contains non-finite values: {values}")
        if not (0.0 <= self.dsc <= 1.0):
            raise ValueError(f"dsc must be in [0, 1], got {self.dsc}")

    def to_dict(self) -> dict:
        out = {
            "dsc": self.dsc,
            "d_avg_mm": self.d_avg_mm,
            "delta_v_pct": self.delta_v_pct,
            "ngjd_pct": self.ngjd_pct,
            "per_landmark_mm": list(self.per_landmark_mm),
        }
        if self.lambda_g is not None:
            out["lambda_g"] = self.lambda_g
        return out


def evaluate_pair(pair, field_: DeformationField | None, lambda_g: float | None = None) -> MetricReport:
    """Compute the full metric report for a pair under a field (None for
    the rigid baseline)."""
    d_avg, per_lm = landmark_error(pair.landmarks_moving, pair.landmarks_fixed, field_, pair.spacing)
    if field_ is None:
        dv = 0.0
        smoothness = 0.0
        warped_breast = pair.moving.breast_mask.data
    else:
        dv = delta_v(pair.moving.tumor_mask, field_)
        smoothness = ngjd(field_)
        warped = warp(pair.moving.breast_mask, field_)
        warped_breast = (warped.data >= 0.5).astype(np.uint8)
    dsc = dice(warped_breast, pair.fixed.breast_mask.data.astype(np.uint8))
    return MetricReport(
        dsc=dsc,
        d_avg_mm=d_avg,
        delta_v_pct=dv,
        ngjd_pct=smoothness,
        per_landmark_mm=[float(x) for x in per_lm],
        lambda_g=lambda_g,
    )
