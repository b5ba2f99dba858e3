"""Parametric response map: voxel-wise fractions of decreased/stable/
increased wash-in signal between registered scans.

The response ratio is M = (I_m∘phi - I_f) / (I_m∘phi); positive M means
the baseline signal exceeds the follow-up, i.e. the signal DECREASED
over time. Fractions are reported in the threshold order
[M > delta, |M| <= delta, M < -delta] = [decreased, stable, increased].
Voxels where I_m∘phi is exactly zero are assigned to the stable bin (and
counted); this convention is configurable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_field import DeformationField, warp
from .volume import Volume


@dataclass
class PrmFeature:
    """The three response fractions over one region."""

    increased: float
    stable: float
    decreased: float
    region: str = "local"
    delta: float = 0.1
    interval_days: float | None = None

    def __post_init__(self):
        for name in ("increased", "stable", "decreased"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} fraction must be finite and >= 0, got {v}")

    def as_row(self) -> tuple[float, float, float]:
        """Fractions in threshold order: (M>delta, |M|<=delta, M<-delta)."""
        return (self.decreased, self.stable, self.increased)


def _response_fractions(m: np.ndarray, region: np.ndarray, delta: float):
    # m is 0 at guarded zero-denominator voxels, so they land in the
    # stable bin and the three bins partition the region exactly
    sel = region > 0
    n = int(sel.sum())
    if n == 0:
        raise ValueError("region mask is empty")
    decreased = int(((m > delta) & sel).sum())
    stable = int(((np.abs(m) <= delta) & sel).sum())
    increased = int(((m < -delta) & sel).sum())
    return decreased / n, stable / n, increased / n


def prm(
    i_m: Volume,
    i_f: Volume,
    field_: DeformationField | None,
    region_mask: Volume | np.ndarray,
    delta: float = 0.1,
    region: str = "local",
    zero_denominator: str = "stable",
) -> PrmFeature:
    """PRM fractions of the masked region for a moving/fixed wash-in pair
    under a deformation field (None for the identity)."""
    if zero_denominator != "stable":
        raise ValueError("only the 'stable' zero-denominator convention is implemented")
    warped = i_m if field_ is None else warp(i_m, field_)
    wdata = warped.data.astype(np.float64)
    fdata = i_f.data.astype(np.float64)
    region_data = region_mask.data if isinstance(region_mask, Volume) else np.asarray(region_mask)
    if region_data.shape != wdata.shape:
        raise ValueError(f"region mask shape {region_data.shape} != image shape {wdata.shape}")
    zero_den = wdata == 0.0
    m = np.where(zero_den, 0.0, (wdata - fdata) / np.where(zero_den, 1.0, wdata))
    dec, sta, inc = _response_fractions(m, region_data, delta)
    return PrmFeature(increased=inc, stable=sta, decreased=dec, region=region, delta=delta)


def prm_feature_vector(pair, field_: DeformationField | None, interval_days: float, delta: float = 0.1) -> list[float]:
    """[PRM_local(3), PRM_global(3), interval_days]: the 7-value feature
    row for a downstream response classifier.

    Region masks are the moving tumor/breast masks carried into the fixed
    frame by the field (identity when the field is None).
    """

    def region_of(mask: Volume) -> np.ndarray:
        if field_ is None:
            return mask.data.astype(np.uint8)
        warped = warp(Volume(mask.data.astype(np.float32), mask.spacing), field_)
        return (warped.data >= 0.5).astype(np.uint8)

    local = prm(pair.moving.washin, pair.fixed.washin, field_, region_of(pair.moving.tumor_mask), delta, "local")
    global_ = prm(pair.moving.washin, pair.fixed.washin, field_, region_of(pair.moving.breast_mask), delta, "global")
    return list(local.as_row()) + list(global_.as_row()) + [float(interval_days)]
