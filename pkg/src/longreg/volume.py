"""3D scalar volume container used throughout the package.

Axis order is (D, H, W) everywhere; spacing is isotropic millimetres per
voxel. Intensities are arbitrary units and must be finite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class Volume:
    """A 3D scalar grid with isotropic spacing.

    Carrier for T1w, wash-in and mask images. `data` is float32 (or uint8
    for masks) with shape (D, H, W).
    """

    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"Volume data must be 3D, got shape {self.data.shape}")
        if any(s < 2 for s in self.data.shape):
            raise ValueError(f"Volume shape components must be >= 2, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Volume contains non-finite values (NaN/Inf)")
        if self.spacing <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def is_binary(self) -> bool:
        return bool(np.isin(self.data, (0, 1)).all())

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """Return the voxel grid as a (D, H, W) torch tensor."""
        return torch.as_tensor(np.ascontiguousarray(self.data), dtype=dtype)

    @classmethod
    def from_tensor(cls, t: torch.Tensor, spacing: float = 1.0) -> "Volume":
        return cls(t.detach().cpu().numpy().astype(np.float32), spacing=spacing)

    def allclose(self, other: "Volume", atol: float = 0.0) -> bool:
        return (
            self.shape == other.shape
            and abs(self.spacing - other.spacing) < 1e-9
            and np.allclose(self.data, other.data, atol=atol, rtol=0.0)
        )


def as_binary_mask(vol: Volume, name: str = "mask") -> np.ndarray:
    """Validate that a volume is binary and return it as uint8."""
    if not vol.is_binary():
        raise ValueError(f"{name} must be binary (values in {{0, 1}})")
    return vol.data.astype(np.uint8)
