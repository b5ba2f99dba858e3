"""Synthetic longitudinal breast-phantom study pairs.

A phantom is a half-ellipsoid "breast" on a dark background: T1w carries
fibroglandular texture, a skin rim and (mildly) the tumors; the wash-in
image carries bright tumors and thin bright vessels. The fixed study is
the moving study warped by a smooth random ground-truth field, except for
the tumor, which is re-rendered analytically at the pulled-back center
with its radius scaled by the shrink factor - so the fixed tumor
genuinely differs from any warp of the moving one.

Everything is a pure function of (config, seed).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid_field import DeformationField, sample_disp_at_points, warp
from .nifti import read_nifti, write_nifti
from .volume import Volume

PCR_SHRINK_THRESHOLD = 0.3  # shrink at or below this counts as pCR-like


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (64, 64, 64)
    num_landmarks: int = 21
    amplitude: float = 2.5  # max displacement, voxels
    smoothness: float = 11.0  # Gaussian bump sigma, voxels
    num_bumps: tuple[int, int] = (3, 8)
    tumor_count: int = 1
    tumor_radius: tuple[float, float] = (3.5, 5.5)
    shrink: float = 0.6
    vessel_count: int = 3
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.shrink <= 1.0):
            raise ValueError(f"shrink must be in [0, 1], got {self.shrink}")
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude}")
        if len(self.shape) != 3 or any(s < 8 for s in self.shape):
            raise ValueError(f"shape must be 3D with extents >= 8, got {self.shape}")
        if self.num_landmarks < 2:
            raise ValueError("need at least 2 landmarks (nipple analog and tumor center)")
        if self.tumor_count < 1:
            raise ValueError("tumor_count must be >= 1")

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "num_landmarks": self.num_landmarks,
            "amplitude": self.amplitude,
            "smoothness": self.smoothness,
            "num_bumps": list(self.num_bumps),
            "tumor_count": self.tumor_count,
            "tumor_radius": list(self.tumor_radius),
            "shrink": self.shrink,
            "vessel_count": self.vessel_count,
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        for key in ("shape", "num_bumps", "tumor_radius"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class StudySide:
    t1w: Volume
    washin: Volume
    breast_mask: Volume
    tumor_mask: Volume

    def volumes(self) -> dict[str, Volume]:
        return {"t1w": self.t1w, "washin": self.washin, "breast": self.breast_mask, "tumor": self.tumor_mask}


@dataclass
class StudyPair:
    moving: StudySide
    fixed: StudySide
    landmarks_moving: np.ndarray  # (K, 3) voxel coordinates
    landmarks_fixed: np.ndarray
    gt_field: DeformationField | None = None
    response_label: str = "non-pCR"
    seed: int | None = None

    def __post_init__(self):
        self.landmarks_moving = np.asarray(self.landmarks_moving, dtype=np.float64)
        self.landmarks_fixed = np.asarray(self.landmarks_fixed, dtype=np.float64)
        shapes = {v.shape for side in (self.moving, self.fixed) for v in side.volumes().values()}
        if len(shapes) != 1:
            raise ValueError(f"volumes in a pair must share one shape, got {shapes}")
        spacings = {v.spacing for side in (self.moving, self.fixed) for v in side.volumes().values()}
        if len(spacings) != 1:
            raise ValueError(f"volumes in a pair must share one spacing, got {spacings}")
        if self.landmarks_moving.shape != self.landmarks_fixed.shape:
            raise ValueError("landmark lists must have equal length")
        for side_name, side in (("moving", self.moving), ("fixed", self.fixed)):
            for mask_name in ("breast_mask", "tumor_mask"):
                if not getattr(side, mask_name).is_binary():
                    raise ValueError(f"{side_name}.{mask_name} must be binary")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.moving.t1w.shape

    @property
    def spacing(self) -> float:
        return self.moving.t1w.spacing

    def equals(self, other: "StudyPair") -> bool:
        for attr in ("moving", "fixed"):
            a, b = getattr(self, attr), getattr(other, attr)
            for name in a.volumes():
                if not a.volumes()[name].allclose(b.volumes()[name]):
                    return False
        if not np.array_equal(self.landmarks_moving, other.landmarks_moving):
            return False
        if not np.array_equal(self.landmarks_fixed, other.landmarks_fixed):
            return False
        if (self.gt_field is None) != (other.gt_field is None):
            return False
        if self.gt_field is not None and not np.array_equal(self.gt_field.disp, other.gt_field.disp):
            return False
        return self.response_label == other.response_label and self.seed == other.seed


def _ellipsoid_interior(shape, center, semi_axes) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    q = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi_axes))
    return q


def _soft_sphere(shape, center, radius, edge=1.0) -> np.ndarray:
    """Unit-amplitude sphere with a smooth rim of width `edge` voxels."""
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, center)))
    return np.clip((radius - dist) / edge + 0.5, 0.0, 1.0)


def _hard_sphere(shape, center, radius) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    dist2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return (dist2 <= radius * radius).astype(np.float32)


def _curve_points(start, end, bend_vec, n=96) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1.0 - t) * start + t * end + np.sin(np.pi * t) * bend_vec


def _rasterize_tube(shape, points, radius=1.2) -> np.ndarray:
    """Soft tube intensity map around a polyline sample cloud."""
    out = np.full(shape, np.inf, dtype=np.float64)
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    for p in points:
        d2 = (grids[0] - p[0]) ** 2 + (grids[1] - p[1]) ** 2 + (grids[2] - p[2]) ** 2
        np.minimum(out, d2, out=out)
    return np.exp(-out / (2.0 * radius * radius))


def _gaussian_bump_field(cfg: PhantomConfig, rng: np.random.Generator, breast_center, breast_axes) -> np.ndarray:
    """Sum of Gaussian-bump displacements: one wide bump for the bulk
    repositioning of the breast between visits plus several local bumps,
    capped at cfg.amplitude so the field stays comfortably invertible."""
    disp = np.zeros((3,) + tuple(cfg.shape), dtype=np.float64)
    if cfg.amplitude == 0:
        return disp
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in cfg.shape], indexing="ij")

    def add_bump(center, sigma, vec):
        bump = np.exp(-sum((g - c) ** 2 for g, c in zip(grids, center)) / (2.0 * sigma * sigma))
        disp.__iadd__(np.asarray(vec)[:, None, None, None] * bump)

    # repositioning between visits is predominantly in-plane (patient
    # placement), with per-visit variation around that tendency
    bulk_dir = np.array([0.25, 0.75, 0.6]) + 0.55 * rng.normal(size=3)
    bulk_dir /= np.linalg.norm(bulk_dir)
    bulk_center = np.array(breast_center) + rng.uniform(-0.15, 0.15, size=3) * np.array(breast_axes)
    add_bump(bulk_center, 0.7 * max(cfg.shape), cfg.amplitude * rng.uniform(0.6, 0.9) * bulk_dir)

    n_bumps = int(rng.integers(cfg.num_bumps[0], cfg.num_bumps[1] + 1))
    for _ in range(n_bumps):
        center = np.array(breast_center) + rng.uniform(-0.6, 0.6, size=3) * np.array(breast_axes)
        sigma = cfg.smoothness * rng.uniform(0.8, 1.25)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        add_bump(center, sigma, cfg.amplitude * rng.uniform(0.2, 0.45) * direction)

    peak = np.sqrt((disp**2).sum(axis=0)).max()
    if peak > cfg.amplitude:
        disp *= cfg.amplitude / peak
    return disp


def _pull_back_center(center_moving: np.ndarray, disp: np.ndarray, iters: int = 30) -> np.ndarray:
    """Solve c_f + disp(c_f) = c_m by fixed-point iteration, so the
    re-rendered fixed tumor sits where the warped anatomy lands."""
    c = center_moving.copy()
    for _ in range(iters):
        c = center_moving - sample_disp_at_points(disp, c[None])[0]
    return c


def generate_pair(cfg: PhantomConfig) -> StudyPair:
    """Generate one longitudinal study pair; deterministic for a fixed seed."""
    rng = np.random.default_rng(cfg.seed)
    shape = tuple(cfg.shape)
    d, h, w = shape

    # breast geometry: half-ellipsoid attached to the chest wall at d=0
    axes = np.array([0.78 * d, 0.45 * h, 0.45 * w]) * rng.uniform(0.94, 1.03, size=3)
    center = np.array([0.0, h / 2.0, w / 2.0]) + np.concatenate([[0.0], rng.uniform(-1.5, 1.5, size=2)])
    q = _ellipsoid_interior(shape, center, axes)
    breast = (q <= 1.0).astype(np.float32)
    rim = ((q <= 1.0) & (q >= 0.82)).astype(np.float64)
    nipple = center + np.array([axes[0] * 0.995, 0.0, 0.0])
    nipple[0] = min(nipple[0], d - 2.0)

    # tumors: rejection-sampled centers inside the breast, away from the
    # chest wall and from each other
    radii = rng.uniform(cfg.tumor_radius[0], cfg.tumor_radius[1], size=cfg.tumor_count)
    centers = []
    for i in range(cfg.tumor_count):
        margin = radii[i] + 3.0
        placed = False
        for _ in range(400):
            u = rng.uniform(-0.75, 0.75, size=3) * axes + center
            u[0] = abs(u[0]) + radii[i] + 2.0  # keep off the chest wall
            qq = sum(((u[j] - center[j]) / axes[j]) ** 2 for j in range(3))
            if qq > (1.0 - margin / min(axes)) ** 2:
                continue
            if any(np.linalg.norm(u - c) < radii[i] + r + 4.0 for c, r in zip(centers, radii)):
                continue
            centers.append(u)
            placed = True
            break
        if not placed:
            raise ValueError(
                f"shape {shape} too small to place tumor {i} of radius {radii[i]:.1f}"
            )

    # vessels: bent trunks from the chest wall toward the nipple plus one
    # branch each; the branch point doubles as a junction landmark. Tubes
    # are erased near tumors so the two stay disconnected components.
    vessel_pts = []
    junctions = []
    for _ in range(cfg.vessel_count):
        start = np.array(
            [2.0, center[1] + rng.uniform(-0.5, 0.5) * axes[1], center[2] + rng.uniform(-0.5, 0.5) * axes[2]]
        )
        target = nipple + rng.normal(0.0, 2.0, size=3)
        bend = rng.normal(0.0, 0.25 * min(axes[1], axes[2]), size=3)
        bend[0] = 0.0
        trunk = _curve_points(start, start + (target - start) * rng.uniform(0.7, 0.9), bend, n=64)
        junction = trunk[len(trunk) // 2]
        side = rng.normal(0.0, 1.0, size=3)
        side /= np.linalg.norm(side)
        branch_end = junction + side * rng.uniform(0.25, 0.4) * min(axes)
        branch = _curve_points(junction, branch_end, rng.normal(0.0, 2.0, size=3), n=32)
        vessel_pts.append(np.concatenate([trunk, branch]))
        junctions.append(junction)
    all_vessel_pts = np.concatenate(vessel_pts) if vessel_pts else np.zeros((0, 3))
    if len(all_vessel_pts):
        vessel_map = _rasterize_tube(shape, all_vessel_pts) * breast
        grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
        for c, r in zip(centers, radii):
            dist2 = sum((g - cc) ** 2 for g, cc in zip(grids, c))
            vessel_map[dist2 <= (r + 2.5) ** 2] = 0.0
    else:
        vessel_map = np.zeros(shape)

    # moving-frame base images (tumor-free), then tumors added on top.
    # Fibroglandular texture carries two scales: the coarse component
    # gives the similarity losses a capture range beyond the deformation
    # amplitude, the fine one carries local detail.
    coarse = gaussian_filter(rng.normal(size=shape), sigma=7.0)
    fine = gaussian_filter(rng.normal(size=shape), sigma=2.5)
    texture = 0.6 * coarse / max(np.abs(coarse).max(), 1e-9) + 0.4 * fine / max(np.abs(fine).max(), 1e-9)
    t1w_base = breast * (0.42 + 0.38 * texture) + 0.3 * rim
    t1w_base += cfg.noise * rng.normal(size=shape) * (1.0 - breast)
    # float32 here keeps the amplitude-0/shrink-1 case exactly voxel-wise
    # equal: the warp of the zero field is bit-exact on float32 data
    t1w_base = np.clip(t1w_base, 0.0, 1.0).astype(np.float32)
    washin_base = 0.02 + 0.06 * breast + 0.7 * vessel_map
    washin_base += cfg.noise * rng.normal(size=shape)
    washin_base = np.clip(washin_base, 0.0, 1.0).astype(np.float32)

    def render_tumors(base_t1w, base_washin, tumor_centers, tumor_radii, enhancement):
        t1 = base_t1w.copy()
        wi = base_washin.copy()
        mask = np.zeros(shape, dtype=np.float32)
        for c, r in zip(tumor_centers, tumor_radii):
            blob = _soft_sphere(shape, c, r)
            t1 = np.clip(t1 + 0.35 * enhancement * blob, 0.0, 1.0)
            wi = np.clip(wi + 0.9 * enhancement * blob, 0.0, 1.0)
            mask = np.maximum(mask, _hard_sphere(shape, c, r))
        return t1, wi, mask

    t1w_m, washin_m, tumor_m = render_tumors(t1w_base, washin_base, centers, radii, 1.0)

    # ground-truth deformation and the fixed-frame study
    disp = _gaussian_bump_field(cfg, rng, center, axes)
    gt = DeformationField(disp.astype(np.float32), level="hr")
    spacing = 1.0

    t1w_base_f = warp(Volume(t1w_base, spacing), gt).data.astype(np.float64)
    washin_base_f = warp(Volume(washin_base, spacing), gt).data.astype(np.float64)
    breast_f = (warp(Volume(breast, spacing), gt).data >= 0.5).astype(np.float32)

    centers_f = [_pull_back_center(c, disp) for c in centers]
    radii_f = radii * cfg.shrink
    enhancement_f = 0.25 + 0.75 * cfg.shrink
    t1w_f, washin_f, tumor_f = render_tumors(t1w_base_f, washin_base_f, centers_f, radii_f, enhancement_f)

    # landmarks: nipple analog, tumor centers, breast-boundary points and
    # vessel junctions, in that priority order
    landmarks = [nipple] + [np.asarray(c) for c in centers]
    landmarks += [np.asarray(j) for j in junctions]
    n_boundary = max(0, cfg.num_landmarks - len(landmarks))
    for i in range(n_boundary):
        # polar angle restricted to the protruding half of the ellipsoid
        theta = rng.uniform(0.08 * np.pi, 0.45 * np.pi)
        phi_ang = rng.uniform(0.0, 2.0 * np.pi)
        unit = np.array([np.cos(theta), np.sin(theta) * np.cos(phi_ang), np.sin(theta) * np.sin(phi_ang)])
        pt = center + unit * axes * 0.94
        landmarks.append(pt)
    landmarks_moving = np.clip(
        np.array(landmarks[: cfg.num_landmarks]), 1.0, np.array(shape, dtype=np.float64) - 2.0
    )
    landmarks_fixed = landmarks_moving + sample_disp_at_points(disp, landmarks_moving)

    label = "pCR" if cfg.shrink <= PCR_SHRINK_THRESHOLD else "non-pCR"
    moving = StudySide(
        t1w=Volume(t1w_m.astype(np.float32), spacing),
        washin=Volume(washin_m.astype(np.float32), spacing),
        breast_mask=Volume(breast, spacing),
        tumor_mask=Volume(tumor_m, spacing),
    )
    fixed = StudySide(
        t1w=Volume(t1w_f.astype(np.float32), spacing),
        washin=Volume(washin_f.astype(np.float32), spacing),
        breast_mask=Volume(breast_f, spacing),
        tumor_mask=Volume(tumor_f, spacing),
    )
    return StudyPair(
        moving=moving,
        fixed=fixed,
        landmarks_moving=landmarks_moving,
        landmarks_fixed=landmarks_fixed,
        gt_field=gt,
        response_label=label,
        seed=cfg.seed,
    )


_FILE_KINDS = ("t1w", "washin", "breast", "tumor")
_SIDE_ATTRS = {"t1w": "t1w", "washin": "washin", "breast": "breast_mask", "tumor": "tumor_mask"}


def save_study(path: str | Path, pair: StudyPair) -> None:
    """Persist a pair as NIfTI volumes plus a JSON annotation sidecar."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for role, side in (("moving", pair.moving), ("fixed", pair.fixed)):
        for kind in _FILE_KINDS:
            vol = getattr(side, _SIDE_ATTRS[kind])
            data = vol.data
            if kind in ("breast", "tumor"):
                data = data.astype(np.uint8)
            write_nifti(path / f"{role}_{kind}.nii.gz", data, spacing=vol.spacing)
    if pair.gt_field is not None:
        pair.gt_field.save(path / "gt_field.nii.gz", spacing=pair.spacing)
    annotations = {
        "landmarks_moving": pair.landmarks_moving.tolist(),
        "landmarks_fixed": pair.landmarks_fixed.tolist(),
        "response_label": pair.response_label,
        "seed": pair.seed,
    }
    (path / "annotations.json").write_text(json.dumps(annotations, indent=1))


def load_study(path: str | Path) -> StudyPair:
    """Load a pair saved by save_study; validates volumes and annotations."""
    path = Path(path)
    ann_path = path / "annotations.json"
    if not ann_path.exists():
        raise IOError(f"missing landmark annotations: {ann_path}")
    annotations = json.loads(ann_path.read_text())

    sides = {}
    shape = None
    for role in ("moving", "fixed"):
        vols = {}
        for kind in _FILE_KINDS:
            fp = path / f"{role}_{kind}.nii.gz"
            if not fp.exists():
                raise IOError(f"missing volume file: {fp}")
            data, spacing, _ = read_nifti(fp)
            if data.ndim != 3:
                raise IOError(f"{fp}: expected a 3D volume, got {data.ndim}D")
            if shape is None:
                shape = data.shape
            elif data.shape != shape:
                raise IOError(f"{fp}: shape {data.shape} does not match {shape}")
            try:
                vols[kind] = Volume(data.astype(np.float32), spacing)
            except ValueError as exc:
                raise ValueError(f"{fp}: {exc}") from exc
        sides[role] = StudySide(
            t1w=vols["t1w"], washin=vols["washin"], breast_mask=vols["breast"], tumor_mask=vols["tumor"]
        )

    gt = None
    gt_path = path / "gt_field.nii.gz"
    if gt_path.exists():
        gt = DeformationField.load(gt_path)
    return StudyPair(
        moving=sides["moving"],
        fixed=sides["fixed"],
        landmarks_moving=np.asarray(annotations["landmarks_moving"], dtype=np.float64),
        landmarks_fixed=np.asarray(annotations["landmarks_fixed"], dtype=np.float64),
        gt_field=gt,
        response_label=annotations.get("response_label", "non-pCR"),
        seed=annotations.get("seed"),
    )
