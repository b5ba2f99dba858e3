"""Histogram thresholding (Otsu, Yen) and keypoint-guided component
filtering for tumor segmentation from wash-in images."""
from __future__ import annotations

import warnings

import numpy as np
from scipy.ndimage import label

from .keypoints import KeypointSet
from .volume import Volume, as_binary_mask

N_BINS = 256


def _histogram(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = float(data.min()), float(data.max())
    counts, edges = np.histogram(data, bins=N_BINS, range=(lo, hi))
    return counts.astype(np.float64), edges


def otsu_threshold(data: np.ndarray) -> float:
    """Threshold maximizing the between-class variance over a 256-bin
    histogram; returns the upper edge of the argmax bin (first maximizer
    on ties). Raises on constant images."""
    data = np.asarray(data)
    if data.min() == data.max():
        raise ValueError("cannot threshold a constant image")
    counts, edges = _histogram(data)
    p = counts / counts.sum()
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(p)
    mu_cum = np.cumsum(p * centers)
    mu_total = mu_cum[-1]
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    crit = np.full(N_BINS, -np.inf)
    mu0 = np.divide(mu_cum, w0, out=np.zeros_like(mu_cum), where=w0 > 0)
    mu1 = np.divide(mu_total - mu_cum, w1, out=np.zeros_like(mu_cum), where=w1 > 0)
    crit[valid] = (w0 * w1 * (mu0 - mu1) ** 2)[valid]
    t = int(np.argmax(crit))
    return float(edges[t + 1])


def yen_threshold(data: np.ndarray) -> float:
    """Threshold maximizing Yen's entropic correlation criterion
    log[(P(t)(1-P(t)))^2 / (G0(t) G1(t))] with G the within-class sums of
    squared bin probabilities."""
    data = np.asarray(data)
    if data.min() == data.max():
        raise ValueError("cannot threshold a constant image")
    counts, edges = _histogram(data)
    p = counts / counts.sum()
    p1 = np.cumsum(p)
    g0 = np.cumsum(p * p)
    g1 = g0[-1] - g0
    valid = (g0 > 0) & (g1 > 0) & (p1 > 0) & (p1 < 1)
    crit = np.full(N_BINS, -np.inf)
    crit[valid] = np.log((p1 * (1.0 - p1))[valid] ** 2 / (g0 * g1)[valid])
    t = int(np.argmax(crit))
    return float(edges[t + 1])


_THRESHOLDS = {"otsu": otsu_threshold, "yen": yen_threshold}


def threshold_segment(washin: Volume, method: str = "otsu") -> Volume:
    """Global thresholding segmentation of a wash-in image.

    Constant images yield an all-zero mask with a warning.
    """
    if method not in _THRESHOLDS:
        raise ValueError(f"method must be one of {sorted(_THRESHOLDS)}, got {method!r}")
    data = washin.data
    if data.min() == data.max():
        warnings.warn("constant image: thresholding produced an empty mask")
        return Volume(np.zeros_like(data, dtype=np.uint8), washin.spacing)
    thr = _THRESHOLDS[method](data)
    return Volume((data > thr).astype(np.uint8), washin.spacing)


def keypoint_filter_components(mask: Volume, kps: KeypointSet, tolerance: float = 2.0) -> Volume:
    """Keep only the 26-connected components containing (or within
    `tolerance` voxels of) a keypoint; warns and returns an empty mask
    when nothing is hit."""
    data = as_binary_mask(mask, "mask")
    labels, n = label(data, structure=np.ones((3, 3, 3), dtype=np.uint8))
    if n == 0:
        warnings.warn("keypoint_filter_components: input mask is empty")
        return Volume(np.zeros_like(data), mask.spacing)

    keep: set[int] = set()
    shape = np.array(data.shape)
    reach = int(np.ceil(tolerance))
    for pt in kps.to_voxel(data.shape):
        v = np.round(pt).astype(int)
        lo = np.maximum(v - reach, 0)
        hi = np.minimum(v + reach + 1, shape)
        window = labels[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
        if window.size == 0:
            continue
        grids = np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij")
        dist = np.sqrt(sum((g - p) ** 2 for g, p in zip(grids, pt)))
        keep.update(np.unique(window[(dist <= tolerance) & (window > 0)]).tolist())

    if not keep:
        warnings.warn("keypoint_filter_components: no component overlaps a keypoint")
        return Volume(np.zeros_like(data), mask.spacing)
    out = np.isin(labels, sorted(keep)).astype(np.uint8)
    return Volume(out, mask.spacing)
