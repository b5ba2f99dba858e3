"""Independent oracles used by the test suite.

Each function re-derives an expected result along a path disjoint from
the implementation it checks: explicit finite-difference stencils instead
of np.gradient, per-voxel numpy determinants, hard joint histograms,
exhaustive criterion sweeps, brute-force window scans and per-voxel
counting loops, and scipy's map_coordinates as a second trilinear
sampler.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from scipy.ndimage import map_coordinates


def fd_gradient(vol: np.ndarray, axis: int) -> np.ndarray:
    """Central differences on the interior, one-sided at the boundary,
    written with explicit slicing (not np.gradient)."""
    out = np.empty_like(vol, dtype=np.float64)
    lead = (slice(None),) * axis
    out[lead + (slice(1, -1),)] = (vol[lead + (slice(2, None),)] - vol[lead + (slice(None, -2),)]) / 2.0
    out[lead + (slice(0, 1),)] = vol[lead + (slice(1, 2),)] - vol[lead + (slice(0, 1),)]
    out[lead + (slice(-1, None),)] = vol[lead + (slice(-1, None),)] - vol[lead + (slice(-2, -1),)]
    return out


def fd_jacobian_map(disp: np.ndarray) -> np.ndarray:
    """Per-voxel det(I + grad disp) via numpy's 3x3 determinant."""
    disp = np.asarray(disp, dtype=np.float64)
    shape = disp.shape[1:]
    jac = np.zeros(shape + (3, 3), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            jac[..., i, j] = fd_gradient(disp[i], j)
        jac[..., i, i] += 1.0
    return np.linalg.det(jac)


def fd_of_fd_ngjd(disp: np.ndarray) -> float:
    """Two-pass FD oracle for the mean interior gradient norm of the
    Jacobian determinant, in percent."""
    det = fd_jacobian_map(disp)
    grads = [fd_gradient(det, axis) for axis in range(3)]
    interior = (slice(1, -1),) * 3
    norm = np.sqrt(sum(g[interior] ** 2 for g in grads))
    return float(norm.mean() * 100.0)


def exact_histogram_mi(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    """Hard joint-histogram mutual information over [0, 1] in nats."""
    av = np.clip(np.asarray(a, dtype=np.float64).ravel(), 0.0, 1.0)
    bv = np.clip(np.asarray(b, dtype=np.float64).ravel(), 0.0, 1.0)
    joint, _, _ = np.histogram2d(av, bv, bins=bins, range=[[0.0, 1.0], [0.0, 1.0]])
    joint /= joint.sum()
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    mi = 0.0
    for i in range(bins):
        for j in range(bins):
            if joint[i, j] > 0:
                mi += joint[i, j] * np.log(joint[i, j] / (pa[i] * pb[j]))
    return float(mi)


def _histogram_256(data: np.ndarray):
    counts, edges = np.histogram(data, bins=256, range=(float(data.min()), float(data.max())))
    return counts.astype(np.float64), edges


def sweep_otsu(data: np.ndarray) -> float:
    """Exhaustive threshold sweep maximizing between-class variance;
    first maximizer wins, upper bin edge returned. Sums use math.fsum so
    the criterion is exactly flat across empty-bin plateaus."""
    counts, edges = _histogram_256(data)
    centers = (edges[:-1] + edges[1:]) / 2.0
    n = math.fsum(counts)
    best, best_t = -np.inf, None
    for t in range(256):
        n0 = math.fsum(counts[: t + 1])
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = math.fsum(counts[: t + 1] * centers[: t + 1]) / n0
        mu1 = math.fsum(counts[t + 1 :] * centers[t + 1 :]) / n1
        crit = (n0 / n) * (n1 / n) * (mu0 - mu1) ** 2
        if crit > best:
            best, best_t = crit, t
    return float(edges[best_t + 1])


def sweep_yen(data: np.ndarray) -> float:
    """Exhaustive sweep of Yen's entropic correlation criterion, with
    exactly-summed class masses."""
    counts, edges = _histogram_256(data)
    p = counts / counts.sum()
    best, best_t = -np.inf, None
    for t in range(256):
        p1 = math.fsum(p[: t + 1])
        g0 = math.fsum(p[: t + 1] ** 2)
        g1 = math.fsum(p[t + 1 :] ** 2)
        if g0 <= 0 or g1 <= 0 or p1 <= 0 or p1 >= 1:
            continue
        crit = np.log((p1 * (1.0 - p1)) ** 2 / (g0 * g1))
        if crit > best:
            best, best_t = crit, t
    return float(edges[best_t + 1])


def brute_force_peaks(data: np.ndarray, k: int, window: int) -> np.ndarray:
    """Exhaustive local-maxima scan: voxel-by-voxel window comparison,
    sorted by (-value, flat index). Returns (k, 3) voxel indices."""
    half = window // 2
    d, h, w = data.shape
    peaks = []
    for i in range(d):
        for j in range(h):
            for l in range(w):
                win = data[
                    max(i - half, 0) : i + half + 1,
                    max(j - half, 0) : j + half + 1,
                    max(l - half, 0) : l + half + 1,
                ]
                if data[i, j, l] == win.max():
                    peaks.append((i, j, l))
    peaks.sort(key=lambda p: (-data[p], p))
    return np.array(peaks[:k], dtype=np.float64)


def brute_force_prm_counts(warped: np.ndarray, fixed: np.ndarray, mask: np.ndarray, delta: float):
    """Per-voxel counting loop for the PRM fractions, zero denominators
    assigned to the stable bin."""
    dec = sta = inc = n = 0
    for idx in np.ndindex(warped.shape):
        if mask[idx] <= 0:
            continue
        n += 1
        wv = warped[idx]
        if wv == 0.0:
            sta += 1
            continue
        m = (wv - fixed[idx]) / wv
        if m > delta:
            dec += 1
        elif m < -delta:
            inc += 1
        else:
            sta += 1
    return dec / n, sta / n, inc / n


def scipy_warp(vol: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Trilinear pull-back warp via scipy.ndimage.map_coordinates.

    grid-constant padding matches the implementation's zero-padding
    convention (border samples interpolate into zeros).
    """
    shape = vol.shape
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    coords = [g + d for g, d in zip(grid, np.asarray(disp, dtype=np.float64))]
    return map_coordinates(np.asarray(vol, dtype=np.float64), coords, order=1, mode="grid-constant", cval=0.0)


def central_diff_param_grad(loss_fn, param: torch.Tensor, index: tuple, eps: float = 1e-5) -> float:
    """Central finite difference of a scalar loss w.r.t. one parameter
    entry (the parameter is restored afterwards)."""
    with torch.no_grad():
        original = param[index].item()
        param[index] = original + eps
        up = float(loss_fn())
        param[index] = original - eps
        down = float(loss_fn())
        param[index] = original
    return (up - down) / (2.0 * eps)


def check_param_gradients(loss_fn, parameters, n_samples: int = 10, eps: float = 1e-6, seed: int = 0, atol: float = 1e-6):
    """Compare autograd gradients against central differences on
    n_samples randomly chosen parameter entries; returns the max
    relative error.

    Entries are sampled among FD-resolvable components (|grad| at least
    1e-4 of the largest gradient): below that, the fp64 difference
    quotient is dominated by roundoff of the loss reduction and cannot
    measure agreement at any epsilon. A small eps keeps the bias from
    piecewise-linear kinks (L1 terms, LeakyReLU) inside the window
    negligible; the denominator floor `atol` covers exact-zero
    gradients.
    """
    rng = np.random.default_rng(seed)
    params = [p for p in parameters if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    gmax = max(float(p.grad.abs().max()) for p in params if p.grad is not None)
    floor = 1e-4 * gmax
    worst = 0.0
    sampled = 0
    attempts = 0
    while sampled < n_samples and attempts < 50 * n_samples:
        attempts += 1
        p = params[int(rng.integers(len(params)))]
        if p.grad is None:
            continue
        index = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[index])
        if abs(analytic) < floor:
            continue
        # two window sizes: a kink inside one window biases that
        # quotient, while a genuinely wrong gradient fails at both
        best = np.inf
        for e in (eps, eps / 10.0):
            numeric = central_diff_param_grad(loss_fn, p, index, e)
            denom = max(abs(analytic), abs(numeric), atol)
            best = min(best, abs(analytic - numeric) / denom)
        worst = max(worst, best)
        sampled += 1
    if sampled < n_samples:
        raise RuntimeError(f"could only sample {sampled} resolvable gradient entries")
    return worst


def smooth_random_field(shape, amplitude: float = 2.0, sigma: float = 6.0, seed: int = 0) -> np.ndarray:
    """Bandlimited random displacement field for oracle comparisons."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    disp = np.stack([gaussian_filter(rng.normal(size=shape), sigma) for _ in range(3)])
    peak = np.sqrt((disp**2).sum(axis=0)).max()
    if peak > 0:
        disp *= amplitude / peak
    return disp
