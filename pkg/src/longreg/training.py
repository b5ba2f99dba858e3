"""Training loops for the three networks, with checkpointing and CSV
loss logs.

All stages use Adam at the configured learning rate with batch size 1;
the conditional registration network samples its regularization weight
uniformly from the training range at every step and is validated at the
evaluation weight.
"""
from __future__ import annotations

import copy
import csv
import random
from pathlib import Path

import numpy as np
import torch

from .cprn import CprnModel, baseline_warp_field
from .grid_field import invert_field, warp_tensor
from .keypoints import render_heatmaps_tensor
from .kna import KnaModel, kna_detect, kna_loss
from .kns import KnsModel, kns_extract, kns_loss
from .losses import LossWeights, SimilarityPyramid, gaussian_blur3d, loss_total
from .metrics import delta_v, landmark_error
from .perceptual import FeaturePyramid3d


class LossLog:
    """Per-epoch CSV log; one row per epoch with named columns."""

    def __init__(self, path: str | Path, columns: list[str]):
        self.path = Path(path)
        self.columns = ["epoch"] + columns
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(self.columns)

    def append(self, epoch: int, values: dict[str, float]):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch] + [values.get(c, "") for c in self.columns[1:]])


def save_checkpoint(path: str | Path, model: torch.nn.Module, kind: str, config_hash: str = "", extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"kind": kind, "config_hash": config_hash, "state_dict": model.state_dict(), "extra": extra or {}},
        path,
    )


def load_checkpoint(path: str | Path, model: torch.nn.Module, kind: str) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("kind") != kind:
        raise ValueError(f"{path}: checkpoint kind {payload.get('kind')!r} does not match {kind!r}")
    model.load_state_dict(payload["state_dict"])
    return payload


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, pair_id: str, detail: str = ""):
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"{stage}: non-finite loss at epoch {epoch}, pair {pair_id}: {float(loss.detach())} {detail}"
        )


def train_kns(
    model: KnsModel,
    pairs: list,
    epochs: int,
    lr: float = 1e-4,
    backbone: FeaturePyramid3d | None = None,
    log_path: str | Path | None = None,
    ckpt_path: str | Path | None = None,
    config_hash: str = "",
    seed: int = 0,
) -> KnsModel:
    """Optimize the cross-reconstruction loss over the T1w pairs."""
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    order = list(range(len(pairs)))
    shuffler = random.Random(seed)
    log = LossLog(log_path, ["loss"]) if log_path else None
    tensors = [(p.moving.t1w.to_tensor(), p.fixed.t1w.to_tensor()) for p in pairs]
    for epoch in range(epochs):
        shuffler.shuffle(order)
        total = 0.0
        for idx in order:
            t_m, t_f = tensors[idx]
            opt.zero_grad()
            loss = kns_loss(model, t_m, t_f, backbone)
            _check_finite(loss, "train_kns", epoch, str(idx))
            loss.backward()
            opt.step()
            total += float(loss.detach())
        if log:
            log.append(epoch, {"loss": total / max(len(pairs), 1)})
        if ckpt_path:
            save_checkpoint(ckpt_path, model, "kns", config_hash, {"epoch": epoch})
    model.mark_trained()
    if ckpt_path:
        save_checkpoint(ckpt_path, model, "kns", config_hash, {"epoch": epochs - 1})
    return model


def train_kna(
    model: KnaModel,
    pairs: list,
    phi0_model: CprnModel,
    epochs: int,
    lr: float = 1e-4,
    lambda_g: float = 5.0,
    backbone: FeaturePyramid3d | None = None,
    log_path: str | Path | None = None,
    ckpt_path: str | Path | None = None,
    config_hash: str = "",
    seed: int = 0,
) -> KnaModel:
    """Optimize the reconstruction + AFM losses over wash-in pairs; the
    frozen phi0 model pre-warps each moving wash-in once (cached)."""
    phi0_model.eval()
    cached = []
    for p in pairs:
        phi0 = baseline_warp_field(phi0_model, p, lambda_g=lambda_g)
        i_w = warp_tensor(p.moving.washin.to_tensor(), phi0.to_tensor())
        cached.append((i_w, p.fixed.washin.to_tensor()))
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    order = list(range(len(pairs)))
    shuffler = random.Random(seed)
    log = LossLog(log_path, ["loss"]) if log_path else None
    for epoch in range(epochs):
        shuffler.shuffle(order)
        total = 0.0
        for idx in order:
            i_w, i_f = cached[idx]
            opt.zero_grad()
            loss = kna_loss(model, i_w, i_f, backbone)
            _check_finite(loss, "train_kna", epoch, str(idx))
            loss.backward()
            opt.step()
            total += float(loss.detach())
        if log:
            log.append(epoch, {"loss": total / max(len(pairs), 1)})
        if ckpt_path:
            save_checkpoint(ckpt_path, model, "kna", config_hash, {"epoch": epoch})
    model.mark_trained()
    if ckpt_path:
        save_checkpoint(ckpt_path, model, "kna", config_hash, {"epoch": epochs - 1})
    return model


class _CprnPairCache:
    """Per-pair tensors reused every step: the similarity pyramid with
    pre-smoothed breast masks, and (for the finetune stage) keypoint
    heatmaps rendered on the mid-resolution grid."""

    def __init__(self, pair, weights: LossWeights, kns: KnsModel | None, kna: KnaModel | None, phi0_model: CprnModel | None):
        self.t_m = pair.moving.t1w.to_tensor()
        self.i_m = pair.moving.washin.to_tensor()
        self.t_f = pair.fixed.t1w.to_tensor()
        self.i_f = pair.fixed.washin.to_tensor()
        s_m = gaussian_blur3d(pair.moving.breast_mask.to_tensor(), 7, 1.0)
        s_f = gaussian_blur3d(pair.fixed.breast_mask.to_tensor(), 7, 1.0)
        self.pyramid = SimilarityPyramid(self.t_m, self.t_f, s_m, s_f)
        self.psi_s_m = self.psi_s_f = self.psi_a_m = None
        if kns is not None:
            mid = tuple(s // 2 for s in pair.shape)
            _, mu_m = kns_extract(kns, pair.moving.t1w)
            _, mu_f = kns_extract(kns, pair.fixed.t1w)
            self.psi_s_m = render_heatmaps_tensor(torch.as_tensor(mu_m.coords, dtype=torch.float32), mid, weights.sigma_sk)
            self.psi_s_f = render_heatmaps_tensor(torch.as_tensor(mu_f.coords, dtype=torch.float32), mid, weights.sigma_sk)
            phi0 = baseline_warp_field(phi0_model, pair, lambda_g=weights.lambda_g_eval)
            phi0_inv = invert_field(phi0).field
            i_f_inv = warp_tensor(self.i_f, phi0_inv.to_tensor())
            mu_a_m, _ = kna_detect(kna, self.i_m, i_f_inv)
            self.psi_a_m = render_heatmaps_tensor(torch.as_tensor(mu_a_m.coords, dtype=torch.float32), mid, weights.sigma_vp)


def train_cprn(
    model: CprnModel,
    pairs: list,
    weights: LossWeights,
    stage: str = "base",
    epochs: int = 30,
    lr: float = 1e-4,
    kns: KnsModel | None = None,
    kna: KnaModel | None = None,
    val_pairs: list = (),
    log_path: str | Path | None = None,
    ckpt_path: str | Path | None = None,
    config_hash: str = "",
    seed: int = 0,
) -> CprnModel:
    """Optimize the pyramid registration losses.

    stage='base' uses similarity + smoothness only; stage='finetune'
    requires trained keypoint networks and adds the structural-keypoint
    and volume-preserving terms. The regularization weight is sampled
    uniformly from the training range at each step.
    """
    if stage not in ("base", "finetune"):
        raise ValueError(f"stage must be 'base' or 'finetune', got {stage!r}")
    finetune = stage == "finetune"
    if finetune:
        if kns is None or not kns.trained:
            raise ValueError("finetune stage requires a trained KN-S model")
        if kna is None or not kna.trained:
            raise ValueError("finetune stage requires a trained KN-A model")
        phi0_model = copy.deepcopy(model)
        phi0_model.eval()
    else:
        kns = kna = phi0_model = None

    cache = [_CprnPairCache(p, weights, kns, kna, phi0_model) for p in pairs]
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    order = list(range(len(pairs)))
    shuffler = random.Random(seed + 1)
    columns = ["loss", "val_d_avg", "val_delta_v"]
    log = LossLog(log_path, columns) if log_path else None
    lo, hi = weights.lambda_g_train_range

    for epoch in range(epochs):
        shuffler.shuffle(order)
        total = 0.0
        for idx in order:
            c = cache[idx]
            lambda_g = float(rng.uniform(lo, hi))
            opt.zero_grad()
            fields = model(c.t_m, c.i_m, c.t_f, c.i_f, lambda_g)
            loss, _ = loss_total(
                fields, c.pyramid, c.psi_s_m, c.psi_s_f, c.psi_a_m, weights, lambda_g,
                include_keypoint_terms=finetune,
            )
            _check_finite(loss, f"train_cprn[{stage}]", epoch, str(idx))
            loss.backward()
            opt.step()
            total += float(loss.detach())
        row = {"loss": total / max(len(pairs), 1)}
        if val_pairs:
            d_avgs, dvs = [], []
            for p in val_pairs:
                field = baseline_warp_field(model, p, lambda_g=weights.lambda_g_eval)
                d, _ = landmark_error(p.landmarks_moving, p.landmarks_fixed, field, p.spacing)
                d_avgs.append(d)
                dvs.append(delta_v(p.moving.tumor_mask, field))
            model.train()
            row["val_d_avg"] = float(np.mean(d_avgs))
            row["val_delta_v"] = float(np.mean(dvs))
        if log:
            log.append(epoch, row)
        if ckpt_path:
            save_checkpoint(ckpt_path, model, f"cprn_{stage}", config_hash, {"epoch": epoch})
    model.mark_trained()
    if ckpt_path:
        save_checkpoint(ckpt_path, model, f"cprn_{stage}", config_hash, {"epoch": epochs - 1})
    return model
