"""Staged pipeline: dataset -> KN-S -> CPRN (base) -> KN-A -> CPRN
(finetune) -> report. Stages are resumable; each leaves a done-marker
carrying the config hash, and later stages refuse to run when their
upstream artifacts are missing."""
from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .cprn import CprnModel, register
from .dataset import generate_dataset, load_split
from .grid_field import DeformationField, grad_penalty
from .kna import KnaModel
from .kns import KnsModel
from .metrics import evaluate_pair
from .perceptual import make_backbone
from .training import load_checkpoint, save_checkpoint, train_cprn, train_kna, train_kns

STAGES = ("dataset", "kns", "cprn_base", "kna", "cprn_finetune", "report")


def _marker_path(config: RunConfig, stage: str) -> Path:
    return config.checkpoint_dir / f"{stage}.done.json"


def _stage_done(config: RunConfig, stage: str) -> bool:
    path = _marker_path(config, stage)
    if not path.exists():
        return False
    marker = json.loads(path.read_text())
    return marker.get("config_hash") == config.config_hash()


def _mark_done(config: RunConfig, stage: str):
    path = _marker_path(config, stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"config_hash": config.config_hash(), "finished_at": time.time()}))


def _require(config: RunConfig, stage: str, path: Path):
    if not path.exists():
        raise FileNotFoundError(
            f"stage '{stage}' requires {path.name} from an earlier stage; run that stage first"
        )


def build_models(config: RunConfig) -> tuple[KnsModel, KnaModel, CprnModel]:
    t = config.train
    torch.manual_seed(config.seed)
    kns = KnsModel(
        k_s=t.k_structural,
        base_channels=t.kns_channels,
        sigma=t.sigma_kns,
        temperature=t.soft_argmax_temperature,
    )
    kna = KnaModel(k_a=t.k_abnormal, base_channels=t.kna_channels, sigma=t.sigma_kna)
    cprn = CprnModel(channels=t.cprn_channels, lambda_g_max=config.weights.lambda_g_train_range[1])
    return kns, kna, cprn


def checkpoint_paths(config: RunConfig) -> dict[str, Path]:
    ck = config.checkpoint_dir
    return {
        "kns": ck / "kns.pt",
        "cprn_base": ck / "cprn_base.pt",
        "kna": ck / "kna.pt",
        "cprn_finetune": ck / "cprn_finetune.pt",
    }


def load_trained(config: RunConfig, which: str):
    """Load one trained model ('kns', 'kna', 'cprn_base', 'cprn_finetune')."""
    kns, kna, cprn = build_models(config)
    paths = checkpoint_paths(config)
    _require(config, which, paths[which])
    if which == "kns":
        load_checkpoint(paths[which], kns, "kns")
        return kns
    if which == "kna":
        load_checkpoint(paths[which], kna, "kna")
        return kna
    kind = "cprn_base" if which == "cprn_base" else "cprn_finetune"
    load_checkpoint(paths[which], cprn, kind)
    return cprn


def run_stage(config: RunConfig, stage: str, force: bool = False) -> None:
    """Run one pipeline stage (unconditionally)."""
    paths = checkpoint_paths(config)
    hash_ = config.config_hash()
    t = config.train
    backbone = make_backbone(t.perceptual_backbone)

    if stage == "dataset":
        generate_dataset(config, force=force)
        return

    if stage == "report":
        _require(config, stage, paths["cprn_finetune"])
        write_reports(config)
        return

    train_pairs = [p for _, p in load_split(config.data_root, "train")]
    val_pairs = [p for _, p in load_split(config.data_root, "val")]
    logs = config.report_dir / "logs"

    if stage == "kns":
        kns, _, _ = build_models(config)
        train_kns(
            kns, train_pairs, epochs=t.epochs_kns, lr=t.lr, backbone=backbone,
            log_path=logs / "kns_loss.csv", ckpt_path=paths["kns"], config_hash=hash_, seed=config.seed,
        )
    elif stage == "cprn_base":
        _, _, cprn = build_models(config)
        train_cprn(
            cprn, train_pairs, config.weights, stage="base", epochs=t.epochs_cprn_base, lr=t.lr,
            val_pairs=val_pairs, log_path=logs / "cprn_base_loss.csv",
            ckpt_path=paths["cprn_base"], config_hash=hash_, seed=config.seed,
        )
    elif stage == "kna":
        _require(config, stage, paths["cprn_base"])
        phi0_model = load_trained(config, "cprn_base")
        _, kna, _ = build_models(config)
        train_kna(
            kna, train_pairs, phi0_model, epochs=t.epochs_kna, lr=t.lr,
            lambda_g=config.weights.lambda_g_eval, backbone=backbone,
            log_path=logs / "kna_loss.csv", ckpt_path=paths["kna"], config_hash=hash_, seed=config.seed,
        )
    elif stage == "cprn_finetune":
        for upstream in ("kns", "cprn_base", "kna"):
            _require(config, stage, paths[upstream])
        kns = load_trained(config, "kns")
        kna = load_trained(config, "kna")
        cprn = load_trained(config, "cprn_base")
        train_cprn(
            cprn, train_pairs, config.weights, stage="finetune", epochs=t.epochs_cprn_finetune,
            lr=t.lr, kns=kns, kna=kna, val_pairs=val_pairs,
            log_path=logs / "cprn_finetune_loss.csv", ckpt_path=paths["cprn_finetune"],
            config_hash=hash_, seed=config.seed,
        )
    else:
        raise ValueError(f"unknown stage {stage!r}; stages are {STAGES}")


def run_pipeline(config: RunConfig, resume: bool = False, force: bool = False, log=print) -> None:
    """Run all stages in order; with resume=True, stages whose done
    marker matches the config hash are skipped."""
    for stage in STAGES:
        if resume and _stage_done(config, stage):
            log(f"[pipeline] {stage}: up to date, skipped")
            continue
        start = time.time()
        log(f"[pipeline] {stage}: running")
        run_stage(config, stage, force=force or (stage == "dataset" and resume))
        _mark_done(config, stage)
        log(f"[pipeline] {stage}: done in {time.time() - start:.1f}s")


def write_reports(config: RunConfig) -> dict:
    """Evaluate the finetuned model on the test split: per-pair metrics,
    the rigid baseline, and the lambda_g grid-search sweep."""
    config.report_dir.mkdir(parents=True, exist_ok=True)
    model = load_trained(config, "cprn_finetune")
    test = load_split(config.data_root, "test")
    hash_ = config.config_hash()

    rows = []
    for pair_id, pair in test:
        rigid = evaluate_pair(pair, None)
        result = register(model, pair, lambda_g=config.weights.lambda_g_eval)
        rows.append(
            {
                "pair_id": pair_id,
                "rigid_d_avg_mm": rigid.d_avg_mm,
                **{k: v for k, v in result.report.to_dict().items() if k != "per_landmark_mm"},
            }
        )
    with open(config.report_dir / "pairs.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    sweep = []
    for lambda_g in range(11):
        metrics = []
        penalties = []
        for _, pair in test:
            result = register(model, pair, lambda_g=float(lambda_g))
            with torch.no_grad():
                fields = model(
                    pair.moving.t1w.to_tensor(), pair.moving.washin.to_tensor(),
                    pair.fixed.t1w.to_tensor(), pair.fixed.washin.to_tensor(), float(lambda_g),
                )
            penalties.append(grad_penalty(DeformationField.from_tensor(fields["hr"], level="mr")))
            metrics.append(result.report)
        sweep.append(
            {
                "lambda_g": lambda_g,
                "mean_d_avg_mm": float(np.mean([m.d_avg_mm for m in metrics])),
                "mean_delta_v_pct": float(np.mean([m.delta_v_pct for m in metrics])),
                "mean_dsc": float(np.mean([m.dsc for m in metrics])),
                "mean_ngjd_pct": float(np.mean([m.ngjd_pct for m in metrics])),
                "mean_grad_penalty": float(np.mean(penalties)),
            }
        )
    with open(config.report_dir / "lambda_sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(sweep[0].keys()))
        writer.writeheader()
        writer.writerows(sweep)

    summary = {
        "config_hash": hash_,
        "lambda_g_eval": config.weights.lambda_g_eval,
        "n_test": len(test),
        "mean_rigid_d_avg_mm": float(np.mean([r["rigid_d_avg_mm"] for r in rows])),
        "mean_d_avg_mm": float(np.mean([r["d_avg_mm"] for r in rows])),
        "mean_delta_v_pct": float(np.mean([r["delta_v_pct"] for r in rows])),
        "mean_dsc": float(np.mean([r["dsc"] for r in rows])),
        "mean_ngjd_pct": float(np.mean([r["ngjd_pct"] for r in rows])),
        "lambda_sweep": sweep,
    }
    (config.report_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary
