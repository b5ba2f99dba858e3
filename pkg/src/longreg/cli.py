"""Command-line interface.

Subcommands: generate, train-kns, train-cprn, train-kna, pipeline,
register, evaluate, prm, report. A TOML config file drives everything;
repeatable --set section.key=value flags override individual fields.
Exits 0 on success, nonzero with an `error: ...` line otherwise.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import RunConfig
from .cprn import register as run_register
from .dataset import generate_dataset, load_pair, read_manifest
from .metrics import evaluate_pair
from .pipeline import load_trained, run_pipeline, run_stage, write_reports
from .prm import prm_feature_vector


def _load_config(config_path: str | None, overrides: tuple[str, ...]) -> RunConfig:
    config = RunConfig.from_toml(config_path) if config_path else RunConfig()
    if overrides:
        config = config.with_overrides(list(overrides))
    return config


def _fail(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


config_option = click.option("--config", "-c", "config_path", type=click.Path(exists=True), default=None, help="TOML run config")
set_option = click.option("--set", "-s", "overrides", multiple=True, help="override config fields: section.key=value")


@click.group()
def main():
    """Longitudinal phantom registration pipeline."""


@main.command()
@config_option
@set_option
@click.option("--force", is_flag=True, help="overwrite a non-empty data directory")
def generate(config_path, overrides, force):
    """Generate the phantom dataset and split manifest."""
    config = _load_config(config_path, overrides)
    try:
        manifest = generate_dataset(config, force=force)
    except (FileExistsError, ValueError) as exc:
        _fail(str(exc))
    click.echo(f"wrote {len(manifest['pairs'])} pairs under {config.data_root} (manifest {manifest['manifest_hash']})")


def _run_stage_cmd(config_path, overrides, stage):
    config = _load_config(config_path, overrides)
    try:
        run_stage(config, stage)
    except (FileNotFoundError, ValueError, FloatingPointError) as exc:
        _fail(str(exc))
    click.echo(f"stage {stage} complete")


@main.command("train-kns")
@config_option
@set_option
def train_kns_cmd(config_path, overrides):
    """Train the structural keypoint network."""
    _run_stage_cmd(config_path, overrides, "kns")


@main.command("train-kna")
@config_option
@set_option
def train_kna_cmd(config_path, overrides):
    """Train the abnormal keypoint network (needs the base CPRN)."""
    _run_stage_cmd(config_path, overrides, "kna")


@main.command("train-cprn")
@config_option
@set_option
@click.option("--stage", type=click.Choice(["base", "finetune"]), default="base")
def train_cprn_cmd(config_path, overrides, stage):
    """Train the registration network (base or finetune stage)."""
    _run_stage_cmd(config_path, overrides, "cprn_base" if stage == "base" else "cprn_finetune")


@main.command()
@config_option
@set_option
@click.option("--resume", is_flag=True, help="skip stages whose done marker matches the config")
@click.option("--force", is_flag=True, help="overwrite existing dataset output")
def pipeline(config_path, overrides, resume, force):
    """Run all stages: dataset, KN-S, CPRN base, KN-A, finetune, report."""
    config = _load_config(config_path, overrides)
    try:
        run_pipeline(config, resume=resume, force=force, log=click.echo)
    except (FileNotFoundError, FileExistsError, ValueError, FloatingPointError) as exc:
        _fail(str(exc))


@main.command("register")
@config_option
@set_option
@click.option("--pair-id", required=True)
@click.option("--lambda-g", type=float, default=None, help="regularization weight (default: config eval value)")
@click.option("--model", "which", type=click.Choice(["cprn_finetune", "cprn_base"]), default="cprn_finetune")
def register_cmd(config_path, overrides, pair_id, lambda_g, which):
    """Register one pair and write the warped volumes, field and report."""
    config = _load_config(config_path, overrides)
    lambda_g = config.weights.lambda_g_eval if lambda_g is None else lambda_g
    try:
        pair = load_pair(config.data_root, pair_id)
        model = load_trained(config, which)
        result = run_register(model, pair, lambda_g=lambda_g)
    except (KeyError, FileNotFoundError, RuntimeError) as exc:
        _fail(str(exc))
    out = config.report_dir / f"register_{pair_id}_lg{lambda_g:g}"
    out.mkdir(parents=True, exist_ok=True)
    result.field.save(out / "field.nii.gz", spacing=pair.spacing)
    from .nifti import write_nifti

    write_nifti(out / "warped_t1w.nii.gz", result.warped_t1w.data, pair.spacing)
    write_nifti(out / "warped_washin.nii.gz", result.warped_washin.data, pair.spacing)
    write_nifti(out / "warped_tumor.nii.gz", result.warped_tumor_mask.data, pair.spacing)
    report = {"pair_id": pair_id, "config_hash": config.config_hash(), **result.report.to_dict()}
    (out / "report.json").write_text(json.dumps(report, indent=1))
    click.echo(json.dumps({k: v for k, v in report.items() if k != "per_landmark_mm"}))


@main.command()
@config_option
@set_option
@click.option("--pair-id", required=True)
@click.option("--rigid", is_flag=True, help="evaluate the zero-field baseline instead of the model")
@click.option("--lambda-g", type=float, default=None)
def evaluate(config_path, overrides, pair_id, rigid, lambda_g):
    """Metric report (DSC, d_avg, delta-V, NGJD) for one pair."""
    config = _load_config(config_path, overrides)
    try:
        pair = load_pair(config.data_root, pair_id)
        if rigid:
            report = evaluate_pair(pair, None)
        else:
            model = load_trained(config, "cprn_finetune")
            lg = config.weights.lambda_g_eval if lambda_g is None else lambda_g
            report = run_register(model, pair, lambda_g=lg).report
    except (KeyError, FileNotFoundError, RuntimeError) as exc:
        _fail(str(exc))
    config.report_dir.mkdir(parents=True, exist_ok=True)
    payload = {"pair_id": pair_id, "config_hash": config.config_hash(), **report.to_dict()}
    path = config.report_dir / f"evaluate_{pair_id}{'_rigid' if rigid else ''}.json"
    path.write_text(json.dumps(payload, indent=1))
    click.echo(json.dumps({k: v for k, v in payload.items() if k != "per_landmark_mm"}))


@main.command()
@config_option
@set_option
@click.option("--pair-id", required=True)
@click.option("--interval-days", type=float, default=90.0)
@click.option("--rigid", is_flag=True, help="use the zero field instead of the model")
@click.option("--delta", type=float, default=0.1)
def prm(config_path, overrides, pair_id, interval_days, rigid, delta):
    """Local/global PRM feature vector for one pair."""
    config = _load_config(config_path, overrides)
    try:
        pair = load_pair(config.data_root, pair_id)
        if rigid:
            field = None
        else:
            model = load_trained(config, "cprn_finetune")
            field = run_register(model, pair, lambda_g=config.weights.lambda_g_eval).field
        vector = prm_feature_vector(pair, field, interval_days, delta=delta)
    except (KeyError, FileNotFoundError, RuntimeError, ValueError) as exc:
        _fail(str(exc))
    config.report_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "pair_id": pair_id,
        "config_hash": config.config_hash(),
        "columns": [
            "local_decreased", "local_stable", "local_increased",
            "global_decreased", "global_stable", "global_increased", "interval_days",
        ],
        "vector": vector,
    }
    (config.report_dir / f"prm_{pair_id}.json").write_text(json.dumps(payload, indent=1))
    click.echo(json.dumps(payload))


@main.command()
@config_option
@set_option
def report(config_path, overrides):
    """Aggregate test-split metrics and the lambda_g sweep table."""
    config = _load_config(config_path, overrides)
    try:
        summary = write_reports(config)
    except (FileNotFoundError, RuntimeError) as exc:
        _fail(str(exc))
    click.echo(json.dumps({k: v for k, v in summary.items() if k != "lambda_sweep"}))


if __name__ == "__main__":
    main()
