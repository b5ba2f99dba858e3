"""Training-loop contracts: smoke runs, checkpoints and logs, the lr=0
no-op property, and stage ordering."""
import copy
from dataclasses import replace

import numpy as np
import pytest
import torch

from longreg.cprn import CprnModel
from longreg.kna import KnaModel
from longreg.kns import KnsModel
from longreg.losses import LossWeights
from longreg.phantom import PhantomConfig, generate_pair
from longreg.training import load_checkpoint, save_checkpoint, train_cprn, train_kna, train_kns

SMOKE_SHAPE = (32, 32, 32)


@pytest.fixture(scope="module")
def smoke_pairs():
    cfg = PhantomConfig(shape=SMOKE_SHAPE, tumor_radius=(2.5, 3.5), num_landmarks=8, vessel_count=2)
    return [generate_pair(replace(cfg, seed=s, shrink=0.5)) for s in (0, 1)]


def params_equal(a, b):
    return all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


class TestTrainKns:
    def test_smoke_run_emits_checkpoint_and_log(self, smoke_pairs, tmp_path):
        model = KnsModel(k_s=8, base_channels=4)
        train_kns(
            model, smoke_pairs, epochs=1, lr=1e-4,
            log_path=tmp_path / "loss.csv", ckpt_path=tmp_path / "kns.pt",
        )
        assert model.trained
        assert (tmp_path / "kns.pt").exists()
        lines = (tmp_path / "loss.csv").read_text().strip().splitlines()
        assert lines[0].startswith("epoch")
        assert len(lines) == 2

    def test_lr_zero_leaves_parameters_unchanged(self, smoke_pairs):
        model = KnsModel(k_s=8, base_channels=4)
        before = copy.deepcopy(model)
        train_kns(model, smoke_pairs, epochs=1, lr=0.0)
        assert params_equal(model, before)

    def test_checkpoint_roundtrip(self, smoke_pairs, tmp_path):
        model = KnsModel(k_s=8, base_channels=4)
        train_kns(model, smoke_pairs, epochs=1, lr=1e-4, ckpt_path=tmp_path / "kns.pt")
        fresh = KnsModel(k_s=8, base_channels=4)
        load_checkpoint(tmp_path / "kns.pt", fresh, "kns")
        assert params_equal(model, fresh)
        assert fresh.trained

    def test_checkpoint_kind_mismatch_rejected(self, tmp_path):
        model = KnsModel(k_s=8, base_channels=4)
        save_checkpoint(tmp_path / "x.pt", model, "kns")
        with pytest.raises(ValueError, match="kind"):
            load_checkpoint(tmp_path / "x.pt", KnsModel(k_s=8, base_channels=4), "kna")


class TestTrainCprn:
    def test_base_smoke(self, smoke_pairs, tmp_path):
        model = CprnModel(channels=4)
        train_cprn(
            model, smoke_pairs, LossWeights(), stage="base", epochs=1, lr=1e-4,
            val_pairs=smoke_pairs[:1], log_path=tmp_path / "loss.csv", ckpt_path=tmp_path / "cprn.pt",
        )
        assert model.trained
        header, row = (tmp_path / "loss.csv").read_text().strip().splitlines()
        assert "val_d_avg" in header
        assert row.count(",") == header.count(",")

    def test_lr_zero_no_op(self, smoke_pairs):
        model = CprnModel(channels=4)
        before = copy.deepcopy(model)
        train_cprn(model, smoke_pairs, LossWeights(), stage="base", epochs=1, lr=0.0)
        assert params_equal(model, before)

    def test_finetune_requires_trained_keypoint_networks(self, smoke_pairs):
        model = CprnModel(channels=4)
        with pytest.raises(ValueError, match="KN-S"):
            train_cprn(model, smoke_pairs, LossWeights(), stage="finetune", epochs=1)
        kns = KnsModel(k_s=8, base_channels=4)
        kns.mark_trained()
        with pytest.raises(ValueError, match="KN-A"):
            train_cprn(model, smoke_pairs, LossWeights(), stage="finetune", epochs=1, kns=kns)

    def test_finetune_smoke(self, smoke_pairs, tmp_path):
        kns = KnsModel(k_s=8, base_channels=4)
        kna = KnaModel(k_a=1, base_channels=4)
        model = CprnModel(channels=4)
        train_kns(kns, smoke_pairs, epochs=1, lr=1e-4)
        train_cprn(model, smoke_pairs, LossWeights(), stage="base", epochs=1, lr=1e-4)
        train_kna(kna, smoke_pairs, model, epochs=1, lr=1e-4)
        train_cprn(
            model, smoke_pairs, LossWeights(), stage="finetune", epochs=1, lr=1e-4,
            kns=kns, kna=kna, ckpt_path=tmp_path / "ft.pt",
        )
        assert (tmp_path / "ft.pt").exists()

    def test_invalid_stage_rejected(self, smoke_pairs):
        with pytest.raises(ValueError, match="stage"):
            train_cprn(CprnModel(channels=4), smoke_pairs, LossWeights(), stage="warmup", epochs=1)


class TestTrainKna:
    def test_smoke_and_lr_zero(self, smoke_pairs, tmp_path):
        phi0 = CprnModel(channels=4)
        model = KnaModel(k_a=1, base_channels=4)
        before = copy.deepcopy(model)
        train_kna(model, smoke_pairs, phi0, epochs=1, lr=0.0, ckpt_path=tmp_path / "kna.pt")
        assert params_equal(model, before)
        assert (tmp_path / "kna.pt").exists()
        assert model.trained
