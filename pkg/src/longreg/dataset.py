"""On-disk phantom datasets: generation with a train/val/test manifest,
and loading by split."""
from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .phantom import StudyPair, generate_pair, load_study, save_study

MANIFEST_NAME = "manifest.json"


def _pair_content_hash(pair: StudyPair) -> str:
    h = hashlib.sha256()
    for side in (pair.moving, pair.fixed):
        for name in sorted(side.volumes()):
            h.update(side.volumes()[name].data.tobytes())
    h.update(pair.landmarks_moving.tobytes())
    h.update(pair.landmarks_fixed.tobytes())
    return h.hexdigest()[:16]


def generate_dataset(config: RunConfig, force: bool = False) -> dict:
    """Write N study pairs plus a split manifest under the run's data
    root; deterministic under the run seed. Refuses to overwrite a
    nonempty directory unless forced."""
    root = config.data_root
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"output directory {root} is not empty (use force to overwrite)")
    root.mkdir(parents=True, exist_ok=True)

    n_train, n_val, n_test = config.dataset.counts()
    n = n_train + n_val + n_test
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test

    seed_rng = np.random.default_rng(config.seed)
    pair_seeds = seed_rng.integers(0, 2**31 - 1, size=n)
    shrink_lo, shrink_hi = config.dataset.shrink_range
    shrinks = seed_rng.uniform(shrink_lo, shrink_hi, size=n)

    entries = []
    for i in range(n):
        cfg = replace(config.phantom, seed=int(pair_seeds[i]), shrink=float(shrinks[i]))
        pair = generate_pair(cfg)
        pair_id = f"pair_{i:03d}"
        save_study(root / pair_id, pair)
        entries.append(
            {
                "id": pair_id,
                "split": splits[i],
                "seed": int(pair_seeds[i]),
                "shrink": float(shrinks[i]),
                "response_label": pair.response_label,
                "content_hash": _pair_content_hash(pair),
            }
        )

    manifest = {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "counts": {"train": n_train, "val": n_val, "test": n_test},
        "pairs": entries,
    }
    manifest["manifest_hash"] = hashlib.sha256(
        json.dumps(manifest, sort_keys=True).encode()
    ).hexdigest()[:16]
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    return manifest


def read_manifest(root: Path) -> dict:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}; run the generate stage first")
    return json.loads(path.read_text())


def load_split(root: Path, split: str) -> list[tuple[str, StudyPair]]:
    manifest = read_manifest(root)
    out = []
    for entry in manifest["pairs"]:
        if entry["split"] == split:
            out.append((entry["id"], load_study(Path(root) / entry["id"])))
    return out


def load_pair(root: Path, pair_id: str) -> StudyPair:
    manifest = read_manifest(root)
    known = [e["id"] for e in manifest["pairs"]]
    if pair_id not in known:
        raise KeyError(f"unknown pair id {pair_id!r}; known ids: {', '.join(known)}")
    return load_study(Path(root) / pair_id)
