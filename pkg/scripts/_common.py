"""Helpers shared by the experiment scripts: one pretrained reference, many seeded runs."""
from __future__ import annotations

import shutil
from dataclasses import replace
from pathlib import Path

from arcopo.cli import ExperimentConfig, cmd_pretrain, load_config


def base_parser(description: str):
    import argparse

    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", default=None, help="config file; defaults are used when omitted")
    p.add_argument("--out", default="runs/experiments", help="root output directory")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    return p


def reference_dir(cfg: ExperimentConfig, root: Path) -> Path:
    """Pretrain once (seed 0 unless the config says otherwise) and reuse it."""
    ref = root / "reference"
    if not (ref / "reference.ckpt").exists():
        ref.mkdir(parents=True, exist_ok=True)
        cmd_pretrain(cfg, ref)
    return ref


def seed_dir(cfg: ExperimentConfig, root: Path, seed: int) -> tuple[ExperimentConfig, Path]:
    out = root / f"seed{seed}"
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "reference.ckpt"
    if not ckpt.exists():
        shutil.copy(reference_dir(cfg, root) / "reference.ckpt", ckpt)
    return replace(cfg, seed=seed), out


def setup(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    return cfg, root
