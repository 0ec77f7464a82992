"""Run-directory plumbing shared by the command line, demos and tests.

A run directory holds ``base.mdl``, ``train.npz``, ``test.npz``, a ``pools/``
folder with one sub-directory per pool, and CSV reports with JSON manifests.
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np

from morphence import data as data_mod
from morphence import nn
from morphence.data import Dataset
from morphence.poolgen import PoolConfig, StudentPool, generate_pool, save_pool

BASE_DEFAULTS = {
    "dataset": "digits",
    "test_fraction": 0.25,
    "split_seed": 0,
    "hidden": [64],
    "activation": "relu",
    "lr": 0.1,
    "batch_size": 32,
    "epochs": 100,
    "seed": 0,
}


def resolve_dataset(spec: str, seed: int = 0) -> Dataset:
    """``digits``, ``blobs``, ``idx:<images>,<labels>`` or ``csv:<path>``."""
    if spec == "digits":
        return data_mod.load_digits()
    if spec == "blobs":
        return data_mod.gen_blobs(200, 4, 0.05, seed=seed)
    kind, _, rest = spec.partition(":")
    if kind == "idx":
        images, labels = rest.split(",")
        return data_mod.load_idx(images, labels)
    if kind == "csv":
        return data_mod.load_csv(rest)
    raise ValueError(f"unknown dataset {spec!r}")


@dataclass
class DeskSetup:
    base: nn.Model
    train: Dataset
    test: Dataset
    base_accuracy: float


def train_base(cfg: dict | None = None) -> DeskSetup:
    cfg = {**BASE_DEFAULTS, **(cfg or {})}
    full = resolve_dataset(cfg["dataset"], cfg["seed"])
    train, test = full.split(cfg["test_fraction"], seed=cfg["split_seed"])
    sizes = [full.dim, *cfg["hidden"], full.num_classes]
    model = nn.init_model(sizes, cfg["activation"], seed=cfg["seed"])
    model = nn.train(model, train, cfg["lr"], cfg["batch_size"], cfg["epochs"], cfg["seed"])
    return DeskSetup(model, train, test, nn.accuracy(model, test))


def save_setup(setup: DeskSetup, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    nn.save_model(setup.base, run_dir / "base.mdl")
    data_mod.save_dataset(setup.train, run_dir / "train.npz")
    data_mod.save_dataset(setup.test, run_dir / "test.npz")
    return run_dir


def load_setup(run_dir) -> DeskSetup:
    run_dir = Path(run_dir)
    base = nn.load_model(run_dir / "base.mdl")
    train, _ = data_mod.load_dataset(run_dir / "train.npz")
    test, _ = data_mod.load_dataset(run_dir / "test.npz")
    return DeskSetup(base, train, test, nn.accuracy(base, test))


def pool_path(pool_dir, pool_id: int) -> Path:
    return Path(pool_dir) / f"pool_{pool_id:04d}"


def generate_pools(setup: DeskSetup, cfg: PoolConfig, count: int, first_id: int = 1, pool_dir=None) -> list[StudentPool]:
    pools = []
    for pid in range(first_id, first_id + count):
        pool = generate_pool(setup.base, cfg, setup.train, setup.test, pool_id=pid)
        if pool_dir is not None:
            save_pool(pool, pool_path(pool_dir, pid))
        pools.append(pool)
    return pools


def write_manifest(path, command: str, config: dict, outputs: list[str], extra: dict | None = None) -> Path:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    doc = {
        "command": command,
        "config": config,
        "outputs": outputs,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "package_version": version,
        "python": platform.python_version(),
        "numpy": np.__version__,
        **(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, default=str))
    return path
