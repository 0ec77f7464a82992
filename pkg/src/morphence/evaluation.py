"""Metrics and experiment harness: robustness tables, transferability, FRQ, sweeps."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import repeat
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from morphence import nn
from morphence.attacks import AttackSpec, QueryOracle, copycat_extract, spsa_batch, white_box
from morphence.data import Dataset
from morphence.poolgen import GenerationFailure, PoolConfig, StudentPool, generate_pool
from morphence.scheduler import BufferUnderrun, PoolManager, predict_batch
from morphence.server import RemoteError

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = (0.01, 0.03, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6)


class UndefinedMetric(ValueError):
    """The metric's denominator is zero."""


class PartialResults(RuntimeError):
    """The target stopped answering part-way; ``rows`` holds what was measured."""

    def __init__(self, rows: list[dict], cause: BaseException):
        super().__init__(f"target failed after {len(rows)} rows: {cause}")
        self.rows = rows
        self.cause = cause


def labeler(target) -> Callable[[np.ndarray], np.ndarray]:
    """Turn a model, pool, pool manager or label function into ``x -> labels``."""
    if isinstance(target, nn.Model):
        return lambda x: nn.predict(target, x)
    if isinstance(target, StudentPool):
        return lambda x: predict_batch(target, x)[0]
    if isinstance(target, PoolManager):
        return lambda x: target.predict_many(x)[0]
    if hasattr(target, "labels"):
        return target.labels
    if callable(target):
        return target
    raise TypeError(f"cannot classify with {type(target).__name__}")


# -- transferability ----------------------------------------------------------
@dataclass
class TransferMatrix:
    rates: np.ndarray  # (n, n), NaN on the diagonal and where n_adv[i] == 0
    n_adv: np.ndarray  # examples crafted on model i that fool model i
    n_transfer: np.ndarray  # (i, j): of those, how many also fool model j
    provenance: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.n_adv)

    @property
    def average(self) -> float:
        defined = self.rates[~np.isnan(self.rates)]
        if defined.size == 0:
            raise UndefinedMetric("no model was fooled by its own adversarial examples")
        return float(defined.mean())


def avg_transferability(models, adv_sets, true_labels, provenance: dict | None = None):
    """Pairwise transfer rates of adversarial examples and their mean.

    ``adv_sets[i]`` holds examples crafted against ``models[i]``;
    ``true_labels`` is shared by all sets or given per set.  Returns
    ``(TransferMatrix, average)``; pairs whose source model was never fooled
    are left out of the average.
    """
    n = len(models)
    if n < 2:
        raise ValueError("transferability needs at least two models")
    if len(adv_sets) != n:
        raise ValueError("need one adversarial set per model")
    label_sets = true_labels if isinstance(true_labels, (list, tuple)) else [true_labels] * n
    classify = [labeler(m) for m in models]
    n_adv = np.zeros(n, dtype=np.int64)
    n_transfer = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        y = np.asarray(label_sets[i]).reshape(-1)
        fooled = np.stack([np.asarray(c(adv_sets[i])) != y for c in classify])
        n_adv[i] = fooled[i].sum()
        n_transfer[i] = (fooled & fooled[i]).sum(axis=1)
    rates = np.full((n, n), np.nan)
    for i in range(n):
        if n_adv[i]:
            rates[i] = n_transfer[i] / n_adv[i]
            rates[i, i] = np.nan
    matrix = TransferMatrix(rates, n_adv, n_transfer, provenance or {})
    return matrix, matrix.average


def pool_transferability(pool: StudentPool, data: Dataset, spec: AttackSpec):
    """Craft ``spec`` against each student and measure transfer to the others."""
    adv = [white_box(s, data, spec) for s in pool.students]
    return avg_transferability(pool.students, adv, data.y, {"pool_id": pool.pool_id, "attack": spec.to_dict()})


# -- FRQ ----------------------------------------------------------------------
@dataclass
class FrqReport:
    first_accuracy: float
    b: int  # examples misclassified by the first pool
    accuracies: list[float]  # per later pool, on the whole adversarial set
    a: list[int]  # per later pool: members of b it classifies correctly
    newly_fooled: list[int]  # per later pool: examples the first pool got right but it gets wrong
    size: int
    pool_ids: list = field(default_factory=list)

    @property
    def frq(self) -> list[float]:
        return [ai / self.b for ai in self.a]

    @property
    def mean_over_pools(self) -> float:
        return float(np.mean(self.frq))

    @property
    def pooled(self) -> float:
        """Total recovered examples over total repeated attempts."""
        return sum(self.a) / (self.b * len(self.a))

    def rows(self) -> list[dict]:
        return [
            {"pool": pid, "accuracy": acc, "a": a, "b": self.b, "frq": a / self.b, "newly_fooled": nf}
            for pid, acc, a, nf in zip(self.pool_ids, self.accuracies, self.a, self.newly_fooled)
        ]


def frq(first_pool, later_pools: Sequence, adv_set, labels) -> FrqReport:
    """Fraction of examples that fooled ``first_pool`` but fail on each later pool."""
    y = np.asarray(labels).reshape(-1)
    first_wrong = labeler(first_pool)(adv_set) != y
    b = int(first_wrong.sum())
    if b == 0:
        raise UndefinedMetric("no adversarial example fooled the first pool")
    accs, a, newly = [], [], []
    for pool in later_pools:
        right = labeler(pool)(adv_set) == y
        accs.append(float(right.mean()))
        a.append(int((right & first_wrong).sum()))
        newly.append(int((~right & ~first_wrong).sum()))
    ids = [getattr(p, "pool_id", i + 1) for i, p in enumerate(later_pools)]
    return FrqReport(float(1 - first_wrong.mean()), b, accs, a, newly, len(y), ids)


# -- robustness ---------------------------------------------------------------
def _oracle(target, mode: str) -> QueryOracle:
    if hasattr(target, "oracle"):
        return target.oracle(mode)
    if isinstance(target, nn.Model):
        return QueryOracle.from_model(target, mode)
    if isinstance(target, StudentPool):
        if mode == "label":
            return QueryOracle(lambda x: predict_batch(target, x)[0], "label")
        return QueryOracle(lambda x: predict_batch(target, x)[3], "proba")
    if isinstance(target, PoolManager):
        if mode == "label":
            return QueryOracle(lambda x: target.predict_many(x)[0], "label")
        return QueryOracle(lambda x: target.predict_many(x)[2], "proba")
    raise TypeError(f"no query interface for {type(target).__name__}")


def craft(spec: AttackSpec, data: Dataset, surrogate: nn.Model, target=None, probe: Dataset | None = None):
    """Adversarial inputs for ``data``; returns ``(x_adv, queries_spent)``.

    White-box attacks use ``surrogate``.  SPSA and Copycat only reach
    ``target`` through a counting oracle.
    """
    kind = spec.kind
    if kind in ("fgsm", "pgd", "cw"):
        return white_box(surrogate, data, spec), 0
    if target is None:
        raise ValueError(f"{kind} needs a target to query")
    if kind == "spsa":
        oracle = _oracle(target, "proba")
        return spsa_batch(oracle, data, spec), oracle.count
    if probe is None:
        raise ValueError("Copycat needs a probe set")
    oracle = _oracle(target, "label")
    stolen = copycat_extract(oracle, probe, surrogate, seed=spec.seed)
    return white_box(stolen.model, data, spec), stolen.queries


def robustness_eval(
    target,
    attacks: Sequence[AttackSpec],
    x_test: Dataset,
    surrogate: nn.Model,
    probe: Dataset | None = None,
    provenance: dict | None = None,
) -> list[dict]:
    """Accuracy of ``target`` on clean and attacked copies of ``x_test``.

    Attacks are crafted first and then sent to the target, so adversarial
    examples are judged by whichever pool is active when they arrive.
    """
    classify = labeler(target)
    base = dict(provenance or {})
    rows: list[dict] = []
    plan = [None, *attacks]
    try:
        for spec in plan:
            if spec is None:
                x_adv, queries = x_test.x, 0
            else:
                x_adv, queries = craft(spec, x_test, surrogate, target, probe)
            acc = float(np.mean(np.asarray(classify(x_adv)) == x_test.y))
            rows.append(
                {
                    **base,
                    "attack": "No Attack" if spec is None else spec.kind,
                    "epsilon": 0.0 if spec is None else spec.epsilon,
                    "accuracy": acc,
                    "examples": len(x_test),
                    "queries": queries,
                    "attack_spec": "" if spec is None else json.dumps(spec.to_dict(), sort_keys=True),
                }
            )
    except (OSError, RemoteError, BufferUnderrun) as exc:
        raise PartialResults(rows, exc) from exc
    return rows


def write_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return path


# -- sweeps -------------------------------------------------------------------
@dataclass
class SweepResult:
    rows: list[dict]
    lambda_max: float | None = None


def _grid_config(dimension: str, value, cfg: PoolConfig) -> PoolConfig:
    if dimension == "p":
        return replace(cfg, p=int(value))
    if dimension == "lambda":
        return replace(cfg, lam=float(value), max_backoff=0)
    if dimension == "transform":
        return replace(cfg, use_transforms=bool(value))
    raise ValueError(f"unknown sweep dimension {dimension!r}")


def default_grid(dimension: str, cfg: PoolConfig) -> list:
    if dimension == "p":
        return list(range(cfg.n + 1))
    if dimension == "lambda":
        return list(DEFAULT_LAMBDA_GRID)
    return [True, False]


def _sweep_point(dimension, value, base, x_train, x_test, cfg, attacks, transfer_attack):
    """Rows for one grid point, or ``None`` when its pool fails the accuracy gate."""
    point_cfg = _grid_config(dimension, value, cfg)
    prov = {
        "dimension": dimension,
        "value": value,
        "seed": point_cfg.seed,
        "n": point_cfg.n,
        "p": point_cfg.p,
        "lambda": point_cfg.lam,
        "use_transforms": point_cfg.use_transforms,
        "config": json.dumps(point_cfg.to_dict(), sort_keys=True),
    }
    try:
        pool = generate_pool(base, point_cfg, x_train, x_test)
    except GenerationFailure as exc:
        log.info("grid point %s=%s failed: %s", dimension, value, exc)
        return [{**prov, "status": "failed", "attack": "", "accuracy": "", "transferability": ""}], False
    try:
        _, transfer = pool_transferability(pool, x_test, transfer_attack)
    except UndefinedMetric:
        transfer = float("nan")
    rows = [{**prov, "status": "ok", **r, "transferability": transfer} for r in robustness_eval(pool, attacks, x_test, base)]
    return rows, True


def sweep(
    dimension: str,
    base: nn.Model,
    x_train: Dataset,
    x_test: Dataset,
    cfg: PoolConfig,
    attacks: Sequence[AttackSpec],
    grid: Sequence | None = None,
    transfer_attack: AttackSpec | None = None,
    stop_at_lambda_max: bool = False,
    workers: int = 1,
) -> SweepResult:
    """Regenerate a pool per grid point and record robustness and transferability.

    A point whose generation fails is recorded with ``status=failed`` and the
    sweep moves on.  For the ``lambda`` dimension the accuracy gate gets no
    back-off, so ``lambda_max`` is the first grid value that fails it.
    Grid points are independent; ``workers > 1`` spreads them over processes
    and the rows come back in grid order either way.
    """
    grid = list(default_grid(dimension, cfg) if grid is None else grid)
    if not grid:
        raise ValueError("empty grid")
    if dimension == "lambda" and any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("lambda grid must be strictly increasing")
    _grid_config(dimension, grid[0], cfg)
    transfer_attack = transfer_attack or AttackSpec("fgsm", 0.1)
    args = (base, x_train, x_test, cfg, list(attacks), transfer_attack)
    if workers > 1 and not stop_at_lambda_max:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, repeat(dimension), grid, *(repeat(a) for a in args)))
    else:
        results = []
        for value in grid:
            results.append(_sweep_point(dimension, value, *args))
            if stop_at_lambda_max and dimension == "lambda" and not results[-1][1]:
                break
    rows: list[dict] = []
    lambda_max = None
    for value, (point_rows, ok) in zip(grid, results):
        rows.extend(point_rows)
        if dimension == "lambda" and not ok and lambda_max is None:
            lambda_max = float(value)
    return SweepResult(rows, lambda_max)
