"""Student model pool generation.

A student is the base model with Laplace-perturbed parameters, retrained on
its own transformed copy of the training set and, for the last ``p``
students of a pool, additionally trained on adversarial examples.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from morphence import nn
from morphence.attacks import AttackSpec, white_box
from morphence.data import (
    Dataset,
    TransformSpec,
    TransformTooAggressive,
    apply_transform,
    candidate_kinds,
    draw_transform,
    validate_transform,
)

log = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-6
EPOCH_CAP = 200
CHECK_EVERY = 5


class GenerationFailure(RuntimeError):
    pass


def default_mixture(epsilon: float = 0.5) -> tuple[AttackSpec, ...]:
    return (AttackSpec("pgd", epsilon), AttackSpec("cw", epsilon))


@dataclass(frozen=True)
class PoolConfig:
    n: int = 4
    p: int = 3
    lam: float = 0.05
    max_acc_loss: float = 0.02
    eps_conv: float = 0.001
    adv_mixture: tuple[AttackSpec, ...] = field(default_factory=default_mixture)
    clean_mix_ratio: float = 1.0
    lambda_shrink: float = 0.5
    max_backoff: int | None = None  # None: keep shrinking until LAMBDA_FLOOR
    recovery_rounds: int = 3
    use_transforms: bool = True
    augment_adversarial: bool = True  # adversarial students also retrain on X_train
    min_keep: float = 0.9
    lr: float = 0.05
    batch_size: int = 32
    epoch_cap: int = EPOCH_CAP
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p <= self.n or self.n < 1:
            raise ValueError(f"need 0 <= p <= n and n >= 1 (got n={self.n}, p={self.p})")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 < self.lambda_shrink < 1:
            raise ValueError("lambda_shrink must lie in (0, 1)")
        if not 0 <= self.max_acc_loss < 1:
            raise ValueError("max_acc_loss must lie in [0, 1)")
        if self.eps_conv <= 0:
            raise ValueError("eps_conv must be positive")
        if self.p and not self.adv_mixture:
            raise ValueError("adversarial training needs a non-empty attack mixture")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adv_mixture"] = [a.to_dict() for a in self.adv_mixture]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PoolConfig":
        d = dict(d)
        if "adv_mixture" in d:
            d["adv_mixture"] = tuple(AttackSpec(**a) for a in d["adv_mixture"])
        return cls(**d)


@dataclass
class RetrainOutcome:
    epochs: int
    converged: bool
    accuracy: float


def retrain(
    student: nn.Model,
    x_retrain: Dataset,
    x_test: Dataset,
    eps_conv: float,
    adv: bool = False,
    adv_mixture=(),
    lr: float = 0.05,
    batch_size: int = 32,
    epoch_cap: int = EPOCH_CAP,
    seed: int = 0,
) -> tuple[nn.Model, RetrainOutcome]:
    """Retrain one epoch at a time until validation accuracy stops moving.

    The check happens whenever the epoch counter is a multiple of 5 (the
    first check follows the first epoch); training stops once
    ``|acc - acc_checkpoint| < eps_conv`` or after ``epoch_cap`` epochs.
    With ``adv`` set the validation set is replaced by adversarial test
    examples crafted against the incoming student.
    """
    if eps_conv <= 0:
        raise ValueError("eps_conv must be positive")
    if adv:
        x_test = build_adv_mixture(x_test, adv_mixture, 0.0, seed, model=student)
    acc_tmp = nn.accuracy(student, x_test)
    acc = acc_tmp
    epochs = 0
    while epochs < epoch_cap:
        student = nn.train(student, x_retrain, lr, batch_size, 1, seed + epochs)
        acc = nn.accuracy(student, x_test)
        if epochs % CHECK_EVERY == 0:
            if abs(acc - acc_tmp) < eps_conv:
                return student, RetrainOutcome(epochs + 1, True, acc)
            acc_tmp = acc
        epochs += 1
    if epoch_cap:
        log.warning("retraining hit the %d-epoch cap without converging", epoch_cap)
    return student, RetrainOutcome(epochs, False, acc)


def build_adv_mixture(
    data: Dataset,
    mixture,
    clean_mix_ratio: float,
    seed: int = 0,
    model: nn.Model | None = None,
) -> Dataset:
    """Adversarial copies of ``data`` (one per attack) plus a clean fraction, shuffled.

    Output size is ``len(data) * len(mixture) + round(len(data) * clean_mix_ratio)``.
    """
    if not mixture:
        raise ValueError("attack mixture is empty")
    if model is None:
        raise ValueError("a model to attack is required")
    parts_x, parts_y = [], []
    for spec in mixture:
        parts_x.append(white_box(model, data, spec))
        parts_y.append(data.y)
    rng = np.random.default_rng(seed)
    n_clean = int(round(clean_mix_ratio * len(data)))
    if n_clean:
        idx = np.resize(rng.permutation(len(data)), n_clean)
        parts_x.append(data.x[idx])
        parts_y.append(data.y[idx])
    x = np.vstack(parts_x)
    y = np.concatenate(parts_y)
    order = rng.permutation(len(y))
    return replace(data, x=x[order], y=y[order], name=f"{data.name}|adv")


def generate_student(
    base: nn.Model,
    cfg: PoolConfig,
    t_i: TransformSpec,
    adv: bool,
    x_train: Dataset,
    x_test: Dataset,
    seed: int = 0,
    base_acc: float | None = None,
    x_retrain: Dataset | None = None,
) -> tuple[nn.Model, dict]:
    """Build one student; returns it with a small record of how it was made."""
    if base_acc is None:
        base_acc = nn.accuracy(base, x_test)
    if x_retrain is None:
        x_retrain = apply_transform(x_train, t_i)
    kw = dict(lr=cfg.lr, batch_size=cfg.batch_size, epoch_cap=cfg.epoch_cap)
    lam = cfg.lam
    lambdas = []
    attempt = 0
    while True:
        lambdas.append(lam)
        student = nn.perturb_weights(base, lam, seed * 1000 + attempt)
        student, _ = retrain(student, x_retrain, x_test, cfg.eps_conv, seed=seed + attempt, **kw)
        acc = nn.accuracy(student, x_test)
        if base_acc - acc <= cfg.max_acc_loss:
            break
        attempt += 1
        lam *= cfg.lambda_shrink
        if lam < LAMBDA_FLOOR or (cfg.max_backoff is not None and attempt > cfg.max_backoff):
            raise GenerationFailure(
                f"student accuracy {acc:.4f} vs base {base_acc:.4f} after lambdas {lambdas}"
            )
    info = {"lambdas": lambdas, "clean_acc_after_step2": acc, "adv": adv}
    if adv:
        mix = build_adv_mixture(x_retrain, cfg.adv_mixture, cfg.clean_mix_ratio, seed, model=student)
        student, outcome = retrain(
            student, mix, x_test, cfg.eps_conv, adv=True, adv_mixture=cfg.adv_mixture, seed=seed, **kw
        )
        info["adv_val_acc"] = outcome.accuracy
        acc = nn.accuracy(student, x_test)
        rounds = 0
        while base_acc - acc > cfg.max_acc_loss:
            if rounds >= cfg.recovery_rounds:
                raise GenerationFailure(
                    f"clean accuracy {acc:.4f} not recovered after {rounds} rounds (base {base_acc:.4f})"
                )
            student, _ = retrain(student, x_retrain, x_test, cfg.eps_conv, seed=seed + 100 + rounds, **kw)
            acc = nn.accuracy(student, x_test)
            rounds += 1
        info["recovery_rounds"] = rounds
    info["clean_acc"] = acc
    return student, info


@dataclass
class StudentPool:
    students: list[nn.Model]
    adv_flags: list[bool]
    transform_specs: list[TransformSpec]
    pool_id: int = 0
    gen_duration: float = 0.0
    seed: int = 0
    info: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.students) == len(self.adv_flags) == len(self.transform_specs)):
            raise ValueError("students, adv_flags and transform_specs must align")
        if not self.students:
            raise ValueError("empty pool")

    @property
    def n(self) -> int:
        return len(self.students)

    @property
    def p(self) -> int:
        return int(sum(self.adv_flags))

    def manifest(self) -> dict:
        return {
            "pool_id": self.pool_id,
            "adv_flags": list(map(bool, self.adv_flags)),
            "transform_specs": [t.to_dict() for t in self.transform_specs],
            "gen_duration": self.gen_duration,
            "seed": self.seed,
            "info": self.info,
        }


def _transformed_training_set(base, x_train, cfg, rng, kinds) -> tuple[TransformSpec, Dataset]:
    """Draw a valid T_i, trying ``kinds`` in order; an aggressive draw is retried milder first.

    Kinds that fail at every scale are removed from ``kinds`` in place, so
    later students of the same pool skip them.
    """
    for kind in list(kinds):
        scale = 1.0
        for _ in range(4):
            t = draw_transform(x_train, rng, scale, kind)
            try:
                return t, validate_transform(base, apply_transform(x_train, t), cfg.min_keep)
            except TransformTooAggressive:
                scale *= 0.5
        kinds.remove(kind)
        log.info("dropping %s transforms: no draw kept %.0f%% of labels", kind, 100 * cfg.min_keep)
    raise GenerationFailure("no transform passed the validity check")


def generate_pool(
    base: nn.Model,
    cfg: PoolConfig,
    x_train: Dataset,
    x_test: Dataset,
    pool_id: int = 0,
) -> StudentPool:
    """Generate ``cfg.n`` students, the last ``cfg.p`` adversarially trained."""
    start = time.perf_counter()
    rng = np.random.default_rng([cfg.seed, pool_id])
    base_acc = nn.accuracy(base, x_test)
    specs, sets = [], []
    seen = set()
    kinds = [str(k) for k in rng.permutation(candidate_kinds(x_train))]
    attempts = 0
    while len(specs) < cfg.n:
        if cfg.use_transforms:
            # cycle the preferred kind so a pool's students differ in kind, not just in parameters
            attempts += 1
            if attempts > 50 * cfg.n or not kinds:
                raise GenerationFailure("could not draw enough distinct transforms")
            first = len(specs) % len(kinds)
            order = kinds[first:] + kinds[:first]
            t, ds = _transformed_training_set(base, x_train, cfg, rng, order)
            kinds = [k for k in kinds if k in order]
            if t.key() in seen:
                continue
            seen.add(t.key())
        else:
            t, ds = TransformSpec(), x_train
        specs.append(t)
        sets.append(ds)
    students, flags, info = [], [], []
    for i, (t, ds) in enumerate(zip(specs, sets)):
        adv = i >= cfg.n - cfg.p
        if adv and cfg.use_transforms and cfg.augment_adversarial:
            # adversarial training on transformed data alone cannot win back clean accuracy
            ds = x_train.concat(ds)
        student_seed = int(rng.integers(2**31))
        s, record = generate_student(
            base, cfg, t, adv, x_train, x_test, seed=student_seed, base_acc=base_acc, x_retrain=ds
        )
        students.append(s)
        flags.append(adv)
        info.append(record)
    return StudentPool(students, flags, specs, pool_id, time.perf_counter() - start, cfg.seed, info)


def save_pool(pool: StudentPool, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(pool.students):
        nn.save_model(s, directory / f"student_{i}.mdl")
    (directory / "manifest.json").write_text(json.dumps(pool.manifest(), indent=2))
    return directory


def load_pool(directory) -> StudentPool:
    directory = Path(directory)
    m = json.loads((directory / "manifest.json").read_text())
    students = [nn.load_model(directory / f"student_{i}.mdl") for i in range(len(m["adv_flags"]))]
    return StudentPool(
        students,
        m["adv_flags"],
        [TransformSpec.from_dict(t) for t in m["transform_specs"]],
        m["pool_id"],
        m["gen_duration"],
        m.get("seed", 0),
        m.get("info", []),
    )
