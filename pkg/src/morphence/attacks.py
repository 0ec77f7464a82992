"""Evasion attacks and model extraction.

White-box attacks (``fgsm``, ``pgd``, ``cw``) need the model itself.  Black-box
attacks (``spsa``, ``copycat_extract``) only ever touch the target through a
:class:`QueryOracle`, so every query they issue is counted.
"""

from __future__ import annotations

import threading
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from morphence import nn
from morphence.data import Dataset

ATTACK_KINDS = ("fgsm", "pgd", "cw", "spsa", "copycat+fgsm", "copycat+cw")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "fgsm"
    epsilon: float = 0.3
    lb: float = 0.0
    ub: float = 1.0
    # pgd
    eta: float = 0.5
    eta_min: float = 2.0
    max_iter: int = 100
    # cw
    c: float = 10.0
    steps: int = 100
    step_size: float = 0.01
    kappa: float = 0.0
    # spsa
    learning_rate: float = 0.01
    spsa_samples: int = 128
    nb_iter: int = 10
    delta: float = 0.01
    targeted: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise AttackError(f"unknown attack {self.kind!r}")
        if not self.epsilon > 0:
            raise AttackError("epsilon must be positive")
        if self.ub <= self.lb:
            raise AttackError("upper bound must exceed lower bound")
        if self.max_iter < 1 or self.steps < 1 or self.nb_iter < 0:
            raise AttackError("iteration counts must be >= 1")
        if self.c <= 0 or self.step_size <= 0:
            raise AttackError("c and step_size must be positive")
        if self.spsa_samples < 2 or self.spsa_samples % 2:
            raise AttackError("spsa_samples must be a positive even number")
        if self.targeted is not None:
            raise AttackError("targeted attacks are not supported")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def base_kind(self) -> str:
        return self.kind.split("+")[-1]


class QueryOracle:
    """Black-box access to a classifier with a thread-safe query counter.

    ``fn`` maps an input matrix to either a probability matrix
    (``mode="proba"``), a label vector (``mode="label"``) or a
    ``(labels, confidences)`` pair (``mode="confidence"``).
    """

    def __init__(self, fn: Callable, mode: str = "proba"):
        if mode not in ("proba", "label", "confidence"):
            raise AttackError(f"unknown oracle mode {mode!r}")
        self._fn = fn
        self.mode = mode
        self._count = 0
        self._lock = threading.Lock()

    @property
    def count(self) -> int:
        return self._count

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        with self._lock:
            self._count += len(x)
        return self._fn(x)

    def labels(self, x) -> np.ndarray:
        out = self(x)
        if self.mode == "proba":
            return np.argmax(out, axis=1)
        if self.mode == "confidence":
            return np.asarray(out[0])
        return np.asarray(out)

    @classmethod
    def from_model(cls, model: nn.Model, mode: str = "proba") -> "QueryOracle":
        if mode == "label":
            return cls(lambda x: nn.predict(model, x), "label")
        if mode == "confidence":

            def fn(x):
                p = nn.forward(model, x)
                return np.argmax(p, axis=1), p.max(axis=1)

            return cls(fn, "confidence")
        return cls(lambda x: nn.forward(model, x), "proba")


def _as_xy(batch) -> tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(batch.x, dtype=np.float64))
    return x, np.asarray(batch.y, dtype=np.int64).reshape(-1)


def project(x_adv, x, epsilon, lb, ub) -> np.ndarray:
    """Project onto the L-inf ball of radius ``epsilon`` around ``x`` and the box."""
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), lb, ub)


def fgsm(model: nn.Model, batch, epsilon: float, lb: float = 0.0, ub: float = 1.0) -> np.ndarray:
    """One signed-gradient step of size ``epsilon`` on the cross-entropy."""
    if not epsilon > 0:
        raise AttackError("epsilon must be positive")
    x, y = _as_xy(batch)
    g = nn.backward(model, nn.Batch(x, y)).input_grads
    return project(x + epsilon * np.sign(g), x, epsilon, lb, ub)


def pgd_step_sizes(spec: AttackSpec) -> np.ndarray:
    """Per-iteration step sizes.

    Steps anneal geometrically from ``eta_min * epsilon / max_iter`` to
    ``eta * epsilon / max_iter``; a single iteration uses ``eta * epsilon``.
    """
    if spec.max_iter == 1:
        return np.array([spec.eta * spec.epsilon])
    first = spec.eta_min * spec.epsilon / spec.max_iter
    last = spec.eta * spec.epsilon / spec.max_iter
    return np.geomspace(first, last, spec.max_iter)


def pgd(model: nn.Model, batch, spec: AttackSpec) -> np.ndarray:
    x, y = _as_xy(batch)
    x_adv = x.copy()
    for step in pgd_step_sizes(spec):
        g = nn.backward(model, nn.Batch(x_adv, y)).input_grads
        x_adv = project(x_adv + step * np.sign(g), x, spec.epsilon, spec.lb, spec.ub)
    return x_adv


def margin(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """True-class score minus best other score, row-wise."""
    rows = np.arange(len(y))
    true = z[rows, y]
    other = z.copy()
    other[rows, y] = -np.inf
    return true - other.max(axis=1)


def cw(model: nn.Model, batch, spec: AttackSpec) -> np.ndarray:
    """Simplified Carlini-Wagner attack.

    Gradient descent on ``||delta||_2^2 + c * max(margin(logits), -kappa)``,
    projected onto the box and the L-inf ball.  Returns, per example, the
    smallest-norm misclassifying point found, or the clean input if none.
    """
    x, y = _as_xy(batch)
    rows = np.arange(len(y))
    x_adv = x.copy()
    best = x.copy()
    best_norm = np.full(len(y), np.inf)
    for _ in range(spec.steps + 1):
        z = nn.logits(model, x_adv)
        m = margin(z, y)
        fooled = np.argmax(z, axis=1) != y
        norms = np.sum((x_adv - x) ** 2, axis=1)
        improve = fooled & (norms < best_norm)
        best[improve] = x_adv[improve]
        best_norm[improve] = norms[improve]
        # d margin / d logits, only where the hinge is active
        active = m > -spec.kappa
        other = z.copy()
        other[rows, y] = -np.inf
        runner_up = other.argmax(axis=1)
        dz = np.zeros_like(z)
        dz[rows, y] = 1.0
        dz[rows, runner_up] -= 1.0
        dz[~active] = 0.0
        grad = 2.0 * (x_adv - x) + spec.c * nn.input_gradient(model, x_adv, dz)
        x_adv = project(x_adv - spec.step_size * grad, x, spec.epsilon, spec.lb, spec.ub)
    return best


def spsa_gradient(loss_fn: Callable, x: np.ndarray, delta: float, samples: int, rng) -> np.ndarray:
    """Two-sided SPSA estimate of the gradient of ``loss_fn`` at ``x``.

    ``loss_fn`` takes a matrix of points and returns one loss per row; it is
    called once with ``samples`` rows (``samples // 2`` antithetic pairs).
    """
    half = samples // 2
    v = rng.choice(np.array([-1.0, 1.0]), size=(half, x.size))
    points = np.vstack([x + delta * v, x - delta * v])
    losses = np.asarray(loss_fn(points), dtype=np.float64)
    diff = (losses[:half] - losses[half:]) / (2.0 * delta)
    return (diff[:, None] * v).mean(axis=0)


def _oracle_loss(oracle: QueryOracle, y: int) -> Callable:
    if oracle.mode == "proba":

        def loss(points):
            p = oracle(points)
            return margin(p, np.full(len(p), y))

    elif oracle.mode == "confidence":

        def loss(points):
            labels, conf = oracle(points)
            return np.where(np.asarray(labels) == y, conf, -np.asarray(conf))

    else:
        raise AttackError("SPSA needs an oracle returning probabilities or confidences")
    return loss


def spsa(oracle: QueryOracle, x, y_true: int, spec: AttackSpec) -> np.ndarray:
    """SPSA with Adam updates on a margin loss; issues ``nb_iter * spsa_samples`` queries."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if spec.nb_iter == 0:
        return x.copy()
    rng = np.random.default_rng(spec.seed)
    loss = _oracle_loss(oracle, int(y_true))
    x_adv = x.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    beta1, beta2, tiny = 0.9, 0.999, 1e-8
    for t in range(1, spec.nb_iter + 1):
        g = spsa_gradient(loss, x_adv, spec.delta, spec.spsa_samples, rng)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        step = spec.learning_rate * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + tiny)
        x_adv = project(x_adv - step, x, spec.epsilon, spec.lb, spec.ub)
    return x_adv


def spsa_batch(oracle: QueryOracle, batch, spec: AttackSpec) -> np.ndarray:
    x, y = _as_xy(batch)
    out = np.empty_like(x)
    for i in range(len(y)):
        out[i] = spsa(oracle, x[i], int(y[i]), AttackSpec(**{**spec.to_dict(), "seed": spec.seed + i}))
    return out


def white_box(model: nn.Model, batch, spec: AttackSpec) -> np.ndarray:
    """Dispatch a white-box attack by ``spec.base_kind``."""
    kind = spec.base_kind
    if kind == "fgsm":
        return fgsm(model, batch, spec.epsilon, spec.lb, spec.ub)
    if kind == "pgd":
        return pgd(model, batch, spec)
    if kind == "cw":
        return cw(model, batch, spec)
    raise AttackError(f"{spec.kind} is not a white-box attack")


@dataclass
class CopycatResult:
    model: nn.Model
    agreement: float
    queries: int


def copycat_extract(
    oracle: QueryOracle,
    probe_set: Dataset,
    arch: nn.Model | list[int],
    epochs: int = 30,
    lr: float = 0.1,
    batch_size: int = 32,
    holdout_fraction: float = 0.2,
    seed: int = 0,
) -> CopycatResult:
    """Train a surrogate on hard labels stolen from ``oracle``.

    ``arch`` is either a template model (its layer sizes and activation are
    reused with fresh weights) or a list of layer widths.
    """
    if len(probe_set) == 0:
        raise AttackError("empty probe set")
    if isinstance(arch, nn.Model):
        sizes, act = arch.sizes, arch.hidden_activation
    else:
        sizes, act = list(arch), "relu"
    start = oracle.count
    stolen = oracle.labels(probe_set.x)
    order = np.random.default_rng(seed).permutation(len(probe_set))
    n_hold = max(1, int(round(holdout_fraction * len(order)))) if len(order) > 1 else 0
    hold, fit = order[:n_hold], order[n_hold:]
    if len(fit) == 0:
        fit = order
    surrogate = nn.init_model(sizes, act if act != "linear" else "relu", seed=seed, arch_id="copycat")
    if epochs > 0:
        surrogate = nn.train(surrogate, nn.Batch(probe_set.x[fit], stolen[fit]), lr, batch_size, epochs, seed)
    eval_idx = hold if len(hold) else fit
    agreement = float(np.mean(nn.predict(surrogate, probe_set.x[eval_idx]) == stolen[eval_idx]))
    return CopycatResult(surrogate, agreement, oracle.count - start)
