"""Most-confident-model scheduling and query-budgeted pool renewal."""

from __future__ import annotations

import csv
import logging
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from morphence import nn
from morphence.poolgen import StudentPool

log = logging.getLogger(__name__)

TQ_SMOOTHING = 0.1


class BufferUnderrun(RuntimeError):
    """A pool expired while no standby pool was available."""


class InvalidState(ValueError):
    pass


def select_most_confident(confidences) -> int:
    """Index of the largest confidence; ties go to the lowest index."""
    return int(np.argmax(np.asarray(confidences)))


def pool_probabilities(pool: StudentPool, x) -> np.ndarray:
    """Stacked student outputs, shape (n_students, n_inputs, k)."""
    return np.stack([nn.forward(s, x) for s in pool.students])


def predict_batch(pool: StudentPool, x) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Scheduled predictions for every row of ``x``.

    Returns ``(labels, confidences, model_indices, probabilities)`` where the
    probabilities are those of the selected student.
    """
    probs = pool_probabilities(pool, x)
    conf = probs.max(axis=2)
    chosen = np.argmax(conf, axis=0)
    rows = np.arange(probs.shape[1])
    selected = probs[chosen, rows]
    return np.argmax(selected, axis=1), conf[chosen, rows], chosen, selected


def predict(pool: StudentPool, x) -> tuple[int, float, int]:
    """Label, confidence and index of the most confident student for one input."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    labels, conf, idx, _ = predict_batch(pool, x)
    return int(labels[0]), float(conf[0]), int(idx[0])


def compute_qmax(t_n: float, k_t: int, t_q: float) -> int:
    """Smallest integer budget with ``k_t * q_max * t_q > t_n``.

    That is the ceiling of ``t_n / (k_t * t_q)``, plus one when the quotient
    is a whole number.  Times are taken at their printed decimal value and
    divided exactly, so ``100 / (5 * 0.01)`` counts as exactly 2000.
    """
    if k_t <= 0:
        raise InvalidState("no standby pools: the buffer is exhausted")
    if t_n <= 0 or t_q <= 0:
        raise InvalidState("T_n and T_q must be positive")
    quotient = Fraction(repr(float(t_n))) / (k_t * Fraction(repr(float(t_q))))
    return math.floor(quotient) + 1


@dataclass
class RenewalEvent:
    pool_id: int
    queries_served: int
    started: float
    ended: float
    q_max: int

    @property
    def span(self) -> float:
        return self.ended - self.started


@dataclass
class PoolManagerState:
    active: StudentPool | None
    buffer: deque = field(default_factory=deque)
    query_count: int = 0
    q_max: int = 1000
    t_q: float | None = None
    t_n: float | None = None
    renewal_log: list[RenewalEvent] = field(default_factory=list)
    underruns: int = 0
    activated_at: float = field(default_factory=time.time)

    @property
    def k_t(self) -> int:
        return len(self.buffer)


def swap_pool(state: PoolManagerState, fixed_qmax: int | None = None) -> PoolManagerState:
    """Retire the active pool and promote the head of the buffer.

    ``Q_max`` is recomputed from the standby count at swap time (including
    the pool being promoted) unless ``fixed_qmax`` is given.
    """
    if not state.buffer:
        raise BufferUnderrun("no standby pool to promote")
    now = time.time()
    if state.active is not None:
        state.renewal_log.append(
            RenewalEvent(state.active.pool_id, state.query_count, state.activated_at, now, state.q_max)
        )
    k_t = len(state.buffer)
    state.active = state.buffer.popleft()
    state.query_count = 0
    state.activated_at = now
    if fixed_qmax is not None:
        state.q_max = fixed_qmax
    elif state.t_n and state.t_q:
        state.q_max = compute_qmax(state.t_n, k_t, state.t_q)
    return state


def record_query(state: PoolManagerState, fixed_qmax: int | None = None) -> RenewalEvent | None:
    """Count one query against the active pool, renewing it when the budget is spent."""
    state.query_count += 1
    if state.query_count < state.q_max:
        return None
    retiring = state.active
    if state.buffer:
        swap_pool(state, fixed_qmax)
        return state.renewal_log[-1]
    # no standby pool: retire anyway so the budget is never exceeded
    now = time.time()
    event = RenewalEvent(retiring.pool_id, state.query_count, state.activated_at, now, state.q_max)
    state.renewal_log.append(event)
    state.active = None
    state.query_count = 0
    state.underruns += 1
    log.warning("pool %s expired with an empty buffer", retiring.pool_id)
    return event


class PoolManager:
    """Thread-safe owner of a :class:`PoolManagerState`.

    Every query is admitted under a lock: it is attributed to exactly one
    pool and counted exactly once.  Prediction itself runs outside the lock
    on the pool captured at admission, so queries admitted before a swap
    finish on the old pool.
    """

    def __init__(
        self,
        pools,
        q_max: int = 1000,
        fixed_qmax: int | None = None,
        wait_timeout: float = 30.0,
    ):
        pools = list(pools)
        self.fixed_qmax = fixed_qmax
        self.wait_timeout = wait_timeout
        self._cond = threading.Condition()
        self.state = PoolManagerState(active=None, q_max=fixed_qmax or q_max)
        self._last_id = None
        self._stop = threading.Event()
        self._generator: threading.Thread | None = None
        for p in pools:
            self.enqueue(p)

    # -- buffer --------------------------------------------------------------
    def enqueue(self, pool: StudentPool) -> None:
        with self._cond:
            if self._last_id is not None and pool.pool_id <= self._last_id:
                raise InvalidState(f"pool ids must increase ({pool.pool_id} after {self._last_id})")
            self._last_id = pool.pool_id
            if pool.gen_duration > 0:
                self.state.t_n = pool.gen_duration
            if self.state.active is None:
                self.state.active = pool
                self.state.activated_at = time.time()
            else:
                self.state.buffer.append(pool)
            self._cond.notify_all()

    def start_background(self, factory: Callable[[int], StudentPool], target_depth: int = 2) -> None:
        """Keep generating pools with ``factory(pool_id)`` while the buffer is shallow."""

        def run():
            while not self._stop.is_set():
                with self._cond:
                    while self.state.k_t >= target_depth and not self._stop.is_set():
                        self._cond.wait(0.1)
                    next_id = (self._last_id or 0) + 1
                if self._stop.is_set():
                    return
                self.enqueue(factory(next_id))

        self._generator = threading.Thread(target=run, name="pool-generator", daemon=True)
        self._generator.start()

    def stop(self) -> None:
        self._stop.set()
        with self._cond:
            self._cond.notify_all()
        if self._generator is not None:
            self._generator.join(timeout=5)

    # -- queries -------------------------------------------------------------
    def admit(self) -> StudentPool:
        """Reserve one query slot and return the pool that must answer it."""
        with self._cond:
            if not self._cond.wait_for(lambda: self.state.active is not None, self.wait_timeout):
                raise BufferUnderrun("no active pool available")
            pool = self.state.active
            record_query(self.state, self.fixed_qmax)
            self._cond.notify_all()
            return pool

    def observe_latency(self, seconds: float) -> None:
        with self._cond:
            tq = self.state.t_q
            self.state.t_q = seconds if tq is None else (1 - TQ_SMOOTHING) * tq + TQ_SMOOTHING * seconds

    def predict_one(self, x) -> tuple[int, float, np.ndarray]:
        """Scheduled prediction for one input: (label, confidence, probabilities)."""
        start = time.perf_counter()
        pool = self.admit()
        labels, conf, _, probs = predict_batch(pool, np.asarray(x, dtype=np.float64).reshape(1, -1))
        self.observe_latency(time.perf_counter() - start)
        return int(labels[0]), float(conf[0]), probs[0]

    def predict_many(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Each row is a separate query (and may land on a different pool)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        labels = np.empty(len(x), dtype=np.int64)
        conf = np.empty(len(x))
        probs = None
        i = 0
        while i < len(x):
            start = time.perf_counter()
            with self._cond:
                if not self._cond.wait_for(lambda: self.state.active is not None, self.wait_timeout):
                    raise BufferUnderrun("no active pool available")
                pool = self.state.active
                # admit as many rows as the active pool's remaining budget allows
                m = min(len(x) - i, self.state.q_max - self.state.query_count)
                for _ in range(m):
                    record_query(self.state, self.fixed_qmax)
                self._cond.notify_all()
            lab, cf, _, pr = predict_batch(pool, x[i : i + m])
            if probs is None:
                probs = np.empty((len(x), pr.shape[1]))
            labels[i : i + m], conf[i : i + m], probs[i : i + m] = lab, cf, pr
            self.observe_latency((time.perf_counter() - start) / m)
            i += m
        return labels, conf, probs

    def status(self) -> dict:
        with self._cond:
            s = self.state
            return {
                "active_pool_id": None if s.active is None else s.active.pool_id,
                "query_count": s.query_count,
                "q_max": s.q_max,
                "buffer_depth": s.k_t,
                "t_q": s.t_q,
                "t_n": s.t_n,
                "underruns": s.underruns,
                "pools_retired": len(s.renewal_log),
                "renewal_log": [
                    {"pool_id": e.pool_id, "queries_served": e.queries_served, "span": e.span, "q_max": e.q_max}
                    for e in s.renewal_log
                ],
            }

    def export_renewal_log(self, path) -> None:
        with self._cond:
            events = list(self.state.renewal_log)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pool_id", "queries_served", "wall_clock_span", "q_max"])
            for e in events:
                w.writerow([e.pool_id, e.queries_served, f"{e.span:.6f}", e.q_max])


def simulate_renewals(
    t_n: float,
    t_q: float,
    initial_buffer: int,
    renewals: int = 10,
    fixed_qmax: int | None = None,
) -> dict:
    """Discrete-event simulation of serving with one background generator.

    Queries arrive back to back, each taking ``t_q``; a generator produces a
    new pool every ``t_n`` seconds.  At each expiry the head of the buffer
    is promoted and ``Q_max`` recomputed via :func:`compute_qmax`.
    """
    now = 0.0
    buffer = initial_buffer
    next_ready = t_n
    q_max = fixed_qmax or compute_qmax(t_n, max(buffer, 1), t_q)
    underruns = 0
    history = []
    for _ in range(renewals):
        expiry = now + q_max * t_q
        while next_ready <= expiry:
            buffer += 1
            next_ready += t_n
        now = expiry
        history.append({"time": now, "q_max": q_max, "buffer_before": buffer})
        if buffer == 0:
            underruns += 1
            # wait for the generator before serving again
            now = next_ready
            next_ready += t_n
            buffer = 1
        k_t = buffer
        buffer -= 1
        q_max = fixed_qmax or compute_qmax(t_n, k_t, t_q)
    return {"underruns": underruns, "history": history}
