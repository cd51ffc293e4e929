"""Rectified-flow losses with adaptive margins, cycle loss and Euler transport."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .driftnet import DriftModel, drift_backward, drift_forward
from .numkit import MlpCache, ShapeError, as_matrix

log = logging.getLogger(__name__)

TASKS = ("regression", "classification")


@dataclass(frozen=True)
class FlowConfig:
    epsilon: float = 0.1
    beta: int = 4
    euler_steps: int = 2
    task: str = "classification"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.beta < 0 or int(self.beta) != self.beta:
            raise ValueError("beta must be a non-negative integer")
        if self.euler_steps < 1:
            raise ValueError("euler_steps must be >= 1")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")


@dataclass(frozen=True)
class FlowPair:
    x_src: np.ndarray
    x_tgt: np.ndarray
    eta: float
    t: float
    same_sample: bool


@dataclass
class PairBatch:
    """Struct-of-arrays pair set; rows ``[:n_same]`` are the same-sample pairs."""

    x_src: np.ndarray
    x_tgt: np.ndarray
    eta: np.ndarray
    t: np.ndarray
    same_sample: np.ndarray
    src_index: np.ndarray
    tgt_index: np.ndarray
    source: str = "a"
    target: str = "l"
    skipped_cross: int = 0

    def __len__(self) -> int:
        return len(self.eta)

    def __iter__(self) -> Iterator[FlowPair]:
        for i in range(len(self)):
            yield FlowPair(self.x_src[i], self.x_tgt[i], float(self.eta[i]), float(self.t[i]), bool(self.same_sample[i]))

    @property
    def n_same(self) -> int:
        return int(self.same_sample.sum())

    @property
    def n_cross(self) -> int:
        return len(self) - self.n_same


def interpolate(x1, x2, t):
    """``(1 - t) x1 + t x2``; ``t`` may be a scalar or one value per row."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ShapeError(f"cannot interpolate {x1.shape} and {x2.shape}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and x1.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x1 + t * x2


def label_distance(y_i, y_j, task: str):
    if task == "classification":
        return (np.asarray(y_i) != np.asarray(y_j)).astype(np.float64)
    diff = np.asarray(y_i, dtype=np.float64) - np.asarray(y_j, dtype=np.float64)
    return diff * diff


def margin(y_i, y_j, same_sample, epsilon: float, task: str):
    """Zero for same-sample pairs, ``epsilon + |y_i - y_j|^2`` otherwise.

    Class labels are at distance 0 (same class) or 1.  Works elementwise.
    """
    eta = np.where(same_sample, 0.0, epsilon + label_distance(y_i, y_j, task))
    return float(eta) if eta.ndim == 0 else eta


def sample_pairs(x_src, x_tgt, labels, config: FlowConfig, rng: np.random.Generator,
                 source: str = "a", target: str = "l") -> PairBatch:
    """All B same-sample pairs plus ``beta * B`` random ordered cross pairs (i != j)."""
    x_src = as_matrix(x_src)
    x_tgt = as_matrix(x_tgt)
    labels = np.asarray(labels)
    b = x_src.shape[0]
    if x_tgt.shape[0] != b or labels.shape[0] != b:
        raise ShapeError("source, target and labels must have the same number of rows")
    n_cross = int(config.beta) * b
    skipped = 0
    if b < 2 and n_cross:
        log.warning("minibatch of one sample: skipping %d cross-sample pairs", n_cross)
        skipped, n_cross = n_cross, 0
    src_i = np.arange(b)
    tgt_i = np.arange(b)
    if n_cross:
        ci = rng.integers(0, b, size=n_cross)
        cj = rng.integers(0, b - 1, size=n_cross)
        cj = cj + (cj >= ci)
        src_i = np.concatenate([src_i, ci])
        tgt_i = np.concatenate([tgt_i, cj])
    same = src_i == tgt_i
    t = rng.uniform(0.0, 1.0, size=len(src_i))
    eta = margin(labels[src_i], labels[tgt_i], same, config.epsilon, config.task)
    return PairBatch(x_src[src_i], x_tgt[tgt_i], np.asarray(eta, dtype=np.float64), t, same,
                     src_i, tgt_i, source, target, skipped)


def forward_loss(drift: DriftModel, pairs: PairBatch) -> tuple[float, list[np.ndarray]]:
    """Mean hinge ``max(|V(x_t, t) - (x_tgt - x_src)|^2 - eta, 0)``.

    Pair features are constants here, so only drift gradients come back.
    """
    if len(pairs) == 0:
        raise ValueError("empty pair batch")
    xt = interpolate(pairs.x_src, pairs.x_tgt, pairs.t)
    v, cache = drift_forward(drift, xt, pairs.t)
    resid = v - (pairs.x_tgt - pairs.x_src)
    sq = np.sum(resid * resid, axis=1)
    active = sq > pairs.eta
    n = len(pairs)
    loss = float(np.sum(np.where(active, sq - pairs.eta, 0.0)) / n)
    grad_v = np.where(active[:, None], 2.0 * resid / n, 0.0)
    _, grads = drift_backward(drift, cache, grad_v)
    return loss, grads


@dataclass
class EulerTape:
    states: list[np.ndarray]
    caches: list[MlpCache] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.states) - 1


def euler_forward(drift: DriftModel, x0, steps: int) -> tuple[np.ndarray, EulerTape]:
    if steps < 1:
        raise ValueError("euler_steps must be >= 1")
    x = as_matrix(x0)
    dt = 1.0 / steps
    tape = EulerTape([x])
    for k in range(steps):
        v, cache = drift_forward(drift, x, k / steps)
        x = x + v * dt
        tape.states.append(x)
        tape.caches.append(cache)
    return x, tape


def euler_map(drift: DriftModel, x0, steps: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Integrate ``dx = V(x, t) dt`` from t=0 to 1 with ``steps`` explicit Euler steps."""
    x, tape = euler_forward(drift, x0, steps)
    return x, tape.states


def euler_backward(drift: DriftModel, tape: EulerTape, grad_out) -> tuple[np.ndarray, list[np.ndarray]]:
    """Gradient of the Euler endpoint w.r.t. the start point and the drift parameters."""
    g = as_matrix(grad_out)
    dt = 1.0 / tape.steps
    total = [np.zeros_like(p) for p in drift.net.arrays()]
    for k in range(tape.steps - 1, -1, -1):
        gx, grads = drift_backward(drift, tape.caches[k], g * dt)
        for acc, gp in zip(total, grads):
            acc += gp
        g = g + gx
    return g, total


class BackwardLoss(NamedTuple):
    loss: float
    grads: list[np.ndarray]
    grad_mapped: np.ndarray
    grad_src: np.ndarray


def backward_loss(drift_hat: DriftModel, x_src, x_mapped, rng: np.random.Generator | None = None,
                  t=None) -> BackwardLoss:
    """Cycle loss: the backward drift must carry mapped features back to their sources.

    ``x_src`` is a constant (its gradient is returned as exact zeros); the
    gradient w.r.t. ``x_mapped`` flows through both the interpolation point and
    the regression target.
    """
    x_src = as_matrix(x_src)
    x_mapped = as_matrix(x_mapped)
    if x_src.shape != x_mapped.shape:
        raise ShapeError(f"source {x_src.shape} and mapped {x_mapped.shape} differ")
    n = x_src.shape[0]
    if t is None:
        if rng is None:
            raise ValueError("need an rng or explicit times")
        t = rng.uniform(0.0, 1.0, size=n)
    t = np.asarray(t, dtype=np.float64).reshape(n)
    xt = interpolate(x_mapped, x_src, t)
    v, cache = drift_forward(drift_hat, xt, t)
    resid = v - (x_src - x_mapped)
    loss = float(np.sum(resid * resid) / n)
    grad_v = 2.0 * resid / n
    grad_xt, grads = drift_backward(drift_hat, cache, grad_v)
    grad_mapped = (1.0 - t)[:, None] * grad_xt + grad_v
    return BackwardLoss(loss, grads, grad_mapped, np.zeros_like(x_src))


class Straightness(NamedTuple):
    ratio: float
    degenerate: bool


def straightness_ratio(trajectory) -> Straightness:
    """Summed path length over summed chord length across all samples."""
    states = [as_matrix(s) for s in trajectory]
    if len(states) < 2:
        raise ValueError("trajectory needs at least two states")
    path = sum(float(np.sum(np.linalg.norm(b - a, axis=1))) for a, b in zip(states[:-1], states[1:]))
    chord = float(np.sum(np.linalg.norm(states[-1] - states[0], axis=1)))
    if chord == 0.0:
        return Straightness(math.inf, True)
    return Straightness(path / chord, False)
