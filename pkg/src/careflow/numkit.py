"""Small deterministic numeric kernel.

Dense feed-forward networks with hand-written reverse mode, Adam, seeded
generators and a central-difference gradient oracle.  Matrices are plain
``float64`` numpy arrays of shape ``(rows, cols)``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "identity")


class ShapeError(ValueError):
    """Raised when array shapes do not chain."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """PCG64 generator; the stream for a given seed is platform independent."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [make_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"layer {k}: unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k > 0 and self.weights[k - 1].shape[0] != w.shape[1]:
                raise ShapeError(
                    f"layer {k}: input width {w.shape[1]} does not match "
                    f"previous output width {self.weights[k - 1].shape[0]}"
                )
        if self.activations and self.activations[-1] != "identity":
            raise ValueError("final layer activation must be identity")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order ``W0, b0, W1, b1, ...``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return copy.deepcopy(self)


@dataclass
class MlpCache:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    outputs: list[np.ndarray]


def init_params(dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> MlpParams:
    """Xavier-uniform weights in +-sqrt(6/(in+out)) and zero biases."""
    if len(dims) != len(activations) + 1:
        raise ShapeError("need one activation per layer (len(dims) - 1)")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, list(activations))


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, MlpCache]:
    h = as_matrix(x)
    cache = MlpCache([], [], [])
    for k, (w, b, act) in enumerate(zip(params.weights, params.biases, params.activations)):
        if h.shape[1] != w.shape[1]:
            raise ShapeError(f"layer {k}: input has {h.shape[1]} columns, layer expects {w.shape[1]}")
        cache.inputs.append(h)
        z = h @ w.T + b
        cache.preacts.append(z)
        h = np.tanh(z) if act == "tanh" else z
        cache.outputs.append(h)
    if not np.all(np.isfinite(h)):
        raise NumericalError("non-finite network output")
    return h, cache


def mlp_backward(params: MlpParams, cache: MlpCache, grad_out) -> tuple[np.ndarray, list[np.ndarray]]:
    """Reverse pass; returns ``(grad_in, grads)`` with grads ordered like ``params.arrays()``."""
    g = as_matrix(grad_out)
    n_layers = len(params.weights)
    if len(cache.inputs) != n_layers:
        raise ShapeError(f"cache holds {len(cache.inputs)} layers, network has {n_layers}")
    if g.shape != cache.outputs[-1].shape:
        raise ShapeError(f"layer {n_layers - 1}: grad_out {g.shape} does not match output {cache.outputs[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * n_layers)  # type: ignore[list-item]
    for k in range(n_layers - 1, -1, -1):
        w = params.weights[k]
        if cache.inputs[k].shape[1] != w.shape[1]:
            raise ShapeError(f"layer {k}: stale cache")
        if params.activations[k] == "tanh":
            g = g * (1.0 - cache.outputs[k] ** 2)
        grads[2 * k] = g.T @ cache.inputs[k]
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ w
    return g, grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 1e-3
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float | None = None,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Inputs are not modified."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and optimizer state differ in length")
    lr = state.lr if lr is None else lr
    step = state.step + 1
    c1 = 1.0 - state.beta1**step
    c2 = 1.0 - state.beta2**step
    new_p, new_m, new_v = [], [], []
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"parameter {i}: shapes {p.shape}, {g.shape}, {m.shape} differ")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, step, state.beta1, state.beta2, state.lr, state.eps)


def finite_diff_grad(
    f: Callable[[list[np.ndarray]], float],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Central differences of a scalar function over every coordinate of ``params``.

    ``params`` is perturbed in place and restored; ``f`` receives the list.
    """
    params = list(params)
    out = []
    for pi, p in enumerate(params):
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(params)
            flat[j] = orig - h
            fm = f(params)
            flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericalError(f"non-finite objective at array {pi}, coordinate {j}")
            gflat[j] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """Norm-wise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {b.shape}")
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom


def worst_coordinate(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    diff = np.abs(np.asarray(a) - np.asarray(b))
    return tuple(int(i) for i in np.unravel_index(int(np.argmax(diff)), diff.shape)) if diff.size else ()
