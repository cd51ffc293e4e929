"""Time-conditioned velocity networks.

A drift model evaluates ``MLP(concat(x, time_embed(t)))``.  The embedding has
no parameters, so only the feature slice of the input gradient is returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import MlpCache, MlpParams, ShapeError, as_matrix, init_params, mlp_backward, mlp_forward

DIRECTIONS = ("forward", "backward")


class ConfigError(ValueError):
    pass


def time_embed(t, d: int) -> np.ndarray:
    """Sinusoidal embedding of ``t`` in [0, 1].

    Scalar ``t`` gives a vector of length ``d``; an array of times gives one
    row per time.  Even slots hold ``sin(1000 t / 10000**(2i/d))``, odd slots the
    matching cosine.
    """
    if d <= 0 or d % 2:
        raise ConfigError(f"embedding dimension must be a positive even number, got {d}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError("t must lie in [0, 1]")
    freq = 1000.0 / 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    angle = t_arr[..., None] * freq
    out = np.empty(t_arr.shape + (d,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


@dataclass
class DriftModel:
    net: MlpParams
    direction: str = "forward"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.net.in_dim != 2 * self.net.out_dim:
            raise ShapeError(
                f"drift input width {self.net.in_dim} must be twice the feature width {self.net.out_dim}"
            )

    @property
    def dim(self) -> int:
        return self.net.out_dim

    def copy(self) -> "DriftModel":
        return DriftModel(self.net.copy(), self.direction)


def init_drift(d: int, rng: np.random.Generator, direction: str = "forward") -> DriftModel:
    """2d -> 2d (tanh) -> 2d (tanh) -> d (identity)."""
    if d % 2:
        raise ConfigError(f"feature dimension must be even, got {d}")
    net = init_params([2 * d, 2 * d, 2 * d, d], ["tanh", "tanh", "identity"], rng)
    return DriftModel(net, direction)


def drift_forward(model: DriftModel, x, t) -> tuple[np.ndarray, MlpCache]:
    x = as_matrix(x)
    d = model.dim
    if x.shape[1] != d:
        raise ShapeError(f"drift expects {d} feature columns, got {x.shape[1]}")
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.ndim == 0:
        emb = np.broadcast_to(time_embed(t_arr, d), (x.shape[0], d))
    else:
        if t_arr.shape != (x.shape[0],):
            raise ShapeError(f"per-row times must have shape ({x.shape[0]},), got {t_arr.shape}")
        emb = time_embed(t_arr, d)
    return mlp_forward(model.net, np.concatenate([x, emb], axis=1))


def drift_eval(model: DriftModel, x, t) -> np.ndarray:
    return drift_forward(model, x, t)[0]


def drift_backward(model: DriftModel, cache: MlpCache, grad_out) -> tuple[np.ndarray, list[np.ndarray]]:
    grad_in, grads = mlp_backward(model.net, cache, grad_out)
    return grad_in[:, : model.dim], grads
