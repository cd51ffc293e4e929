"""End-to-end model: encoders, a->l and v->l flows, concat fusion and predictor.

Gradient routing in :func:`total_loss`:

* the main loss reaches every parameter, through the Euler maps into the
  encoders (unless ``detach_main_path``);
* the forward (hinge) loss sees detached features and only trains the
  forward drifts;
* the cycle loss treats the source features as constants but backpropagates
  through the mapped features into the forward drift and the encoder.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import flowcore
from .driftnet import DriftModel, init_drift
from .flowcore import FlowConfig, backward_loss, euler_backward, euler_forward, forward_loss, sample_pairs
from .metrics import cycle_error, energy_distance, task_metrics
from .numkit import (AdamState, MlpParams, NumericalError, adam_step, init_params, make_rng, mlp_backward,
                     mlp_forward, spawn_rngs)
from .synthdata import MODALITIES, Split

log = logging.getLogger(__name__)

SOURCES = ("a", "v")
ABLATIONS = ("no_alignment", "no_cyclic", "no_adaptive", "no_one_to_many")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    d: int = 16
    epochs: int = 150
    batch_size: int = 32
    lr: float = 1e-3
    alpha_f: float = 1.0
    alpha_b: float = 0.1
    epsilon: float = 0.1
    beta: int = 4
    euler_steps: int = 2
    task: str = "classification"
    no_alignment: bool = False
    no_cyclic: bool = False
    no_adaptive: bool = False
    no_one_to_many: bool = False
    detach_main_path: bool = False
    cycle_grad_to_encoder: bool = True
    k_bins: int = 7
    seeds: int = 5

    def validate(self) -> "RunConfig":
        if self.d <= 0 or self.d % 2:
            raise ConfigError(f"d must be a positive even number, got {self.d}")
        if self.alpha_f < 0 or self.alpha_b < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.beta < 0 or int(self.beta) != self.beta:
            raise ConfigError("beta must be a non-negative integer")
        if self.euler_steps < 1:
            raise ConfigError("euler_steps must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.seeds < 1 or self.k_bins < 2:
            raise ConfigError("epochs >= 0, batch_size >= 1, seeds >= 1 and k_bins >= 2 required")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.task not in flowcore.TASKS:
            raise ConfigError(f"task must be one of {flowcore.TASKS}")
        return self

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        names = {f.name: f for f in fields(cls)}
        unknown = set(doc) - set(names)
        if unknown:
            raise ConfigError(f"unknown run keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in doc.items():
            default = getattr(cls, key)
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{key} must be a boolean")
            elif isinstance(default, int):
                if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
                    raise ConfigError(f"{key} must be an integer")
                value = int(value)
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{key} must be a number")
                value = float(value)
            elif not isinstance(value, str):
                raise ConfigError(f"{key} must be a string")
            kwargs[key] = value
        return cls(**kwargs).validate()

    def to_dict(self) -> dict:
        return asdict(self)

    # effective values after ablation switches
    @property
    def effective_alpha_b(self) -> float:
        return 0.0 if self.no_cyclic else self.alpha_b

    @property
    def effective_beta(self) -> int:
        return 0 if self.no_one_to_many else int(self.beta)

    @property
    def effective_epsilon(self) -> float:
        return self.epsilon

    def flow_config(self) -> FlowConfig:
        return FlowConfig(epsilon=self.epsilon, beta=self.effective_beta, euler_steps=self.euler_steps,
                          task=self.task)

    def with_ablation(self, name: str | None) -> "RunConfig":
        if name in (None, "full"):
            return self
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
        return replace(self, **{name: True})


@dataclass
class ModelBundle:
    encoders: dict[str, MlpParams]
    forward: dict[str, DriftModel]
    backward: dict[str, DriftModel]
    fusion: MlpParams
    predictor: MlpParams

    @property
    def d(self) -> int:
        return self.fusion.out_dim

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every parameter array with a stable name, in optimizer order."""
        out = []

        def add(prefix, net):
            for k, (w, b) in enumerate(zip(net.weights, net.biases)):
                out.append((f"{prefix}/layer{k}/W", w))
                out.append((f"{prefix}/layer{k}/b", b))

        for m in MODALITIES:
            add(f"encoder/{m}", self.encoders[m])
        for m in SOURCES:
            add(f"forward/{m}2l", self.forward[m].net)
        for m in SOURCES:
            add(f"backward/{m}2l", self.backward[m].net)
        add("fusion", self.fusion)
        add("predictor", self.predictor)
        return out

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named_arrays()]

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)


def init_bundle(config: RunConfig, raw_dims: dict[str, int], out_dim: int, seed: int | None = None) -> ModelBundle:
    rng = make_rng(config.seed if seed is None else seed)
    d = config.d
    encoders = {m: init_params([raw_dims[m], d, d], ["tanh", "identity"], rng) for m in MODALITIES}
    fwd = {m: init_drift(d, rng, "forward") for m in SOURCES}
    bwd = {m: init_drift(d, rng, "backward") for m in SOURCES}
    fusion = init_params([3 * d, d, d], ["tanh", "identity"], rng)
    predictor = init_params([d, out_dim], ["identity"], rng)
    return ModelBundle(encoders, fwd, bwd, fusion, predictor)


def output_dim(task: str, n_classes: int) -> int:
    return n_classes if task == "classification" else 1


# --- forward pass -------------------------------------------------------------

@dataclass
class Intermediates:
    X: dict[str, np.ndarray]
    mapped: dict[str, np.ndarray]
    fused: np.ndarray
    enc_caches: dict = field(default_factory=dict)
    tapes: dict = field(default_factory=dict)
    fusion_cache: object = None
    pred_cache: object = None


def forward_pass(bundle: ModelBundle, U: dict[str, np.ndarray], config: RunConfig,
                 euler_steps: int | None = None) -> tuple[np.ndarray, Intermediates]:
    """Predictions and the features along the way.

    The Euler maps only ever see the source features; language features enter
    at fusion.
    """
    steps = config.euler_steps if euler_steps is None else euler_steps
    X, enc_caches = {}, {}
    for m in MODALITIES:
        X[m], enc_caches[m] = mlp_forward(bundle.encoders[m], U[m])
    mapped, tapes = {}, {}
    for m in SOURCES:
        if config.no_alignment:
            mapped[m] = X[m]
        else:
            mapped[m], tapes[m] = euler_forward(bundle.forward[m], X[m], steps)
    fused, fusion_cache = mlp_forward(bundle.fusion, np.concatenate([X["l"], mapped["a"], mapped["v"]], axis=1))
    pred, pred_cache = mlp_forward(bundle.predictor, fused)
    return pred, Intermediates(X, mapped, fused, enc_caches, tapes, fusion_cache, pred_cache)


def main_loss(predictions, labels, task: str) -> tuple[float, np.ndarray]:
    """Mean squared error or softmax cross-entropy, with gradient w.r.t. predictions."""
    p = np.asarray(predictions, dtype=np.float64)
    n = p.shape[0]
    if task == "regression":
        y = np.asarray(labels, dtype=np.float64).reshape(n, -1)
        if y.shape != p.shape:
            raise ValueError(f"predictions {p.shape} and labels {y.shape} disagree")
        diff = p - y
        return float(np.sum(diff * diff) / diff.size), 2.0 * diff / diff.size
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError("classification labels must be a vector of class indices")
    if np.any(y < 0) or np.any(y >= p.shape[1]) or np.any(y != np.round(y)):
        raise ValueError(f"labels must be class indices in [0, {p.shape[1]})")
    y = y.astype(np.int64)
    shifted = p - p.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    loss = float(np.mean(logz - shifted[np.arange(n), y]))
    prob = np.exp(shifted - logz[:, None])
    prob[np.arange(n), y] -= 1.0
    return loss, prob / n


# --- objective ----------------------------------------------------------------

@dataclass
class LossParts:
    main: float
    forward: dict[str, float | None]
    backward: dict[str, float | None]
    total: float
    skipped_cross: int = 0
    detached: dict = field(default_factory=dict)


def total_loss(bundle: ModelBundle, batch: Split, config: RunConfig, rng: np.random.Generator,
               main_weight: float = 1.0, detached: dict[str, np.ndarray] | None = None,
               ) -> tuple[float, list[np.ndarray], LossParts]:
    """Main loss plus weighted forward and cycle losses for both source modalities.

    Returns the scalar, gradients aligned with ``bundle.arrays()`` and the
    individual terms.  ``main_weight`` exists for gradient-isolation checks.
    ``detached`` substitutes fixed values for the stop-gradient features
    (``parts.detached`` from a previous call); finite-difference checks use it
    to hold those inputs constant.
    """
    pair_rng, cycle_rng = rng.spawn(2)
    named = bundle.named_arrays()
    names = [n for n, _ in named]
    grads = {n: np.zeros_like(a) for n, a in named}
    by_prefix: dict[str, list[str]] = {}
    for n in names:
        by_prefix.setdefault(n.rsplit("/", 2)[0], []).append(n)

    def accumulate(prefix, arrays, scale=1.0):
        for n, g in zip(by_prefix[prefix], arrays):
            grads[n] += scale * g

    pred, inter = forward_pass(bundle, batch.U, config)
    const = {m: inter.X[m].copy() for m in MODALITIES} if detached is None else detached
    main, g_pred = main_loss(pred, batch.y, config.task)
    g_pred = main_weight * g_pred
    g_fused, gp = mlp_backward(bundle.predictor, inter.pred_cache, g_pred)
    accumulate("predictor", gp)
    g_cat, gf = mlp_backward(bundle.fusion, inter.fusion_cache, g_fused)
    accumulate("fusion", gf)
    d = bundle.d
    g_X = {"l": g_cat[:, :d].copy()}
    g_mapped = {"a": g_cat[:, d:2 * d].copy(), "v": g_cat[:, 2 * d:].copy()}

    fwd_losses: dict[str, float | None] = {m: None for m in SOURCES}
    bwd_losses: dict[str, float | None] = {m: None for m in SOURCES}
    skipped = 0
    total = main_weight * main
    if config.no_alignment:
        for m in SOURCES:
            g_X[m] = g_mapped[m]
    else:
        fcfg = config.flow_config()
        alpha_b = config.effective_alpha_b
        for m in SOURCES:
            # forward loss on detached features
            pairs = sample_pairs(const[m], const["l"], batch.y, fcfg, pair_rng, source=m, target="l")
            if config.no_adaptive:
                pairs.eta = np.zeros_like(pairs.eta)
            skipped += pairs.skipped_cross
            lf, gdrift = forward_loss(bundle.forward[m], pairs)
            fwd_losses[m] = lf
            total += config.alpha_f * lf
            if config.alpha_f:
                accumulate(f"forward/{m}2l", gdrift, config.alpha_f)
            # cycle loss: x_src constant, mapped features carry gradient
            bl = backward_loss(bundle.backward[m], const[m], inter.mapped[m], cycle_rng)
            bwd_losses[m] = bl.loss
            if alpha_b:
                total += alpha_b * bl.loss
                accumulate(f"backward/{m}2l", bl.grads, alpha_b)
                if config.cycle_grad_to_encoder:
                    g_mapped[m] = g_mapped[m] + alpha_b * bl.grad_mapped
                else:
                    _, gdrift = euler_backward(bundle.forward[m], inter.tapes[m], alpha_b * bl.grad_mapped)
                    accumulate(f"forward/{m}2l", gdrift)
            g_x0, gdrift = euler_backward(bundle.forward[m], inter.tapes[m], g_mapped[m])
            accumulate(f"forward/{m}2l", gdrift)
            g_X[m] = np.zeros_like(g_x0) if config.detach_main_path else g_x0
    for m in MODALITIES:
        _, ge = mlp_backward(bundle.encoders[m], inter.enc_caches[m], g_X[m])
        accumulate(f"encoder/{m}", ge)
    parts = LossParts(main, fwd_losses, bwd_losses, float(total), skipped, const)
    return float(total), [grads[n] for n in names], parts


# --- training -----------------------------------------------------------------

@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    test: dict = field(default_factory=dict)
    best_epoch: int = -1
    warnings: int = 0
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        """JSON form; wall-clock time is left out so reports are reproducible."""
        return {"epochs": self.epochs, "test": self.test, "best_epoch": self.best_epoch, "warnings": self.warnings}


class TrainingDiverged(NumericalError):
    def __init__(self, epoch: int, batch: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def _selection_score(metrics: dict, task: str) -> float:
    return metrics["Acc"] if task == "classification" else -metrics["MAE"]


def train(bundle: ModelBundle, splits: dict[str, Split], config: RunConfig,
          label_range: tuple[float, float] = (-3.0, 3.0)) -> TrainReport:
    """Adam over seeded shuffled minibatches; the bundle ends at the best validation epoch."""
    config.validate()
    train_split = splits["train"]
    if len(train_split) == 0 and config.epochs:
        raise ValueError("empty training split")
    for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
        if a in splits and b in splits and np.intersect1d(splits[a].ids, splits[b].ids).size:
            raise ValueError(f"splits {a} and {b} overlap")
    start = time.perf_counter()
    shuffle_rng, step_rng = spawn_rngs(config.seed + 1, 2)
    named = bundle.named_arrays()
    state = AdamState.zeros_like([a for _, a in named], lr=config.lr)
    report = TrainReport()
    best_score, best = -math.inf, None
    n = len(train_split)
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        sums = {"main": 0.0, "total": 0.0}
        fsum = {m: 0.0 for m in SOURCES}
        bsum = {m: 0.0 for m in SOURCES}
        n_batches = 0
        for bi, lo in enumerate(range(0, n, config.batch_size)):
            batch = train_split[perm[lo:lo + config.batch_size]]
            try:
                loss, grads, parts = total_loss(bundle, batch, config, step_rng)
            except NumericalError as exc:
                raise TrainingDiverged(epoch, bi, "forward pass") from exc
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(epoch, bi)
            params = [a for _, a in named]
            new_params, state = adam_step(params, grads, state)
            for p, q in zip(params, new_params):
                p[...] = q
            sums["main"] += parts.main
            sums["total"] += parts.total
            for m in SOURCES:
                fsum[m] += parts.forward[m] or 0.0
                bsum[m] += parts.backward[m] or 0.0
            report.warnings += 1 if parts.skipped_cross else 0
            n_batches += 1
        row = {"epoch": epoch, "main_loss": sums["main"] / n_batches, "total_loss": sums["total"] / n_batches}
        for m in SOURCES:
            row[f"forward_loss_{m}"] = None if config.no_alignment else fsum[m] / n_batches
            row[f"backward_loss_{m}"] = None if config.no_alignment else bsum[m] / n_batches
        if "val" in splits and len(splits["val"]):
            val_pred = predict(bundle, splits["val"], config)
            val = task_metrics(val_pred, splits["val"].y, config.task, label_range, config.k_bins)
            val["main_loss"] = main_loss(val_pred, splits["val"].y, config.task)[0]
            row.update({f"val_{k}": v for k, v in val.items() if k != "flags"})
            score = _selection_score(val, config.task)
        else:
            score = float(epoch)
        # ties go to the later epoch: accuracy saturates early, the flows do not
        if score >= best_score:
            best_score, best, report.best_epoch = score, bundle.copy(), epoch
        report.epochs.append(row)
    if best is not None:
        for (_, p), (_, q) in zip(bundle.named_arrays(), best.named_arrays()):
            p[...] = q
    if "test" in splits and len(splits["test"]):
        report.test = evaluate(bundle, splits["test"], config, label_range)
    report.wall_clock = time.perf_counter() - start
    return report


def predict(bundle: ModelBundle, split: Split, config: RunConfig, euler_steps: int | None = None) -> np.ndarray:
    return forward_pass(bundle, split.U, config, euler_steps)[0]


def evaluate(bundle: ModelBundle, split: Split, config: RunConfig,
             label_range: tuple[float, float] = (-3.0, 3.0), euler_steps: int | None = None) -> dict:
    pred = predict(bundle, split, config, euler_steps)
    return task_metrics(pred, split.y, config.task, label_range, config.k_bins)


def backward_map(bundle: ModelBundle, m: str, x_mapped: np.ndarray, steps: int) -> np.ndarray:
    return flowcore.euler_map(bundle.backward[m], x_mapped, steps)[0]


def alignment_report(bundle: ModelBundle, split: Split, config: RunConfig, euler_steps: int | None = None) -> dict:
    """Modality gap before/after mapping and cycle error, per source modality."""
    steps = config.euler_steps if euler_steps is None else euler_steps
    _, inter = forward_pass(bundle, split.U, replace(config, no_alignment=False), steps)
    out = {}
    for m in SOURCES:
        out[f"energy_pre_{m}"] = energy_distance(inter.X[m], inter.X["l"])
        out[f"energy_post_{m}"] = energy_distance(inter.mapped[m], inter.X["l"])
        rec = backward_map(bundle, m, inter.mapped[m], steps)
        out[f"cycle_error_{m}"] = cycle_error(inter.X[m], rec)
    return out


def straightness_report(bundle: ModelBundle, split: Split, config: RunConfig, coarse: int = 2,
                        fine: int = 32) -> dict:
    """Mean gap between ``coarse``- and ``fine``-step endpoints as a fraction of
    the mean transport length (fine endpoint minus start)."""
    _, inter = forward_pass(bundle, split.U, replace(config, no_alignment=True))
    out = {}
    for m in SOURCES:
        x = inter.X[m]
        end_c = flowcore.euler_map(bundle.forward[m], x, coarse)[0]
        end_f = flowcore.euler_map(bundle.forward[m], x, fine)[0]
        length = float(np.mean(np.linalg.norm(end_f - x, axis=1)))
        shift = float(np.mean(np.linalg.norm(end_c - end_f, axis=1)))
        out[f"displacement_{m}"] = shift
        out[f"transport_length_{m}"] = length
        out[f"displacement_ratio_{m}"] = shift / length if length > 0 else math.inf
    return out


def class_center_separation(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean pairwise distance between class centroids."""
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    cents = np.stack([x[labels == c].mean(axis=0) for c in classes])
    dists = [np.linalg.norm(cents[i] - cents[j]) for i in range(len(cents)) for j in range(i + 1, len(cents))]
    return float(np.mean(dists))


def oracle_proximity(bundle: ModelBundle, split: Split, config: RunConfig, oracle_l: dict[str, np.ndarray],
                     euler_steps: int | None = None) -> dict:
    """Distance from mapped features to the language encoding of the exact transport.

    ``oracle_l[m]`` holds the noise-free language-space counterparts of
    ``split.U[m]``; they are encoded with the language encoder and compared with
    ``euler_map(X_m)``, relative to the class-center separation of ``X_l``.
    """
    steps = config.euler_steps if euler_steps is None else euler_steps
    _, inter = forward_pass(bundle, split.U, replace(config, no_alignment=False), steps)
    sep = class_center_separation(inter.X["l"], np.asarray(split.y))
    out = {"center_separation": sep}
    for m in SOURCES:
        target = mlp_forward(bundle.encoders["l"], oracle_l[m])[0]
        dist = float(np.mean(np.linalg.norm(inter.mapped[m] - target, axis=1)))
        out[f"oracle_distance_{m}"] = dist
        out[f"oracle_ratio_{m}"] = dist / sep
    return out
