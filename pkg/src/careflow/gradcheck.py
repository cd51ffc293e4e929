"""Finite-difference audit of every hand-written gradient.

Suites run on tiny instances (raw width 3, feature width 4, batch 4) and
compare analytic gradients with central differences, array by array.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .driftnet import drift_backward, drift_forward, init_drift
from .flowcore import FlowConfig, backward_loss, euler_backward, euler_forward, forward_loss, sample_pairs
from .numkit import finite_diff_grad, init_params, make_rng, mlp_backward, mlp_forward, relative_error, worst_coordinate
from .pipeline import RunConfig, init_bundle, total_loss
from .synthdata import generate, shifted_mixture_2d

TOLERANCE = 1e-4
STEP = 1e-5
RAW_DIM = 3
FEATURE_DIM = 4  # the time embedding needs an even width
BATCH = 4


@dataclass
class CheckResult:
    suite: str
    term: str
    array: str
    rel_error: float
    worst: tuple[int, ...]

    @property
    def passed(self) -> bool:
        return self.rel_error < TOLERANCE

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return f"{status} {self.suite:9s} {self.term:28s} {self.array:24s} rel_err={self.rel_error:.2e} worst={self.worst}"


@dataclass
class Fault:
    """Test hook: corrupt one analytic gradient coordinate before comparison."""
    term: str
    array: str
    index: tuple[int, ...]
    amount: float = 1e-2


def _compare(suite, term, names, analytic, f, params, fault: Fault | None) -> list[CheckResult]:
    numeric = finite_diff_grad(f, params, STEP)
    out = []
    for name, a, n in zip(names, analytic, numeric):
        a = np.array(a, dtype=np.float64)
        if fault is not None and fault.term == term and fault.array == name:
            a[fault.index] += fault.amount
        out.append(CheckResult(suite, term, name, relative_error(a, n), worst_coordinate(a, n)))
    return out


def _layer_names(prefix: str, n_layers: int) -> list[str]:
    return [f"{prefix}/layer{k}/{p}" for k in range(n_layers) for p in ("W", "b")]


def check_numkit(rng: np.random.Generator, fault: Fault | None = None) -> list[CheckResult]:
    net = init_params([RAW_DIM, 5, 5, 2], ["tanh", "tanh", "identity"], rng)
    x = rng.standard_normal((BATCH, RAW_DIM))
    w_out = rng.standard_normal((BATCH, 2))
    y, cache = mlp_forward(net, x)
    g_in, grads = mlp_backward(net, cache, w_out)
    names = _layer_names("mlp", 3)
    res = _compare("numkit", "mlp weighted output", names, grads,
                   lambda ps: float(np.sum(mlp_forward(net, x)[0] * w_out)), net.arrays(), fault)
    res += _compare("numkit", "mlp input", ["x"], [g_in],
                    lambda ps: float(np.sum(mlp_forward(net, ps[0])[0] * w_out)), [x], fault)
    return res


def check_driftnet(rng: np.random.Generator, fault: Fault | None = None) -> list[CheckResult]:
    model = init_drift(FEATURE_DIM, rng)
    x = rng.standard_normal((BATCH, FEATURE_DIM))
    t = rng.uniform(0, 1, BATCH)
    w_out = rng.standard_normal((BATCH, FEATURE_DIM))
    _, cache = drift_forward(model, x, t)
    gx, grads = drift_backward(model, cache, w_out)
    f = lambda ps: float(np.sum(drift_forward(model, x, t)[0] * w_out))
    res = _compare("driftnet", "drift weighted output", _layer_names("drift", 3), grads, f, model.net.arrays(), fault)
    res += _compare("driftnet", "drift input", ["x"], [gx],
                    lambda ps: float(np.sum(drift_forward(model, ps[0], t)[0] * w_out)), [x], fault)
    return res


def check_flowcore(rng: np.random.Generator, fault: Fault | None = None) -> list[CheckResult]:
    d = FEATURE_DIM
    fwd, bwd = init_drift(d, rng), init_drift(d, rng, "backward")
    x_src = rng.standard_normal((BATCH, d))
    x_tgt = rng.standard_normal((BATCH, d)) + 2.0
    labels = np.array([0, 1, 0, 1])
    names = _layer_names("forward", 3)
    res = []
    for label, eps in (("forward hinge (adaptive)", 0.1), ("forward hinge (eta=0)", 0.0)):
        pairs = sample_pairs(x_src, x_tgt, labels, FlowConfig(epsilon=eps, beta=2), make_rng(11))
        _, grads = forward_loss(fwd, pairs)
        res += _compare("flowcore", label, names, grads, lambda ps: forward_loss(fwd, pairs)[0],
                        fwd.net.arrays(), fault)
    mapped = euler_forward(fwd, x_src, 2)[0]
    t = rng.uniform(0, 1, BATCH)
    bl = backward_loss(bwd, x_src, mapped, t=t)
    res += _compare("flowcore", "cycle loss", _layer_names("backward", 3), bl.grads,
                    lambda ps: backward_loss(bwd, x_src, mapped, t=t).loss, bwd.net.arrays(), fault)
    res += _compare("flowcore", "cycle loss", ["x_mapped"], [bl.grad_mapped],
                    lambda ps: backward_loss(bwd, x_src, ps[0], t=t).loss, [mapped.copy()], fault)
    w_out = rng.standard_normal((BATCH, d))
    for steps in (1, 2, 3):
        _, tape = euler_forward(fwd, x_src, steps)
        g0, grads = euler_backward(fwd, tape, w_out)
        term = f"euler map N={steps}"
        res += _compare("flowcore", term, names, grads,
                        lambda ps: float(np.sum(euler_forward(fwd, x_src, steps)[0] * w_out)), fwd.net.arrays(), fault)
        res += _compare("flowcore", term, ["x0"], [g0],
                        lambda ps: float(np.sum(euler_forward(fwd, ps[0], steps)[0] * w_out)), [x_src.copy()], fault)
    return res


PIPELINE_TERMS = {
    "main loss": dict(alpha_f=0.0, alpha_b=0.0),
    "forward loss": dict(alpha_f=1.0, alpha_b=0.0),
    "cycle loss": dict(alpha_f=0.0, alpha_b=1.0),
    "total objective": dict(alpha_f=1.0, alpha_b=0.1),
    "total objective, regression": dict(alpha_f=1.0, alpha_b=0.1, task="regression"),
}


def check_pipeline(seed: int = 0, fault: Fault | None = None) -> list[CheckResult]:
    res = []
    for term, kw in PIPELINE_TERMS.items():
        task = kw.get("task", "classification")
        spec = shifted_mixture_2d(raw_dim=RAW_DIM, n_train=BATCH, n_val=0, n_test=0, seed=seed, task=task)
        batch = generate(spec, "train")
        cfg = replace(RunConfig(d=FEATURE_DIM, seed=seed, beta=2), **kw)
        bundle = init_bundle(cfg, spec.raw_dims, spec.n_classes if task == "classification" else 1)
        # the main loss alone isolates the main path; the alignment terms are
        # checked with the main loss switched off
        main_weight = 1.0 if term in ("main loss",) or term.startswith("total") else 0.0
        _, grads, parts = total_loss(bundle, batch, cfg, make_rng(seed + 3), main_weight)
        f = lambda ps: total_loss(bundle, batch, cfg, make_rng(seed + 3), main_weight, parts.detached)[0]
        names = [n for n, _ in bundle.named_arrays()]
        res += _compare("pipeline", term, names, grads, f, bundle.arrays(), fault)
    return res


SUITES: dict[str, Callable] = {
    "numkit": lambda seed, fault: check_numkit(make_rng(seed), fault),
    "driftnet": lambda seed, fault: check_driftnet(make_rng(seed + 1), fault),
    "flowcore": lambda seed, fault: check_flowcore(make_rng(seed + 2), fault),
    "pipeline": lambda seed, fault: check_pipeline(seed, fault),
}


def run_all(seed: int = 0, fault: Fault | None = None, suites: Sequence[str] = tuple(SUITES)) -> list[CheckResult]:
    out = []
    for name in suites:
        out += SUITES[name](seed, fault)
    return out
