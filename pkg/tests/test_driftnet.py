import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from careflow import checkpoint
from careflow.driftnet import ConfigError, DriftModel, drift_backward, drift_eval, drift_forward, init_drift, time_embed
from careflow.numkit import MlpParams, ShapeError, finite_diff_grad, init_params, make_rng, relative_error
from careflow.pipeline import RunConfig, init_bundle


def test_embedding_at_zero():
    assert time_embed(0.0, 4).tolist() == [0.0, 1.0, 0.0, 1.0]


def test_embedding_high_precision_values():
    # sin/cos(500) from a 40-digit evaluation
    te = time_embed(0.5, 2)
    assert te[0] == pytest.approx(-0.46777180532247612632, abs=1e-12)
    assert te[1] == pytest.approx(-0.88384927343147796217, abs=1e-12)
    # d=4, t=0.3: frequencies 1000 and 1000/100
    te = time_embed(0.3, 4)
    expected = [-0.99975583990114951122, -0.022096619278683942689, 0.1411200080598672221, -0.98999249660044545727]
    assert np.max(np.abs(te - expected)) < 1e-12


def test_embedding_matches_formula():
    d, t = 8, 0.37
    te = time_embed(t, d)
    for i in range(d // 2):
        w = 1000.0 / 10000.0 ** (2 * i / d)
        assert te[2 * i] == pytest.approx(math.sin(t * w), abs=1e-12)
        assert te[2 * i + 1] == pytest.approx(math.cos(t * w), abs=1e-12)


@given(t=st.floats(0.0, 1.0), half=st.integers(1, 16))
def test_embedding_range_and_length(t, half):
    te = time_embed(t, 2 * half)
    assert te.shape == (2 * half,)
    assert np.all(np.abs(te) <= 1.0)


def test_embedding_vectorised():
    ts = np.array([0.0, 0.25, 1.0])
    rows = time_embed(ts, 6)
    for t, row in zip(ts, rows):
        assert np.array_equal(row, time_embed(t, 6))


def test_embedding_errors():
    with pytest.raises(ConfigError):
        time_embed(0.5, 3)
    with pytest.raises(ValueError):
        time_embed(1.5, 4)


def test_drift_input_width_contract():
    with pytest.raises(ShapeError):
        DriftModel(init_params([5, 3], ["identity"], make_rng(0)))
    with pytest.raises(ConfigError):
        init_drift(3, make_rng(0))


def test_zero_final_layer_gives_zero_velocity():
    m = init_drift(4, make_rng(0))
    m.net.weights[-1][:] = 0.0
    x = make_rng(1).standard_normal((5, 4))
    for t in (0.0, 0.3, 1.0):
        assert not np.any(drift_eval(m, x, t))


def test_drift_deterministic_and_time_conditioned():
    m = init_drift(4, make_rng(2))
    x = make_rng(3).standard_normal((5, 4))
    assert drift_eval(m, x, 0.4).tobytes() == drift_eval(m, x, 0.4).tobytes()
    assert not np.allclose(drift_eval(m, x, 0.0), drift_eval(m, x, 1.0))


@given(batch=st.integers(1, 7), half=st.integers(1, 4))
def test_output_width_equals_feature_width(batch, half):
    d = 2 * half
    m = init_drift(d, make_rng(batch))
    assert drift_eval(m, np.ones((batch, d)), 0.5).shape == (batch, d)


def test_drift_shape_errors():
    m = init_drift(4, make_rng(0))
    with pytest.raises(ShapeError):
        drift_eval(m, np.ones((2, 3)), 0.5)
    with pytest.raises(ShapeError):
        drift_forward(m, np.ones((2, 4)), np.array([0.1, 0.2, 0.3]))


def test_backward_matches_finite_differences():
    rng = make_rng(4)
    m = init_drift(4, rng)
    x = rng.standard_normal((3, 4))
    t = rng.uniform(0, 1, 3)
    w = rng.standard_normal((3, 4))
    _, cache = drift_forward(m, x, t)
    gx, grads = drift_backward(m, cache, w)
    assert gx.shape == (3, 4)  # the embedding slice is dropped
    num = finite_diff_grad(lambda ps: float(np.sum(drift_forward(m, x, t)[0] * w)), m.net.arrays())
    for a, n in zip(grads, num):
        assert relative_error(a, n) < 1e-4
    num_x = finite_diff_grad(lambda ps: float(np.sum(drift_forward(m, ps[0], t)[0] * w)), [x])[0]
    assert relative_error(gx, num_x) < 1e-4


def test_zero_upstream_gives_zero_grads():
    m = init_drift(4, make_rng(0))
    _, cache = drift_forward(m, np.ones((2, 4)), 0.2)
    gx, grads = drift_backward(m, cache, np.zeros((2, 4)))
    assert not np.any(gx) and not any(np.any(g) for g in grads)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    cfg = RunConfig(d=4)
    b = init_bundle(cfg, {"a": 2, "v": 3, "l": 2}, 4)
    # awkward values that need all 17 significant digits
    b.forward["a"].net.weights[0][0, 0] = 0.1 + 0.2
    b.backward["v"].net.biases[1][2] = -1.2345678901234567e-300
    checkpoint.save(tmp_path / "c.json", b, cfg)
    b2, doc = checkpoint.load(tmp_path / "c.json")
    for (n1, a1), (n2, a2) in zip(b.named_arrays(), b2.named_arrays()):
        assert n1 == n2 and a1.tobytes() == a2.tobytes()
    assert "forward/a2l/layer0/W" in doc["arrays"] and doc["dims"]["backward/v2l"] == [8, 8, 8, 4]
    x = make_rng(0).standard_normal((3, 4))
    assert drift_eval(b.forward["v"], x, 0.7).tobytes() == drift_eval(b2.forward["v"], x, 0.7).tobytes()
    assert RunConfig.from_dict(doc["config"]) == cfg


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{}")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(p)
    p.write_text("not json")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(p)
