import math

import numpy as np
import pytest

from sitevec.errors import CompatibilityError, CorruptionError, ShapeError
from sitevec.model import (
    ModelWeights,
    backward,
    embed,
    forward,
    init_weights,
    load_weights,
    save_weights,
    sigmoid,
)
from sitevec.train import weighted_bce, weighted_bce_grad
from oracles import max_relative_error, numeric_gradients

TINY = (5, 4, 3, 2)


def _tiny(seed, dims=TINY):
    return init_weights(seed, dims, dtype=np.float64)


def test_init_is_deterministic():
    a, b = init_weights(1), init_weights(1)
    for name, p in a.params().items():
        assert p.tobytes() == b.params()[name].tobytes()
    assert a.checksum() != init_weights(2).checksum()


def test_init_shapes_and_scale():
    w = init_weights(0)
    assert w.W1.shape == (1000, 5169) and w.W2.shape == (100, 1000) and w.W3.shape == (14, 100)
    assert w.dtype == np.float32
    assert not w.b1.any() and not w.b2.any() and not w.b3.any()
    assert abs(w.W1.std() / math.sqrt(2 / 5169) - 1) < 0.05


def test_zero_weights_give_one_half():
    w = _tiny(0)
    zero = w.with_params({k: np.zeros_like(p) for k, p in w.params().items()})
    probs, _ = forward(np.random.default_rng(0).standard_normal((4, 5)), zero)
    assert np.all(probs == 0.5)
    assert np.all(embed(np.ones(5), zero) == 0.0)


def test_eval_is_deterministic():
    w = init_weights(3)
    x = np.random.default_rng(1).standard_normal((3, 5169)).astype(np.float32)
    assert forward(x, w)[0].tobytes() == forward(x, w)[0].tobytes()


def test_hand_computed_toy_network():
    w = ModelWeights(
        W1=np.array([[2.0]]), b1=np.array([-1.0]),
        W2=np.array([[3.0]]), b2=np.array([0.5]),
        W3=np.array([[-1.0]]), b3=np.array([0.25]),
        class_order=("only",),
    )
    # h1 = relu(2*1.5 - 1) = 2; h2 = relu(3*2 + 0.5) = 6.5; z = -6.5 + 0.25 = -6.25
    probs, _ = forward(np.array([1.5]), w)
    assert probs[0, 0] == pytest.approx(1 / (1 + math.exp(6.25)), rel=1e-12)
    assert embed(np.array([1.5]), w)[0] == 6.5
    # negative input is cut by the first ReLU: h1 = 0, h2 = 0.5, z = -0.25
    probs, _ = forward(np.array([-1.0]), w)
    assert probs[0, 0] == pytest.approx(1 / (1 + math.exp(0.25)), rel=1e-12)


def test_width_mismatch():
    with pytest.raises(ShapeError):
        forward(np.zeros((2, 6)), _tiny(0))


def test_train_mode_needs_seed():
    with pytest.raises(ValueError):
        forward(np.zeros((1, 5)), _tiny(0), train=True)


def test_outputs_strictly_inside_unit_interval():
    w = init_weights(5)
    x = np.random.default_rng(5).standard_normal((50, 5169)).astype(np.float32)
    p, _ = forward(x, w)
    assert np.all((p > 0) & (p < 1))


def test_sigmoid_extremes():
    z = np.array([-800.0, 0.0, 800.0])
    out = sigmoid(z)
    assert out[1] == 0.5 and out[0] == 0.0 and out[2] == 1.0
    assert np.all(np.isfinite(out))


def test_embed_composes_with_forward():
    w = init_weights(7)
    x = np.random.default_rng(7).standard_normal((8, 5169)).astype(np.float32)
    e = embed(x, w)
    assert e.shape == (8, 100)
    np.testing.assert_allclose(sigmoid(e @ w.W3.T + w.b3), forward(x, w)[0], rtol=1e-6)


def _loss_and_grads(w, x, y, priors, seed):
    probs, trace = forward(x, w, train=True, dropout_seed=seed)
    return weighted_bce(probs, y, priors), backward(trace, weighted_bce_grad(probs, y, priors))


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    w = _tiny(seed)
    w = w.with_params({k: p + 0.1 * rng.standard_normal(p.shape) for k, p in w.params().items()})
    x = rng.standard_normal((3, 5))
    y = rng.random((3, 2)) < 0.5
    priors = rng.uniform(0.5, 4, 2)
    _, analytic = _loss_and_grads(w, x, y, priors, seed)

    def loss(params):
        return _loss_and_grads(w.with_params(params), x, y, priors, seed)[0]

    numeric = numeric_gradients(loss, {k: p.copy() for k, p in w.params().items()})
    assert max_relative_error(analytic, numeric) < 1e-4


def test_zero_upstream_gradient():
    w = _tiny(0)
    _, trace = forward(np.ones((2, 5)), w, train=True, dropout_seed=0)
    grads = backward(trace, np.zeros((2, 2)))
    assert all(not g.any() for g in grads.values())


def test_dropped_unit_gets_no_incoming_gradient():
    w = _tiny(4, (5, 50, 3, 2))
    x = np.random.default_rng(0).standard_normal((1, 5))
    _, trace = forward(x, w, train=True, dropout_seed=11)
    dropped = np.flatnonzero(trace.m1[0] == 0)
    assert len(dropped) > 0
    grads = backward(trace, np.ones((1, 2)))
    assert not grads["W1"][dropped].any()
    assert not grads["b1"][dropped].any()


def test_backward_shape_mismatch():
    _, trace = forward(np.ones((2, 5)), _tiny(0))
    with pytest.raises(ShapeError):
        backward(trace, np.zeros((3, 2)))


def test_inverted_dropout_expectation():
    rng = np.random.default_rng(0)
    w = init_weights(0, (6, 32, 16, 3), dtype=np.float64)
    w = w.with_params({k: 0.3 * p for k, p in w.params().items()})
    x = rng.standard_normal(6)
    eval_out = forward(x, w)[0][0]
    batch = np.repeat(x[None, :], 20000, axis=0)
    train_out = forward(batch, w, train=True, dropout_seed=1)[0].mean(axis=0)
    np.testing.assert_allclose(train_out, eval_out, rtol=0.02)


def test_save_load_round_trip(tmp_path):
    w = init_weights(9, (20, 8, 4, 14))
    w.priors = np.linspace(1, 5, 14)
    checksum = save_weights(w, tmp_path / "m.w")
    back = load_weights(tmp_path / "m.w")
    assert back.checksum() == checksum == w.checksum()
    for name, p in w.params().items():
        assert back.params()[name].tobytes() == p.tobytes()
    assert np.array_equal(back.priors, w.priors)
    assert back.class_order == w.class_order and back.layout_version == "v1"
    x = np.random.default_rng(0).standard_normal((4, 20)).astype(np.float32)
    assert embed(x, back).tobytes() == embed(x, w).tobytes()


def test_truncated_file_is_corrupt(tmp_path):
    save_weights(init_weights(0, TINY), tmp_path / "m.w")
    data = (tmp_path / "m.w").read_bytes()
    for cut in (10, len(data) // 2, len(data) - 1):
        (tmp_path / "t.w").write_bytes(data[:cut])
        with pytest.raises(CorruptionError):
            load_weights(tmp_path / "t.w")


def test_flipped_byte_is_corrupt(tmp_path):
    save_weights(init_weights(0, TINY), tmp_path / "m.w")
    data = bytearray((tmp_path / "m.w").read_bytes())
    data[60] ^= 0xFF
    (tmp_path / "m.w").write_bytes(bytes(data))
    with pytest.raises(CorruptionError, match="checksum"):
        load_weights(tmp_path / "m.w")


def test_layout_version_gate(tmp_path):
    w = init_weights(0, TINY, layout_version="v0")
    save_weights(w, tmp_path / "m.w")
    with pytest.raises(CompatibilityError):
        load_weights(tmp_path / "m.w", expected_layout="v1")
    assert load_weights(tmp_path / "m.w", expected_layout="v0").layout_version == "v0"
