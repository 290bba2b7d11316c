import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dmgin.numeric import (DimensionError, NonDeterministicLossError, ParamSet, adam_step,
                           checkpoint_bytes, checkpoint_from_bytes, grad_check, layer_norm,
                           layer_norm_backward, layer_norm_forward, matmul, sigmoid, silu, silu_grad,
                           softmax_backward, softmax_rows, xavier_init)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for t in range(a.shape[1]):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_identity(rng):
    b = rng.normal(size=(3, 4))
    assert np.array_equal(matmul(np.eye(3), b), b)


def test_matmul_small_by_hand():
    assert matmul(np.array([[1., 2.], [3., 4.]]), np.array([[0.], [1.]])).tolist() == [[2.], [4.]]


def test_matmul_against_loops(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    assert np.allclose(matmul(a, b), naive_matmul(a, b), atol=1e-12)
    for _ in range(5):
        a, b = rng.normal(size=(10, 10)), rng.normal(size=(10, 10))
        assert np.abs(matmul(a, b) - naive_matmul(a, b)).max() < 1e-10


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    assert np.allclose(softmax_rows(np.zeros((1, 3))), 1 / 3)
    big = softmax_rows(np.array([[1000.0, 0.0]]))
    assert np.isfinite(big).all() and big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-300
    x = np.array([1.0, 2.0, 3.0])
    ref = np.exp(x) / np.exp(x).sum()
    assert np.abs(softmax_rows(x[None])[0] - ref).max() < 1e-12


def test_softmax_mask_zeroes_and_errors():
    x = np.array([[1.0, 5.0, 2.0], [0.0, 0.0, 0.0]])
    m = np.array([[True, False, True], [False, False, True]])
    p = softmax_rows(x, m)
    assert p[0, 1] == 0.0 and p[1, 0] == 0.0 and p[1, 1] == 0.0 and p[1, 2] == 1.0
    with pytest.raises(ValueError):
        softmax_rows(x, np.zeros_like(m))


@given(arrays(np.float64, (4, 6), elements=finite), st.floats(-100, 100))
def test_softmax_rows_sum_and_shift(x, c):
    p = softmax_rows(x)
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-9
    assert np.abs(softmax_rows(x + c) - p).max() < 1e-9


def test_softmax_backward_finite_difference(rng):
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))
    p = softmax_rows(x)
    g = softmax_backward(p, w)
    h = 1e-6
    for i in range(3):
        for j in range(5):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            num = ((softmax_rows(xp) * w).sum() - (softmax_rows(xm) * w).sum()) / (2 * h)
            assert abs(num - g[i, j]) < 1e-8


def test_layer_norm_examples():
    assert np.array_equal(layer_norm(np.full((1, 4), 5.0)), np.zeros((1, 4)))
    y = layer_norm(np.array([[-1.0, 1.0]]))
    assert np.allclose(y, [[-1.0, 1.0]], atol=1e-5)
    x = np.array([1.0, 2.0, 3.0, 4.0])
    ref = (x - x.mean()) / np.sqrt(x.var() + 1e-6)
    assert np.abs(layer_norm(x[None])[0] - ref).max() < 1e-12


@given(arrays(np.float64, (3, 8), elements=st.floats(-10, 10)), st.floats(1.0, 20), st.floats(-50, 50))
def test_layer_norm_removes_scale_and_shift(x, a, b):
    # eps bounds the achievable agreement; keep row variance >= 1 so it stays below 1e-6
    x = x + 4 * np.linspace(-1, 1, 8)
    if x.var(axis=1).min() < 1.0:
        x = x + 4 * np.linspace(-1, 1, 8)
    y = layer_norm(x)
    assert np.abs(y.mean(axis=1)).max() < 1e-9
    assert np.abs(layer_norm(a * x + b) - y).max() < 1e-6


def test_layer_norm_backward(rng):
    x = rng.normal(size=(2, 6))
    w = rng.normal(size=(2, 6))
    y, cache = layer_norm_forward(x)
    g = layer_norm_backward(w, cache)
    h = 1e-6
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = ((layer_norm(xp) * w).sum() - (layer_norm(xm) * w).sum()) / (2 * h)
    assert np.abs(num - g).max() < 1e-7


def test_silu_values():
    assert silu(np.array(0.0)) == 0.0
    assert silu(np.array(40.0)) == pytest.approx(40.0)
    assert silu(np.array(1.0)) == pytest.approx(1 / (1 + np.exp(-1)), abs=1e-12)
    assert float(silu(np.array(1.0))) == pytest.approx(0.731059, abs=1e-6)
    x = np.linspace(-6, 6, 25)
    num = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6
    assert np.abs(num - silu_grad(x)).max() < 1e-8


def test_sigmoid_saturates_without_overflow():
    with np.errstate(all="raise"):
        s = sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert s.tolist() == [0.0, 0.5, 1.0]


def test_xavier_determinism_and_bounds():
    a, b = xavier_init(20, 30, 7), xavier_init(20, 30, 7)
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= np.sqrt(6 / 50)
    big = xavier_init(100, 100, 3)
    bound = np.sqrt(6 / 200)
    sd = bound / np.sqrt(3) / np.sqrt(big.size)
    assert abs(big.mean()) < 3 * sd


def _scalar(value):
    ps = ParamSet()
    ps.add("w", np.array([[value]]))
    return ps


def test_adam_zero_gradient_identity(rng):
    ps = ParamSet()
    ps.add("a", rng.normal(size=(3, 4)))
    before = ps["a"].value.copy()
    for _ in range(3):
        adam_step(ps, 0.1)
    assert np.array_equal(ps["a"].value, before)
    assert ps["a"].step == 3


def test_adam_first_step_closed_form():
    ps = _scalar(1.0)
    ps["w"].grad[:] = 0.37
    adam_step(ps, 0.01)
    # bias-corrected first step moves by lr * g/(|g| + eps)
    assert ps["w"].value[0, 0] == pytest.approx(1.0 - 0.01 * 0.37 / (0.37 + 1e-8), abs=1e-15)


def test_adam_two_steps_match_scalar_reference():
    ps = _scalar(0.5)
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    w, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate((0.3, 0.3), 1):
        ps["w"].grad[:] = g
        adam_step(ps, lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    assert ps["w"].value[0, 0] == pytest.approx(w, abs=1e-15)


def test_grad_check_quadratic(rng):
    ps = ParamSet()
    ps.add("t", rng.normal(size=(3, 3)))
    ps["t"].grad[:] = ps["t"].value
    err = grad_check(lambda p: 0.5 * float((p["t"].value ** 2).sum()), ps)
    assert err < 1e-7


def test_grad_check_linear_bce(rng):
    x = rng.normal(size=(6, 4))
    y = (rng.random(6) < 0.5).astype(float)
    ps = ParamSet()
    ps.add("w", rng.normal(size=(4, 1)))
    ps.add("b", np.zeros((1, 1)))

    def loss(p):
        z = (x @ p["w"].value + p["b"].value)[:, 0]
        return float(np.mean(np.logaddexp(0, z) - y * z))

    z = (x @ ps["w"].value + ps["b"].value)[:, 0]
    dz = (sigmoid(z) - y) / len(y)
    ps["w"].grad[:] = x.T @ dz[:, None]
    ps["b"].grad[:] = dz.sum()
    assert grad_check(loss, ps) < 1e-4


def test_grad_check_detects_nondeterminism():
    ps = _scalar(1.0)
    counter = iter(range(100))
    with pytest.raises(NonDeterministicLossError):
        grad_check(lambda p: float(next(counter)), ps)


def test_grad_check_reports_wrong_gradient():
    ps = _scalar(2.0)
    ps["w"].grad[:] = 1.0  # true gradient is 2.0
    assert grad_check(lambda p: 0.5 * float(p["w"].value[0, 0] ** 2), ps) > 0.4


def test_checkpoint_round_trip(rng):
    ps = ParamSet()
    ps.add("b.second", rng.normal(size=(2, 5)))
    ps.add("a.first", rng.normal(size=(1, 1)))
    raw = checkpoint_bytes(ps)
    back = checkpoint_from_bytes(raw)
    assert back.values_equal(ps)
    assert checkpoint_bytes(back) == raw
    assert raw.index(b"a.first") < raw.index(b"b.second")  # sorted manifest
    with pytest.raises(ValueError):
        checkpoint_from_bytes(b"XXXX" + raw[4:])


def test_param_shapes_consistent(rng):
    ps = ParamSet()
    p = ps.add("w", rng.normal(size=(3, 2)))
    assert p.value.shape == p.grad.shape == p.m.shape == p.v.shape and p.step == 0
    with pytest.raises(DimensionError):
        ps.add("bad", np.zeros(3))
    with pytest.raises(KeyError):
        ps.add("w", np.zeros((1, 1)))


def test_clip_grad_norm(rng):
    ps = ParamSet()
    ps.add("a", np.zeros((2, 2)))
    ps["a"].grad[:] = 10.0
    norm = ps.clip_grad_norm(5.0)
    assert norm == pytest.approx(20.0)
    assert ps.grad_norm() == pytest.approx(5.0, rel=1e-9)
