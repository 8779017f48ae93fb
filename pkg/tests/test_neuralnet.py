import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from metasurrogate import neuralnet as nn
from metasurrogate.errors import NumericError, UsageError

SEEDS = [0, 1, 2, 3, 4]
H = 1e-3
TOL = 1e-3


def check(f, x, analytic, indices=None):
    numeric = nn.numerical_gradient(f, x, H, indices)
    if indices is not None:
        analytic = analytic.reshape(-1)[indices]
        numeric = numeric.reshape(-1)[indices]
    return nn.relative_error(analytic, numeric)


# --- convolution ------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 5, 5, 1))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out, _ = nn.conv2d_forward(x, w, np.zeros(1))
    assert np.array_equal(out, x)


def test_conv_one_pixel_identity():
    x = np.full((1, 1, 1, 1), 3.5)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out, _ = nn.conv2d_forward(x, w, np.zeros(1))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 3.5


@pytest.mark.parametrize("channels", [1, 8])
def test_conv_constant_input_interior(channels):
    x = np.full((1, 6, 6, channels), 7.0)
    w = np.ones((1, channels, 3, 3))
    out, _ = nn.conv2d_forward(x, w, np.zeros(1))
    assert np.all(out[0, 1:-1, 1:-1, 0] == 63.0 * channels)
    assert out[0, 0, 0, 0] == 28.0 * channels  # corner sees 4 taps


def test_conv_paths_agree_with_direct_sum():
    rng = np.random.default_rng(9)
    for c in (1, 3, 5):
        x = rng.normal(size=(2, 6, 7, c))
        w = rng.normal(size=(4, c, 3, 3))
        b = rng.normal(size=4)
        out, _ = nn.conv2d_forward(x, w, b)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        ref = np.zeros((2, 6, 7, 4))
        for i in range(3):
            for j in range(3):
                ref += np.einsum("nhwc,fc->nhwf", xp[:, i : i + 6, j : j + 7], w[:, :, i, j])
        assert np.allclose(out, ref + b, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(UsageError):
        nn.conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((1, 3, 3, 3)), np.zeros(1))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("channels", [1, 5])
def test_conv_gradients(seed, channels):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 5, 6, channels))
    w = rng.normal(size=(3, channels, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(2, 5, 6, 3))
    f = lambda: float(np.sum(nn.conv2d_forward(x, w, b)[0] * r))
    _, cache = nn.conv2d_forward(x, w, b)
    dx, dw, db = nn.conv2d_backward(r, cache)
    assert check(f, x, dx) < TOL
    assert check(f, w, dw) < TOL
    assert check(f, b, db) < TOL


# --- batch norm -------------------------------------------------------------


def bn_args(c, dtype=np.float64):
    return np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype)


def test_batchnorm_train_normalizes():
    x = np.random.default_rng(1).normal(3.0, 5.0, size=(8, 4, 4, 3))
    out, _ = nn.batchnorm_forward(x, *bn_args(3))
    assert np.allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-4)
    assert np.allclose(out.var(axis=(0, 1, 2)), 1.0, atol=1e-4)


def test_batchnorm_infer_identity():
    x = np.random.default_rng(2).normal(size=(3, 7))
    out, _ = nn.batchnorm_forward(x, *bn_args(7), train=False)
    assert np.allclose(out, x / math.sqrt(1 + nn.BN_EPS), rtol=1e-12)
    assert np.allclose(out, x, atol=1e-4 * np.abs(x).max())


def test_batchnorm_running_stats_update():
    gamma, beta, rm, rv = bn_args(2)
    x = np.array([[1.0, 10.0], [3.0, 20.0]])
    nn.batchnorm_forward(x, gamma, beta, rm, rv)
    assert np.allclose(rm, 0.1 * np.array([2.0, 15.0]))
    assert np.allclose(rv, 0.9 + 0.1 * np.array([2.0, 50.0]))


def test_batchnorm_rejects_single_sample():
    with pytest.raises(UsageError):
        nn.batchnorm_forward(np.zeros((1, 4)), *bn_args(4))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("shape", [(4, 3), (3, 4, 4, 2)])
def test_batchnorm_gradients(seed, shape):
    rng = np.random.default_rng(seed)
    c = shape[-1]
    x = rng.normal(size=shape)
    gamma = rng.uniform(0.5, 1.5, c)
    beta = rng.normal(size=c)
    r = rng.normal(size=shape)

    def f():
        out, _ = nn.batchnorm_forward(x, gamma, beta, np.zeros(c), np.ones(c))
        return float(np.sum(out * r))

    _, cache = nn.batchnorm_forward(x, gamma, beta, np.zeros(c), np.ones(c))
    dx, dg, db = nn.batchnorm_backward(r, cache)
    assert check(f, x, dx) < TOL
    assert check(f, gamma, dg) < TOL
    assert check(f, beta, db) < TOL


# --- leaky relu -------------------------------------------------------------


def test_leaky_relu_values():
    out, _ = nn.leaky_relu_forward(np.array([5.0, -2.0, 0.0]))
    assert out[0] == 5.0 and out[1] == pytest.approx(-0.02) and out[2] == 0.0


@pytest.mark.parametrize("seed", SEEDS)
def test_leaky_relu_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.05, 2.0, size=(4, 6)) * rng.choice([-1.0, 1.0], size=(4, 6))
    r = rng.normal(size=(4, 6))
    f = lambda: float(np.sum(nn.leaky_relu_forward(x)[0] * r))
    _, cache = nn.leaky_relu_forward(x)
    assert check(f, x, nn.leaky_relu_backward(r, cache)) < 1e-6


# --- max pool ---------------------------------------------------------------


def test_maxpool_values():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1)
    out, _ = nn.maxpool2d_forward(x)
    assert out.item() == 4.0
    const = np.full((2, 4, 6, 3), 1.5)
    assert np.all(nn.maxpool2d_forward(const)[0] == 1.5)


def test_maxpool_routes_ties_once():
    x = np.full((1, 2, 2, 1), 2.0)
    _, cache = nn.maxpool2d_forward(x)
    dx = nn.maxpool2d_backward(np.ones((1, 1, 1, 1)), cache)
    assert dx.sum() == 1.0 and dx[0, 0, 0, 0] == 1.0


def test_maxpool_rejects_odd_and_other_windows():
    with pytest.raises(UsageError):
        nn.maxpool2d_forward(np.zeros((1, 3, 4, 1)))
    with pytest.raises(UsageError):
        nn.maxpool2d_forward(np.zeros((1, 4, 4, 1)), window=3)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (2, 4, 6, 3), elements=st.floats(-10, 10)),
    arrays(np.float64, (2, 2, 3, 3), elements=st.floats(-10, 10)),
)
def test_maxpool_conserves_gradient_mass(x, dout):
    _, cache = nn.maxpool2d_forward(x)
    dx = nn.maxpool2d_backward(dout, cache)
    assert math.isclose(dx.sum(), dout.sum(), rel_tol=1e-12, abs_tol=1e-9)
    assert np.count_nonzero(dx) <= np.count_nonzero(dout)


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_gradients(seed):
    rng = np.random.default_rng(seed)
    # distinct values spaced well beyond h keep the argmax fixed under perturbation
    x = rng.permutation(2 * 4 * 4 * 3).reshape(2, 4, 4, 3) * 0.1
    r = rng.normal(size=(2, 2, 2, 3))
    f = lambda: float(np.sum(nn.maxpool2d_forward(x)[0] * r))
    _, cache = nn.maxpool2d_forward(x)
    assert check(f, x, nn.maxpool2d_backward(r, cache)) < TOL


# --- linear -----------------------------------------------------------------


def test_linear_values():
    out, _ = nn.linear_forward(np.array([[1.0, 2.0]]), np.array([[1.0, 1.0], [0.0, 1.0]]), np.zeros(2))
    assert out.tolist() == [[3.0, 2.0]]
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(nn.linear_forward(x, np.eye(4), np.zeros(4))[0], x)


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(4, 5))
    b = rng.normal(size=4)
    r = rng.normal(size=(3, 4))
    f = lambda: float(np.sum(nn.linear_forward(x, w, b)[0] * r))
    _, cache = nn.linear_forward(x, w, b)
    dx, dw, db = nn.linear_backward(r, cache)
    assert check(f, x, dx) < TOL
    assert check(f, w, dw) < TOL
    assert check(f, b, db) < TOL


# --- huber loss ---------------------------------------------------------------


def test_huber_zero_at_target():
    t = np.random.default_rng(0).uniform(size=(3, 201))
    loss, grad = nn.huber_loss(t.copy(), t, 1.0)
    assert loss == 0.0 and np.all(grad == 0.0)


def test_huber_linear_branch_hand_value():
    loss, grad = nn.huber_loss(np.array([2.0]), np.array([0.0]), 1.0)
    assert loss == 1.5
    assert grad.tolist() == [1.0]


@pytest.mark.parametrize("delta", [0.25, 1.0, 3.0])
def test_huber_boundary_continuity(delta):
    for sign in (1.0, -1.0):
        e = np.array([sign * delta])
        loss, _ = nn.huber_loss(e, np.zeros(1), delta)
        assert loss == 0.5 * delta * delta


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, (4, 7), elements=st.floats(-5, 5)),
    arrays(np.float64, (4, 7), elements=st.floats(-5, 5)),
)
def test_huber_large_delta_is_half_mse(pred, target):
    e = pred - target
    delta = float(np.abs(e).max()) + 1.0
    loss, grad = nn.huber_loss(pred, target, delta)
    assert loss == pytest.approx(0.5 * np.mean(e * e), rel=1e-12, abs=1e-300)
    assert np.allclose(grad, e / e.size, rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(2.0, 50.0)), st.floats(0.1, 1.0))
def test_huber_all_outliers_is_shifted_mae(e, delta):
    e = e * np.where(np.arange(e.size).reshape(e.shape) % 2, 1, -1)
    loss, grad = nn.huber_loss(e, np.zeros_like(e), delta)
    assert loss == pytest.approx(delta * np.mean(np.abs(e)) - 0.5 * delta**2, rel=1e-12)
    assert np.array_equal(grad, delta * np.sign(e) / e.size)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("delta", [0.25, 3.0])
def test_huber_gradients(seed, delta):
    rng = np.random.default_rng(seed)
    p = rng.normal(0, 1, size=(3, 20))
    t = rng.normal(0, 1, size=(3, 20))
    # keep every |e| away from the branch point
    e = p - t
    p[np.abs(np.abs(e) - delta) < 0.01] += 0.05
    f = lambda: nn.huber_loss(p, t, delta)[0]
    _, grad = nn.huber_loss(p, t, delta)
    assert check(f, p, grad) < TOL


def test_huber_rejects_bad_input():
    with pytest.raises(UsageError, match="positive"):
        nn.huber_loss(np.zeros(3), np.zeros(3), 0.0)
    with pytest.raises(UsageError):
        nn.huber_loss(np.zeros(3), np.zeros(4), 1.0)


def test_huber_keeps_dtype():
    _, grad = nn.huber_loss(np.ones(4, np.float32), np.zeros(4, np.float32), 3.0)
    assert grad.dtype == np.float32


# --- metrics ----------------------------------------------------------------


def test_metrics_identical_and_scaled():
    t = np.random.default_rng(0).uniform(0.1, 1, size=(5, 201))
    assert nn.metrics(t, t) == (0.0, 0.0, pytest.approx(1.0))
    mse, _, cs = nn.metrics(2 * t, t)
    assert mse > 0 and cs == pytest.approx(1.0)


def test_cosine_hand_value():
    cs = nn.cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
    assert cs[0] == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_cosine_zero_vector_raises():
    with pytest.raises(NumericError):
        nn.cosine_similarity(np.zeros(3), np.ones(3))


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, (3, 6), elements=st.floats(0.01, 10)),
    arrays(np.float64, (3, 6), elements=st.floats(-10, 10)),
)
def test_cosine_in_range(a, b):
    if np.any(np.linalg.norm(b, axis=1) == 0):
        return
    cs = nn.cosine_similarity(a, b)
    assert np.all(cs <= 1 + 1e-12) and np.all(cs >= -1 - 1e-12)


# --- adam -------------------------------------------------------------------


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    opt = nn.Adam()
    for _ in range(5):
        opt.step(p, {"w": np.zeros(3)})
    assert p["w"].tolist() == [1.0, -2.0, 3.0]


def test_adam_first_step_is_lr_sized():
    p = {"w": np.array([0.0, 0.0])}
    nn.Adam(lr=1e-4).step(p, {"w": np.array([5.0, -0.3])})
    assert np.allclose(p["w"], [-1e-4, 1e-4], rtol=1e-6)


@pytest.mark.parametrize("g", [1e-3, 0.7, -40.0])
def test_adam_constant_gradient_step_bound(g):
    p = {"w": np.zeros(1)}
    opt = nn.Adam(lr=1e-4, beta1=0.5, beta2=0.999)
    prev = 0.0
    for t in range(1, 101):
        opt.step(p, {"w": np.array([g])})
        step = abs(p["w"][0] - prev)
        prev = p["w"][0]
        if t >= 50:
            assert step <= 1e-4 * 1.01


def test_adam_state_round_trip():
    rng = np.random.default_rng(0)
    p = {"a": rng.normal(size=3), "b": rng.normal(size=(2, 2))}
    opt = nn.Adam()
    for _ in range(3):
        opt.step(p, {k: rng.normal(size=v.shape) for k, v in p.items()})
    clone = nn.Adam.from_state(opt.state_dict())
    g = {k: rng.normal(size=v.shape) for k, v in p.items()}
    p1 = {k: v.copy() for k, v in p.items()}
    p2 = {k: v.copy() for k, v in p.items()}
    opt.step(p1, g)
    nn.adam_step(p2, g, clone)
    for k in p:
        assert p1[k].tobytes() == p2[k].tobytes()


# --- misc -------------------------------------------------------------------


def test_check_finite():
    with pytest.raises(NumericError):
        nn.check_finite(np.array([1.0, np.nan]), "test")


def test_kaiming_bound():
    rng = np.random.default_rng(0)
    w = nn.kaiming_uniform(rng, (1000, 50), 50, np.float32)
    bound = math.sqrt(2 / (1 + 0.01**2)) * math.sqrt(3 / 50)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.95 * bound
