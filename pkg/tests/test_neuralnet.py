import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autotuner.model import CONV_STACK
from autotuner.neuralnet import (AdamState, NonFiniteGradientError, Parameter, Tensor, adam_step,
                                 clip_grad_norm, conv2d, conv_output_shape, gru_sequence, he_init,
                                 linear, mse_loss, relu)
from autotuner.neuralnet.functional import ShapeError, gru_cell
from gradcheck import numeric_grad, rel_error

TOL = 1e-5


def _check(build, *arrays):
    """Compare backward() against central differences of sum(out * w) for each input."""
    rng = np.random.default_rng(1)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    w = rng.standard_normal(out.shape)
    (out * w).sum().backward()
    for t, a in zip(tensors, arrays):
        num = numeric_grad(lambda: float(np.sum(build(*[Tensor(b) for b in arrays]).data * w)), a)
        assert rel_error(t.grad, num).max() <= TOL


def test_conv_counting_example():
    out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), (1, 1), (1, 1)).data[0, 0]
    assert out[1, 1] == 9 and out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4


def test_conv_matches_direct_loops(rng):
    x, w, b = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 2)), rng.standard_normal(4)
    out = conv2d(x, w, b, (2, 1), (1, 1)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = conv_output_shape(7, 6, (3, 2), (2, 1), (1, 1))
    ref = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, j:j + 2] * w[o]) + b[o]
    assert np.allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("layer", range(6))
def test_conv_stack_gradients(layer):
    spec = CONV_STACK[layer]
    rng = np.random.default_rng(layer)
    c_in = 2
    h = max(spec.kernel[0], 6)
    x = rng.standard_normal((1, c_in, h, 5))
    w = rng.standard_normal((2, c_in) + spec.kernel) * 0.3
    b = rng.standard_normal(2)
    _check(lambda x_, w_, b_: conv2d(x_, w_, b_, spec.stride, spec.padding), x, w, b)


def test_conv_shape_formula_stack():
    h, w = 576, 100
    for spec, expected in zip(CONV_STACK, [(576, 50), (576, 25), (288, 13), (288, 13), (289, 15), (289, 15)]):
        h, w = conv_output_shape(h, w, spec.kernel, spec.stride, spec.padding)
        assert (h, w) == expected


def test_conv_errors():
    with pytest.raises(ShapeError):
        conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), np.zeros(1))


def test_gru_zero_fixed_point():
    out, h = gru_sequence(np.ones((2, 4, 3)), np.zeros((2, 5)), np.zeros((15, 3)), np.zeros((15, 5)), np.zeros(15))
    assert not out.data.any() and not h.data.any()


def test_gru_gradients(rng):
    d, hsz, t = 3, 2, 4
    args = (rng.standard_normal((2, t, d)), rng.standard_normal((2, hsz)),
            rng.standard_normal((3 * hsz, d)), rng.standard_normal((3 * hsz, hsz)), rng.standard_normal(3 * hsz))
    _check(lambda *a: gru_sequence(*a)[0], *args)
    _check(lambda *a: gru_sequence(*a)[1], *args)


def test_gru_cell_matches_reference(rng):
    d, hsz = 3, 4
    x, h = rng.standard_normal((1, d)), rng.standard_normal((1, hsz))
    wx, wh, b = rng.standard_normal((3 * hsz, d)), rng.standard_normal((3 * hsz, hsz)), rng.standard_normal(3 * hsz)
    sig = lambda v: 1 / (1 + np.exp(-v))
    r = sig(wx[:hsz] @ x[0] + wh[:hsz] @ h[0] + b[:hsz])
    z = sig(wx[hsz:2 * hsz] @ x[0] + wh[hsz:2 * hsz] @ h[0] + b[hsz:2 * hsz])
    n = np.tanh(wx[2 * hsz:] @ x[0] + wh[2 * hsz:] @ (r * h[0]) + b[2 * hsz:])
    expected = (1 - z) * n + z * h[0]
    assert np.allclose(gru_cell(Tensor(x), Tensor(h), Tensor(wx), Tensor(wh), Tensor(b)).data[0], expected, atol=1e-14)


def test_linear_cases_and_gradients(rng):
    assert np.array_equal(linear(np.ones((1, 3)), np.zeros((2, 3)), np.array([1.0, -2.0])).data, [[1.0, -2.0]])
    x = rng.standard_normal(3)
    assert np.allclose(linear(x, np.eye(3), np.full(3, 0.5)).data, x + 0.5)
    _check(linear, rng.standard_normal((4, 3)), rng.standard_normal((2, 3)), rng.standard_normal(2))


def test_relu_cases_and_mask(rng):
    assert relu(np.array([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    x = Tensor(rng.standard_normal((5, 5)), requires_grad=True)
    relu(x).sum().backward()
    assert np.array_equal(x.grad, (x.data > 0).astype(float))
    _check(relu, rng.standard_normal(20) + np.sign(rng.standard_normal(20)) * 0.1)


def test_mse_cases_and_gradient(rng):
    assert mse_loss(np.ones(3), np.ones(3)).item() == 0
    assert mse_loss(np.array([0.35]), np.array([0.0])).item() == pytest.approx(0.1225)
    _check(lambda p, t: mse_loss(p, t), rng.standard_normal(7), rng.standard_normal(7))
    with pytest.raises(ShapeError):
        mse_loss(np.ones(3), np.ones(2))


def test_adam_first_step():
    p = Parameter(np.array([1.0]), "p")
    p.grad = np.array([1.0])
    adam_step([p], AdamState())
    assert p.data[0] - 1.0 == pytest.approx(-5e-5 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_and_determinism(rng):
    p = Parameter(np.array([2.0, -3.0]), "p")
    p.grad = np.zeros(2)
    adam_step([p], AdamState())
    assert p.data.tolist() == [2.0, -3.0]

    def run():
        q = Parameter(np.array([0.5, 0.5]), "q")
        st_ = AdamState(lr=1e-2)
        for k in range(20):
            q.grad = np.array([np.sin(k), np.cos(k)]) + q.data
            adam_step([q], st_)
        return q.data

    assert np.array_equal(run(), run())


def test_clip_cases():
    p = Parameter(np.zeros(2), "p")
    p.grad = np.array([300.0, 400.0])
    assert clip_grad_norm([p], 100.0) == pytest.approx(500.0)
    assert np.allclose(p.grad, [60.0, 80.0])
    p.grad = np.array([30.0, 40.0])
    clip_grad_norm([p], 100.0)
    assert p.grad.tolist() == [30.0, 40.0]
    p.grad = np.array([np.nan, 1.0])
    with pytest.raises(NonFiniteGradientError):
        clip_grad_norm([p])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 1e3))
def test_clip_never_increases_norm(seed, scale):
    rng = np.random.default_rng(seed)
    ps = [Parameter(np.zeros(s), str(i)) for i, s in enumerate((3, (2, 2)))]
    for p in ps:
        p.grad = rng.standard_normal(p.shape) * scale
    before = np.sqrt(sum(np.sum(p.grad ** 2) for p in ps))
    direction = np.concatenate([p.grad.ravel() for p in ps]) / before
    clip_grad_norm(ps, 100.0)
    after_vec = np.concatenate([p.grad.ravel() for p in ps])
    after = np.linalg.norm(after_vec)
    assert after <= max(before, 100.0) * (1 + 1e-12)
    if before > 100:
        assert after == pytest.approx(100.0, abs=1e-9)
    assert np.dot(after_vec / after, direction) == pytest.approx(1.0, abs=1e-12)


def test_he_init_statistics():
    x = he_init(100_000, fan_in=2, seed=0)
    assert abs(x.std() - 1.0) <= 0.05
    assert np.array_equal(he_init((3, 4), 5, seed=9), he_init((3, 4), 5, seed=9))


def test_backward_accumulates_through_shared_nodes():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x + x * 2.0
    y.sum().backward()
    assert x.grad.tolist() == [8.0]
