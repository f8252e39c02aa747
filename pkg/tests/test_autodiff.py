import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fundseg import _kernels
from fundseg import autodiff as ad
from fundseg.autodiff import Tensor
from fundseg.errors import ContractError, DimensionError

from conftest import conv_loop, deconv_loop


def test_conv_identity_kernel():
    x = Tensor(np.ones((1, 3, 3)))
    out = ad.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, np.ones((1, 3, 3)))


def test_conv_difference_kernel():
    x = Tensor(np.array([1.0, 2, 3, 4]).reshape(1, 1, 4))
    k = Tensor(np.array([1.0, -1.0]).reshape(1, 1, 1, 2))
    out = ad.conv2d(x, k, Tensor([0.0]))
    np.testing.assert_array_equal(out.data.ravel(), [-1.0, -1.0, -1.0])


@pytest.mark.parametrize("stride,pad,cin,cout,size,k", [
    (2, 0, 1, 1, 4, 2), (1, 1, 2, 3, 5, 3), (2, 1, 3, 2, 6, 3), (1, 0, 2, 2, 4, 1),
])
def test_conv_matches_loop_oracle(rng, stride, pad, cin, cout, size, k):
    x = rng.normal(size=(cin, size, size))
    w = rng.normal(size=(cout, cin, k, k))
    b = rng.normal(size=cout)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, conv_loop(x, w, b, stride, pad), rtol=0, atol=1e-12)


def test_conv_output_extent():
    out = ad.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), None, stride=2)
    assert out.shape == (1, 2, 2)


@pytest.mark.parametrize("stride,pad,opad", [(1, 0, 0), (2, 0, 0), (2, 1, 1), (1, 1, 0)])
def test_deconv_matches_scatter_oracle(rng, stride, pad, opad):
    x = rng.normal(size=(2, 4, 4))
    w = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=3)
    got = ad.conv2d_transpose(Tensor(x), Tensor(w), Tensor(b), stride, pad, opad).data
    np.testing.assert_allclose(got, deconv_loop(x, w, b, stride, pad, opad), atol=1e-12)


def test_deconv_single_pixel_stride2():
    out = ad.conv2d_transpose(Tensor(np.ones((1, 1, 1))), Tensor(np.ones((1, 1, 2, 2))),
                              Tensor([0.0]), stride=2)
    np.testing.assert_array_equal(out.data, np.ones((1, 2, 2)))


def test_deconv_zero_input_is_bias():
    out = ad.conv2d_transpose(Tensor(np.zeros((2, 3, 3))), Tensor(np.ones((2, 2, 3, 3))),
                              Tensor([0.5, -1.5]), stride=2, padding=1, output_padding=1)
    assert out.shape == (2, 6, 6)
    np.testing.assert_array_equal(out.data[0], 0.5)
    np.testing.assert_array_equal(out.data[1], -1.5)


@pytest.mark.parametrize("stride,pad,opad", [(1, 0, 0), (1, 1, 0), (2, 0, 0), (2, 1, 1), (2, 1, 0)])
def test_adjoint_identity(rng, stride, pad, opad):
    # <conv(x), g> == <x, conv_T(g)> with the same kernel, 100 random draws
    for _ in range(100):
        k = Tensor(rng.normal(size=(2, 3, 3, 3)))
        x = rng.normal(size=(3, 5 + opad, 5 + opad)) if stride == 2 else rng.normal(size=(3, 5, 5))
        y = ad.conv2d(Tensor(x), k, None, stride, pad)
        g = rng.normal(size=y.shape)
        back = ad.conv2d_transpose(Tensor(g), k, None, stride, pad, opad if stride == 2 else 0)
        assert back.shape == x.shape
        lhs = float(np.sum(y.data * g))
        rhs = float(np.sum(x * back.data))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_conv_linearity(rng):
    k = Tensor(rng.normal(size=(2, 2, 3, 3)))
    x, y = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 6, 6))
    a, b = 1.7, -0.3
    lhs = ad.conv2d(Tensor(a * x + b * y), k, None, 2, 1).data
    rhs = a * ad.conv2d(Tensor(x), k, None, 2, 1).data + b * ad.conv2d(Tensor(y), k, None, 2, 1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_conv_batched_equals_per_image(rng):
    x = rng.normal(size=(3, 2, 6, 6))
    k, b = Tensor(rng.normal(size=(4, 2, 3, 3))), Tensor(rng.normal(size=4))
    batched = ad.conv2d(Tensor(x), k, b, 2, 1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], ad.conv2d(Tensor(x[i]), k, b, 2, 1).data, atol=1e-14)


def test_conv_shape_errors():
    with pytest.raises(DimensionError, match=r"\(1, 2, 3, 3\).*\(3, 5, 5\)"):
        ad.conv2d(Tensor(np.zeros((3, 5, 5))), Tensor(np.zeros((1, 2, 3, 3))))
    with pytest.raises(DimensionError):
        ad.conv2d_transpose(Tensor(np.zeros((3, 5, 5))), Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ContractError):
        ad.conv2d(Tensor(np.zeros((1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))), stride=3)
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_elementwise_values():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    assert ad.sigmoid(Tensor(math.log(3))).item() == pytest.approx(0.75, abs=1e-15)
    x = Tensor([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(ad.elementwise("add", x, Tensor(np.zeros(3))).data, x.data)
    np.testing.assert_array_equal(ad.elementwise("relu", x).data, [1.0, 0.0, 3.0])
    np.testing.assert_array_equal(ad.elementwise("mul", x, x).data, [1.0, 4.0, 9.0])
    with pytest.raises(DimensionError):
        ad.add(x, Tensor(np.zeros(2)))
    with pytest.raises(ContractError):
        ad.elementwise("tanh", x)


def test_sigmoid_extremes_stay_finite():
    s = ad.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(s)) and s[0] >= 0 and s[1] <= 1


def test_backward_sum_and_square():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(ad.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.tsum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * x)


def test_tape_reverse_order_and_intermediate_grads():
    x = Tensor([0.3, -0.4], requires_grad=True)
    h = ad.sigmoid(x)
    y = ad.tsum(h * h)
    tape = ad.Tape.from_loss(y)
    seqs = [n.seq for n in tape.nodes]
    assert seqs == sorted(seqs)
    assert [n.op for n in tape.nodes] == ["sigmoid", "mul", "sum"]
    ad.backward(y)
    assert h.grad is not None and x.grad is not None
    np.testing.assert_allclose(h.grad, 2 * h.data)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = ad.tsum(x * x)
    assert y._node is None and not y.requires_grad


def test_tape_determinism(rng):
    k0 = rng.normal(size=(2, 1, 3, 3))
    x = rng.normal(size=(1, 8, 8))

    def run():
        k = Tensor(k0, requires_grad=True)
        y = ad.sigmoid(ad.conv2d(Tensor(x), k, None, 2, 1))
        ad.backward(ad.mean(y * y))
        return k.grad

    assert np.array_equal(run(), run())


def test_finite_diff_check_basics(rng):
    x = Tensor(rng.normal(size=7))
    assert ad.finite_diff_check(lambda t: ad.tsum(t * t), x) < 1e-6
    c = Tensor(rng.normal(size=7))
    assert ad.finite_diff_check(lambda t: ad.tsum(t * c), x) < 1e-10


def _gradient_cases(rng):
    k = Tensor(rng.normal(size=(2, 2, 3, 3)))
    kt = Tensor(rng.normal(size=(2, 3, 3, 3)))
    b = Tensor(rng.normal(size=3))
    y = Tensor(rng.normal(size=(2, 5, 5)))
    return {
        "conv2d/input": (lambda t: ad.tsum(ad.sigmoid(ad.conv2d(t, k, None, 2, 1))), rng.normal(size=(2, 6, 6))),
        "conv2d/kernel": (lambda t: ad.mean(ad.sigmoid(ad.conv2d(y, t, None, 1, 1))), rng.normal(size=(2, 2, 3, 3))),
        "conv2d_transpose/input": (lambda t: ad.mean(ad.sigmoid(ad.conv2d_transpose(t, kt, b, 2, 1, 1))),
                                   rng.normal(size=(2, 3, 3))),
        "conv2d_transpose/kernel": (lambda t: ad.mean(ad.sigmoid(ad.conv2d_transpose(y, t, b, 1, 1))),
                                    rng.normal(size=(2, 3, 3, 3))),
        "conv2d_transpose/bias": (lambda t: ad.mean(ad.sigmoid(ad.conv2d_transpose(y, kt, t, 1, 0))),
                                  rng.normal(size=3)),
    }


def test_gradients_of_convolutions(rng):
    for name, (f, x0) in _gradient_cases(rng).items():
        assert ad.finite_diff_check(f, Tensor(x0)) < 1e-4, name


ELEMENTWISE_FUNCS = {
    "add": lambda t: ad.tsum(ad.sigmoid(t + t * 0.5)),
    "sub": lambda t: ad.tsum(ad.sigmoid(1.0 - t) * t),
    "mul": lambda t: ad.tsum(t * t * t),
    "div": lambda t: ad.tsum(t / (ad.sigmoid(t) + 1.0)),
    "sigmoid": lambda t: ad.tsum(ad.sigmoid(t)),
    "relu": lambda t: ad.tsum(ad.relu(t) * t),
    "log": lambda t: ad.tsum(ad.log(ad.sigmoid(t))),
    "exp": lambda t: ad.mean(ad.exp(t)),
    "huber": lambda t: ad.tsum(ad.huber(t * 2.0)),
    "logsumexp": lambda t: ad.logsumexp(t),
    "reshape": lambda t: ad.tsum(ad.sigmoid(t.reshape(2, 3)) * Tensor(np.arange(6.0).reshape(2, 3))),
    "getitem": lambda t: ad.tsum(t[1:4] * t[0:3]),
    "clip": lambda t: ad.tsum(ad.clip(t, -0.5, 0.5) * t),
    "stack": lambda t: ad.tsum(ad.stack([t, t * t]) * Tensor(np.ones((2, 6)))),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE_FUNCS))
def test_gradient_at_random_points(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    f = ELEMENTWISE_FUNCS[name]
    for _ in range(10):
        x0 = rng.normal(size=6)
        if name in ("relu", "clip", "huber"):
            # keep clear of the kinks
            x0 = np.where(np.abs(np.abs(x0) - 0.5) < 0.05, x0 + 0.2, x0)
            x0 = np.where(np.abs(x0) < 0.05, 0.3, x0)
        assert ad.finite_diff_check(f, Tensor(x0)) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.sampled_from([1, 2]),
       st.integers(0, 1), st.integers(0, 2**31))
def test_numba_and_numpy_kernels_agree(n, c, size, stride, pad, seed):
    rng = np.random.default_rng(seed)
    xp = np.ascontiguousarray(rng.normal(size=(n, c, size + 2 * pad, size + 2 * pad)))
    ho = (size + 2 * pad - 3) // stride + 1
    a = _kernels.im2col_np(xp, 3, 3, stride, ho, ho)
    back_np = _kernels.col2im_np(a, c, *xp.shape[2:], 3, 3, stride, ho, ho)
    if _kernels.HAVE_NUMBA:
        assert np.array_equal(a, _kernels.im2col_nb(xp, 3, 3, stride, ho, ho))
        assert np.array_equal(back_np, _kernels.col2im_nb(a, c, *xp.shape[2:], 3, 3, stride, ho, ho))
