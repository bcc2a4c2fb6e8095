import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from llr import autodiff as ad
from llr.autodiff import kernels
from llr.autodiff.graph import conv2d_input_grad, conv2d_weight_grad, pad_slice
from llr.errors import ContractError, ShapeError
from oracles import central_diff, conv2d_direct, rel_err

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def arrays(shape):
    return hnp.arrays(np.float64, shape, elements=finite)


def check_grad(build, *inputs, tol=1e-6):
    """Compare reverse-mode gradients of sum(build(*leaves)) with central differences."""
    leaves = [ad.leaf(v) for v in inputs]
    out = ad.sum_(build(*leaves))
    grads = ad.grad(out, leaves)
    for i, v in enumerate(inputs):
        def f(z, i=i):
            vals = list(inputs)
            vals[i] = z
            with ad.no_record():
                return float(ad.sum_(build(*[ad.leaf(u) for u in vals])).value)
        assert rel_err(grads[i], central_diff(f, v)) < tol


# ------------------------------------------------------------------ values


def test_softplus_values():
    assert ad.softplus(ad.leaf(0.0)).value == pytest.approx(math.log(2), abs=1e-15)
    assert ad.softplus(ad.leaf(50.0)).value == 50.0
    assert ad.softplus(ad.leaf(-50.0)).value == pytest.approx(math.exp(-50), rel=1e-12)
    x = ad.leaf(0.0)
    assert ad.grad(ad.softplus(x), x) == pytest.approx(0.5)


def test_sigmoid_is_stable_at_extremes():
    v = ad.sigmoid(ad.leaf(np.array([-800.0, 0.0, 800.0]))).value
    assert np.all(np.isfinite(v))
    assert v.tolist() == [0.0, 0.5, 1.0]


def test_half_square_gradient():
    x = ad.leaf(3.0)
    assert ad.grad(0.5 * x * x, x) == 3.0


def test_values_are_read_only():
    x = ad.leaf(np.ones(3))
    with pytest.raises(ValueError):
        x.value[0] = 2.0


# ------------------------------------------------------- first derivatives


@given(arrays((3, 4)), arrays((3, 4)))
def test_elementwise_binary_grads(a, b):
    b = np.abs(b) + 0.5
    check_grad(lambda x, y: x * y + x - y, a, b)
    check_grad(lambda x, y: x / y, a, b)


@given(arrays((2, 5)))
def test_elementwise_unary_grads(a):
    check_grad(ad.softplus, a)
    check_grad(ad.sigmoid, a)
    check_grad(ad.exp, a)
    check_grad(lambda x: ad.log(ad.softplus(x) + 0.1), a)
    check_grad(lambda x: -x, a)


def test_abs_grad_away_from_zero(rng):
    a = rng.uniform(0.1, 2.0, (3, 3)) * rng.choice([-1, 1], (3, 3))
    check_grad(ad.abs_, a)


@given(arrays((3, 4)), arrays((4, 2)))
def test_matmul_grad(a, b):
    check_grad(lambda x, y: x @ y, a, b)


@given(arrays((3, 1)), arrays((1, 4)))
def test_broadcasting_grad(a, b):
    check_grad(lambda x, y: x * y + x, a, b)


def test_reductions_and_shapes(rng):
    a = rng.standard_normal((2, 3, 4))
    check_grad(lambda x: ad.sum_(x, axis=(0, 2)) * ad.sum_(x, axis=(0, 2)), a)
    check_grad(lambda x: ad.logsumexp(x, axis=1), a)
    check_grad(lambda x: ad.max_(x, axis=-1) * 2.0, a)
    check_grad(lambda x: ad.reshape(x, (4, -1)) @ ad.leaf(np.ones((6, 2))), a)
    check_grad(lambda x: ad.transpose(x, (2, 0, 1)) * ad.leaf(np.arange(24.0).reshape(4, 2, 3)), a)
    check_grad(lambda x: x[:, 1:, ::2] * x[:, :2, 1::2], a)
    check_grad(lambda x: ad.broadcast_to(ad.sum_(x, axis=2, keepdims=True), (2, 3, 5)) * 1.5, a)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv_grads(rng, stride, pad):
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    probe = ad.leaf(rng.standard_normal(kernels.conv2d_numpy(x, w, stride, pad).shape))
    check_grad(lambda a, b: ad.conv2d(a, b, stride, pad) * probe, x, w)


def test_slice_adjoint_pair(rng):
    g = rng.standard_normal((2, 2))
    full = pad_slice(ad.leaf(g), (slice(1, 3), slice(0, 2)), (4, 3)).value
    assert full.shape == (4, 3)
    assert np.array_equal(full[1:3, 0:2], g)
    assert np.sum(np.abs(full)) == pytest.approx(np.sum(np.abs(g)))


# ---------------------------------------------------------------- kernels


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv_kernels_match_direct_definition(rng, stride, pad):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((5, 3, 3, 3))
    ref = conv2d_direct(x, w, stride, pad)
    assert np.allclose(kernels.conv2d_numpy(x, w, stride, pad), ref, atol=1e-12)
    assert np.allclose(kernels.conv2d_numba(x, w, stride, pad), ref, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_conv_adjoint_identities(rng, stride, pad):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    y = kernels.conv2d_numpy(x, w, stride, pad)
    g = rng.standard_normal(y.shape)
    lhs = np.sum(y * g)
    for impl in ("numpy", "numba"):
        dx = getattr(kernels, f"conv2d_input_grad_{impl}")(g, w, x.shape, stride, pad)
        dw = getattr(kernels, f"conv2d_weight_grad_{impl}")(x, g, w.shape, stride, pad)
        assert np.sum(x * dx) == pytest.approx(lhs, rel=1e-12)
        assert np.sum(w * dw) == pytest.approx(lhs, rel=1e-12)


def test_backend_flag(monkeypatch):
    monkeypatch.setenv("LLR_NUMBA", "0")
    assert ad.backend() == "numpy"
    monkeypatch.setenv("LLR_NUMBA", "1")
    assert ad.backend() == ("numba" if kernels.HAVE_NUMBA else "numpy")


def test_backends_agree_end_to_end(rng, monkeypatch):
    x = rng.standard_normal((3, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    out = {}
    for flag in ("0", "1"):
        monkeypatch.setenv("LLR_NUMBA", flag)
        xn, wn = ad.leaf(x), ad.leaf(w)
        loss = ad.sum_(ad.softplus(ad.conv2d(xn, wn, 2, 1)))
        gx = ad.grad(loss, xn, create_graph=True)
        out[flag] = ad.grad(ad.sum_(gx * gx), wn)
    assert np.allclose(out["0"], out["1"], rtol=1e-12, atol=1e-12)


# ------------------------------------------------------ higher order / jvp


def test_second_derivative_of_cube():
    x = ad.leaf(1.7)
    (g,) = ad.grad(x * x * x, [x], create_graph=True)
    assert ad.grad(g, x) == pytest.approx(6 * 1.7)


def test_gradient_penalty_matches_finite_differences(rng):
    x0 = rng.standard_normal((1, 4))
    w0 = rng.standard_normal((4, 3))

    def penalty(w, x):
        xn = ad.leaf(x)
        out = ad.sum_(ad.softplus(xn @ w))
        gx = ad.grad(out, xn, create_graph=True)
        return ad.sum_(gx * gx)

    wn = ad.leaf(w0)
    analytic = ad.grad(penalty(wn, x0), wn)

    def f(w):
        return float(penalty(ad.leaf(w), x0).value)

    assert rel_err(analytic, central_diff(f, w0)) < 1e-7


def test_conv_second_order(rng):
    x0 = rng.standard_normal((1, 2, 5, 5))
    w0 = rng.standard_normal((3, 2, 3, 3)) * 0.5

    def penalty(w):
        xn = ad.leaf(x0)
        out = ad.sum_(ad.softplus(ad.conv2d(xn, w, 2, 1)))
        gx = ad.grad(out, xn, create_graph=True)
        return ad.sum_(gx * gx * gx)

    wn = ad.leaf(w0)
    analytic = ad.grad(penalty(wn), wn)
    numeric = central_diff(lambda w: float(penalty(ad.leaf(w)).value), w0)
    assert rel_err(analytic, numeric) < 1e-7


def test_adjoint_ops_are_differentiable(rng):
    g0 = rng.standard_normal((1, 2, 3, 3))
    w0 = rng.standard_normal((2, 2, 3, 3))
    x0 = rng.standard_normal((1, 2, 6, 6))

    def squared(node):
        return node * node

    check_grad(lambda g, w: squared(conv2d_input_grad(g, w, (1, 2, 6, 6), 2, 1)), g0, w0)
    check_grad(lambda x, g: squared(conv2d_weight_grad(x, g, (2, 2, 3, 3), 2, 1)), x0, g0)


def test_jvp_matches_finite_differences(rng):
    x0 = rng.standard_normal((2, 2, 6, 6))
    w0 = rng.standard_normal((3, 2, 3, 3))
    v = rng.standard_normal(x0.shape)
    m = rng.standard_normal((27, 4))

    def f(x):
        h = ad.softplus(ad.conv2d(x, ad.leaf(w0), 2, 1))
        return ad.logsumexp(ad.reshape(h, (2, -1)) @ ad.leaf(m), axis=1)

    xn = ad.leaf(x0)
    out = f(xn)
    tangent = ad.jvp(out, xn, v)
    h = 1e-6
    with ad.no_record():
        fd = (f(ad.leaf(x0 + h * v)).value - f(ad.leaf(x0 - h * v)).value) / (2 * h)
    assert rel_err(tangent, fd) < 1e-7


def test_jvp_equals_vjp_contraction(rng):
    x0 = rng.standard_normal((3, 4))
    w0 = rng.standard_normal((4, 2))
    v = rng.standard_normal(x0.shape)
    u = rng.standard_normal((3, 2))
    xn = ad.leaf(x0)
    out = ad.softplus(xn @ ad.leaf(w0))
    lhs = np.sum(u * ad.jvp(out, xn, v))
    rhs = np.sum(v * ad.grad(ad.sum_(out * ad.leaf(u)), xn))
    assert lhs == pytest.approx(rhs, rel=1e-12)


# ---------------------------------------------------------------- contract


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\[3\].*\[4\]"):
        ad.leaf(np.ones(3)) + ad.leaf(np.ones(4))
    with pytest.raises(ShapeError):
        ad.leaf(np.ones((2, 3))) @ ad.leaf(np.ones((2, 3)))


def test_grad_needs_scalar_output():
    x = ad.leaf(np.ones(3))
    with pytest.raises(ContractError):
        ad.grad(x * 2.0, x)


def test_unreachable_target_gets_zeros():
    x, y = ad.leaf(np.ones(3)), ad.leaf(np.ones((2, 2)))
    gx, gy = ad.grad(ad.sum_(x * x), [x, y])
    assert np.array_equal(gx, 2 * np.ones(3))
    assert np.array_equal(gy, np.zeros((2, 2)))


def test_interior_target():
    x = ad.leaf(2.0)
    h = x * 3.0
    out = h * h
    assert ad.grad(out, h) == pytest.approx(12.0)


def test_no_record_builds_detached_nodes():
    x = ad.leaf(np.ones(2))
    with ad.no_record():
        y = x * 2.0
    assert y.is_leaf
    assert ad.is_recording()


def test_jvp_direction_shape_checked():
    x = ad.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        ad.jvp(x * 2.0, x, np.ones(4))


def test_shared_subexpressions_accumulate():
    x = ad.leaf(1.5)
    a = ad.exp(x)
    out = a * a + a
    assert ad.grad(out, x) == pytest.approx(2 * math.exp(3.0) + math.exp(1.5))
