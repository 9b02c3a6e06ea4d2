"""Tensor/op-level checks: frozen forward examples, finite-difference
gradients for every primitive, and the gradient-check harness itself."""

import numpy as np
import pytest

from partreid import autograd as ag
from partreid.autograd import (GradCheckReport, NonFiniteError, ShapeError,
                               Tensor, grad_check)

F64 = np.float64


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=F64), requires_grad=grad, dtype=F64)


# ---------------------------------------------------------------------------
# forward examples

def test_softmax_uniform_input():
    out = ag.softmax(t64([0.0, 0.0, 0.0]))
    np.testing.assert_array_equal(out.data, np.full(3, 1.0 / 3.0))


def test_softmax_rows_sum_to_one_and_positive():
    rng = np.random.default_rng(0)
    x = t64(rng.standard_normal((5, 9)) * 10)
    out = ag.softmax(x, axis=1).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
    assert (out > 0).all()


def test_global_max_pool_1x1_identity():
    v = 3.75
    out = ag.global_max_pool(t64(np.full((1, 1, 1, 1), v)))
    assert out.data[0, 0] == v


def naive_conv2d(x, w, stride=1, padding=0, dilation=1):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for yo in range(ho):
                for xo in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (xp[ni, ci, yo * stride + ky * dilation,
                                           xo * stride + kx * dilation]
                                        * w[fi, ci, ky, kx])
                    out[ni, fi, yo, xo] = acc
    return out


def test_conv2d_ones_image_ones_kernel():
    out = ag.conv2d(t64(np.ones((1, 1, 5, 5))), t64(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 9.0))


@pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (2, 1, 1),
                                                     (1, 2, 2), (2, 0, 1)])
def test_conv2d_matches_direct_summation(stride, padding, dilation):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 8, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    got = ag.conv2d(t64(x), t64(w), stride=stride, padding=padding,
                    dilation=dilation).data
    want = naive_conv2d(x, w, stride, padding, dilation)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_bilinear_resize_same_shape_is_bit_exact_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
    out = ag.bilinear_resize(Tensor(x), (6, 5))
    assert np.array_equal(out.data, x)


def test_bilinear_resize_constant_map_stays_constant():
    x = t64(np.full((1, 1, 4, 4), 2.5))
    out = ag.bilinear_resize(x, (9, 9))
    np.testing.assert_allclose(out.data, 2.5, atol=1e-12)


def test_batchnorm_eval_is_affine_and_deterministic():
    from partreid import nn

    bn = nn.BatchNorm(3)
    bn.eval()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 3, 5, 5)).astype(np.float32)
    a = bn(Tensor(x)).data
    b = bn(Tensor(x)).data
    assert np.array_equal(a, b)
    # zero running stats + unit scale: y = x / sqrt(eps)
    np.testing.assert_allclose(a, x / np.sqrt(bn.eps), rtol=1e-5)


def test_non_finite_fails_fast_naming_op():
    with pytest.raises(NonFiniteError, match="log"):
        ag.log(t64([0.0]))


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError, match="matmul"):
        ag.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_deterministic_forward():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    a = ag.conv2d(t64(x), t64(w), stride=1, padding=1).data
    b = ag.conv2d(t64(x), t64(w), stride=1, padding=1).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# backward examples

def test_sigmoid_grad_at_zero_is_quarter():
    x = t64(np.zeros(5), grad=True)
    ag.tsum(ag.sigmoid(x)).backward()
    np.testing.assert_array_equal(x.grad, np.full(5, 0.25))


def test_softmax_grad_matches_central_differences_h_1e3():
    rng = np.random.default_rng(4)
    x = t64(rng.standard_normal(4), grad=True)
    w = rng.standard_normal(4)

    def f():
        return ag.tsum(ag.mul(ag.softmax(x), Tensor(w, dtype=F64)))

    report = grad_check(f, {"x": x}, tolerance=1e-4, h=1e-3)
    assert report.passed, report


def test_unused_parameter_grad_stays_zero():
    x = t64(np.ones(3), grad=True)
    unused = t64(np.ones(3), grad=True)
    x.zero_grad()
    unused.zero_grad()
    ag.tsum(ag.mul(x, x)).backward()
    np.testing.assert_array_equal(unused.grad, np.zeros(3))
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))


def test_backward_requires_scalar():
    x = t64(np.ones(3), grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        ag.mul(x, x).backward()


def test_grad_accumulates_across_shared_subexpressions():
    # diamond: y = exp(-s) * L + 0.5 * s; dy/ds at s=0 is -L + 0.5
    s = t64(np.zeros(1), grad=True)
    sc = ag.reshape(s, ())
    y = ag.add(ag.mul(ag.exp(ag.neg(sc)), 0.7), ag.mul(sc, 0.5))
    y.backward()
    np.testing.assert_allclose(s.grad, [-0.2], atol=1e-12)


# ---------------------------------------------------------------------------
# per-primitive finite differences (>= 20 seeds each)

def _fd_case(seed):
    rng = np.random.default_rng(seed)
    return rng


PRIMITIVE_CASES = {
    "add": lambda r: (lambda a, b: ag.tsum(ag.add(a, b)),
                      {"a": (3, 4), "b": (3, 4)}),
    "add_broadcast": lambda r: (lambda a, b: ag.tsum(ag.add(a, b)),
                                {"a": (3, 4), "b": (1, 4)}),
    "mul": lambda r: (lambda a, b: ag.tsum(ag.mul(a, b)),
                      {"a": (2, 5), "b": (2, 5)}),
    "div": lambda r: (lambda a, b: ag.tsum(ag.div(a, ag.add(ag.mul(b, b), 1.0))),
                      {"a": (4,), "b": (4,)}),
    "relu": lambda r: (lambda a: ag.tsum(ag.mul(ag.relu(a), a)), {"a": (17,)}),
    "sigmoid": lambda r: (lambda a: ag.tsum(ag.sigmoid(a)), {"a": (9,)}),
    "exp": lambda r: (lambda a: ag.tsum(ag.exp(a)), {"a": (6,)}),
    "sqrt_of_pos": lambda r: (lambda a: ag.tsum(ag.sqrt(ag.add(ag.mul(a, a), 0.5))),
                              {"a": (7,)}),
    "abs": lambda r: (lambda a: ag.tsum(ag.absolute(a)), {"a": (11,)}),
    "matmul": lambda r: (lambda a, b: ag.tsum(ag.matmul(a, b)),
                         {"a": (3, 4), "b": (4, 2)}),
    "bmm": lambda r: (lambda a, b: ag.tsum(ag.bmm(a, b)),
                      {"a": (2, 3, 4), "b": (2, 4, 2)}),
    "affine": lambda r: (lambda x, w, b: ag.tsum(ag.affine(x, w, b)),
                         {"x": (3, 4), "w": (2, 4), "b": (2,)}),
    "softmax": lambda r: (lambda a: ag.tsum(ag.mul(ag.softmax(a, 1), a)),
                          {"a": (3, 5)}),
    "log_softmax": lambda r: (lambda a: ag.tsum(ag.mul(ag.log_softmax(a, 1), a)),
                              {"a": (3, 5)}),
    "sum_axis": lambda r: (lambda a: ag.tsum(ag.mul(ag.tsum(a, 1, True), a)),
                           {"a": (3, 4)}),
    "mean_axes": lambda r: (lambda a: ag.tsum(ag.mul(ag.tmean(a, (0, 2), True), a)),
                            {"a": (2, 3, 4)}),
    "reshape": lambda r: (lambda a: ag.tsum(ag.mul(ag.reshape(a, (6, 2)),
                                                   ag.reshape(a, (6, 2)))),
                          {"a": (3, 4)}),
    "concat": lambda r: (lambda a, b: ag.tsum(ag.mul(ag.concat([a, b], 1),
                                                     ag.concat([b, a], 1))),
                         {"a": (2, 3), "b": (2, 3)}),
    "narrow": lambda r: (lambda a: ag.tsum(ag.mul(ag.narrow(a, 1, 1, 2),
                                                  ag.narrow(a, 1, 0, 2))),
                         {"a": (3, 4)}),
    "crop": lambda r: (lambda a: ag.tsum(ag.mul(ag.crop(a, (1, 3, 0, 2)),
                                                ag.crop(a, (0, 2, 1, 3)))),
                       {"a": (2, 1, 4, 4)}),
    "conv2d": lambda r: (lambda x, w, b: ag.tsum(ag.mul(
        ag.conv2d(x, w, b, stride=2, padding=1, dilation=1),
        ag.conv2d(x, w, b, stride=2, padding=1, dilation=1))),
        {"x": (2, 2, 5, 5), "w": (3, 2, 3, 3), "b": (3,)}),
    "conv2d_dilated": lambda r: (lambda x, w: ag.tsum(ag.mul(
        ag.conv2d(x, w, padding=2, dilation=2),
        ag.conv2d(x, w, padding=2, dilation=2))),
        {"x": (1, 2, 6, 6), "w": (2, 2, 3, 3)}),
    "conv_transpose2d": lambda r: (lambda x, w, b: ag.tsum(ag.mul(
        ag.conv_transpose2d(x, w, b, stride=2, padding=1),
        ag.conv_transpose2d(x, w, b, stride=2, padding=1))),
        {"x": (2, 3, 4, 4), "w": (3, 2, 4, 4), "b": (2,)}),
    "bilinear_resize_up": lambda r: (lambda x: ag.tsum(ag.mul(
        ag.bilinear_resize(x, (7, 6)), ag.bilinear_resize(x, (7, 6)))),
        {"x": (1, 2, 4, 3)}),
    "bilinear_resize_down": lambda r: (lambda x: ag.tsum(ag.mul(
        ag.bilinear_resize(x, (3, 3)), ag.bilinear_resize(x, (3, 3)))),
        {"x": (1, 2, 5, 6)}),
    "global_avg_pool": lambda r: (lambda x: ag.tsum(ag.mul(
        ag.global_avg_pool(x), ag.global_avg_pool(x))), {"x": (2, 3, 4, 4)}),
    "global_max_pool": lambda r: (lambda x: ag.tsum(ag.mul(
        ag.global_max_pool(x), ag.global_max_pool(x))), {"x": (2, 3, 4, 4)}),
    "take_pairs": lambda r: (lambda x: ag.tsum(ag.mul(
        ag.take_pairs(x, np.array([0, 1, 2]), np.array([2, 0, 1])),
        ag.take_pairs(x, np.array([0, 1, 2]), np.array([1, 2, 0])))),
        {"x": (3, 3)}),
    "l2_normalize": lambda r: (lambda x: ag.tsum(ag.mul(
        ag.l2_normalize(x, 1), x)), {"x": (3, 4)}),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    failures = []
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        fn_builder = PRIMITIVE_CASES[name]
        fn_proto, shapes = fn_builder(rng)
        params = {k: t64(rng.standard_normal(s), grad=True)
                  for k, s in shapes.items()}
        report = grad_check(lambda: fn_proto(**params), params,
                            tolerance=1e-4, h=1e-6)
        if not report.passed:
            failures.append((seed, report.worst))
    assert not failures, f"{name}: {failures}"


def test_masked_max_pool_grad_and_selection():
    rng = np.random.default_rng(5)
    x = t64(rng.standard_normal((2, 3, 4, 4)), grad=True)
    mask = np.zeros((4, 4), dtype=bool)
    mask[1:3, 1:3] = True
    out = ag.masked_max_pool(x, mask)
    want = np.where(mask, x.data, -np.inf).reshape(2, 3, -1).max(axis=2)
    np.testing.assert_array_equal(out.data, want)
    report = grad_check(
        lambda: ag.tsum(ag.mul(ag.masked_max_pool(x, mask),
                               ag.masked_max_pool(x, mask))),
        {"x": x}, tolerance=1e-4, h=1e-6)
    assert report.passed, report


def test_masked_max_pool_empty_mask_errors():
    x = t64(np.ones((1, 1, 2, 2)))
    with pytest.raises(ShapeError, match="no position"):
        ag.masked_max_pool(x, np.zeros((2, 2), dtype=bool))


def test_max_pool_gradient_routes_to_argmax():
    x = t64(np.array([[[[1.0, 5.0], [2.0, 3.0]]]]), grad=True)
    out = ag.global_max_pool(x)
    out.backward()
    np.testing.assert_array_equal(x.grad, [[[[0.0, 1.0], [0.0, 0.0]]]])


# ---------------------------------------------------------------------------
# grad_check harness

def test_grad_check_linear_layer_passes():
    from partreid import nn

    lin = nn.Linear(6, 4, np.random.default_rng(0), dtype=F64)
    rng = np.random.default_rng(1)
    x = t64(rng.standard_normal((3, 6)))
    report = grad_check(lambda: ag.tsum(ag.mul(lin(x), lin(x))),
                        dict(lin.named_parameters()), tolerance=1e-4)
    assert report.passed, report


def test_grad_check_requires_scalar_output():
    x = t64(np.ones(3), grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        grad_check(lambda: ag.mul(x, x), {"x": x})


def test_grad_check_requires_float64():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="float64"):
        grad_check(lambda: ag.tsum(x), {"x": x})


def test_grad_check_flags_corrupted_gradient_by_name():
    x = t64(np.array([1.0, 2.0]), grad=True)

    def broken_double(t):
        out = t.data * 2.0
        return ag._make(out, "broken", (t,), lambda g: (g,))  # claims d/dt = 1

    report = grad_check(lambda: ag.tsum(broken_double(x)), {"x": x},
                        tolerance=1e-4)
    assert not report.passed
    assert "x" in report.failures
    assert isinstance(report, GradCheckReport)
