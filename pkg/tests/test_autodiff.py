import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lanegeo import autodiff as ad
from lanegeo.autodiff import BatchNorm, Tensor
from lanegeo.errors import BatchSizeError, DimensionError, NumericError, OptimizerError
from lanegeo.gradcheck import op_checks

from oracles import softmax_mp

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_add_backward_gives_ones():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    ad.backward((a + b).sum())
    assert a.grad.tolist() == [1.0, 1.0]
    assert b.grad.tolist() == [1.0, 1.0]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_nan_in_forward_raises():
    with pytest.raises(NumericError):
        ad.log(Tensor([-1.0]))


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x + x
    ad.backward(y.sum())
    assert x.grad[0] == pytest.approx(7.0)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    ad.reset_tape()
    with ad.no_grad():
        (x * 2).sum()
    assert len(ad.get_tape().nodes) == 0


def test_backward_clears_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward((x * x).sum())
    assert len(ad.get_tape().nodes) == 0


def test_every_op_passes_gradient_check():
    bad = [(r.name, r.error) for r in op_checks(seed=3) if not r.ok]
    assert not bad


def test_gradient_check_detects_a_wrong_backward():
    def broken(x):
        return ad._result(x.data ** 2, [x], lambda g: [g * 3 * x.data], "broken")

    err = ad.gradient_check(lambda t: broken(t).sum(), Tensor(np.array([0.7, -1.2])))
    assert err > 0.1


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_matches_high_precision(x):
    got = ad.softmax_rows(Tensor(x), axis=1).data
    for row, g in zip(x, got):
        assert np.allclose(g, softmax_mp(row), rtol=0, atol=1e-15)
        assert abs(g.sum() - 1.0) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite), finite)
def test_softmax_shift_invariant(x, shift):
    a = ad.softmax_rows(Tensor(x)).data
    b = ad.softmax_rows(Tensor(x + shift)).data
    assert np.allclose(a, b, atol=1e-14)


def test_log_softmax_matches_log_of_softmax():
    x = np.random.default_rng(0).normal(size=(3, 5)) * 4
    assert np.allclose(ad.log_softmax(Tensor(x)).data, np.log(ad.softmax_rows(Tensor(x)).data), atol=1e-13)


def test_sigmoid_stays_open_interval():
    y = ad.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    assert np.all((y > 0) & (y < 1))
    assert y[1] == 0.5


def _conv_oracle(x, k, stride, pad):
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for f in range(o):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[f, i, j] = float(np.sum(patch * k[f]))
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_direct_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(3, 7, 9))
    k = rng.normal(size=(4, 3, 3, 3))
    got = ad.conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad).data
    assert np.allclose(got, _conv_oracle(x, k, stride, pad), atol=1e-12)


def test_conv2d_is_cross_correlation():
    x = np.zeros((1, 3, 3))
    x[0, 1, 1] = 1.0
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    out = ad.conv2d(Tensor(x), Tensor(k), padding=1).data[0]
    # an impulse through a correlation yields the kernel flipped
    assert np.array_equal(out, k[0, 0, ::-1, ::-1])


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_batchnorm_train_normalizes_and_updates_running_stats():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, size=(4, 2, 5, 5))
    bn = BatchNorm(2, "t")
    y = bn(Tensor(x), "train").data
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
    n = 4 * 25
    expect_var = 0.9 * 1.0 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1)
    assert np.allclose(bn.running_var, expect_var)
    assert np.allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))


def test_batchnorm_infer_uses_running_stats():
    bn = BatchNorm(2, "t")
    bn.running_mean[:] = [1.0, -1.0]
    bn.running_var[:] = [4.0, 9.0]
    y = bn(Tensor(np.array([[3.0, 2.0]])), "infer").data
    assert np.allclose(y, [[2 / np.sqrt(4 + 1e-5), 3 / np.sqrt(9 + 1e-5)]])


def test_batchnorm_single_sample_in_train_mode_errors():
    with pytest.raises(BatchSizeError):
        BatchNorm(3, "t")(Tensor(np.ones((1, 3))), "train")


def test_sgd_step_momentum_and_missing_grad():
    p = Tensor([1.0], requires_grad=True, name="w")
    p.grad = np.array([2.0])
    ad.sgd_step([p], lr=0.1, momentum=0.9)
    assert p.data[0] == pytest.approx(0.8)
    p.grad = np.array([2.0])
    ad.sgd_step([p], lr=0.1, momentum=0.9)
    # velocity 0.9*0.2 + 0.2 = 0.38
    assert p.data[0] == pytest.approx(0.42)
    with pytest.raises(OptimizerError, match="w"):
        ad.sgd_step([p], lr=0.1, momentum=0.9)


def test_upsample_identity_and_constant():
    x = np.random.default_rng(0).normal(size=(2, 4, 6))
    assert np.allclose(ad.upsample_bilinear(Tensor(x), 4, 6).data, x)
    c = np.full((1, 2, 3), 2.5)
    assert np.allclose(ad.upsample_bilinear(Tensor(c), 8, 12).data, 2.5)
