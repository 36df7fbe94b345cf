import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lanegeo import autodiff as ad
from lanegeo.autodiff import BatchNorm, Tensor
from lanegeo.context import (Codebook, ContextEncoder, aggregate, assignment_weights, attention,
                             channel_gate, class_features, residual_encode, se_loss, soft_assign)
from lanegeo.errors import ConfigError, DimensionError

from oracles import soft_assign_oracle


def _book(rng, k, c, scale=0.5):
    return Codebook(Tensor(rng.uniform(-scale, scale, size=(k, c))), Tensor(rng.normal(size=k)))


def test_soft_assign_single_codeword_is_plain_residual():
    X = np.array([[1.0, 2.0], [0.5, -1.0]])
    book = Codebook(Tensor([[0.0, 0.0]]), Tensor([0.3]))
    r = soft_assign(Tensor(X), book).data
    assert np.allclose(r[:, 0, :], X)


def test_soft_assign_equidistant_codewords_split_evenly():
    book = Codebook(Tensor([[1.0, 0.0], [-1.0, 0.0]]), Tensor([0.0, 0.0]))
    w = assignment_weights(Tensor([[0.0, 0.0]]), book).data
    assert np.allclose(w, 0.5, atol=1e-15)


def test_initial_smoothing_is_one():
    book = Codebook.init(4, 3, np.random.default_rng(0))
    assert np.allclose(book.smoothing().data, 1.0, atol=1e-15)
    assert np.all(np.abs(book.codewords.data) <= 0.5)


@pytest.mark.parametrize("seed", range(6))
def test_soft_assign_matches_high_precision_oracle(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(5, 3))
    book = _book(rng, 4, 3)
    got = soft_assign(Tensor(X), book).data
    want = np.array(soft_assign_oracle(X, book.codewords.data, book.smoothing().data))
    assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_residual_encode_sums_soft_assign_over_points():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(2, 7, 3))
    book = _book(rng, 4, 3)
    e = residual_encode(Tensor(X), book).data
    for b in range(2):
        assert np.allclose(e[b], soft_assign(Tensor(X[b]), book).data.sum(axis=0), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-30, 30))
def test_weights_sum_to_one_and_ignore_common_shift(seed, shift):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(6, 4)) * 3
    book = _book(rng, 5, 4)
    w = assignment_weights(Tensor(X), book).data
    assert np.all(np.abs(w.sum(axis=1) - 1.0) <= 1e-12)
    # softmax of the scaled distances plus a constant must give the same weights
    logits = -book.smoothing().data * ((X[:, None, :] - book.codewords.data[None]) ** 2).sum(-1)
    shifted = ad.softmax_rows(Tensor(logits + shift)).data
    assert np.allclose(w, shifted, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_codeword_permutation_permutes_encoding(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(8, 3))
    book = _book(rng, 5, 3)
    perm = rng.permutation(5)
    permuted = Codebook(Tensor(book.codewords.data[perm]), Tensor(book.smoothing_raw.data[perm]))
    a = residual_encode(Tensor(X), book).data
    b = residual_encode(Tensor(X), permuted).data
    assert np.allclose(a[perm], b, atol=1e-13)


def test_aggregate_is_sum_of_normalized_relu():
    rng = np.random.default_rng(0)
    e_k = rng.normal(size=(3, 4, 5))
    bn = BatchNorm(5, "t")
    got = aggregate(Tensor(e_k), bn, "infer").data
    want = np.maximum(e_k / np.sqrt(1 + 1e-5), 0).sum(axis=1)
    assert np.allclose(got, want)


def test_attention_examples():
    c = 4
    assert np.allclose(attention(Tensor(np.zeros(c)), Tensor(np.eye(c))).data, 0.5)
    assert np.allclose(attention(Tensor(np.ones(c)), Tensor(np.zeros((c, c)))).data, 0.5)
    with pytest.raises(DimensionError):
        attention(Tensor(np.ones(c)), Tensor(np.ones((c, c + 1))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1, 50))
def test_attention_strictly_inside_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    a = attention(Tensor(rng.normal(size=(3, 6)) * scale), Tensor(rng.normal(size=(6, 6)) * scale)).data
    assert np.all((a > 0) & (a < 1))


def test_channel_gate_examples():
    X = np.random.default_rng(0).normal(size=(3, 4, 5))
    assert np.array_equal(channel_gate(Tensor(X), Tensor(np.ones(3))).data, X)
    assert np.array_equal(channel_gate(Tensor(X), Tensor(np.zeros(3))).data, np.zeros_like(X))
    with pytest.raises(DimensionError):
        channel_gate(Tensor(X), Tensor(np.ones(4)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_channel_gate_composition(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(2, 5, 3, 4))
    A, B = rng.uniform(size=(2, 5)), rng.uniform(size=(2, 5))
    twice = channel_gate(channel_gate(Tensor(X), Tensor(A)), Tensor(B)).data
    once = channel_gate(Tensor(X), Tensor(A * B)).data
    assert np.max(np.abs(twice - once)) <= 1e-15


def test_class_features_slices_and_divisibility():
    rng = np.random.default_rng(0)
    Y = rng.normal(size=(6, 3, 4))
    proj = rng.normal(size=(8, 6, 1, 1))
    bank = class_features(Tensor(Y), Tensor(proj), lanes=4)
    assert bank.dim == 2
    full = np.einsum("oc,chw->o", proj[:, :, 0, 0], Y) / 12
    assert np.allclose(bank.F.data, full)
    assert np.allclose(bank.lane(3).data, full[4:6])
    with pytest.raises(ConfigError):
        class_features(Tensor(Y), Tensor(rng.normal(size=(7, 6, 1, 1))), lanes=4)
    with pytest.raises(IndexError):
        bank.lane(5)


def test_se_loss_values():
    assert se_loss(Tensor(np.zeros(4)), np.ones(4)).item() == pytest.approx(np.log(2))
    sat = se_loss(Tensor(np.array([60.0, -60.0])), np.array([1.0, 0.0])).item()
    assert 0 <= sat <= 1.1e-7
    assert se_loss(Tensor(np.array([0.3, -2.0])), np.array([0.0, 1.0])).item() > 0
    with pytest.raises(DimensionError):
        se_loss(Tensor(np.zeros(3)), np.zeros(4))


def test_se_loss_gradient_reaches_codebook():
    rng = np.random.default_rng(5)
    enc = ContextEncoder(channels=6, codewords=4, lanes=4, feat_dim=2, rng=rng)
    X = rng.normal(size=(2, 6, 3, 4))
    pres_w = rng.normal(size=(4, 6))
    truth = np.array([[1.0, 0, 1, 0], [0, 1, 1, 1]])

    def loss_codewords(d):
        enc.book.codewords = d
        _, e, _ = enc.encode(Tensor(X), "train")
        return se_loss(e @ Tensor(pres_w.T), truth)

    def loss_smoothing(s):
        enc.book.smoothing_raw = s
        _, e, _ = enc.encode(Tensor(X), "train")
        return se_loss(e @ Tensor(pres_w.T), truth)

    assert ad.gradient_check(loss_codewords, Tensor(enc.book.codewords.data.copy())) <= 1e-4
    assert ad.gradient_check(loss_smoothing, Tensor(enc.book.smoothing_raw.data.copy())) <= 1e-4
