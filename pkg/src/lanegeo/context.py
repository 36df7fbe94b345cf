"""Context encoding: learned codebook, residual aggregation, channel attention.

A feature map ``C×H×W`` is read as ``N = H*W`` descriptors of dimension C.
Each descriptor is soft-assigned to K codewords, the weighted residuals are
summed per codeword, normalized, rectified and summed into one C-vector
``e``.  ``sigmoid(W e)`` then gates the feature map channel-wise, and a 1×1
projection with global pooling yields the per-lane class features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNorm, Tensor
from .errors import ConfigError, DimensionError

# softplus(_SMOOTH_INIT) == 1
_SMOOTH_INIT = float(np.log(np.expm1(1.0)))


class Codebook:
    """K codewords of dimension C plus K smoothing factors.

    Smoothing factors are stored unconstrained and used through softplus.
    """

    def __init__(self, codewords: Tensor, smoothing_raw: Tensor):
        if codewords.data.ndim != 2 or codewords.shape[0] < 1:
            raise DimensionError(f"codewords must be K×C with K >= 1, got {codewords.shape}")
        if smoothing_raw.shape != (codewords.shape[0],):
            raise DimensionError("one smoothing factor per codeword required")
        self.codewords = codewords
        self.smoothing_raw = smoothing_raw

    @classmethod
    def init(cls, k: int, c: int, rng: np.random.Generator, prefix: str = "ctx") -> "Codebook":
        d = Tensor(rng.uniform(-0.5, 0.5, size=(k, c)), requires_grad=True, name=f"{prefix}.codewords")
        s = Tensor(np.full(k, _SMOOTH_INIT), requires_grad=True, name=f"{prefix}.smoothing")
        return cls(d, s)

    @property
    def k(self) -> int:
        return self.codewords.shape[0]

    @property
    def c(self) -> int:
        return self.codewords.shape[1]

    def smoothing(self) -> Tensor:
        return ad.softplus(self.smoothing_raw)

    def parameters(self) -> list[Tensor]:
        return [self.codewords, self.smoothing_raw]


def _check_dims(X: Tensor, book: Codebook) -> None:
    if X.shape[-1] != book.c:
        raise DimensionError(f"feature dim C={X.shape[-1]} does not match codeword dim C={book.c}")


def assignment_weights(X: Tensor, book: Codebook) -> Tensor:
    """Soft-assignment weights ``(..., N, K)``: softmax over k of ``-s_k ||x_i - d_k||^2``."""
    _check_dims(X, book)
    D = book.codewords
    x2 = (X * X).sum(axis=-1, keepdims=True)
    d2 = (D * D).sum(axis=-1).reshape(1, book.k)
    cross = X @ D.T
    dist = x2 - 2.0 * cross + d2
    return ad.softmax_rows(-1.0 * dist * book.smoothing())


def soft_assign(X: Tensor, book: Codebook) -> Tensor:
    """Weighted residuals ``e_ik`` of shape ``N×K×C`` (direct form)."""
    _check_dims(X, book)
    if X.data.ndim != 2:
        raise DimensionError(f"soft_assign expects N×C, got {X.shape}")
    n, c = X.shape
    diff = X.reshape(n, 1, c) - book.codewords.reshape(1, book.k, c)
    dist = (diff * diff).sum(axis=2)
    w = ad.softmax_rows(-1.0 * dist * book.smoothing())
    return diff * w.reshape(n, book.k, 1)


def residual_encode(X: Tensor, book: Codebook) -> Tensor:
    """``e_k = sum_i e_ik`` for ``X`` of shape ``(B,) N×C``; returns ``(B,) K×C``.

    Uses ``sum_i w_ik (x_i - d_k) = W^T X - (sum_i w_ik) d_k`` so the
    ``N×K×C`` intermediate is never built.
    """
    w = assignment_weights(X, book)
    wt = ad.transpose(w, tuple(range(w.data.ndim - 2)) + (w.data.ndim - 1, w.data.ndim - 2))
    mass = w.sum(axis=-2).reshape(w.shape[:-2] + (book.k, 1))
    return wt @ X - mass * book.codewords


def aggregate(e_k: Tensor, bn: BatchNorm, mode: str = "infer") -> Tensor:
    """``e = sum_k relu(bn(e_k))`` for ``e_k`` of shape ``(B,) K×C``."""
    lead = e_k.shape[:-2]
    k, c = e_k.shape[-2:]
    flat = e_k.reshape(-1, c)
    z = ad.relu(bn(flat, mode))
    return z.reshape(lead + (k, c)).sum(axis=-2)


def attention(e: Tensor, w_attn: Tensor) -> Tensor:
    """Channel attention ``sigmoid(W e)``; ``e`` is ``C`` or ``B×C``."""
    c = e.shape[-1]
    if w_attn.shape != (c, c):
        raise DimensionError(f"attention weights must be {c}×{c}, got {w_attn.shape}")
    if e.data.ndim == 1:
        return ad.sigmoid((w_attn @ e.reshape(c, 1)).reshape(c))
    return ad.sigmoid(e @ w_attn.T)


def channel_gate(X: Tensor, A: Tensor) -> Tensor:
    """``Y[c,h,w] = X[c,h,w] * A[c]``, optionally batched on a leading axis."""
    if X.shape[-3] != A.shape[-1] or X.data.ndim - A.data.ndim != 2:
        raise DimensionError(f"channel mismatch: features {X.shape}, attention {A.shape}")
    return X * A.reshape(A.shape + (1, 1))


@dataclass
class ClassFeatureBank:
    """Projected, pooled feature ``F`` of width ``M*d`` with per-lane slices."""

    F: Tensor
    lanes: int

    @property
    def dim(self) -> int:
        return self.F.shape[-1] // self.lanes

    def lane(self, i: int) -> Tensor:
        """Feature ``c_i`` for lane id ``i`` in ``1..M``."""
        if not 1 <= i <= self.lanes:
            raise IndexError(f"lane id {i} outside 1..{self.lanes}")
        d = self.dim
        return self.F[..., (i - 1) * d: i * d]


def class_features(Y: Tensor, proj_kernels: Tensor, lanes: int, proj_bias: Tensor | None = None) -> ClassFeatureBank:
    """1×1 convolution to ``C*`` channels, then global average pooling."""
    c_star = proj_kernels.shape[0]
    if lanes < 1 or c_star % lanes:
        raise ConfigError(f"projected width C*={c_star} not divisible by lane count M={lanes}")
    Z = ad.conv2d(Y, proj_kernels, proj_bias)
    return ClassFeatureBank(Z.mean(axis=(-2, -1)), lanes)


def se_loss(presence_logits: Tensor, presence_truth) -> Tensor:
    """Mean binary cross entropy of lane presence, probabilities clamped to [1e-7, 1-1e-7]."""
    t = np.asarray(presence_truth, dtype=np.float64)
    if t.shape != presence_logits.shape:
        raise DimensionError(f"presence truth {t.shape} vs logits {presence_logits.shape}")
    p = ad.clip(ad.sigmoid(presence_logits), 1e-7, 1.0 - 1e-7)
    ll = t * ad.log(p) + (1.0 - t) * ad.log(1.0 - p)
    return -1.0 * ll.mean()


class ContextEncoder:
    """Parameter bundle for the context-encoding head (names prefixed ``ctx.``)."""

    def __init__(self, channels: int, codewords: int, lanes: int, feat_dim: int, rng: np.random.Generator):
        self.channels = channels
        self.lanes = lanes
        self.feat_dim = feat_dim
        self.book = Codebook.init(codewords, channels, rng)
        self.bn = BatchNorm(channels, name="ctx.bn")
        scale = 1.0 / np.sqrt(channels)
        self.w_attn = Tensor(rng.normal(0.0, scale, size=(channels, channels)), requires_grad=True,
                             name="ctx.attn.weight")
        self.proj = Tensor(rng.normal(0.0, scale, size=(lanes * feat_dim, channels, 1, 1)),
                           requires_grad=True, name="ctx.proj.weight")
        self.proj_bias = Tensor(np.zeros(lanes * feat_dim), requires_grad=True, name="ctx.proj.bias")

    def gating_parameters(self) -> list[Tensor]:
        """Parameters trained with the rough branch."""
        return self.book.parameters() + self.bn.parameters() + [self.w_attn]

    def projection_parameters(self) -> list[Tensor]:
        """Parameters of the class-feature projection (trained with the completion head)."""
        return [self.proj, self.proj_bias]

    def parameters(self) -> list[Tensor]:
        return self.gating_parameters() + self.projection_parameters()

    def encode(self, X: Tensor, mode: str) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(e_k, e, A)`` for a feature map ``(B,) C×H×W``."""
        c = X.shape[-3]
        n = X.shape[-2] * X.shape[-1]
        lead = X.shape[:-3]
        desc = ad.transpose(X.reshape(lead + (c, n)), tuple(range(len(lead))) + (len(lead) + 1, len(lead)))
        e_k = residual_encode(desc, self.book)
        e = aggregate(e_k, self.bn, mode)
        return e_k, e, attention(e, self.w_attn)

    def features(self, Y: Tensor) -> ClassFeatureBank:
        return class_features(Y, self.proj, self.lanes, self.proj_bias)
