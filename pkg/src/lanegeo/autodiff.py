"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the lane pipeline needs are provided.  Every op that
touches a tensor with ``requires_grad`` appends a node to the global tape;
:func:`backward` walks the tape in exact reverse execution order and then
clears it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BatchSizeError, DimensionError, NumericError, OptimizerError

_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = 1.0 - 2.0**-53


class Tensor:
    """n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "velocity", "_g")
    # let ``ndarray <op> Tensor`` fall through to the Tensor's reflected op
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.velocity: np.ndarray | None = None
        self._g: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self):
        backward(self)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "parents", "fn")

    def __init__(self, out, parents, fn):
        self.out = out
        self.parents = parents
        self.fn = fn


class ComputationTape:
    """Ordered record of executed differentiable ops."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True

    def record(self, out: Tensor, parents: Sequence[Tensor], fn: Callable) -> None:
        self.nodes.append(_Node(out, tuple(parents), fn))

    def reset(self) -> None:
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


_TAPE = ComputationTape()


def get_tape() -> ComputationTape:
    return _TAPE


def reset_tape() -> None:
    _TAPE.reset()


@contextlib.contextmanager
def no_grad():
    """Disable recording for the enclosed block."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.velocity = None
    out._g = None
    track = _TAPE.enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        _TAPE.record(out, parents, fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tracked leaf that ``loss`` depends on."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar, got shape {loss.shape}")
    nodes = _TAPE.nodes
    produced = {id(n.out) for n in nodes}
    for n in nodes:
        for p in n.parents:
            if p.requires_grad and id(p) not in produced and p.grad is None:
                p.grad = np.zeros_like(p.data)
    loss._g = np.ones_like(loss.data)
    try:
        for node in reversed(nodes):
            g = node.out._g
            if g is None:
                continue
            grads = node.fn(g)
            for p, gp in zip(node.parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                if id(p) in produced:
                    p._g = gp if p._g is None else p._g + gp
                else:
                    p.grad = p.grad + gp
            node.out._g = None
    finally:
        for n in nodes:
            n.out._g = None
        _TAPE.reset()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def fn(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _result(out, (a, b), fn, "div")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "power")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _result(out, (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, clamped so the output stays in the open interval (0, 1)."""
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = np.clip(out, _SIG_LO, _SIG_HI)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    z = np.exp(-np.abs(x))
    slope = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _result(out, (a,), lambda g: (g * slope,), "softplus")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _result(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# shape / reduction


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    if out.ndim == 0:
        out = out.reshape(1)

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()) if g.size == 1 else g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (a,), fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape
    picked = a.data[idx]
    pshape = np.shape(picked)

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g.reshape(pshape))
        return (full,)

    return _result(np.array(picked, dtype=np.float64, ndmin=1), (a,), fn, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, old),), "broadcast_to")


def _arg_reduce(a: Tensor, axis: int, use_max: bool, op: str) -> Tensor:
    x = a.data
    pick = np.argmax(x, axis=axis) if use_max else np.argmin(x, axis=axis)
    out = np.take_along_axis(x, np.expand_dims(pick, axis), axis=axis).squeeze(axis)

    def fn(g):
        full = np.zeros_like(x)
        np.put_along_axis(full, np.expand_dims(pick, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(np.array(out, ndmin=1), (a,), fn, op)


def tmax(a: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    return _arg_reduce(a, axis, True, "max")


def tmin(a: Tensor, axis: int) -> Tensor:
    """Min along ``axis``; the gradient goes to the first minimal entry."""
    return _arg_reduce(a, axis, False, "min")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _result(ad @ bd, (a, b), fn, "matmul")


def softmax_rows(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (the last one by default), max-shifted."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def fn(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), fn, "log_softmax")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    ``x`` is ``C×H×W`` or batched ``B×C×H×W``; ``kernels`` is ``C'×C×kh×kw``.
    """
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride {stride} / padding {padding}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = kernels.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError(f"conv2d expects C×H×W input and 4-d kernels, got {x.shape}, {kernels.shape}")
    B, C, H, W = xd.shape
    O, Ck, kh, kw = wd.shape
    if Ck != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if H + 2 * padding < kh or W + 2 * padding < kw or Ho <= 0 or Wo <= 0:
        raise DimensionError(f"conv2d output would be empty: input {x.shape}, kernels {kernels.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1: stride, : (Wo - 1) * stride + 1: stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = wd.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]
    out = np.ascontiguousarray(out)

    def fn(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(wd.shape)
        gx = None
        if x.requires_grad:
            # column gradients laid out (C, kh, kw, B, Ho, Wo) so each offset is contiguous
            gT = g4.transpose(1, 0, 2, 3).reshape(O, -1)
            gc = (wmat.T @ gT).reshape(C, kh, kw, B, Ho, Wo)
            gxp = np.zeros((C, B) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i: i + stride * (Ho - 1) + 1: stride,
                        j: j + stride * (Wo - 1) + 1: stride] += gc[:, i, j]
            gx = gxp.transpose(1, 0, 2, 3)
            if padding:
                gx = gx[:, :, padding: padding + H, padding: padding + W]
            gx = np.ascontiguousarray(gx[0] if squeeze else gx)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(out, parents, fn, "conv2d")


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, shape ``n_out×n_in``."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes."""
    h, w = x.shape[-2:]
    uh = _interp_matrix(out_h, h)
    uw = _interp_matrix(out_w, w)
    out = uh @ x.data @ uw.T
    return _result(out, (x,), lambda g: (uh.T @ g @ uw,), "upsample")


# ---------------------------------------------------------------------------
# normalization


class BatchNorm:
    """Per-channel batch normalization with running statistics.

    Channels live on axis 1; statistics are taken over every other axis.
    """

    def __init__(self, channels: int, name: str = "bn", eps: float = 1e-5, momentum: float = 0.1):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.name = name

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        return batchnorm(x, self, mode)


def batchnorm(x: Tensor, bn: BatchNorm, mode: str = "train") -> Tensor:
    """Normalize ``x`` (``N×C`` or ``N×C×...``) per channel.

    ``train`` uses batch statistics and updates the running estimates in
    place; ``infer`` uses the stored running estimates.
    """
    xd = x.data
    if xd.ndim < 2 or xd.shape[1] != bn.gamma.size:
        raise DimensionError(f"batchnorm expects N×{bn.gamma.size}[×...], got {x.shape}")
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, -1) + (1,) * (xd.ndim - 2)
    count = xd.size // xd.shape[1]
    if mode == "train":
        if count < 2:
            raise BatchSizeError(f"batchnorm in train mode needs at least 2 rows, got {count}")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        bn.running_mean *= 1.0 - bn.momentum
        bn.running_mean += bn.momentum * mu
        bn.running_var *= 1.0 - bn.momentum
        bn.running_var += bn.momentum * var * count / (count - 1)
    elif mode == "infer":
        mu, var = bn.running_mean, bn.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gam = bn.gamma.data.reshape(bshape)
    out = xhat * gam + bn.beta.data.reshape(bshape)

    def fn(g):
        ggam = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx_hat = g * gam
        if mode == "train":
            gx = (inv.reshape(bshape) / count) * (
                count * gx_hat
                - gx_hat.sum(axis=axes, keepdims=True)
                - xhat * (gx_hat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gx_hat * inv.reshape(bshape)
        return gx, ggam, gbeta

    return _result(out, (x, bn.gamma, bn.beta), fn, "batchnorm")


# ---------------------------------------------------------------------------
# checking and optimization


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
                   coords: Iterable[int] | None = None, floor: float = 1e-6) -> float:
    """Max relative error between backward-pass and central-difference gradients.

    The error at a coordinate is ``|g_ad - g_fd| / max(floor, |g_ad| + |g_fd|)``,
    so gradients much smaller than ``floor`` are compared on an absolute
    scale where difference-quotient roundoff would otherwise dominate.
    ``coords`` restricts the probe to a subset of flat indices.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    reset_tape()
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        loss = f(x)
        backward(loss)
        g_ad = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        flat = x.data.reshape(-1)
        idx = range(flat.size) if coords is None else coords
        worst = 0.0
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = f(x).item()
                flat[i] = orig - step
                fm = f(x).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"non-finite function value probing coordinate {i}")
                g_fd = (fp - fm) / (2 * step)
                ga = g_ad.reshape(-1)[i]
                err = abs(ga - g_fd) / max(floor, abs(ga) + abs(g_fd))
                worst = max(worst, err)
        return worst
    finally:
        x.requires_grad = was
        x.grad = None
        reset_tape()


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float) -> None:
    """Heavy-ball SGD: ``v = momentum*v + grad; p -= lr*v``; clears grads."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise OptimizerError(f"parameter {p.name or i} has no gradient")
    for p in params:
        if p.velocity is None:
            p.velocity = np.zeros_like(p.data)
        p.velocity *= momentum
        p.velocity += p.grad
        p.data -= lr * p.velocity
        p.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
