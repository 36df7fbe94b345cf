"""Finite-difference audit of every differentiable operation and both losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNorm, Tensor
from .completion import CompletionHead, completion_loss
from .context import (Codebook, aggregate, attention, channel_gate, class_features, residual_encode,
                      se_loss, soft_assign)
from .continuity import LanePointSet, encode_geometry
from .rough import BackboneConfig, RoughModel, rough_loss

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error <= TOLERANCE


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    """Normal draws pushed at least ``margin`` away from 0 (keeps probes off kinks)."""
    v = rng.normal(size=shape)
    return np.where(v >= 0, v + margin, v - margin)


def _distinct(rng: np.random.Generator, shape) -> np.ndarray:
    """Values with unique extremes along every axis (no max/min ties)."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.1 + rng.uniform(0, 0.02, size=shape))


def _weighted_sum(rng: np.random.Generator):
    """Scalarize ``y`` with fixed random weights so every output element matters."""
    cache: dict[tuple, np.ndarray] = {}

    def f(y: Tensor) -> Tensor:
        if y.shape not in cache:
            cache[y.shape] = rng.normal(size=y.shape)
        return (y * Tensor(cache[y.shape])).sum()
    return f


def _op_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable[[Tensor], Tensor], Tensor]]:
    ws = _weighted_sum(rng)
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(3, 4)))
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
    yield "add", lambda x: ws(x + b), a
    yield "add.broadcast", lambda x: ws(b + x), Tensor(rng.normal(size=(4,)))
    yield "sub", lambda x: ws(b - x), a
    yield "mul", lambda x: ws(x * b), a
    yield "div.numerator", lambda x: ws(x / pos), a
    yield "div.denominator", lambda x: ws(b / x), pos
    yield "power", lambda x: ws(x ** 3), a
    yield "exp", lambda x: ws(ad.exp(x)), a
    yield "log", lambda x: ws(ad.log(x)), pos
    yield "relu", lambda x: ws(ad.relu(x)), Tensor(_away_from_zero(rng, (3, 4)))
    yield "sigmoid", lambda x: ws(ad.sigmoid(x)), a
    yield "softplus", lambda x: ws(ad.softplus(x)), a
    yield "clip", lambda x: ws(ad.clip(x, -0.5, 0.5)), Tensor(
        np.array([-1.3, -0.2, 0.1, 0.9, -0.7, 0.3]))
    yield "sum.axis", lambda x: ws(x.sum(axis=1)), a
    yield "mean", lambda x: ws(x.mean(axis=0)), a
    yield "reshape", lambda x: ws(x.reshape(4, 3)), a
    yield "transpose", lambda x: ws(ad.transpose(x, (1, 0))), a
    yield "index", lambda x: ws(x[np.array([0, 2, 2]), 1:3]), a
    yield "concat", lambda x: ws(ad.concat([x, b], axis=0)), a
    yield "broadcast_to", lambda x: ws(ad.broadcast_to(x.reshape(1, 4), (3, 4))), Tensor(rng.normal(size=4))
    yield "max", lambda x: ws(ad.tmax(x, axis=0)), Tensor(_distinct(rng, (3, 4)))
    yield "min", lambda x: ws(ad.tmin(x, axis=1)), Tensor(_distinct(rng, (3, 4)))
    m = Tensor(rng.normal(size=(4, 5)))
    yield "matmul.left", lambda x: ws(x @ m), a
    yield "matmul.right", lambda x: ws(a @ x), m
    yield "softmax", lambda x: ws(ad.softmax_rows(x, axis=1)), a
    yield "log_softmax", lambda x: ws(ad.log_softmax(x, axis=0)), a

    img = Tensor(rng.normal(size=(2, 3, 8, 16)))
    ker = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3)
    bias = Tensor(rng.normal(size=4))
    yield "conv2d.input", lambda x: ws(ad.conv2d(x, ker, bias, stride=2, padding=1)), img
    yield "conv2d.kernel", lambda x: ws(ad.conv2d(img, x, bias, stride=1, padding=1)), ker
    yield "conv2d.bias", lambda x: ws(ad.conv2d(img, ker, x)), bias
    yield "upsample_bilinear", lambda x: ws(ad.upsample_bilinear(x, 8, 16)), Tensor(rng.normal(size=(2, 3, 2, 4)))

    bn = BatchNorm(3, "check.bn")
    yield "batchnorm.input", lambda x: ws(bn(x, "train")), Tensor(rng.normal(size=(2, 3, 4, 4)))
    bn_x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    yield "batchnorm.gamma", lambda g: ws(_bn_with(3, gamma=g)(bn_x, "train")), Tensor(rng.uniform(0.5, 1.5, size=3))

    X = Tensor(rng.normal(size=(20, 6)))
    book = Codebook.init(4, 6, rng, prefix="check")
    yield "soft_assign.input", lambda x: ws(soft_assign(x, book)), X
    yield "residual_encode.input", lambda x: ws(residual_encode(x, book)), X
    yield "residual_encode.codewords", lambda d: ws(residual_encode(X, Codebook(d, book.smoothing_raw))), \
        Tensor(book.codewords.data.copy())
    yield "residual_encode.smoothing", lambda s: ws(residual_encode(X, Codebook(book.codewords, s))), \
        Tensor(rng.normal(size=4))
    agg_bn = BatchNorm(6, "check.agg")
    yield "aggregate", lambda e: ws(aggregate(e, agg_bn, "train")), Tensor(rng.normal(size=(2, 4, 6)))
    w_attn = Tensor(rng.normal(size=(6, 6)) * 0.4)
    yield "attention.input", lambda e: ws(attention(e, w_attn)), Tensor(rng.normal(size=(2, 6)))
    e_vec = Tensor(rng.normal(size=6))
    yield "attention.weight", lambda w: ws(attention(e_vec, w)), Tensor(w_attn.data.copy())
    fmap = Tensor(rng.normal(size=(6, 4, 4)))
    gate = Tensor(rng.uniform(size=6))
    yield "channel_gate.features", lambda x: ws(channel_gate(x, gate)), fmap
    yield "channel_gate.attention", lambda a_: ws(channel_gate(fmap, a_)), gate
    proj = Tensor(rng.normal(size=(8, 6, 1, 1)))
    yield "class_features", lambda p: ws(class_features(fmap, p, 4).F), proj
    truth = (rng.uniform(size=(2, 4)) < 0.5).astype(float)
    yield "se_loss", lambda z: se_loss(z, truth), Tensor(rng.normal(size=(2, 4)))
    gt_pts = rng.uniform(size=(7, 2))
    pred = rng.uniform(size=(5, 2))
    yield "completion_loss", lambda p: completion_loss(p, gt_pts), Tensor(pred)


def _bn_with(channels: int, gamma: Tensor) -> BatchNorm:
    bn = BatchNorm(channels, "check.bn_gamma")
    bn.gamma = gamma
    return bn


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [CheckResult(name, ad.gradient_check(f, x)) for name, f, x in _op_cases(rng)]


def rough_end_to_end(seed: int = 0, img_h: int = 8, img_w: int = 16, fraction: float = 0.01,
                     min_probes: int = 2) -> list[CheckResult]:
    """Rough loss on a batch of two ``img_h×img_w`` images.

    Probes 24 random input pixels and a random ``fraction`` of every
    parameter tensor (at least ``min_probes`` entries each).
    """
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig(img_h=img_h, img_w=img_w)
    model = RoughModel(cfg, seed=seed)
    images = rng.uniform(size=(2, 3, img_h, img_w))
    mask = rng.integers(0, cfg.classes, size=(2, img_h, img_w))
    presence = (rng.uniform(size=(2, cfg.lanes)) < 0.5).astype(float)

    def loss_from_model() -> Tensor:
        out = model.forward(Tensor(images), "train")
        return rough_loss(out.probmap, mask, out.presence_logits, presence, 0.1)

    results = []
    img_t = Tensor(images)

    def wrt_image(x: Tensor) -> Tensor:
        out = model.forward(x, "train")
        return rough_loss(out.probmap, mask, out.presence_logits, presence, 0.1)
    coords = rng.choice(img_t.data.size, size=24, replace=False)
    results.append(CheckResult("rough_loss.image", ad.gradient_check(wrt_image, img_t, coords=coords)))
    for p in model.parameters():
        n = p.data.size
        k = min(n, max(min_probes, int(np.ceil(fraction * n))))
        coords = rng.choice(n, size=k, replace=False)
        results.append(CheckResult(f"rough_loss.{p.name}",
                                   ad.gradient_check(lambda _p: loss_from_model(), p, coords=coords)))
    return results


def completion_end_to_end(seed: int = 0, img_h: int = 8, img_w: int = 16, feat_dim: int = 8) -> list[CheckResult]:
    """Completion loss through the head and the class-feature projection."""
    rng = np.random.default_rng(seed)
    lanes = 4
    Y = Tensor(rng.normal(size=(16, 2, 4)))
    proj = Tensor(rng.normal(size=(lanes * feat_dim, 16, 1, 1)) * 0.3)
    head = CompletionHead(2 + feat_dim, n_out=16, seed=seed)
    # Observed pixels of one lane plus its full ground truth
    rows = np.arange(img_h)
    cols = np.clip(np.round(3 + 1.2 * rows), 0, img_w - 1).astype(int)
    pset = LanePointSet(2, np.stack([rows[:5], cols[:5]], axis=1))
    gt = np.stack([cols / (img_w - 1), rows / (img_h - 1)], axis=1)

    def through(p: Tensor) -> Tensor:
        c = class_features(Y, p, lanes).lane(2)
        geo = encode_geometry(pset, c, img_h, img_w)
        return completion_loss(head.forward(geo.G), gt)

    results = [CheckResult("completion_loss.projection", ad.gradient_check(through, proj, coords=range(0, proj.data.size, 7)))]
    for p in head.parameters():
        coords = rng.choice(p.data.size, size=min(p.data.size, 6), replace=False)
        results.append(CheckResult(f"completion_loss.{p.name}",
                                   ad.gradient_check(lambda _p: through(proj), p, coords=coords)))
    return results


def run_all(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + rough_end_to_end(seed) + completion_end_to_end(seed)
