"""Rough segmentation branch: small conv backbone plus context-encoding head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNorm, Tensor
from .context import ClassFeatureBank, ContextEncoder, se_loss
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture and input geometry of the rough branch."""

    img_h: int = 64
    img_w: int = 128
    widths: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (1, 2, 2, 1)
    lanes: int = 4
    feat_dim: int = 8
    codewords: int = 8
    context: bool = True
    coord_channels: bool = True
    # initial background probability set through the head bias; None keeps it uniform
    background_prior: float | None = 0.95

    def __post_init__(self):
        if self.lanes < 1:
            raise ConfigError("lane count M must be >= 1")
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ConfigError("widths and strides must be non-empty and equally long")
        down = int(np.prod(self.strides))
        if self.img_h % down or self.img_w % down:
            raise ConfigError(f"image size {self.img_h}x{self.img_w} not divisible by total stride {down}")
        if self.feat_dim < 1 or self.codewords < 1:
            raise ConfigError("feat_dim and codewords must be positive")
        if self.background_prior is not None and not 0.0 < self.background_prior < 1.0:
            raise ConfigError("background_prior must lie in (0, 1)")

    @property
    def classes(self) -> int:
        return self.lanes + 1

    @property
    def in_channels(self) -> int:
        return 5 if self.coord_channels else 3


@dataclass
class SegProbMap:
    """Per-pixel class distribution over background plus M lanes."""

    logits: Tensor
    probs: Tensor = field(init=False)

    def __post_init__(self):
        axis = self.logits.data.ndim - 3
        self.probs = ad.softmax_rows(self.logits, axis=axis)

    @property
    def classes(self) -> int:
        return self.logits.shape[-3]

    def numpy(self) -> np.ndarray:
        return self.probs.data


@dataclass
class RoughOutput:
    probmap: SegProbMap
    features: ClassFeatureBank | None
    presence_logits: Tensor | None


def _coord_planes(h: int, w: int) -> np.ndarray:
    ys = np.linspace(0.0, 1.0, h)
    xs = np.linspace(0.0, 1.0, w)
    return np.stack([np.broadcast_to(xs, (h, w)), np.broadcast_to(ys[:, None], (h, w))])


class RoughModel:
    """Backbone (conv-BN-ReLU stack), pixel head, presence head, context encoder."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.convs: list[tuple[Tensor, BatchNorm]] = []
        cin = cfg.in_channels
        for i, cout in enumerate(cfg.widths):
            std = np.sqrt(2.0 / (cin * 9))
            w = Tensor(rng.normal(0.0, std, size=(cout, cin, 3, 3)), requires_grad=True,
                       name=f"rough.conv{i}.weight")
            self.convs.append((w, BatchNorm(cout, name=f"rough.bn{i}")))
            cin = cout
        self.channels = cin
        self.head_w = Tensor(rng.normal(0.0, 0.01, size=(cfg.classes, cin, 1, 1)), requires_grad=True,
                             name="rough.head.weight")
        bias = np.zeros(cfg.classes)
        if cfg.background_prior is not None:
            bias[0] = np.log(cfg.background_prior * cfg.lanes / (1.0 - cfg.background_prior))
        self.head_b = Tensor(bias, requires_grad=True, name="rough.head.bias")
        self.ctx: ContextEncoder | None = None
        if cfg.context:
            self.ctx = ContextEncoder(cin, cfg.codewords, cfg.lanes, cfg.feat_dim, rng)
            self.pres_w = Tensor(rng.normal(0.0, 0.01, size=(cfg.lanes, cin)), requires_grad=True,
                                 name="rough.presence.weight")
            self.pres_b = Tensor(np.zeros(cfg.lanes), requires_grad=True, name="rough.presence.bias")
        self._coords = _coord_planes(cfg.img_h, cfg.img_w)

    # -- parameter bookkeeping -------------------------------------------

    def parameters(self) -> list[Tensor]:
        """Parameters optimized by the rough training stage."""
        ps: list[Tensor] = []
        for w, bn in self.convs:
            ps += [w] + bn.parameters()
        ps += [self.head_w, self.head_b]
        if self.ctx is not None:
            ps += self.ctx.gating_parameters() + [self.pres_w, self.pres_b]
        return ps

    def _batchnorms(self) -> list[BatchNorm]:
        bns = [bn for _, bn in self.convs]
        if self.ctx is not None:
            bns.append(self.ctx.bn)
        return bns

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.data for p in self.parameters()}
        if self.ctx is not None:
            state.update({p.name: p.data for p in self.ctx.projection_parameters()})
        for bn in self._batchnorms():
            state.update(bn.buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        if missing:
            raise ConfigError(f"checkpoint lacks tensors: {', '.join(missing[:4])}")
        for name, arr in own.items():
            if arr.shape != state[name].shape:
                raise ConfigError(f"shape mismatch for {name}: {arr.shape} vs {state[name].shape}")
            arr[...] = state[name]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    # -- forward ---------------------------------------------------------

    def backbone(self, image: Tensor, mode: str) -> Tensor:
        x = image
        if self.cfg.coord_channels:
            planes = self._coords if image.data.ndim == 3 else np.broadcast_to(
                self._coords, (image.shape[0],) + self._coords.shape)
            x = ad.concat([x, Tensor(planes)], axis=image.data.ndim - 3)
        for (w, bn), s in zip(self.convs, self.cfg.strides):
            x = ad.conv2d(x, w, stride=s, padding=1)
            x = x.reshape((1,) + x.shape) if x.data.ndim == 3 else x
            x = ad.relu(bn(x, mode))
        return x

    def forward(self, image: Tensor, mode: str = "infer") -> RoughOutput:
        cfg = self.cfg
        if image.shape[-3:] != (3, cfg.img_h, cfg.img_w) or image.data.ndim not in (3, 4):
            raise DimensionError(f"image shape {image.shape} does not match config 3×{cfg.img_h}×{cfg.img_w}")
        single = image.data.ndim == 3
        X = self.backbone(image, mode)
        features = presence = None
        if self.ctx is not None:
            _, e, A = self.ctx.encode(X, mode)
            Y = X * A.reshape(A.shape + (1, 1))
            features = self.ctx.features(Y)
            presence = e @ self.pres_w.T + self.pres_b
        else:
            Y = X
        logits = ad.conv2d(Y, self.head_w, self.head_b)
        logits = ad.upsample_bilinear(logits, cfg.img_h, cfg.img_w)
        if single:
            logits = logits.reshape(logits.shape[1:])
            if features is not None:
                features = type(features)(features.F.reshape(features.F.shape[1:]), features.lanes)
                presence = presence.reshape(presence.shape[1:])
        return RoughOutput(SegProbMap(logits), features, presence)


def forward_rough(image: Tensor, model: RoughModel, mode: str = "infer") -> RoughOutput:
    return model.forward(image, mode)


def pixel_cross_entropy(probmap: SegProbMap, gt_mask) -> Tensor:
    """Mean over pixels of ``-log p[gt]`` (computed from logits for stability)."""
    gt = np.asarray(gt_mask)
    classes = probmap.classes
    axis = probmap.logits.data.ndim - 3
    if gt.shape != probmap.logits.shape[:axis] + probmap.logits.shape[axis + 1:]:
        raise DimensionError(f"mask shape {gt.shape} does not match prob map {probmap.logits.shape}")
    if gt.min(initial=0) < 0 or gt.max(initial=0) >= classes:
        raise DimensionError(f"mask values must lie in 0..{classes - 1}")
    onehot = np.moveaxis(np.eye(classes)[gt], -1, axis)
    logp = ad.log_softmax(probmap.logits, axis=axis)
    return -1.0 * (logp * onehot).sum() / gt.size


def rough_loss(probmap: SegProbMap, gt_mask, presence_logits: Tensor | None = None,
               presence_truth=None, se_weight: float = 0.1) -> Tensor:
    """Pixel cross entropy plus ``se_weight`` times the presence loss."""
    loss = pixel_cross_entropy(probmap, gt_mask)
    if presence_logits is not None and se_weight:
        loss = loss + se_weight * se_loss(presence_logits, presence_truth)
    return loss


def presence_of(mask: np.ndarray, lanes: int) -> np.ndarray:
    """Per-slot presence vector (``(B,) M``) from a class-indexed mask."""
    m = np.asarray(mask)
    if m.ndim == 2:
        return np.array([float((m == i).any()) for i in range(1, lanes + 1)])
    return np.stack([presence_of(x, lanes) for x in m])
