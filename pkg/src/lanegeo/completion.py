"""Point-set completion: shared per-point MLP, max pooling, point decoder.

The head reads a lane's geometric feature matrix and emits a fixed number
of points in normalized ``(x, y)`` coordinates.  Predictions are united
with the observed points, quantized back to pixels and rendered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .continuity import GeoFeature, LanePointSet, normalize_points
from .errors import DimensionError, EmptyLaneError


@dataclass
class CompletedSet:
    """Observed plus predicted points of one lane, normalized ``(x, y)``."""

    lane_id: int
    observed: np.ndarray  # (M_i, 2)
    predicted: np.ndarray  # (M_hat, 2), clamped to [0, 1]

    @property
    def union(self) -> np.ndarray:
        both = np.concatenate([self.observed, self.predicted], axis=0)
        _, first = np.unique(both, axis=0, return_index=True)
        return both[np.sort(first)]

    def __len__(self):
        return len(self.union)


@dataclass
class QuantizedLane:
    lane_id: int
    pixels: np.ndarray  # (n, 2) int: row, col, sorted and unique

    def to_point_set(self) -> LanePointSet:
        return LanePointSet(self.lane_id, self.pixels)


class CompletionHead:
    """PointNet-style set network; parameter names are prefixed ``comp.``."""

    def __init__(self, in_dim: int, n_out: int = 64, widths=(64, 128), decoder=(128,), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.n_out = n_out
        self.shared: list[tuple[Tensor, Tensor]] = []
        self.decoder: list[tuple[Tensor, Tensor]] = []
        d = in_dim
        for i, w in enumerate(widths):
            self.shared.append(self._dense(rng, d, w, f"comp.shared{i}"))
            d = w
        for i, w in enumerate(decoder):
            self.decoder.append(self._dense(rng, d, w, f"comp.dec{i}"))
            d = w
        last_w = Tensor(rng.normal(0.0, 0.01, size=(d, 2 * n_out)), requires_grad=True,
                        name=f"comp.dec{len(decoder)}.weight")
        last_b = Tensor(np.zeros(2 * n_out), requires_grad=True, name=f"comp.dec{len(decoder)}.bias")
        self.decoder.append((last_w, last_b))

    @staticmethod
    def _dense(rng, fan_in, fan_out, name):
        w = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)), requires_grad=True,
                   name=f"{name}.weight")
        b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.bias")
        return w, b

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.shared + self.decoder for t in pair]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"checkpoint lacks {p.name}")
            p.data[...] = state[p.name]

    def forward(self, G: Tensor) -> Tensor:
        """Predicted points ``M_hat×2`` in [0, 1] for a feature matrix ``n×in_dim``."""
        if G.data.ndim != 2 or G.shape[1] != self.in_dim:
            raise DimensionError(f"expected n×{self.in_dim} features, got {G.shape}")
        if G.shape[0] == 0:
            raise EmptyLaneError("empty feature matrix")
        h = G
        for w, b in self.shared:
            h = ad.relu(h @ w + b)
        h = ad.tmax(h, axis=0).reshape(1, -1)
        for w, b in self.decoder[:-1]:
            h = ad.relu(h @ w + b)
        w, b = self.decoder[-1]
        return ad.sigmoid(h @ w + b).reshape(self.n_out, 2)


def complete(geo: GeoFeature, head: CompletionHead) -> CompletedSet:
    """Run the head and unite its predictions with the observed points."""
    if geo.n_points == 0:
        raise EmptyLaneError(f"lane {geo.lane_id} has no points")
    with ad.no_grad():
        pred = head.forward(geo.G)
    observed = geo.G.data[:, :2].copy()
    return CompletedSet(geo.lane_id, observed, np.clip(pred.data, 0.0, 1.0))


def completion_loss(pred: Tensor, gt) -> Tensor:
    """Symmetric Chamfer distance with squared Euclidean point distances."""
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(g) == 0:
        raise EmptyLaneError("ground-truth lane is empty")
    n = pred.shape[0]
    diff = pred.reshape(n, 1, 2) - Tensor(g.reshape(1, -1, 2))
    dist = (diff * diff).sum(axis=2)
    return ad.tmin(dist, axis=1).mean() + ad.tmin(dist, axis=0).mean()


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize_points(xy: np.ndarray, img_h: int, img_w: int) -> np.ndarray:
    """Normalized ``(x, y)`` to unique in-bounds ``(row, col)`` pixels in raster order."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    rows = np.clip(round_half_away(xy[:, 1] * (img_h - 1)), 0, img_h - 1).astype(np.int64)
    cols = np.clip(round_half_away(xy[:, 0] * (img_w - 1)), 0, img_w - 1).astype(np.int64)
    px = np.stack([rows, cols], axis=1)
    return np.unique(px, axis=0) if len(px) else px


def quantize(cset: CompletedSet, img_h: int, img_w: int) -> QuantizedLane:
    return QuantizedLane(cset.lane_id, quantize_points(cset.union, img_h, img_w))


def render_lane(pixels, stroke: int, img_h: int, img_w: int) -> np.ndarray:
    """Binary mask with every pixel dilated by a ``stroke``-sided square."""
    if stroke < 1:
        raise ValueError("stroke must be >= 1")
    if isinstance(pixels, (QuantizedLane, LanePointSet)):
        pixels = pixels.pixels if isinstance(pixels, QuantizedLane) else pixels.points
    px = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    mask = np.zeros((img_h, img_w), dtype=np.uint8)
    lo = -((stroke - 1) // 2)
    for dr in range(lo, lo + stroke):
        for dc in range(lo, lo + stroke):
            r = px[:, 0] + dr
            c = px[:, 1] + dc
            ok = (r >= 0) & (r < img_h) & (c >= 0) & (c < img_w)
            mask[r[ok], c[ok]] = 1
    return mask


def lane_points_normalized(pset: LanePointSet, img_h: int, img_w: int) -> np.ndarray:
    return normalize_points(pset.points, img_h, img_w)
