"""Mask to point-set conversion and geometric continuity features.

Coordinates are ``(row, col)`` integers in masks and point sets.  The
feature matrix puts ``x = col`` first and ``y = row`` second, both scaled
to [0, 1] by the image extent.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, EmptyLaneError

DEFAULT_THRESHOLD = 0.70


@dataclass
class LanePointSet:
    """Pixels of one lane, sorted top to bottom then left to right."""

    lane_id: int
    points: np.ndarray  # (n, 2) int: row, col

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.int64).reshape(-1, 2)

    def __len__(self):
        return len(self.points)

    def as_tuples(self) -> list[tuple[int, int]]:
        return [(int(r), int(c)) for r, c in self.points]


@dataclass
class GeoFeature:
    """Per-lane matrix ``[x_norm, y_norm, c_i...]`` with one row per point."""

    lane_id: int
    G: Tensor

    @property
    def n_points(self) -> int:
        return self.G.shape[0]


def confidence_filter(probs, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Class-indexed mask keeping pixels whose best lane probability is >= threshold.

    ``probs`` is ``(M+1)×H×W`` with background on channel 0.  Ties among
    lane classes go to the lower index.
    """
    if hasattr(probs, "probs"):
        p = probs.probs.data
    else:
        p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    lanes = p[1:]
    best = lanes.argmax(axis=0)
    conf = np.take_along_axis(lanes, best[None], axis=0)[0]
    return np.where(conf >= threshold, best + 1, 0).astype(np.int64)


def extract_point_sets(mask) -> list[LanePointSet]:
    """One point set per lane id present, points in raster order."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise DimensionError(f"mask must be 2-d, got shape {m.shape}")
    out = []
    for lane in np.unique(m):
        if lane <= 0:
            continue
        rows, cols = np.nonzero(m == lane)
        out.append(LanePointSet(int(lane), np.stack([rows, cols], axis=1)))
    return out


def render_point_sets(psets: Iterable[LanePointSet], h: int, w: int) -> np.ndarray:
    """Paint point sets into a class-indexed mask; lower lane id wins on overlap."""
    mask = np.zeros((h, w), dtype=np.int64)
    for ps in sorted(psets, key=lambda p: p.lane_id, reverse=True):
        if len(ps):
            mask[ps.points[:, 0], ps.points[:, 1]] = ps.lane_id
    return mask


def normalize_points(points: np.ndarray, h: int, w: int) -> np.ndarray:
    """``(row, col)`` pixels to ``(x, y)`` in [0, 1]."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.stack([pts[:, 1] / (w - 1), pts[:, 0] / (h - 1)], axis=1)


def encode_geometry(pset: LanePointSet, c_i: Tensor, img_h: int, img_w: int) -> GeoFeature:
    """Concatenate normalized point locations with the lane's class feature."""
    if len(pset) == 0:
        raise EmptyLaneError(f"lane {pset.lane_id} has no points")
    if c_i.data.ndim != 1:
        raise DimensionError(f"class feature must be a vector, got shape {c_i.shape}")
    n, d = len(pset), c_i.shape[0]
    xy = Tensor(normalize_points(pset.points, img_h, img_w))
    feat = ad.broadcast_to(c_i.reshape(1, d), (n, d))
    return GeoFeature(pset.lane_id, ad.concat([xy, feat], axis=1))


def format_points(psets: Iterable[LanePointSet]) -> str:
    """Text export: one ``lane_id row col`` line per point, sorted."""
    rows = sorted((ps.lane_id, int(r), int(c)) for ps in psets for r, c in ps.points)
    return "".join(f"{lane} {r} {c}\n" for lane, r, c in rows)


def write_points(path: str | os.PathLike, psets: Iterable[LanePointSet]) -> None:
    Path(path).write_text(format_points(psets), encoding="utf-8")


def parse_points(text: str) -> list[LanePointSet]:
    lanes: dict[int, list[tuple[int, int]]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'lane_id row col', got {line!r}")
        lane, r, c = (int(v) for v in parts)
        lanes.setdefault(lane, []).append((r, c))
    return [LanePointSet(k, sorted(v)) for k, v in sorted(lanes.items())]


def read_points(path: str | os.PathLike) -> list[LanePointSet]:
    return parse_points(Path(path).read_text(encoding="utf-8"))
