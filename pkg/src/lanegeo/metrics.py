"""Lane evaluation: mask IoU with optimal matching (F1) and per-row accuracy.

Both protocols take, per image, a list of lanes given as pixel sets
(``LanePointSet`` or ``(n, 2)`` arrays of ``(row, col)``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .completion import render_lane
from .continuity import LanePointSet
from .errors import DimensionError

LANE_CORRECT_FRACTION = 0.85


def _pixels(lane) -> np.ndarray:
    if isinstance(lane, LanePointSet):
        return lane.points
    arr = np.asarray(lane)
    return arr.astype(np.int64).reshape(-1, 2)


def lane_iou(pred_mask, gt_mask) -> float:
    """Intersection over union of two binary masks; 1.0 if both are empty."""
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def optimal_assignment(score: np.ndarray) -> list[tuple[int, int]]:
    """Row/column pairs of a one-to-one assignment maximizing the total score."""
    score = np.asarray(score, dtype=np.float64)
    if score.size == 0:
        return []
    rows, cols = linear_sum_assignment(score, maximize=True)
    return list(zip(rows.tolist(), cols.tolist()))


def match_counts(iou: np.ndarray, thr: float) -> tuple[int, int, int]:
    """``(tp, fp, fn)`` for a ``preds×gts`` IoU matrix."""
    iou = np.asarray(iou, dtype=np.float64)
    n_pred, n_gt = iou.shape
    tp = sum(1 for i, j in optimal_assignment(iou) if iou[i, j] >= thr)
    return tp, n_pred - tp, n_gt - tp


@dataclass
class CULaneReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def __add__(self, other: "CULaneReport") -> "CULaneReport":
        return CULaneReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def iou_matrix(preds, gts, stroke: int, img_h: int, img_w: int) -> np.ndarray:
    pm = [render_lane(_pixels(p), stroke, img_h, img_w) for p in preds]
    gm = [render_lane(_pixels(g), stroke, img_h, img_w) for g in gts]
    out = np.zeros((len(pm), len(gm)))
    for i, p in enumerate(pm):
        for j, g in enumerate(gm):
            out[i, j] = lane_iou(p, g)
    return out


def culane_image(preds, gts, iou_thr: float = 0.5, stroke: int = 3,
                 img_h: int = 64, img_w: int = 128) -> CULaneReport:
    m = iou_matrix(preds, gts, stroke, img_h, img_w)
    return CULaneReport(*match_counts(m, iou_thr))


def culane_f1(preds: Sequence, gts: Sequence, iou_thr: float = 0.5, stroke: int = 3,
              img_h: int = 64, img_w: int = 128) -> CULaneReport:
    """Aggregate TP/FP/FN over images; ``preds[k]`` and ``gts[k]`` are lane lists."""
    if not 0.0 < iou_thr < 1.0:
        raise ValueError("iou_thr must lie in (0, 1)")
    if len(preds) != len(gts):
        raise DimensionError(f"{len(preds)} prediction images vs {len(gts)} ground-truth images")
    total = CULaneReport()
    for p, g in zip(preds, gts):
        total = total + culane_image(p, g, iou_thr, stroke, img_h, img_w)
    return total


# ---------------------------------------------------------------------------
# per-row accuracy


@dataclass
class TuSimpleReport:
    correct: int = 0
    gt_points: int = 0
    fp_lanes: int = 0
    pred_lanes: int = 0
    fn_lanes: int = 0
    gt_lanes: int = 0

    @property
    def acc(self) -> float:
        return self.correct / self.gt_points if self.gt_points else 0.0

    @property
    def fp(self) -> float:
        return self.fp_lanes / self.pred_lanes if self.pred_lanes else 0.0

    @property
    def fn(self) -> float:
        return self.fn_lanes / self.gt_lanes if self.gt_lanes else 0.0

    def __add__(self, other: "TuSimpleReport") -> "TuSimpleReport":
        return TuSimpleReport(*(a + b for a, b in zip(
            (self.correct, self.gt_points, self.fp_lanes, self.pred_lanes, self.fn_lanes, self.gt_lanes),
            (other.correct, other.gt_points, other.fp_lanes, other.pred_lanes, other.fn_lanes, other.gt_lanes))))


def _centerline(px: np.ndarray, rows: np.ndarray) -> dict[int, float]:
    """Mean column of the lane at each sampled row it covers."""
    out = {}
    for r in rows:
        cols = px[px[:, 0] == r, 1]
        if len(cols):
            out[int(r)] = float(cols.mean())
    return out


def correct_rows(pred, gt_line: dict[int, float], tol_px: int) -> int:
    """Sampled gt rows where some predicted pixel in that row lies within ``tol_px``."""
    px = _pixels(pred)
    hits = 0
    for r, x in gt_line.items():
        cols = px[px[:, 0] == r, 1]
        if len(cols) and np.min(np.abs(cols - x)) <= tol_px:
            hits += 1
    return hits


def tusimple_image(preds, gts, row_samples, tol_px: int = 3) -> TuSimpleReport:
    rows = np.asarray(row_samples, dtype=np.int64)
    lines = [_centerline(_pixels(g), rows) for g in gts]
    lines = [ln for ln in lines if ln]
    counts = np.array([[correct_rows(p, ln, tol_px) for ln in lines] for p in preds],
                      dtype=np.float64).reshape(len(preds), len(lines))
    sizes = np.array([len(ln) for ln in lines], dtype=np.float64)
    correct = matched = 0
    if len(preds) and len(lines):
        for i, j in optimal_assignment(counts):
            correct += int(counts[i, j])
            if counts[i, j] / sizes[j] >= LANE_CORRECT_FRACTION:
                matched += 1
    return TuSimpleReport(correct, int(sizes.sum()), len(preds) - matched, len(preds),
                          len(lines) - matched, len(lines))


def tusimple_scores(preds: Sequence, gts: Sequence, row_samples=None, tol_px: int = 3,
                    img_h: int = 64) -> TuSimpleReport:
    """Per-row point accuracy with lane-level false positive/negative rates."""
    if row_samples is None:
        row_samples = range(img_h)
    row_samples = list(row_samples)
    if not row_samples:
        raise ValueError("row_samples must not be empty")
    if tol_px < 0:
        raise ValueError("tol_px must be >= 0")
    if len(preds) != len(gts):
        raise DimensionError(f"{len(preds)} prediction images vs {len(gts)} ground-truth images")
    total = TuSimpleReport()
    for p, g in zip(preds, gts):
        total = total + tusimple_image(p, g, row_samples, tol_px)
    return total


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric squared-distance Chamfer between two point arrays (numpy path)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())
