"""Procedural road scenes with lane ground truth.

Lanes occupy up to four positional slots (far left, left, right, far
right) and converge towards a vanishing point.  Corruption modes touch the
image only; masks and point sets always carry the full lane geometry.

On disk each sample is three files: the RGB image as one P5 PGM with the
three channel planes stacked vertically (``3H×W``), the class-index mask as
P5 PGM, and the lane pixels as ``lane_id row col`` text.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .continuity import LanePointSet, format_points, read_points
from .errors import SpecError
from .pgm import read_pgm, write_pgm

MODES = ("normal", "dashed", "occlusion", "noline", "dazzle", "shadow")
MAX_LANES = 4
STROKE = 2
DASH_PERIOD = 8
NOLINE_CONTRAST = 0.15

_SLOT_CENTERS = (0.08, 0.36, 0.64, 0.92)
_ROAD = np.array([0.25, 0.25, 0.27])
_SKY = np.array([0.45, 0.55, 0.70])
_WHITE = np.array([0.92, 0.92, 0.92])
_YELLOW = np.array([0.90, 0.78, 0.30])
_OCCLUDER = np.array([0.50, 0.50, 0.50])


@dataclass(frozen=True)
class LaneCurve:
    """``x = c0 + c1*y + c2*y**2`` in normalized image coordinates."""

    lane_id: int
    coeffs: tuple[float, float, float]
    y_top: float
    color: tuple[float, float, float] = (0.92, 0.92, 0.92)

    def x_at(self, y):
        c0, c1, c2 = self.coeffs
        return c0 + c1 * y + c2 * y * y


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    img_h: int = 64
    img_w: int = 128
    lanes: tuple[LaneCurve, ...] = ()
    mode: str = "normal"
    noise: float = 0.03
    horizon: float = 0.35

    def __post_init__(self):
        if not 1 <= len(self.lanes) <= MAX_LANES:
            raise SpecError(f"lane count must be 1..{MAX_LANES}, got {len(self.lanes)}")
        if self.mode not in MODES:
            raise SpecError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        ids = [ln.lane_id for ln in self.lanes]
        if len(set(ids)) != len(ids) or not all(1 <= i <= MAX_LANES for i in ids):
            raise SpecError(f"lane ids must be distinct and within 1..{MAX_LANES}: {ids}")

    @classmethod
    def random(cls, seed: int, mode: str = "normal", img_h: int = 64, img_w: int = 128,
               lane_count: int | None = None, noise: float = 0.03) -> "SceneSpec":
        """Draw a scene; everything is a function of ``seed``."""
        rng = np.random.default_rng(seed)
        if lane_count is None:
            lane_count = int(rng.choice([1, 2, 3, 4], p=[0.1, 0.2, 0.3, 0.4]))
        if mode == "noline":
            lane_count = max(lane_count, 2)
        slots = np.sort(rng.choice(MAX_LANES, size=lane_count, replace=False)) + 1
        horizon = float(rng.uniform(0.30, 0.40))
        x_vp = 0.5 + float(rng.uniform(-0.08, 0.08))
        bend = float(rng.uniform(-0.15, 0.15))
        lanes = []
        for slot in slots:
            xb = _SLOT_CENTERS[slot - 1] + float(rng.uniform(-0.05, 0.05))
            xt = x_vp + (xb - x_vp) * 0.15
            # x(t) = xt + (xb - xt) t + bend t (1 - t), t = (y - horizon) / (1 - horizon)
            s = 1.0 / (1.0 - horizon)
            a1 = (xb - xt) + bend
            a2 = -bend
            c0 = xt - a1 * horizon * s + a2 * (horizon * s) ** 2
            c1 = a1 * s - 2 * a2 * horizon * s * s
            c2 = a2 * s * s
            color = _YELLOW if rng.uniform() < 0.3 else _WHITE
            lanes.append(LaneCurve(int(slot), (c0, c1, c2), horizon, tuple(color)))
        return cls(seed, img_h, img_w, tuple(lanes), mode, noise, horizon)


@dataclass
class Sample:
    image: np.ndarray  # 3×H×W float64 in [0, 1], multiples of 1/255
    gt_mask: np.ndarray  # H×W int64 class index
    gt_points: list[LanePointSet]
    mode: str = "normal"
    visible_mask: np.ndarray | None = field(default=None, repr=False)

    def lane(self, lane_id: int) -> LanePointSet | None:
        for ps in self.gt_points:
            if ps.lane_id == lane_id:
                return ps
        return None

    def presence(self, lanes: int = MAX_LANES) -> np.ndarray:
        ids = {ps.lane_id for ps in self.gt_points}
        return np.array([float(i in ids) for i in range(1, lanes + 1)])


def lane_pixels(curve: LaneCurve, img_h: int, img_w: int) -> np.ndarray:
    """Stroke pixels ``(row, col)`` of a lane, ``STROKE`` columns per row."""
    r0 = int(np.ceil(curve.y_top * (img_h - 1)))
    pts = []
    for r in range(r0, img_h):
        col = curve.x_at(r / (img_h - 1)) * (img_w - 1)
        left = int(np.floor(col))
        for c in range(left, left + STROKE):
            if 0 <= c < img_w:
                pts.append((r, c))
    return np.array(pts, dtype=np.int64).reshape(-1, 2)


def generate(spec: SceneSpec) -> Sample:
    """Render a scene deterministically from its spec."""
    h, w = spec.img_h, spec.img_w
    rng = np.random.default_rng([spec.seed, 1])
    rows = np.arange(h)[:, None] / (h - 1)
    road = (rows >= spec.horizon).astype(np.float64)
    img = (road[None] * _ROAD[:, None, None] + (1 - road[None]) * _SKY[:, None, None]) * np.ones((3, h, w))
    img = img + 0.05 * (rows[None] - spec.horizon) * road[None]

    gt_mask = np.zeros((h, w), dtype=np.int64)
    gt_points = []
    lane_px = {}
    for curve in sorted(spec.lanes, key=lambda c: -c.lane_id):
        px = lane_pixels(curve, h, w)
        if len(px) == 0:
            continue
        gt_mask[px[:, 0], px[:, 1]] = curve.lane_id
        lane_px[curve.lane_id] = px
    for lane_id in sorted(lane_px):
        gt_points.append(LanePointSet(lane_id, np.unique(lane_px[lane_id], axis=0)))

    ids = sorted(lane_px)
    dashed = spec.mode == "dashed"
    faint = int(rng.choice(ids)) if spec.mode == "noline" and ids else None
    visible = np.zeros((h, w), dtype=bool)
    for curve in spec.lanes:
        px = lane_px.get(curve.lane_id)
        if px is None:
            continue
        if dashed:
            phase = int(rng.integers(0, DASH_PERIOD))
            keep = ((px[:, 0] + phase) // (DASH_PERIOD // 2)) % 2 == 0
            px = px[keep]
        color = np.asarray(curve.color)
        if curve.lane_id == faint:
            base = img[:, px[:, 0], px[:, 1]]
            img[:, px[:, 0], px[:, 1]] = base + NOLINE_CONTRAST * (color[:, None] - base)
        else:
            img[:, px[:, 0], px[:, 1]] = color[:, None]
            visible[px[:, 0], px[:, 1]] = True

    if spec.mode == "occlusion" and ids:
        target = int(rng.choice(ids))
        px = lane_px[target]
        lane_rows = np.unique(px[:, 0])
        frac = rng.uniform(0.2, 0.5)
        span = max(1, int(round(frac * len(lane_rows))))
        start = int(rng.integers(0, len(lane_rows) - span + 1))
        r_lo, r_hi = lane_rows[start], lane_rows[start + span - 1]
        sel = px[(px[:, 0] >= r_lo) & (px[:, 0] <= r_hi)]
        c_lo = max(0, sel[:, 1].min() - 3)
        c_hi = min(w - 1, sel[:, 1].max() + 3)
        img[:, r_lo:r_hi + 1, c_lo:c_hi + 1] = _OCCLUDER[:, None, None]
        visible[r_lo:r_hi + 1, c_lo:c_hi + 1] = False
    elif spec.mode == "dazzle":
        cx = rng.uniform(0.2, 0.8)
        xs = np.arange(w)[None, :] / (w - 1)
        ramp = np.clip(1.0 - np.abs(xs - cx) / 0.45, 0.0, 1.0) * np.clip((rows - spec.horizon) * 2.5 + 0.4, 0, 1)
        img = img + 0.55 * ramp[None]
    elif spec.mode == "shadow":
        band = int(rng.integers(8, 18))
        top = int(rng.integers(int(spec.horizon * h), h - band))
        img[:, top:top + band, :] *= 0.35

    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return Sample(img, gt_mask, gt_points, spec.mode, visible)


# ---------------------------------------------------------------------------
# disk format


def image_to_pgm(image: np.ndarray) -> np.ndarray:
    c, h, w = image.shape
    return np.round(image * 255.0).astype(np.uint8).reshape(c * h, w)


def image_from_pgm(arr: np.ndarray, channels: int = 3) -> np.ndarray:
    h3, w = arr.shape
    return arr.astype(np.float64).reshape(channels, h3 // channels, w) / 255.0


def write_sample(root: str | os.PathLike, stem: str, sample: Sample) -> tuple[str, str, str]:
    """Write one sample; returns paths relative to ``root``."""
    root = Path(root)
    rel = (f"{stem}_image.pgm", f"{stem}_mask.pgm", f"{stem}_points.txt")
    try:
        write_pgm(root / rel[0], image_to_pgm(sample.image))
        write_pgm(root / rel[1], sample.gt_mask)
        (root / rel[2]).write_text(format_points(sample.gt_points), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed writing sample {stem} under {root}: {exc}") from exc
    return rel


def load_sample(root: str | os.PathLike, image_path: str, mask_path: str, points_path: str,
                mode: str = "normal") -> Sample:
    root = Path(root)
    image = image_from_pgm(read_pgm(root / image_path))
    mask = read_pgm(root / mask_path).astype(np.int64)
    return Sample(image, mask, read_points(root / points_path), mode)


def mode_counts(n: int, mix: Mapping[str, float]) -> dict[str, int]:
    """Split ``n`` into per-mode counts by largest remainder (ties in given order)."""
    modes = [m for m, wgt in mix.items() if wgt > 0]
    for m in modes:
        if m not in MODES:
            raise SpecError(f"unknown mode {m!r}")
    if not modes:
        raise SpecError("mode mix has no positive weight")
    total = sum(mix[m] for m in modes)
    exact = [n * mix[m] / total for m in modes]
    counts = [int(np.floor(e)) for e in exact]
    order = sorted(range(len(modes)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return dict(zip(modes, counts))


def mode_sequence(n: int, mix: Mapping[str, float]) -> list[str]:
    """Round-robin interleaving of the per-mode counts."""
    left = dict(mode_counts(n, mix))
    seq: list[str] = []
    while len(seq) < n:
        for m in left:
            if left[m]:
                seq.append(m)
                left[m] -= 1
    return seq


def sample_seed(seed: int, split: str, index: int) -> int:
    code = sum((i + 1) * ord(ch) for i, ch in enumerate(split))
    return int(np.random.SeedSequence([seed, code, index]).generate_state(1)[0])


def dataset_manifest(directory: str | os.PathLike, n: int, mode_mix: Mapping[str, float], seed: int = 0,
                     split: str = "train", img_h: int = 64, img_w: int = 128, noise: float = 0.03) -> Path:
    """Generate ``n`` samples under ``directory/split`` and write ``directory/split.txt``.

    Manifest lines are ``image_path mask_path points_path mode`` with paths
    relative to ``directory``.
    """
    directory = Path(directory)
    sub = directory / split
    manifest = directory / f"{split}.txt"
    lines = []
    if n:
        sub.mkdir(parents=True, exist_ok=True)
    for i, mode in enumerate(mode_sequence(n, mode_mix) if n else []):
        spec = SceneSpec.random(sample_seed(seed, split, i), mode, img_h, img_w, noise=noise)
        rel = write_sample(sub, f"{i:05d}", generate(spec))
        lines.append(" ".join(f"{split}/{r}" for r in rel) + f" {mode}\n")
    try:
        manifest.write_text("".join(lines), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed writing manifest {manifest}: {exc}") from exc
    return manifest


@dataclass
class ManifestEntry:
    image_path: str
    mask_path: str
    points_path: str
    mode: str


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        entries.append(ManifestEntry(*parts))
    return entries


def load_split(directory: str | os.PathLike, split: str) -> list[Sample]:
    directory = Path(directory)
    return [load_sample(directory, e.image_path, e.mask_path, e.points_path, e.mode)
            for e in read_manifest(directory / f"{split}.txt")]


def stack_batch(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.gt_mask for s in samples])
