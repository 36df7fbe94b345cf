"""Line-based ``key=value`` run configuration with ``#`` comments."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import MODES
from .errors import ConfigError

VARIANTS = ("base", "base+A", "base+A+B")


def parse_mix(text: str) -> dict[str, float]:
    """``"normal:1,dashed:1"`` to a mode-weight mapping."""
    mix: dict[str, float] = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, _, weight = item.partition(":")
        name = name.strip()
        if name not in MODES:
            raise ValueError(f"unknown mode {name!r} (expected one of {', '.join(MODES)})")
        w = float(weight) if weight else 1.0
        if w < 0:
            raise ValueError(f"negative weight for mode {name}")
        mix[name] = w
    if not mix or sum(mix.values()) <= 0:
        raise ValueError("mode mix needs at least one positive weight")
    return mix


def format_mix(mix: dict[str, float]) -> str:
    return ",".join(f"{k}:{v:g}" for k, v in mix.items())


@dataclass
class RunConfig:
    # geometry and model
    img_h: int = 64
    img_w: int = 128
    lanes: int = 4
    feat_dim: int = 8
    codewords: int = 8
    points: int = 64
    threshold: float = 0.70
    # rough training
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 30
    lr_halve_every: int = 2
    se_weight: float = 0.1
    # refine training
    refine_lr: float = 0.01
    refine_epochs: int = 60
    refine_batch: int = 16
    refine_lr_halve_every: int = 2
    refine_drop: float = 0.5
    # data
    seed: int = 0
    n_train: int = 32
    n_val: int = 0
    n_test: int = 64
    noise: float = 0.03
    train_mix: dict = field(default_factory=lambda: {m: 1.0 for m in ("normal", "dashed", "occlusion", "noline")})
    test_mix: dict = field(default_factory=lambda: {m: 1.0 for m in ("normal", "dashed", "occlusion", "noline")})
    # evaluation
    variants: tuple = VARIANTS
    stroke: int = 3
    iou_thr: float = 0.5
    tol_px: int = 3
    figures: bool = True
    # paths
    data_dir: str = "data"
    run_dir: str = "run"

    def validate(self) -> "RunConfig":
        for key, (ok, msg) in _CHECKS.items():
            if not ok(getattr(self, key)):
                raise ConfigError(f"{key} {msg}")
        return self

    def lr_at(self, epoch: int, refine: bool = False) -> float:
        """Learning rate for 1-based ``epoch``: halved every ``period`` epochs."""
        base, period = (self.refine_lr, self.refine_lr_halve_every) if refine else (self.lr, self.lr_halve_every)
        return base * 0.5 ** ((epoch - 1) // period)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, dict):
                v = format_mix(v)
            elif isinstance(v, tuple):
                v = ",".join(v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}\n")
        return "".join(lines)


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _open_unit(v):
    return 0.0 < v < 1.0


_CHECKS = {
    "img_h": (lambda v: v >= 8 and v % 4 == 0, "must be a multiple of 4 and >= 8"),
    "img_w": (lambda v: v >= 8 and v % 4 == 0, "must be a multiple of 4 and >= 8"),
    "lanes": (lambda v: 1 <= v <= 4, "must be in 1..4"),
    "feat_dim": (_positive, "must be >= 1"),
    "codewords": (_positive, "must be >= 1"),
    "points": (_positive, "must be >= 1"),
    "threshold": (_open_unit, "must lie in (0, 1)"),
    "lr": (_positive, "must be positive"),
    "refine_lr": (_positive, "must be positive"),
    "momentum": (lambda v: 0.0 <= v < 1.0, "must lie in [0, 1)"),
    "batch_size": (_positive, "must be >= 1"),
    "refine_batch": (_positive, "must be >= 1"),
    "epochs": (_nonneg, "must be >= 0"),
    "refine_epochs": (_nonneg, "must be >= 0"),
    "lr_halve_every": (_positive, "must be >= 1"),
    "refine_lr_halve_every": (_positive, "must be >= 1"),
    "se_weight": (_nonneg, "must be >= 0"),
    "refine_drop": (lambda v: 0.0 <= v <= 1.0, "must lie in [0, 1]"),
    "seed": (_nonneg, "must be >= 0"),
    "n_train": (_nonneg, "must be >= 0"),
    "n_val": (_nonneg, "must be >= 0"),
    "n_test": (_nonneg, "must be >= 0"),
    "noise": (_nonneg, "must be >= 0"),
    "stroke": (_positive, "must be >= 1"),
    "iou_thr": (_open_unit, "must lie in (0, 1)"),
    "tol_px": (_nonneg, "must be >= 0"),
    "variants": (lambda v: bool(v) and all(x in VARIANTS for x in v),
                 f"must be drawn from {', '.join(VARIANTS)}"),
}

_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(name: str, raw: str):
    default = getattr(RunConfig(), name)
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, dict):
        return parse_mix(raw)
    if isinstance(default, tuple):
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", lineno)
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        seen.add(key)
        try:
            value = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from exc
        if key in _CHECKS and not _CHECKS[key][0](value):
            raise ConfigError(f"{key} {_CHECKS[key][1]}", lineno)
        setattr(cfg, key, value)
    return cfg.validate()


def load_config(path: str | os.PathLike | None, **overrides) -> RunConfig:
    """Read a config file (or defaults when ``path`` is None) and apply overrides."""
    if path is None:
        cfg = RunConfig()
    else:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        cfg = parse_config(text)
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg.validate()
