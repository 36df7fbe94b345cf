"""Two-stage training, inference and ablation evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .completion import CompletionHead, completion_loss, quantize_points
from .config import RunConfig
from .continuity import (LanePointSet, confidence_filter, encode_geometry, extract_point_sets,
                         normalize_points)
from .context import class_features
from .data import Sample, stack_batch
from .errors import CheckpointError, ConfigError, NumericError
from .metrics import CULaneReport, TuSimpleReport, chamfer_distance, culane_image, tusimple_image
from .rough import BackboneConfig, RoughModel, presence_of, rough_loss

log = logging.getLogger(__name__)

Logger = Callable[[str], None]


def backbone_config(cfg: RunConfig, context: bool = True) -> BackboneConfig:
    return BackboneConfig(img_h=cfg.img_h, img_w=cfg.img_w, lanes=cfg.lanes, feat_dim=cfg.feat_dim,
                          codewords=cfg.codewords, context=context)


def _emit(logger: Logger | None, line: str) -> None:
    log.info(line)
    if logger is not None:
        logger(line)


# ---------------------------------------------------------------------------
# stage 1: rough branch


def train_rough(cfg: RunConfig, samples: Sequence[Sample], context: bool = True,
                logger: Logger | None = None, epochs: int | None = None,
                stop_at_accuracy: float | None = None) -> RoughModel:
    """SGD with momentum over shuffled mini-batches; lr halves every ``lr_halve_every`` epochs."""
    model = RoughModel(backbone_config(cfg, context), seed=cfg.seed)
    params = model.parameters()
    epochs = cfg.epochs if epochs is None else epochs
    if not samples:
        return model
    images, masks = stack_batch(samples)
    presence = np.stack([s.presence(cfg.lanes) for s in samples])
    for epoch in range(1, epochs + 1):
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            ad.reset_tape()
            out = model.forward(Tensor(images[idx]), "train")
            loss = rough_loss(out.probmap, masks[idx], out.presence_logits, presence[idx], cfg.se_weight)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite rough loss at epoch {epoch}")
            ad.backward(loss)
            ad.sgd_step(params, lr, cfg.momentum)
            total += loss.item() * len(idx)
            count += len(idx)
        line = f"epoch {epoch} loss {total / count:.6f} lr {lr:.6g}"
        if stop_at_accuracy is not None:
            acc = pixel_accuracy(model, samples)
            line += f" pixel_acc {acc:.6f}"
            _emit(logger, line)
            if acc >= stop_at_accuracy:
                break
        else:
            _emit(logger, line)
    return model


def predict_probs(model: RoughModel, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Inference-mode class probabilities ``B×(M+1)×H×W``."""
    out = []
    with ad.no_grad():
        for s in range(0, len(images), batch):
            out.append(model.forward(Tensor(images[s: s + batch]), "infer").probmap.probs.data)
    return np.concatenate(out) if out else np.zeros((0,))


def pixel_accuracy(model: RoughModel, samples: Sequence[Sample]) -> float:
    images, masks = stack_batch(samples)
    pred = predict_probs(model, images).argmax(axis=1)
    return float((pred == masks).mean())


# ---------------------------------------------------------------------------
# stage 2: completion head


@dataclass
class _LaneItem:
    image: int
    lane_id: int
    points: np.ndarray  # observed (row, col)
    target: np.ndarray  # full lane, normalized (x, y)


def gated_features(model: RoughModel, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Attention-gated feature maps ``Y`` from the frozen rough branch."""
    if model.ctx is None:
        raise ConfigError("refinement needs a rough model with the context-encoding head")
    out = []
    with ad.no_grad():
        for s in range(0, len(images), batch):
            X = model.backbone(Tensor(images[s: s + batch]), "infer")
            _, _, A = model.ctx.encode(X, "infer")
            out.append((X * A.reshape(A.shape + (1, 1))).data)
    return np.concatenate(out)


def _drop_band(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Remove a contiguous band of 20-50% of the lane's rows."""
    rows = np.unique(points[:, 0])
    if len(rows) < 6:
        return points
    span = max(1, int(round(rng.uniform(0.2, 0.5) * len(rows))))
    start = int(rng.integers(0, len(rows) - span + 1))
    lo, hi = rows[start], rows[start + span - 1]
    keep = (points[:, 0] < lo) | (points[:, 0] > hi)
    return points[keep] if keep.sum() >= 3 else points


class Refiner:
    """Completion head plus the class-feature projection it is trained with."""

    def __init__(self, cfg: RunConfig, rough: RoughModel):
        if rough.ctx is None:
            raise ConfigError("refinement needs a rough model with the context-encoding head")
        self.cfg = cfg
        self.rough = rough
        self.head = CompletionHead(2 + cfg.feat_dim, cfg.points, seed=cfg.seed + 1)

    def parameters(self) -> list[Tensor]:
        return self.head.parameters() + self.rough.ctx.projection_parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = dict(self.head.state_dict())
        state.update({p.name: p.data for p in self.rough.ctx.projection_parameters()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.head.load_state_dict(state)
        for p in self.rough.ctx.projection_parameters():
            if p.name not in state:
                raise CheckpointError(f"refine checkpoint lacks {p.name}")
            p.data[...] = state[p.name]

    def lane_feature(self, Y: np.ndarray, lane_id: int) -> Tensor:
        ctx = self.rough.ctx
        bank = class_features(Tensor(Y), ctx.proj, ctx.lanes, ctx.proj_bias)
        return bank.lane(lane_id)

    def predict(self, Y: np.ndarray, pset: LanePointSet) -> np.ndarray:
        """Predicted normalized points for one lane (no gradient)."""
        with ad.no_grad():
            c_i = self.lane_feature(Y, pset.lane_id)
            geo = encode_geometry(pset, c_i, self.cfg.img_h, self.cfg.img_w)
            return np.clip(self.head.forward(geo.G).data, 0.0, 1.0)


def train_refine(cfg: RunConfig, rough: RoughModel, samples: Sequence[Sample],
                 logger: Logger | None = None) -> Refiner:
    """Fit the completion head on the frozen rough branch's filtered outputs."""
    rough.freeze()
    refiner = Refiner(cfg, rough)
    params = refiner.parameters()
    if not samples:
        return refiner
    images, _ = stack_batch(samples)
    feats = gated_features(rough, images)
    probs = predict_probs(rough, images)
    items: list[_LaneItem] = []
    for k, s in enumerate(samples):
        for ps in extract_point_sets(confidence_filter(probs[k], cfg.threshold)):
            gt = s.lane(ps.lane_id)
            if gt is not None and len(ps) >= 1:
                items.append(_LaneItem(k, ps.lane_id, ps.points,
                                       normalize_points(gt.points, cfg.img_h, cfg.img_w)))
    _emit(logger, f"refine_lanes {len(items)}")
    if not items:
        return refiner
    for epoch in range(1, cfg.refine_epochs + 1):
        lr = cfg.lr_at(epoch, refine=True)
        rng = np.random.default_rng([cfg.seed, 7, epoch])
        order = rng.permutation(len(items))
        total = 0.0
        for start in range(0, len(order), cfg.refine_batch):
            chunk = [items[i] for i in order[start: start + cfg.refine_batch]]
            ad.reset_tape()
            loss = None
            for it in chunk:
                pts = _drop_band(it.points, rng) if rng.uniform() < cfg.refine_drop else it.points
                c_i = refiner.lane_feature(feats[it.image], it.lane_id)
                geo = encode_geometry(LanePointSet(it.lane_id, pts), c_i, cfg.img_h, cfg.img_w)
                li = completion_loss(refiner.head.forward(geo.G), it.target)
                loss = li if loss is None else loss + li
            loss = loss * (1.0 / len(chunk))
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite completion loss at epoch {epoch}")
            ad.backward(loss)
            ad.sgd_step(params, lr, cfg.momentum)
            total += loss.item() * len(chunk)
        _emit(logger, f"epoch {epoch} loss {total / len(items):.6f} lr {lr:.6g}")
    return refiner


# ---------------------------------------------------------------------------
# inference


@dataclass
class Prediction:
    rough: list[LanePointSet]
    refined: list[LanePointSet] | None = None
    counts: dict[int, tuple[int, int]] = field(default_factory=dict)


def predict(cfg: RunConfig, rough: RoughModel, images: np.ndarray,
            refiner: Refiner | None = None) -> list[Prediction]:
    """Filtered rough lanes per image, plus completed lanes when ``refiner`` is given."""
    probs = predict_probs(rough, images)
    feats = gated_features(rough, images) if refiner is not None else None
    out = []
    for k in range(len(images)):
        lanes = extract_point_sets(confidence_filter(probs[k], cfg.threshold))
        pred = Prediction(lanes)
        if refiner is not None:
            refined = []
            for ps in lanes:
                xy = refiner.predict(feats[k], ps)
                observed = normalize_points(ps.points, cfg.img_h, cfg.img_w)
                px = quantize_points(np.concatenate([observed, xy]), cfg.img_h, cfg.img_w)
                refined.append(LanePointSet(ps.lane_id, px))
                pred.counts[ps.lane_id] = (len(ps), len(px))
            pred.refined = refined
        out.append(pred)
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class VariantScores:
    culane: dict[str, CULaneReport] = field(default_factory=dict)
    tusimple: dict[str, TuSimpleReport] = field(default_factory=dict)
    chamfer: dict[str, list[float]] = field(default_factory=dict)

    def add(self, mode: str, cu: CULaneReport, tu: TuSimpleReport, ch: list[float]) -> None:
        for key in (mode, "total"):
            self.culane[key] = self.culane.get(key, CULaneReport()) + cu
            self.tusimple[key] = self.tusimple.get(key, TuSimpleReport()) + tu
            self.chamfer.setdefault(key, []).extend(ch)

    def mean_chamfer(self, mode: str = "total") -> float:
        vals = self.chamfer.get(mode, [])
        return float(np.mean(vals)) if vals else float("nan")


def lane_chamfers(cfg: RunConfig, preds: Sequence[LanePointSet], gts: Sequence[LanePointSet]) -> list[float]:
    """Chamfer distance per predicted lane whose id exists in the ground truth."""
    by_id = {g.lane_id: g for g in gts}
    out = []
    for p in preds:
        g = by_id.get(p.lane_id)
        if g is not None and len(p):
            out.append(chamfer_distance(normalize_points(p.points, cfg.img_h, cfg.img_w),
                                        normalize_points(g.points, cfg.img_h, cfg.img_w)))
    return out


def score_variant(cfg: RunConfig, lanes_per_image: Sequence[Sequence[LanePointSet]],
                  samples: Sequence[Sample]) -> VariantScores:
    scores = VariantScores()
    rows = range(cfg.img_h)
    for lanes, s in zip(lanes_per_image, samples):
        cu = culane_image(lanes, s.gt_points, cfg.iou_thr, cfg.stroke, cfg.img_h, cfg.img_w)
        tu = tusimple_image(lanes, s.gt_points, rows, cfg.tol_px)
        scores.add(s.mode, cu, tu, lane_chamfers(cfg, lanes, s.gt_points))
    return scores


def evaluate(cfg: RunConfig, samples: Sequence[Sample], models: dict[str, object]) -> dict[str, VariantScores]:
    """Score every configured variant.

    ``models`` maps ``"base"`` and ``"rough"`` to rough models and
    ``"refine"`` to a :class:`Refiner`.
    """
    images, _ = stack_batch(samples)
    results: dict[str, VariantScores] = {}
    rough_preds: list[Prediction] | None = None
    for variant in cfg.variants:
        if variant == "base":
            lanes = [p.rough for p in predict(cfg, models["base"], images)]
        else:
            if rough_preds is None:
                rough_preds = predict(cfg, models["rough"], images, models.get("refine"))
            if variant == "base+A":
                lanes = [p.rough for p in rough_preds]
            else:
                lanes = [p.refined for p in rough_preds]
        results[variant] = score_variant(cfg, lanes, samples)
    return results


def gt_as_predictions(samples: Sequence[Sample]) -> list[list[LanePointSet]]:
    return [list(s.gt_points) for s in samples]


# ---------------------------------------------------------------------------
# checkpoints


def save_rough(path, model: RoughModel) -> None:
    state = dict(model.state_dict())
    state["meta.context"] = np.array([1.0 if model.cfg.context else 0.0])
    checkpoint.save(path, state)


def load_rough(path, cfg: RunConfig) -> RoughModel:
    state = checkpoint.load(path)
    context = bool(state.get("meta.context", np.array([1.0]))[0])
    model = RoughModel(backbone_config(cfg, context), seed=cfg.seed)
    model.load_state_dict(state)
    return model


def save_refine(path, refiner: Refiner) -> None:
    checkpoint.save(path, refiner.state_dict())


def load_refine(path, cfg: RunConfig, rough: RoughModel) -> Refiner:
    refiner = Refiner(cfg, rough)
    refiner.load_state_dict(checkpoint.load(path))
    return refiner
