"""``lanegeo`` command line: data generation, training, evaluation, inference."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline, report
from .config import RunConfig, load_config
from .continuity import render_point_sets, write_points
from .data import dataset_manifest, image_from_pgm, load_split, mode_counts
from .errors import CheckpointError, ConfigError, LaneGeoError
from .pgm import read_pgm, write_pgm

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("lanegeo")

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _say(line: str) -> None:
    print(line, flush=True)


class Workspace:
    """Resolved data and run directories under the ``--out`` root."""

    def __init__(self, cfg: RunConfig, root: str | None):
        base = Path(root) if root else Path(".")
        self.data = base / cfg.data_dir
        self.run = base / cfg.run_dir

    def ckpt(self, name: str) -> Path:
        return self.run / f"{name}.clck"

    def need(self, name: str, variant: str) -> Path:
        path = self.ckpt(name)
        if not path.is_file():
            raise CheckpointError(f"variant {variant} needs checkpoint {path}, which does not exist")
        return path


def _split(ws: Workspace, name: str):
    manifest = ws.data / f"{name}.txt"
    if not manifest.is_file():
        raise LaneGeoError(f"missing manifest {manifest}; run gen-data first")
    return load_split(ws.data, name)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, ws: Workspace, args) -> int:
    sizes = {"train": (cfg.n_train, cfg.train_mix), "val": (cfg.n_val, cfg.train_mix),
             "test": (cfg.n_test, cfg.test_mix)}
    ws.data.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        n, mix = sizes[split]
        dataset_manifest(ws.data, n, mix, seed=cfg.seed, split=split, img_h=cfg.img_h, img_w=cfg.img_w,
                         noise=cfg.noise)
        counts = " ".join(f"{m} {c}" for m, c in mode_counts(n, mix).items())
        _say(f"split {split} count {n} {counts}".rstrip())
    return EXIT_OK


def cmd_train_rough(cfg: RunConfig, ws: Workspace, args) -> int:
    train = _split(ws, "train")
    ws.run.mkdir(parents=True, exist_ok=True)
    stages = [("rough", True)]
    if "base" in cfg.variants:
        stages.append(("base", False))
    for name, context in stages:
        model = pipeline.train_rough(cfg, train, context=context, logger=lambda l, n=name: _say(f"stage {n} {l}"))
        pipeline.save_rough(ws.ckpt(name), model)
        _say(f"stage {name} checkpoint {ws.ckpt(name)}")
    return EXIT_OK


def cmd_train_refine(cfg: RunConfig, ws: Workspace, args) -> int:
    rough = pipeline.load_rough(ws.need("rough", "base+A+B"), cfg)
    train = _split(ws, "train")
    refiner = pipeline.train_refine(cfg, rough, train, logger=lambda l: _say(f"stage refine {l}"))
    pipeline.save_refine(ws.ckpt("refine"), refiner)
    _say(f"stage refine checkpoint {ws.ckpt('refine')}")
    return EXIT_OK


def _load_models(cfg: RunConfig, ws: Workspace) -> dict:
    models: dict = {}
    if "base" in cfg.variants:
        models["base"] = pipeline.load_rough(ws.need("base", "base"), cfg)
    if "base+A" in cfg.variants or "base+A+B" in cfg.variants:
        tag = "base+A" if "base+A" in cfg.variants else "base+A+B"
        models["rough"] = pipeline.load_rough(ws.need("rough", tag), cfg)
    if "base+A+B" in cfg.variants:
        models["refine"] = pipeline.load_refine(ws.need("refine", "base+A+B"), cfg, models["rough"])
    return models


def cmd_eval(cfg: RunConfig, ws: Workspace, args) -> int:
    test = _split(ws, "test")
    if args.oracle:
        # score the ground truth against itself; no checkpoints involved
        results = {"oracle": pipeline.score_variant(cfg, pipeline.gt_as_predictions(test), test)}
        models = None
    else:
        models = _load_models(cfg, ws)
        results = pipeline.evaluate(cfg, test, models)
    ws.run.mkdir(parents=True, exist_ok=True)
    table = report.render(results)
    (ws.run / "report.txt").write_text(table, encoding="utf-8")
    (ws.run / "report.kv").write_text(report.kv_lines(results), encoding="utf-8")
    sys.stdout.write(table)
    if cfg.figures and test:
        _figures(cfg, ws, test, results, models)
    return EXIT_OK


def _figures(cfg: RunConfig, ws: Workspace, test, results, models) -> None:
    from . import plotting

    plotting.ablation_chart(results, ws.run / "ablation_f1.png")
    if not models or "rough" not in models:
        return
    pick = []
    for mode in dict.fromkeys(s.mode for s in test):
        pick += [i for i, s in enumerate(test) if s.mode == mode][:1]
    images = np.stack([test[i].image for i in pick])
    preds = pipeline.predict(cfg, models["rough"], images, models.get("refine"))
    refined = [p.refined for p in preds] if models.get("refine") is not None else None
    plotting.qualitative_panel(images, [p.rough for p in preds], refined, [test[i].gt_points for i in pick],
                               ws.run / "qualitative.png", [test[i].mode for i in pick])


def cmd_infer(cfg: RunConfig, ws: Workspace, args) -> int:
    image_path = Path(args.image)
    if not image_path.is_file():
        raise LaneGeoError(f"image {image_path} does not exist")
    rough = pipeline.load_rough(ws.need("rough", "base+A+B"), cfg)
    refiner = pipeline.load_refine(ws.need("refine", "base+A+B"), cfg, rough)
    image = image_from_pgm(read_pgm(image_path))
    if image.shape != (3, cfg.img_h, cfg.img_w):
        raise LaneGeoError(f"image {image_path} is {image.shape[2]}x{image.shape[1]}, "
                           f"config expects {cfg.img_w}x{cfg.img_h}")
    pred = pipeline.predict(cfg, rough, image[None], refiner)[0]
    dest = Path(args.dest) if args.dest else ws.run
    dest.mkdir(parents=True, exist_ok=True)
    stem = image_path.stem
    mask_path, points_path = dest / f"{stem}_refined_mask.pgm", dest / f"{stem}_refined_points.txt"
    write_pgm(mask_path, render_point_sets(pred.refined, cfg.img_h, cfg.img_w))
    write_points(points_path, pred.refined)
    for lane_id, (m, m_star) in sorted(pred.counts.items()):
        _say(f"lane {lane_id} points {m} completed {m_star}")
    _say(f"mask {mask_path}")
    _say(f"points {points_path}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, ws: Workspace, args) -> int:
    from .gradcheck import run_all

    results = run_all(cfg.seed)
    for r in results:
        _say(f"check {r.name} rel_err {r.error:.3e} ok {int(r.ok)}")
    failed = sum(not r.ok for r in results)
    _say(f"checks {len(results)} failed {failed}")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate train/val/test splits and manifests"),
    "train-rough": (cmd_train_rough, "train the rough branch (and the base model)"),
    "train-refine": (cmd_train_refine, "train the completion head on the frozen rough branch"),
    "eval": (cmd_eval, "evaluate every configured variant on the test split"),
    "infer": (cmd_infer, "refine the lanes of one image"),
    "gradcheck": (cmd_gradcheck, "compare analytic and numerical gradients"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", metavar="DIR", help="root for the data and run directories (default: .)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    parser = _Parser(prog="lanegeo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "infer":
            p.add_argument("image", help="stacked-plane RGB PGM (3H x W)")
            p.add_argument("--dest", metavar="DIR", help="output directory (default: the run directory)")
        if name == "eval":
            p.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed)
    except ConfigError as exc:
        where = f"{args.config}: " if args.config else ""
        print(f"config error: {where}{exc}", file=sys.stderr)
        return EXIT_CONFIG
    handler = COMMANDS[args.command][0]
    try:
        return handler(cfg, Workspace(cfg, args.out), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LaneGeoError, ArithmeticError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
