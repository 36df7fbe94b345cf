"""Acceptance suite: one test per headline criterion, each printing a verdict line.

Run with ``pytest tests/test_acceptance.py``; the verdicts are repeated in
the "acceptance criteria" section of the terminal summary.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from lanegeo import autodiff as ad
from lanegeo import pipeline
from lanegeo.autodiff import Tensor
from lanegeo.cli import main
from lanegeo.completion import CompletionHead, complete, completion_loss, quantize_points, render_lane
from lanegeo.config import load_config
from lanegeo.context import Codebook, assignment_weights, attention, channel_gate
from lanegeo.continuity import GeoFeature, LanePointSet, confidence_filter, extract_point_sets
from lanegeo.data import SceneSpec, generate
from lanegeo.gradcheck import TOLERANCE, run_all
from lanegeo.metrics import culane_f1, lane_iou
from lanegeo.report import parse_kv

import conftest
from conftest import TINY_CONFIG
from oracles import (chamfer_oracle, confidence_filter_oracle, culane_oracle, iou_oracle, point_sets_oracle,
                     quantize_oracle)

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    conftest.VERDICTS.append(line)
    print(line)
    assert ok, line


def test_gradient_integrity():
    start = time.perf_counter()
    results = run_all(seed=0)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.error)
    ok = worst.error <= TOLERANCE and elapsed < 60
    verdict("gradient integrity", ok,
            f"{len(results)} checks, max rel err {worst.error:.2e} ({worst.name}), {elapsed:.1f}s")


def test_encoding_invariants():
    rng = np.random.default_rng(2024)
    worst_row, worst_gate, attn_lo, attn_hi = 0.0, 0.0, 1.0, 0.0
    for _ in range(1000):
        n, k, c = rng.integers(1, 30), rng.integers(1, 9), rng.integers(1, 9)
        scale = 10.0 ** rng.uniform(-2, 1.5)
        book = Codebook(Tensor(rng.normal(size=(k, c)) * scale), Tensor(rng.normal(size=k)))
        w = assignment_weights(Tensor(rng.normal(size=(n, c)) * scale), book).data
        worst_row = max(worst_row, float(np.abs(w.sum(axis=1) - 1).max()))

        X = Tensor(rng.normal(size=(c, 3, 4)))
        A, B = Tensor(rng.uniform(size=c)), Tensor(rng.uniform(size=c))
        twice = channel_gate(channel_gate(X, A), B).data
        once = channel_gate(X, A * B).data
        worst_gate = max(worst_gate, float(np.abs(twice - once).max()))

        att = attention(Tensor(rng.normal(size=c) * scale * 10), Tensor(rng.normal(size=(c, c)))).data
        attn_lo, attn_hi = min(attn_lo, float(att.min())), max(attn_hi, float(att.max()))
    ok = worst_row <= 1e-12 and worst_gate <= 1e-15 and 0 < attn_lo and attn_hi < 1
    verdict("encoding invariants", ok,
            f"1000 cases, row-sum err {worst_row:.1e}, gate composition err {worst_gate:.1e}, "
            f"attention range [{attn_lo:.3g}, {attn_hi:.17g}]")


def _probs(rng, shape):
    z = rng.normal(size=shape) * 3
    e = np.exp(z - z.max(axis=0))
    return e / e.sum(axis=0)


def _random_lanes(rng, h, w, n):
    lanes = []
    for i in range(n):
        r0 = int(rng.integers(0, h - 3))
        r1 = int(rng.integers(r0 + 2, h + 1))
        c, slope = int(rng.integers(0, w)), rng.uniform(-0.6, 0.6)
        pts = {(r, int(np.clip(round(c + slope * (r - r0)), 0, w - 1))) for r in range(r0, r1)}
        lanes.append(LanePointSet(i + 1, sorted(pts)))
    return lanes


def _jitter(rng, lane, w):
    shift = int(rng.integers(-2, 3))
    pts = {(r, int(np.clip(c + shift, 0, w - 1))) for r, c in lane.points if rng.uniform() > 0.2}
    return LanePointSet(lane.lane_id, sorted(pts) or lane.as_tuples()[:1])


def _f1_instance(rng, h=12, w=16):
    preds, gts = [], []
    for _ in range(int(rng.integers(1, 4))):
        g = _random_lanes(rng, h, w, int(rng.integers(0, 4)))
        p = [_jitter(rng, x, w) for x in g if rng.uniform() < 0.8]
        p += _random_lanes(rng, h, w, int(rng.integers(0, 2)))
        rng.shuffle(p)
        preds.append(p)
        gts.append(g)
    return preds, gts


def test_oracle_equivalence():
    rng = np.random.default_rng(7)
    n = 200
    mismatches = dict.fromkeys(
        ["confidence_filter", "extract_point_sets", "quantize", "lane_iou", "chamfer", "culane_f1"], 0)
    for _ in range(n):
        p = _probs(rng, (5, 4, 6))
        tau = float(rng.uniform(0.3, 0.95))
        mismatches["confidence_filter"] += confidence_filter(p, tau).tolist() != confidence_filter_oracle(p.tolist(), tau)

        mask = rng.choice(5, size=(5, 7), p=[0.6, 0.1, 0.1, 0.1, 0.1])
        got = {ps.lane_id: ps.as_tuples() for ps in extract_point_sets(mask)}
        mismatches["extract_point_sets"] += got != point_sets_oracle(mask.tolist())

        pts = rng.uniform(-0.1, 1.1, size=(int(rng.integers(1, 30)), 2))
        pts[::3, 0] = (rng.integers(0, 15, size=len(pts[::3])) + 0.5) / 15  # exact half-pixel positions
        mismatches["quantize"] += quantize_points(pts, 9, 16).tolist() != [list(q) for q in quantize_oracle(pts.tolist(), 9, 16)]

        a, b = rng.uniform(size=(2, 12, 12)) < rng.uniform(0.05, 0.6, size=(2, 1, 1))
        mismatches["lane_iou"] += lane_iou(a, b) != float(iou_oracle(a.tolist(), b.tolist()))

        x, y = rng.uniform(size=(int(rng.integers(1, 10)), 2)), rng.uniform(size=(int(rng.integers(1, 10)), 2))
        mismatches["chamfer"] += abs(completion_loss(Tensor(x), y).item() - chamfer_oracle(x.tolist(), y.tolist())) > 1e-12

    # culane_f1: only instances whose optimal matching is unique are comparable, so draw until 200 of them
    checked = 0
    while checked < n:
        preds, gts = _f1_instance(rng)
        pm = [[render_lane(l, 3, 12, 16).tolist() for l in p] for p in preds]
        gm = [[render_lane(l, 3, 12, 16).tolist() for l in g] for g in gts]
        tp, fp, fn, unique = culane_oracle(pm, gm, 0.5)
        if not unique:
            continue
        rep = culane_f1(preds, gts, 0.5, 3, 12, 16)
        mismatches["culane_f1"] += (rep.tp, rep.fp, rep.fn) != (tp, fp, fn)
        checked += 1
    ok = not any(mismatches.values())
    verdict("oracle equivalence", ok,
            f"{n} instances each, mismatches " + ", ".join(f"{k} {v}" for k, v in mismatches.items()))


def test_permutation_invariance():
    rng = np.random.default_rng(11)
    head = CompletionHead(10, n_out=64, seed=3)
    G = np.concatenate([rng.uniform(size=(40, 2)), np.tile(rng.normal(size=8), (40, 1))], axis=1)
    base = complete(GeoFeature(1, Tensor(G)), head).predicted
    differing = sum(not np.array_equal(complete(GeoFeature(1, Tensor(G[rng.permutation(40)])), head).predicted, base)
                    for _ in range(100))
    verdict("permutation invariance", differing == 0, f"100 row shuffles, {differing} differ bitwise")


def test_overfit_sanity():
    cfg = load_config(DESK_CONFIG)
    modes = ["normal", "dashed", "occlusion", "noline"]
    samples = [generate(SceneSpec.random(5000 + i, modes[i % 4], img_h=64, img_w=128)) for i in range(32)]
    epochs = 60
    start = time.perf_counter()
    model = pipeline.train_rough(cfg, samples, epochs=epochs)
    acc = pipeline.pixel_accuracy(model, samples)
    elapsed = time.perf_counter() - start
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.gt_mask for s in samples])
    pred = pipeline.predict_probs(model, images).argmax(axis=1)
    lane_recall = float((pred[masks > 0] == masks[masks > 0]).mean())
    background = float((masks == 0).mean())
    ok = acc >= 0.95 and epochs <= 300 and elapsed < 300
    verdict("overfit sanity", ok,
            f"32 images, {epochs} epochs, pixel acc {acc:.4f} (background share {background:.4f}, "
            f"lane-pixel recall {lane_recall:.4f}), {elapsed:.0f}s")


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    for cmd in ("gen-data", "train-rough", "train-refine", "eval"):
        assert main([cmd, "--config", str(DESK_CONFIG), "--out", str(out)]) == 0
    return out


def test_refinement_claim(desk_run):
    kv = parse_kv((desk_run / "run" / "report.kv").read_text())
    a, ab = "base+A", "base+A+B"
    fn_a, fn_ab = kv[f"{a}.total.fn_rate"], kv[f"{ab}.total.fn_rate"]
    ch_a, ch_ab = kv[f"{a}.total.chamfer"], kv[f"{ab}.total.chamfer"]
    f1_a, f1_ab = kv[f"{a}.total.f1"], kv[f"{ab}.total.f1"]
    wins = {m: kv[f"{ab}.{m}.f1"] > kv[f"{a}.{m}.f1"] for m in ("occlusion", "noline")}
    ok = fn_ab < fn_a and ch_ab < ch_a and f1_ab >= f1_a - 0.01 and all(wins.values())
    verdict("refinement claim", ok,
            f"FN {fn_ab:.4f} vs {fn_a:.4f}, Chamfer {ch_ab:.5f} vs {ch_a:.5f}, F1 {f1_ab:.4f} vs {f1_a:.4f}, "
            + ", ".join(f"{m} F1 {kv[f'{ab}.{m}.f1']:.3f} vs {kv[f'{a}.{m}.f1']:.3f}" for m in wins))


def test_determinism(tmp_path):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(TINY_CONFIG)
    runs = []
    for name in ("first", "second"):
        out = tmp_path / name
        for cmd in ("gen-data", "train-rough", "train-refine", "eval"):
            assert main([cmd, "--config", str(cfg_path), "--out", str(out)]) == 0
        runs.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    first, second = runs
    compared = [p for p in first if p.suffix in (".clck", ".txt", ".kv", ".pgm")]
    differing = [str(p) for p in compared if first[p] != second.get(p)]
    ok = first.keys() == second.keys() and not differing and any(p.suffix == ".clck" for p in compared)
    verdict("determinism", ok, f"{len(compared)} files compared across two full runs, {len(differing)} differ")
