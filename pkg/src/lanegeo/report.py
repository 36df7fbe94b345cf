"""Ablation report: aligned text table plus ``key=value`` lines."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

from .data import MODES

MODE_TITLES = {"normal": "Normal", "dashed": "Dashed", "occlusion": "Occlusion", "noline": "No line",
               "dazzle": "Dazzle", "shadow": "Shadow", "total": "Total"}


def present_modes(results: Mapping[str, object]) -> list[str]:
    seen = set()
    for scores in results.values():
        seen.update(scores.culane)
    return [m for m in MODES if m in seen] + ["total"]


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.4f}"


def f1_table(results: Mapping[str, object]) -> str:
    """One row per variant, one F1 column per mode present, then Total."""
    modes = present_modes(results)
    header = ["variant"] + [MODE_TITLES[m] for m in modes]
    rows = [header]
    for variant, scores in results.items():
        rows.append([variant] + [_fmt(scores.culane[m].f1 * 100) if m in scores.culane else "-" for m in modes])
    return _align(rows)


def tusimple_table(results: Mapping[str, object]) -> str:
    rows = [["variant", "Acc", "FP", "FN", "Chamfer"]]
    for variant, scores in results.items():
        tu = scores.tusimple.get("total")
        if tu is None:
            rows.append([variant, "-", "-", "-", "-"])
            continue
        rows.append([variant, _fmt(tu.acc), _fmt(tu.fp), _fmt(tu.fn), _fmt(scores.mean_chamfer())])
    return _align(rows)


def _align(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def kv_lines(results: Mapping[str, object]) -> str:
    """Machine-readable ``variant.mode.metric=value`` lines in a fixed order."""
    out = []
    for variant, scores in results.items():
        for mode in present_modes(results):
            cu = scores.culane.get(mode)
            tu = scores.tusimple.get(mode)
            if cu is None:
                continue
            key = f"{variant}.{mode}"
            out += [f"{key}.tp={cu.tp}", f"{key}.fp={cu.fp}", f"{key}.fn={cu.fn}",
                    f"{key}.precision={cu.precision:.6f}", f"{key}.recall={cu.recall:.6f}",
                    f"{key}.f1={cu.f1:.6f}",
                    f"{key}.acc={tu.acc:.6f}", f"{key}.fp_rate={tu.fp:.6f}", f"{key}.fn_rate={tu.fn:.6f}",
                    f"{key}.chamfer={scores.mean_chamfer(mode):.6f}"]
    return "\n".join(out) + "\n"


def parse_kv(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            out[k] = float(v)
    return out


def render(results: Mapping[str, object]) -> str:
    return ("CULane-style F1 (x100) by mode\n" + f1_table(results)
            + "\nTuSimple-style scores (total)\n" + tusimple_table(results))
