import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lanegeo.data import (DASH_PERIOD, MODES, LaneCurve, SceneSpec, dataset_manifest, generate, load_split,
                          mode_counts, read_manifest)
from lanegeo.errors import SpecError
from lanegeo.pgm import decode_pgm, encode_pgm


def test_lane_count_validated():
    with pytest.raises(SpecError):
        SceneSpec(0, lanes=())
    curves = tuple(LaneCurve(i, (0.1 * i, 0, 0), 0.3) for i in range(1, 6))
    with pytest.raises(SpecError):
        SceneSpec(0, lanes=curves)


def test_same_seed_same_sample():
    a = generate(SceneSpec.random(5, "occlusion"))
    b = generate(SceneSpec.random(5, "occlusion"))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.gt_mask, b.gt_mask)


@pytest.mark.parametrize("mode", MODES)
def test_corruption_never_touches_labels(mode):
    clean = generate(SceneSpec.random(9, "normal"))
    spec = SceneSpec.random(9, "normal")
    corrupted = generate(SceneSpec(spec.seed, spec.img_h, spec.img_w, spec.lanes, mode, spec.noise, spec.horizon))
    assert np.array_equal(clean.gt_mask, corrupted.gt_mask)
    assert [p.as_tuples() for p in clean.gt_points] == [p.as_tuples() for p in corrupted.gt_points]
    assert corrupted.image.min() >= 0 and corrupted.image.max() <= 1


def test_occluder_is_gray_and_still_labelled():
    for seed in range(20):
        s = generate(SceneSpec.random(seed, "occlusion", noise=0.0))
        gray = np.all(np.isclose(s.image, 128 / 255, atol=1 / 255), axis=0)
        hidden = gray & (s.gt_mask > 0)
        if hidden.any():
            return
    pytest.fail("no occluded lane pixels found")


def test_dashed_vertical_lane_is_half_visible():
    curve = LaneCurve(2, (0.5, 0.0, 0.0), 0.25)
    s = generate(SceneSpec(3, lanes=(curve,), mode="dashed", noise=0.0))
    gt_rows = np.unique(np.argwhere(s.gt_mask == 2)[:, 0])
    vis_rows = np.unique(np.argwhere(s.visible_mask)[:, 0])
    assert abs(len(vis_rows) - len(gt_rows) / 2) <= DASH_PERIOD / 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(MODES))
def test_lanes_are_row_functions_and_ordered(seed, mode):
    s = generate(SceneSpec.random(seed, mode))
    bottoms = []
    for ps in s.gt_points:
        rows = ps.points[:, 0]
        span = np.unique(rows)
        assert np.array_equal(span, np.arange(span[0], span[-1] + 1))  # connected in rows
        per_row = {r: ps.points[rows == r, 1] for r in span}
        assert all(c.max() - c.min() <= 1 for c in per_row.values())  # one stroke per row
        bottoms.append(per_row[span[-1]].mean())
        assert set(map(tuple, np.argwhere(s.gt_mask == ps.lane_id))) <= set(ps.as_tuples())
    assert bottoms == sorted(bottoms)  # ids increase left to right


def test_mode_counts():
    assert mode_counts(32, {m: 1 for m in MODES[:4]}) == {m: 8 for m in MODES[:4]}
    assert sum(mode_counts(7, {"normal": 1, "dashed": 2}).values()) == 7


def test_manifest_empty(tmp_path):
    path = dataset_manifest(tmp_path, 0, {"normal": 1})
    assert path.read_text() == ""
    assert not (tmp_path / "train").exists()


def test_manifest_integrity_and_round_trip(tmp_path):
    path = dataset_manifest(tmp_path, 8, {"normal": 1, "occlusion": 1}, seed=4)
    entries = read_manifest(path)
    assert len(entries) == 8
    for e in entries:
        for p in (e.image_path, e.mask_path, e.points_path):
            assert (tmp_path / p).is_file()
    from lanegeo.data import sample_seed

    loaded = load_split(tmp_path, "train")
    fresh = generate(SceneSpec.random(sample_seed(4, "train", 1), loaded[1].mode))
    assert np.array_equal(loaded[1].image, fresh.image)
    assert np.array_equal(loaded[1].gt_mask, fresh.gt_mask)
    assert [p.as_tuples() for p in loaded[1].gt_points] == [p.as_tuples() for p in fresh.gt_points]


def test_manifest_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    dataset_manifest(a, 4, {"dashed": 1}, seed=1)
    dataset_manifest(b, 4, {"dashed": 1}, seed=1)
    for f in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_pgm_round_trip_and_comments():
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7)).astype(np.uint8)
    assert np.array_equal(decode_pgm(encode_pgm(img)), img)
    blob = b"P5\n# made by hand\n2 1\n255\n" + bytes([3, 250])
    assert decode_pgm(blob).tolist() == [[3, 250]]
    with pytest.raises(ValueError):
        decode_pgm(b"P2\n1 1\n255\n0")
