import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssowod.data import (
    AugmentationSpec, DatasetManifest, ImageRecord, InstanceAnnotation, SyntheticConfig, SyntheticShapes, augment,
    augment_sample, generate_task_splits, parse_coco, parse_dota, partial_label_split, synthetic_shapes,
)
from ssowod.data.augment import ABBREVIATIONS, OPS
from ssowod.data.manifest import fully_labeled
from ssowod.data.splits import assert_no_leakage
from ssowod.errors import IntegrityError, LeakageError, ParseError, ScheduleCoverageError
from ssowod.geometry import Box, OrientedBox, box_to_corners
from ssowod.schedule import OWOD_S_SPLIT1, TaskSchedule


# -- COCO ---------------------------------------------------------------------

def _coco(tmp_path, images, anns, cats=({"id": 1, "name": "a"},)):
    p = tmp_path / "coco.json"
    p.write_text(json.dumps({"images": images, "annotations": anns, "categories": list(cats)}))
    return p


def test_coco_single_instance(tmp_path):
    p = _coco(tmp_path, [{"id": 1, "width": 100, "height": 50}],
              [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 5, 20, 10]}])
    m = parse_coco(p)
    (a,) = m.instances(1)
    assert (a.box.cx, a.box.cy, a.box.w, a.box.h) == pytest.approx((0.2, 0.2, 0.2, 0.2))


def test_coco_no_annotations(tmp_path):
    m = parse_coco(_coco(tmp_path, [{"id": 1, "width": 10, "height": 10}, {"id": 2, "width": 10, "height": 10}], []))
    assert len(m.images) == 2 and list(m.all_instances()) == []


def test_coco_hand_built_fixture(tmp_path):
    images = [{"id": i, "width": 200, "height": 100} for i in (1, 2, 3)]
    cats = [{"id": 7, "name": "car"}, {"id": 3, "name": "boat"}]
    anns = [
        {"id": 1, "image_id": 1, "category_id": 7, "bbox": [0, 0, 100, 50]},
        {"id": 2, "image_id": 1, "category_id": 3, "bbox": [100, 50, 100, 50]},
        {"id": 3, "image_id": 2, "category_id": 7, "bbox": [50, 25, 20, 10]},
        {"id": 4, "image_id": 2, "category_id": 7, "bbox": [180, 90, 40, 40]},  # clipped to 20 x 10
        {"id": 5, "image_id": 3, "category_id": 3, "bbox": [0, 0, 200, 100]},
        {"id": 6, "image_id": 3, "category_id": 3, "bbox": [10, 10, 10, 10]},
        {"id": 7, "image_id": 3, "category_id": 7, "bbox": [40, 20, 60, 40]},
    ]
    m = parse_coco(_coco(tmp_path, images, anns, cats))
    assert m.categories == ("boat", "car")  # ascending category id
    assert sum(1 for _ in m.all_instances()) == 7
    assert m.class_counts() == {1: 4, 0: 3}
    clipped = m.instances(2)[1].box
    assert (clipped.cx, clipped.cy, clipped.w, clipped.h) == pytest.approx((0.95, 0.95, 0.1, 0.1))
    b = m.instances(1)[1].box
    assert (b.cx, b.cy, b.w, b.h) == pytest.approx((0.75, 0.75, 0.5, 0.5))


def test_coco_errors(tmp_path):
    with pytest.raises(IntegrityError, match="missing image"):
        parse_coco(_coco(tmp_path, [], [{"id": 1, "image_id": 9, "category_id": 1, "bbox": [0, 0, 1, 1]}]))
    bad = tmp_path / "bad.json"
    bad.write_text('{"images": [\n  {"id": 1,,}\n]}')
    with pytest.raises(ParseError, match=r"bad.json:2"):
        parse_coco(bad)


# -- DOTA ---------------------------------------------------------------------

def _dota(tmp_path, lines, name="P0001"):
    d = tmp_path / "labels"
    d.mkdir(exist_ok=True)
    (d / f"{name}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    return d


def test_dota_axis_aligned(tmp_path):
    d = _dota(tmp_path, ["imagesource:GoogleEarth", "gsd:0.1", "10 10 50 10 50 30 10 30 plane 0"])
    m = parse_dota(d, default_size=(100, 100))
    (a,) = m.instances(0)
    assert isinstance(a.box, OrientedBox) and a.box.theta == 0.0
    assert (a.box.cx, a.box.cy, a.box.w, a.box.h) == pytest.approx((0.3, 0.2, 0.4, 0.2))


def test_dota_rotated_thirty_degrees(tmp_path):
    b = OrientedBox(0.5, 0.5, 0.3, 0.1, math.radians(30))
    pix = box_to_corners(b) * 1000
    d = _dota(tmp_path, [" ".join(f"{v:.6f}" for v in pix.flatten()) + " ship 1"])
    (a,) = parse_dota(d, default_size=(1000, 1000)).instances(0)
    assert a.box.theta == pytest.approx(math.radians(30), abs=1e-6)
    # re-emitting corners reproduces the input within 1e-6 of image size
    got = box_to_corners(a.box)
    assert np.abs(np.sort(got, axis=0) - np.sort(pix / 1000, axis=0)).max() < 1e-6


def test_dota_empty_file(tmp_path):
    m = parse_dota(_dota(tmp_path, []), default_size=(64, 64))
    assert len(m.images) == 1 and m.instances(0) == ()


def test_dota_bad_token_names_line(tmp_path):
    d = _dota(tmp_path, ["1 2 3 4 5 6 7 8 a 0", "1 2 x 4 5 6 7 8 a 0"])
    with pytest.raises(ParseError, match=r"P0001.txt:2"):
        parse_dota(d, default_size=(10, 10))


# -- manifests ----------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    m, _ = synthetic_shapes(SyntheticConfig(num_images=10, oriented=True, seed=3))
    m = partial_label_split(m, 0.5, seed=1)
    m.save(tmp_path / "m.json")
    back = DatasetManifest.load(tmp_path / "m.json")
    assert back == m


def test_manifest_rejects_bad_partition():
    img = ImageRecord(0, 10, 10)
    with pytest.raises(IntegrityError):
        DatasetManifest(("a",), (img,), {}, labeled_ids=frozenset({0}), unlabeled_ids=frozenset({0}))


def test_unlabeled_images_expose_no_training_labels():
    m, _ = synthetic_shapes(SyntheticConfig(num_images=20, seed=0))
    m = partial_label_split(m, 0.5)
    for i in m.unlabeled_ids:
        assert m.training_annotations(i) == ()
    for i in m.labeled_ids:
        assert m.training_annotations(i) == m.instances(i)


# -- partial labeling ---------------------------------------------------------

def _check_bounds(m, fraction):
    per_image_max = Counter()
    totals = m.class_counts()
    for i in m.image_ids:
        for c, n in Counter(a.label for a in m.instances(i)).items():
            per_image_max[c] = max(per_image_max[c], n)
    labeled = m.class_counts(m.labeled_ids)
    for c, n in totals.items():
        p = labeled.get(c, 0) / n
        assert fraction - 1e-12 <= p <= fraction + per_image_max[c] / n + 1e-12, (c, p)


def test_fraction_one_labels_everything():
    m, _ = synthetic_shapes(SyntheticConfig(num_images=30, seed=0))
    s = partial_label_split(m, 1.0)
    assert s.unlabeled_ids == frozenset() and s.labeled_ids == frozenset(m.image_ids)


def test_split_counting_oracle():
    m, _ = synthetic_shapes(SyntheticConfig(num_classes=4, num_images=160, min_instances=1, max_instances=3, seed=5))
    s = partial_label_split(m, 0.5, seed=0)
    _check_bounds(s, 0.5)
    labeled, totals = s.class_counts(s.labeled_ids), s.class_counts()
    for c in totals:
        assert abs(labeled[c] - totals[c] / 2) <= 3 + 1
    meta = s.metadata
    assert meta["labeled_instances"] == sum(labeled.values())
    assert set(meta["achieved_proportions"]) == {s.categories[c] for c in totals}


@given(st.integers(0, 10_000), st.sampled_from([0.1, 0.25, 0.5, 0.8]))
@settings(max_examples=15, deadline=None)
def test_split_bounds_property(seed, fraction):
    m, _ = synthetic_shapes(SyntheticConfig(num_images=40, max_instances=4, seed=seed))
    s = partial_label_split(m, fraction, seed=seed)
    assert s.labeled_ids | s.unlabeled_ids == frozenset(m.image_ids)
    assert not (s.labeled_ids & s.unlabeled_ids)
    _check_bounds(s, fraction)


def test_split_is_deterministic():
    m, _ = synthetic_shapes(SyntheticConfig(num_images=40, seed=2))
    assert partial_label_split(m, 0.3, seed=4) == partial_label_split(m, 0.3, seed=4)


# -- task splits --------------------------------------------------------------

def _two_task():
    return TaskSchedule.from_groups([["square", "circle"], ["triangle", "cross"]], [1.0, 0.5])


def test_task_splits_label_only_current_group():
    m, _ = synthetic_shapes(SyntheticConfig(num_images=60, seed=1))
    sched = TaskSchedule.from_groups([["square"], ["circle", "triangle", "cross"]])
    t1, _ = generate_task_splits(m, sched)
    assert {a.label for i in t1.labeled_ids for a in t1.training_annotations(i)} == {m.class_id("square")}


def test_task_split_counts_match_class_totals():
    m, _ = synthetic_shapes(SyntheticConfig(num_images=80, seed=1))
    totals = m.class_counts()
    splits = generate_task_splits(m, _two_task())
    for task, tm in zip(_two_task().tasks, splits):
        ids = {m.class_id(c) for c in task.classes}
        assert tm.class_counts() == {c: n for c, n in totals.items() if c in ids}


def test_no_leakage_across_random_manifests():
    for seed in range(10):
        m, _ = synthetic_shapes(SyntheticConfig(num_images=30, seed=seed))
        for t, tm in enumerate(generate_task_splits(m, _two_task(), seed=seed), start=1):
            assert_no_leakage(tm, _two_task(), t)


def test_leakage_detector_fires():
    m, _ = synthetic_shapes(SyntheticConfig(num_images=30, seed=0))
    with pytest.raises(LeakageError):
        assert_no_leakage(m, _two_task(), 1)


def test_schedule_coverage_error_names_classes():
    m, _ = synthetic_shapes(SyntheticConfig(num_images=30, seed=0))
    with pytest.raises(ScheduleCoverageError, match="cross"):
        generate_task_splits(m, TaskSchedule.from_groups([["square", "circle"], ["triangle"]]))


def test_owod_s_split1_grouping():
    assert OWOD_S_SPLIT1.tasks[0].classes == ("SV", "LV", "SH", "PL", "HC", "HA", "SP", "GTF", "TC")
    assert OWOD_S_SPLIT1.tasks[1].classes == ("SBF", "BC", "BD", "BR", "RA", "ST")


# -- augmentation -------------------------------------------------------------

def _img(seed=0):
    return np.random.default_rng(seed).random((16, 16, 3)).astype(np.float32)


def test_augment_identity_when_disabled():
    x = _img()
    assert np.array_equal(augment(x, AugmentationSpec(enabled=frozenset())), x)


def test_greyscale_equal_channels():
    y = augment(_img(), AugmentationSpec(enabled=frozenset({"greyscale"}), params={"greyscale": {"p": 1.0}}))
    assert np.array_equal(y[..., 0], y[..., 1]) and np.array_equal(y[..., 1], y[..., 2])


def test_augment_deterministic():
    spec = AugmentationSpec.from_abbreviations(["CJ", "GB", "GR", "PS", "SL"], seed=11)
    assert np.array_equal(augment(_img(), spec), augment(_img(), spec))


def test_augment_keeps_geometry_for_every_op():
    anns = (InstanceAnnotation(0, 1, Box(0.3, 0.4, 0.2, 0.1)), InstanceAnnotation(0, 0, OrientedBox(0.6, 0.6, 0.2, 0.1, 0.3)))
    for op in OPS:
        _, out = augment_sample(_img(), anns, AugmentationSpec(enabled=frozenset({op}), params={op: {"p": 1.0}}))
        assert out == anns
    assert set(ABBREVIATIONS.values()) == set(OPS)


# -- synthetic shapes ---------------------------------------------------------

def test_synthetic_single_shape_tight_box():
    gen = SyntheticShapes(SyntheticConfig(num_images=1, min_instances=1, max_instances=1, image_size=64, seed=0))
    m = gen.manifest()
    (a,) = m.instances(0)
    img = gen.render(m.images[0].seed)
    bg = np.median(img.reshape(-1, 3), axis=0)
    fg = np.abs(img - bg).max(-1) > 0.25
    ys, xs = np.nonzero(fg)
    x0, x1 = (xs.min()) / 64, (xs.max() + 1) / 64
    y0, y1 = (ys.min()) / 64, (ys.max() + 1) / 64
    b = a.box
    assert abs(x0 - (b.cx - b.w / 2)) <= 2 / 64 and abs(x1 - (b.cx + b.w / 2)) <= 2 / 64
    assert abs(y0 - (b.cy - b.h / 2)) <= 2 / 64 and abs(y1 - (b.cy + b.h / 2)) <= 2 / 64


def test_synthetic_deterministic():
    cfg = SyntheticConfig(num_images=10, seed=4)
    assert synthetic_shapes(cfg)[0] == synthetic_shapes(cfg)[0]


def test_synthetic_class_frequencies_near_uniform():
    m, _ = synthetic_shapes(SyntheticConfig(num_classes=4, num_images=200, seed=0))
    counts = m.class_counts()
    mean = sum(counts.values()) / 4
    assert all(abs(n - mean) <= 0.1 * mean for n in counts.values()), counts
