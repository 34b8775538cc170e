import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgfusion.data import (
    AffineParams,
    PersonAnnotation,
    PoseDataset,
    apply_affine,
    batch,
    crop_person,
    load_annotations,
    load_image,
    make_activity_tensor,
    make_heatmaps,
    prepare_sample,
    save_image,
    split_dataset,
    transform_joints,
    write_annotations,
)
from hgfusion.errors import IngestionError, UsageError, ValidationError
from hgfusion.evaluation import heatmap_peaks
from hgfusion.mpii import NUM_JOINTS

from pathlib import Path

FIXTURES = Path(__file__).parent / "fixtures"


def annotation(**kw):
    base = dict(
        image_path="x.png",
        center=(256.0, 256.0),
        scale=1.28,
        joints=np.full((NUM_JOINTS, 2), 256.0),
        visible=np.ones(NUM_JOINTS, dtype=bool),
        activity_id=0,
        head_length=30.0,
    )
    base.update(kw)
    return PersonAnnotation(**base).validate()


def record(**kw):
    base = annotation().to_json()
    base.update(kw)
    return base


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


# ---------------------------------------------------------------- ingestion

class TestLoadAnnotations:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text("")
        assert load_annotations(p) == []

    def test_activity_21_rejected_with_line(self, tmp_path):
        p = write_lines(tmp_path / "a.jsonl", [record(), record(activity_id=21)])
        with pytest.raises(ValidationError, match=r":2:.*activity_id"):
            load_annotations(p)

    @pytest.mark.parametrize("field,value", [("scale", 0), ("head_length", -1.0), ("visible", [2] * 16),
                                             ("joints", [[0, 0]] * 15), ("center", [1.0])])
    def test_field_named_in_error(self, tmp_path, field, value):
        p = write_lines(tmp_path / "a.jsonl", [record(**{field: value})])
        with pytest.raises(ValidationError, match=field):
            load_annotations(p)

    def test_missing_field(self, tmp_path):
        rec = record()
        del rec["head_length"]
        with pytest.raises(ValidationError, match="head_length"):
            load_annotations(write_lines(tmp_path / "a.jsonl", [rec]))

    def test_parse_error_has_line(self, tmp_path):
        p = tmp_path / "a.jsonl"
        p.write_text(json.dumps(record()) + "\n{not json\n")
        with pytest.raises(IngestionError, match=":2:"):
            load_annotations(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError):
            load_annotations(tmp_path / "nope.jsonl")

    def test_golden_fixture(self):
        anns = load_annotations(FIXTURES / "golden_annotations.jsonl")
        assert len(anns) == 5
        a, b, c, d, e = anns
        assert a.image_path == "img/a.png" and a.center == (120.0, 200.0) and a.scale == 1.5
        assert a.activity_id == 3 and a.head_length == 40.0
        assert a.joints[0].tolist() == [100.0, 210.0] and a.joints[15].tolist() == [145.0, 172.5]
        assert b.center == (64.5, 80.25) and b.visible.tolist() == [True] * 8 + [False] * 8
        assert c.activity_id == 20 and c.visible.tolist() == [False, True] * 8
        assert d.scale == 0.25 and d.head_length == 7.75 and d.joints[0].tolist() == [-7.0, 20.0]
        assert not e.visible.any() and e.activity_id == 7

    def test_write_round_trip(self, tmp_path):
        anns = load_annotations(FIXTURES / "golden_annotations.jsonl")
        write_annotations(anns, tmp_path / "out.jsonl")
        assert load_annotations(tmp_path / "out.jsonl") == anns

    def test_joints_outside_image_allowed(self):
        annotation(joints=np.full((NUM_JOINTS, 2), -50.0))


class TestSplit:
    def test_sizes_small(self):
        assert tuple(map(len, split_dataset(list(range(10)), 0))) == (8, 1, 1)

    def test_sizes_full_split(self):
        assert tuple(map(len, split_dataset(list(range(22500)), 0))) == (18000, 2250, 2250)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 300), st.integers(0, 10**6))
    def test_partition_and_determinism(self, n, seed):
        parts = split_dataset(list(range(n)), seed)
        assert parts == split_dataset(list(range(n)), seed)
        flat = [x for p in parts for x in p]
        assert sorted(flat) == list(range(n))
        assert len(parts[0]) == math.floor(0.8 * n) and len(parts[1]) == math.floor(0.1 * n)

    def test_empty(self):
        with pytest.raises(UsageError):
            split_dataset([], 0)


# ---------------------------------------------------------------- geometry

@pytest.fixture
def raster():
    return np.random.default_rng(3).uniform(0, 1, (512, 512, 3))


class TestCrop:
    def test_identity_window_is_plain_copy(self, raster):
        # window of 200 * 1.28 = 256 px onto 256 px: unit scale, integer offset
        crop, _, _ = crop_person(raster, annotation(), AffineParams())
        np.testing.assert_allclose(crop, raster[128:384, 128:384], atol=1e-12)

    def test_half_resize(self, raster):
        crop, _, _ = crop_person(raster, annotation(scale=2.56), AffineParams())
        np.testing.assert_allclose(crop, raster[::2, ::2], atol=1e-12)

    def test_window_outside_is_black(self, raster):
        crop, _, _ = crop_person(raster, annotation(center=(5000.0, -4000.0)), AffineParams())
        assert not crop.any()

    def test_rotation_90_marker_moves_above_centre(self):
        img = np.zeros((256, 256, 3))
        img[128, 168] = 1.0  # 40 px right of the centre pixel
        crop, _, _ = crop_person(img, annotation(center=(128.0, 128.0)), AffineParams(rotation=90.0))
        y, x = np.unravel_index(crop[..., 0].argmax(), crop.shape[:2])
        assert (x, y) == (128, 88)

    def test_deterministic(self, raster):
        aug = AffineParams(rotation=13.0, scale_jitter=0.9)
        a, _, _ = crop_person(raster, annotation(), aug)
        b, _, _ = crop_person(raster, annotation(), aug)
        assert np.array_equal(a, b)

    def test_clamps_out_of_range(self):
        a = AffineParams(rotation=90.0, scale_jitter=3.0).clamped()
        assert (a.rotation, a.scale_jitter) == (30.0, 1.25)

    def test_bad_raster(self):
        with pytest.raises(IngestionError):
            crop_person(np.zeros((4, 4)), annotation(), AffineParams())


class TestTransformJoints:
    def test_identity(self):
        pts = np.random.default_rng(0).uniform(0, 255, (16, 2))
        mapped, inside = transform_joints(pts, np.eye(3))
        np.testing.assert_array_equal(mapped, pts)
        assert inside.all()

    def test_window_corner_maps_to_origin(self, raster):
        ann = annotation(scale=1.0)  # 200 px window centred at (256, 256)
        _, affine, _ = crop_person(raster, ann, AffineParams())
        mapped, inside = transform_joints(np.array([[156.0, 156.0], [356.0, 356.0]]), affine)
        np.testing.assert_allclose(mapped, [[0, 0], [256, 256]], atol=1e-9)
        assert inside.tolist() == [True, False]

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-30, 30), st.floats(0.75, 1.25), st.integers(0, 10**6))
    def test_inverse_round_trip(self, rot, jit, seed):
        from hgfusion.data import crop_affine

        rng = np.random.default_rng(seed)
        affine = crop_affine(rng.uniform(0, 500, 2), rng.uniform(0.3, 3), AffineParams(rot, jit))
        pts = rng.uniform(-100, 600, (16, 2))
        back = apply_affine(apply_affine(pts, affine), np.linalg.inv(affine))
        np.testing.assert_allclose(back, pts, atol=1e-9)


class TestHeatmaps:
    def test_centre_peak(self):
        joints = np.full((16, 2), 128.0)
        hm = make_heatmaps(joints, np.ones(16, bool), np.ones(16, bool))
        assert hm.shape == (1, 16, 64, 64)
        assert hm[0, 0, 32, 32] == 1.0 and hm[0, 0].max() == 1.0
        assert hm[0, 0, 32, 33] == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert hm[0, 0, 32, 33] == pytest.approx(0.6065, abs=1e-4)

    def test_invisible_and_out_of_crop_zero(self):
        joints = np.full((16, 2), 100.0)
        vis = np.ones(16, bool)
        vis[3] = False
        inside = np.ones(16, bool)
        inside[5] = False
        hm = make_heatmaps(joints, inside, vis)
        assert not hm[0, 3].any() and not hm[0, 5].any() and hm[0, 4].max() == 1.0

    def test_matches_naive_gaussian_and_support(self):
        from oracles import gaussian_heatmap_naive

        rng = np.random.default_rng(5)
        joints = rng.uniform(0, 256, (16, 2))
        hm = make_heatmaps(joints, np.ones(16, bool), np.ones(16, bool))
        for j in range(16):
            cx, cy = (joints[j] // 4).astype(int)
            np.testing.assert_allclose(hm[0, j], gaussian_heatmap_naive(cx, cy, 64), atol=1e-15)
            ys, xs = np.nonzero(hm[0, j])
            assert np.ptp(ys) <= 6 and np.ptp(xs) <= 6 and hm[0, j].max() == 1.0


class TestActivityTensor:
    def test_id_zero_sums(self):
        t = make_activity_tensor(0)
        assert t.shape == (1, 21, 64, 64)
        assert t[0, 0].sum() == 4096 and t.sum() == 4096

    def test_orthogonal_and_one_hot(self):
        ts = [make_activity_tensor(a, side=8) for a in range(21)]
        for i in range(21):
            np.testing.assert_array_equal(ts[i][0].sum(axis=0), 1.0)
            for j in range(21):
                assert (ts[i] * ts[j]).sum() == (64 if i == j else 0)

    @pytest.mark.parametrize("bad", [-1, 21])
    def test_out_of_range(self, bad):
        with pytest.raises(ValidationError):
            make_activity_tensor(bad)


# ---------------------------------------------------------------- samples

@pytest.fixture
def dataset(tmp_path):
    rng = np.random.default_rng(9)
    anns = []
    for i in range(3):
        save_image(rng.uniform(0, 1, (64, 64, 3)), tmp_path / f"{i}.png")
        anns.append(annotation(image_path=f"{i}.png", center=(32.0, 32.0), scale=0.32,
                               joints=rng.uniform(8, 56, (16, 2)), activity_id=i))
    write_annotations(anns, tmp_path / "a.jsonl")
    return PoseDataset.from_file(tmp_path / "a.jsonl", output_side=64)


def test_image_round_trip(tmp_path):
    pixels = np.random.default_rng(1).integers(0, 256, (5, 7, 3)) / 255.0
    save_image(pixels, tmp_path / "p.png")
    np.testing.assert_array_equal(load_image(tmp_path / "p.png"), pixels)


def test_unreadable_image(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(IngestionError):
        load_image(tmp_path / "bad.png")


def test_sample_shapes_and_invariants(dataset):
    s = dataset.sample(1)
    assert s.image.shape == (1, 3, 64, 64) and s.target_heatmaps.shape == (1, 16, 16, 16)
    assert s.activity_tensor.shape == (1, 21, 16, 16) and s.activity_tensor[0, 1].all()
    assert 0 <= s.image.min() and s.image.max() <= 1
    for j in range(16):
        assert s.target_heatmaps[0, j].max() == (1.0 if s.in_crop[j] and s.visible[j] else 0.0)


def test_batch_and_unbatch(dataset):
    samples = [dataset.sample(i) for i in range(3)]
    b = batch(samples)
    assert b.images.shape == (3, 3, 64, 64) and len(b) == 3
    for s, (img, hm, act) in zip(samples, __import__("hgfusion.data", fromlist=["unbatch"]).unbatch(b)):
        assert np.array_equal(img, s.image) and np.array_equal(hm, s.target_heatmaps)
        assert np.array_equal(act, s.activity_tensor)
    single = batch(samples[:1])
    assert np.array_equal(single.images, samples[0].image)


def test_batch_of_eight_full_shape():
    img = np.zeros((300, 300, 3))
    samples = [prepare_sample(img, annotation(center=(150.0, 150.0))) for _ in range(8)]
    assert batch(samples).images.shape == (8, 3, 256, 256)


def test_batch_shape_mismatch(dataset):
    other = prepare_sample(np.zeros((64, 64, 3)), annotation(center=(32.0, 32.0), scale=0.32), output_side=32)
    with pytest.raises(UsageError):
        batch([dataset.sample(0), other])
    with pytest.raises(UsageError):
        batch([])


@settings(max_examples=40, deadline=None)
@given(st.floats(-30, 30), st.floats(0.75, 1.25), st.integers(0, 10**6))
def test_heatmap_peak_back_projects_within_a_cell(rot, jit, seed):
    rng = np.random.default_rng(seed)
    ann = annotation(center=(256.0, 256.0), joints=rng.uniform(180, 332, (16, 2)))
    aug = AffineParams(rot, jit)
    from hgfusion.data import crop_affine

    affine = crop_affine(ann.center, ann.scale, aug)
    crop_pts, inside = transform_joints(ann.joints, affine)
    hm = make_heatmaps(crop_pts, inside, ann.visible)
    cells, _ = heatmap_peaks(hm)
    back = apply_affine(cells[0] * 4 + 2, np.linalg.inv(affine))
    err = np.hypot(*(back - ann.joints).T)
    assert np.all(err[inside] <= 4.0)


def test_prepare_sample_clamps_augmentation(raster):
    ann = annotation()
    wild = prepare_sample(raster, ann, AffineParams(rotation=75.0, scale_jitter=2.0))
    edge = prepare_sample(raster, ann, AffineParams(rotation=30.0, scale_jitter=1.25))
    assert np.array_equal(wild.image, edge.image) and np.array_equal(wild.affine, edge.affine)
