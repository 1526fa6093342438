import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarseed.geometry import (
    BBox2D,
    CameraModel,
    Point3,
    PointCloud,
    ScoredBox,
    box_iou,
    class_agnostic_nms,
    iou_matrix,
    nms_indices,
    project_point,
    read_cloud_bin,
    segment_to_bbox,
    write_cloud_bin,
)

from .oracles import iou_ref, nms_ref

coord = st.floats(-500, 500, allow_nan=False)
side = st.floats(0.5, 300, allow_nan=False)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(side), draw(side)
    return BBox2D(x, y, x + w, y + h)


def simple_camera(fx=100.0, cx=50.0, width=100, height=100):
    return CameraModel(fx, fx, cx, cx, width, height, np.eye(3), np.zeros(3))


# ---------------------------------------------------------------- boxes


def test_box_validation():
    with pytest.raises(ValueError):
        BBox2D(1, 0, 1, 5)
    with pytest.raises(ValueError):
        BBox2D(0, 3, 2, 1)
    assert BBox2D(0, 0, 4, 2).area() == 8.0


def test_iou_examples():
    a = BBox2D(0, 0, 10, 10)
    assert box_iou(a, a) == 1.0
    assert box_iou(a, BBox2D(20, 20, 30, 30)) == 0.0
    assert box_iou(a, BBox2D(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)


@given(boxes(), boxes())
def test_iou_symmetric_bounded(a, b):
    v = box_iou(a, b)
    assert v == box_iou(b, a)
    assert 0.0 <= v <= 1.0
    assert box_iou(a, a) == 1.0
    assert v == pytest.approx(iou_ref(a.as_tuple(), b.as_tuple()), rel=1e-12, abs=1e-15)


@given(st.lists(boxes(), min_size=1, max_size=6), st.lists(boxes(), min_size=1, max_size=6))
def test_iou_matrix_matches_scalar(A, B):
    m = iou_matrix(np.array([a.as_array() for a in A]), np.array([b.as_array() for b in B]))
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            assert m[i, j] == pytest.approx(box_iou(a, b), rel=1e-12, abs=1e-15)


def test_clip():
    assert BBox2D(-5, -5, 5, 5).clip(10, 10) == BBox2D(0, 0, 5, 5)
    assert BBox2D(20, 20, 30, 30).clip(10, 10) is None


def test_scored_box_range():
    with pytest.raises(ValueError):
        ScoredBox(BBox2D(0, 0, 1, 1), 1.5, 1)


# ---------------------------------------------------------------- points and camera


def test_point_finite():
    with pytest.raises(ValueError):
        Point3(np.nan, 0, 0)


def test_cloud_bin_roundtrip(tmp_path):
    pts = np.random.default_rng(0).normal(size=(37, 4)).astype(np.float32).astype(np.float64)
    write_cloud_bin(tmp_path / "a.bin", PointCloud(pts, "a"))
    back = read_cloud_bin(tmp_path / "a.bin")
    assert np.array_equal(back.points, pts)
    assert (tmp_path / "a.bin").stat().st_size == 37 * 16


def test_projection_examples():
    cam = simple_camera(fx=100, cx=50)
    assert project_point(Point3(0, 0, 1), cam) == (50.0, 50.0)
    assert project_point(Point3(0, 0, 0), cam) is None
    assert project_point(Point3(1, 0, 2), cam) == (100.0, 50.0)


def test_camera_rejects_improper_rotation():
    R = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        CameraModel(100, 100, 50, 50, 100, 100, R, np.zeros(3))
    with pytest.raises(ValueError):
        CameraModel(100, 100, 50, 50, 100, 100, np.eye(3) * 1.001, np.zeros(3))


def test_camera_file_roundtrip(tmp_path):
    from lidarseed.synth import default_camera

    cam = default_camera()
    cam.to_file(tmp_path / "calib.txt")
    back = CameraModel.from_file(tmp_path / "calib.txt")
    assert np.array_equal(back.R, cam.R) and np.array_equal(back.t, cam.t)
    assert (back.fx, back.cy, back.width, back.height) == (cam.fx, cam.cy, cam.width, cam.height)


def test_segment_to_bbox_visibility():
    cam = simple_camera()
    assert segment_to_bbox(np.array([[0.0, 0.0, 2.0]]), cam) is None
    assert segment_to_bbox(np.array([[0.0, 0.0, -2.0]] * 10), cam) is None


def test_cube_box_matches_vertex_projection():
    cam = simple_camera(fx=80, cx=50)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.3, 0.3, size=(500, 3)) + [0.1, -0.05, 3.0]
    box = segment_to_bbox(pts, cam)
    u = 80 * pts[:, 0] / pts[:, 2] + 50
    v = 80 * pts[:, 1] / pts[:, 2] + 50
    assert box.as_tuple() == pytest.approx((u.min(), v.min(), u.max(), v.max()), abs=1e-9)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_box_contains_in_image_projections(seed):
    cam = simple_camera()
    rng = np.random.default_rng(seed)
    pts = rng.normal([0, 0, 2], [1.0, 1.0, 1.5], size=(40, 3))
    box = segment_to_bbox(pts, cam, min_visible_points=1)
    uv, front = cam.project(pts)
    inside = front & cam.in_image(uv)
    if box is None:
        return
    assert np.all(uv[inside, 0] >= box.x_min) and np.all(uv[inside, 0] <= box.x_max)
    assert np.all(uv[inside, 1] >= box.y_min) and np.all(uv[inside, 1] <= box.y_max)


# ---------------------------------------------------------------- NMS


def test_nms_examples():
    b = BBox2D(0, 0, 10, 10)
    one = [ScoredBox(b, 0.5, 3)]
    assert class_agnostic_nms(one, 0.3) == one
    pair = [ScoredBox(b, 0.8, 1), ScoredBox(b, 0.9, 2)]
    assert class_agnostic_nms(pair, 0.3) == [pair[1]]
    with pytest.raises(ValueError):
        nms_indices(np.zeros((0, 4)), np.zeros(0), 1.0)


def _random_boxes(rng, n):
    xy = rng.uniform(0, 200, size=(n, 2))
    wh = rng.uniform(5, 60, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


@pytest.mark.parametrize("seed", range(20))
def test_nms_matches_reference(seed):
    rng = np.random.default_rng(seed)
    B = _random_boxes(rng, 50)
    s = np.round(rng.uniform(size=50), 1)  # coarse scores force ties
    got = nms_indices(B, s, 0.3).tolist()
    assert got == nms_ref([tuple(b) for b in B], list(s), 0.3)


@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_nms_subset_idempotent_separated(seed, thr):
    rng = np.random.default_rng(seed)
    dets = [ScoredBox(BBox2D.from_array(b), float(sc), 1 + i % 3)
            for i, (b, sc) in enumerate(zip(_random_boxes(rng, 30), rng.uniform(size=30)))]
    out = class_agnostic_nms(dets, thr)
    assert set(map(id, out)) <= set(map(id, dets))
    assert class_agnostic_nms(out, thr) == out
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            assert box_iou(out[i].bbox, out[j].bbox) <= thr
