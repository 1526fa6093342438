import numpy as np
import pytest

from lidarseed.geometry import PointCloud, box_iou, BBox2D
from lidarseed.segmentation import (
    BeamConfig,
    EmptyFrame,
    SegmentationParams,
    build_range_image,
    extract_segments,
    remove_ground,
    segment_range_image,
)
from lidarseed.synth import (
    Scene,
    SceneObject,
    SynthConfig,
    default_beams,
    default_camera,
    gt_boxes_from_mask,
    make_frame,
    render_image,
    simulate_lidar,
)

from .oracles import flood_fill_segments


def small_beams(n_rows=16):
    return BeamConfig.uniform(n_rows, 64, -15.0, 2.0, 60.0)


def test_beam_config_validation(tmp_path):
    with pytest.raises(ValueError):
        BeamConfig(2, 16, np.array([0.1, 0.0]), 1.0)
    with pytest.raises(ValueError):
        BeamConfig(2, 4, np.array([0.0, 0.1]), 1.0)
    b = default_beams()
    b.to_file(tmp_path / "beams.txt")
    back = BeamConfig.from_file(tmp_path / "beams.txt")
    assert np.array_equal(back.elevation_angles, b.elevation_angles) and back.n_cols == b.n_cols


def test_single_point_pixel():
    cfg = small_beams()
    el = cfg.elevation_angles[5]
    p = np.array([[10 * np.cos(el), 0.0, 10 * np.sin(el), 0.5]])
    ri = build_range_image(p, cfg)
    assert ri.occupied.sum() == 1
    assert ri.ranges[ri.occupied][0] == pytest.approx(10.0)


def test_nearer_return_wins():
    cfg = small_beams()
    el = cfg.elevation_angles[3]
    d = np.array([np.cos(el), 0.0, np.sin(el)])
    pts = np.array([[*(7 * d), 0.1], [*(5 * d), 0.2]])
    ri = build_range_image(pts, cfg)
    assert ri.occupied.sum() == 1
    assert ri.ranges[ri.occupied][0] == pytest.approx(5.0)
    assert ri.point_index[ri.occupied][0] == 1


def test_out_of_band_points_counted():
    cfg = small_beams()
    p = np.array([[1.0, 0.0, 5.0, 0.0], [10.0, 0.0, 0.0, 0.0]])  # first is far above the top beam
    ri = build_range_image(p, cfg)
    assert ri.n_outside_fov >= 1


def _scene(objects):
    return Scene(objects, ground_z=-1.5, seed=0)


def _box(x, y, size=(1.0, 1.0, 1.2), oid=1):
    return SceneObject(oid, "box", 1, 0, np.array([x, y]), 0.0, np.array(size), np.array([0.8, 0.2, 0.2]))


def test_flat_plane_is_all_ground():
    cloud, _ = simulate_lidar(_scene([]), default_beams(), np.random.default_rng(0), 0.0, 80.0)
    ri = build_range_image(cloud, default_beams())
    g = remove_ground(ri)
    assert g[ri.occupied].all()


def test_vertical_wall_has_no_ground():
    cfg = small_beams()
    # wall at x = 5 m; every beam hits it, no ground returns
    el = cfg.elevation_angles
    az = cfg.column_azimuths()
    E, A = np.meshgrid(el, az, indexing="ij")
    r = 5.0 / (np.cos(E) * np.cos(A))
    pts = np.stack([r * np.cos(E) * np.cos(A), r * np.cos(E) * np.sin(A), r * np.sin(E), np.zeros_like(r)], -1)
    ri = build_range_image(pts.reshape(-1, 4), cfg)
    assert not remove_ground(ri).any()


def test_ground_angle_range():
    ri = build_range_image(np.array([[5.0, 0, -1.0, 0]]), small_beams())
    with pytest.raises(ValueError):
        remove_ground(ri, 0.0)
    with pytest.raises(ValueError):
        remove_ground(ri, 50.0)


def test_ground_mask_agreement_with_oracle():
    scene = _scene([_box(10.0, 0.0, (2.0, 2.0, 1.6))])
    cloud, src = simulate_lidar(scene, default_beams(), np.random.default_rng(0), 0.01, 80.0)
    ri = build_range_image(cloud, default_beams())
    g = remove_ground(ri)
    occ = ri.occupied
    agree = np.mean(g[occ] == (src[ri.point_index[occ]] == 0))
    assert agree >= 0.97


def test_two_separated_boxes_two_segments():
    scene = _scene([_box(10.0, -2.5, oid=1), _box(10.0, 2.5, oid=2)])
    cloud, src = simulate_lidar(scene, default_beams(), np.random.default_rng(0), 0.01, 80.0)
    ri = build_range_image(cloud, default_beams())
    segs = segment_range_image(ri, remove_ground(ri))
    assert len(segs) == 2
    assert sorted({int(np.bincount(src[s]).argmax()) for s in segs}) == [1, 2]


def test_isolated_return_discarded_and_all_ground_empty():
    cfg = small_beams()
    ri = build_range_image(np.array([[10.0, 0.0, 0.0, 0.0]]), cfg)
    assert segment_range_image(ri, np.zeros_like(ri.occupied)) == []
    assert segment_range_image(ri, ri.occupied.copy()) == []
    with pytest.raises(ValueError):
        segment_range_image(ri, ri.occupied, beta_deg=90)


def test_empty_road_raises():
    cfg = SynthConfig()
    cloud, _ = simulate_lidar(_scene([]), cfg.beams, np.random.default_rng(0), 0.01, 80.0)
    with pytest.raises(EmptyFrame):
        extract_segments(cloud, cfg.camera, cfg.beams)


def test_object_behind_camera_excluded():
    cfg = SynthConfig()
    beams = BeamConfig.uniform(40, 720, -22.0, 3.0, 359.0)
    scene = _scene([_box(-8.0, 4.0, (2.0, 2.0, 1.6))])
    cloud, _ = simulate_lidar(scene, beams, np.random.default_rng(0), 0.01, 80.0)
    ri = build_range_image(cloud, beams)
    assert len(segment_range_image(ri, remove_ground(ri))) == 1
    with pytest.raises(EmptyFrame):
        extract_segments(cloud, cfg.camera, beams)


def test_three_visible_objects_three_proposals():
    cfg = SynthConfig()
    objs = [
        SceneObject(1, "box", 1, 0, np.array([11.0, 3.5]), 0.3, np.array([4.2, 1.8, 1.6]), np.array([0.75, 0.15, 0.15])),
        SceneObject(2, "cylinder", 5, 0, np.array([9.0, -1.0]), 0.0, np.array([0.35, 0.35, 1.0]), np.array([0.9, 0.45, 0.1])),
        SceneObject(3, "capsule", 2, 0, np.array([12.0, -4.5]), 0.0, np.array([0.3, 0.3, 1.7]), np.array([0.15, 0.25, 0.7])),
    ]
    scene = _scene(objs)
    cloud, src = simulate_lidar(scene, cfg.beams, np.random.default_rng(0), 0.01, 80.0)
    _, ids = render_image(scene, cfg.camera)
    gt = gt_boxes_from_mask(scene, ids, src)
    props = extract_segments(cloud, cfg.camera, cfg.beams)
    assert len(props) == 3 and len(gt) == 3
    for g in gt:
        assert max(box_iou(BBox2D(*g.bbox), p.bbox) for p in props) > 0.7


def test_proposals_disjoint_and_order_invariant():
    cfg = SynthConfig()
    pkg = make_frame(cfg, 3, 0)
    props = extract_segments(pkg.cloud, cfg.camera, cfg.beams)
    all_idx = np.concatenate([p.point_indices for p in props])
    assert len(all_idx) == len(np.unique(all_idx))
    assert [p.segment_id for p in props] == list(range(len(props)))
    assert all(len(p) >= 20 for p in props)

    perm = np.random.default_rng(0).permutation(len(pkg.cloud))
    shuffled = PointCloud(pkg.cloud.points[perm], pkg.cloud.frame_id)
    props2 = extract_segments(shuffled, cfg.camera, cfg.beams)
    a = sorted(tuple(p.point_indices) for p in props)
    b = sorted(tuple(np.sort(perm[p.point_indices])) for p in props2)
    assert a == b


@pytest.mark.parametrize("idx", range(3))
def test_matches_flood_fill_reference(idx):
    cfg = SynthConfig()
    pkg = make_frame(cfg, 5, idx)
    ri = build_range_image(pkg.cloud, cfg.beams)
    g = remove_ground(ri)
    got = [list(s) for s in segment_range_image(ri, g)]
    ref = flood_fill_segments(ri.ranges, ri.occupied & ~g, cfg.beams.azimuth_step, cfg.beams.elevation_angles,
                              np.deg2rad(10.0), 20, ri.point_index)
    assert sorted(got) == sorted(ref)


def test_wrap_merges_across_seam():
    beams = BeamConfig.uniform(8, 16, -5.0, 5.0, 360.0)
    # a cylinder of returns all around the sensor at 5 m
    el = beams.elevation_angles
    az = beams.column_azimuths()
    E, A = np.meshgrid(el, az, indexing="ij")
    pts = np.stack([5 * np.cos(E) * np.cos(A), 5 * np.cos(E) * np.sin(A), 5 * np.sin(E), np.zeros_like(E)], -1)
    ri = build_range_image(pts.reshape(-1, 4), beams)
    no_ground = np.zeros_like(ri.occupied)
    assert len(segment_range_image(ri, no_ground, min_segment_points=1, wrap_azimuth=True)) == 1
    assert len(segment_range_image(ri, no_ground, min_segment_points=1, wrap_azimuth=False)) == 1
