import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_map
from splatmap.core import CameraModel, Pose, axis_angle_quat
from splatmap.dataset import project_pixels, project_sparse_depth
from splatmap.errors import ConfigurationError
from splatmap.keyframes import (Keyframe, KeyframeQueue, filter_points_by_visibility, overlap_ratio,
                                rotation_angle, sharpness, should_admit, visibility_keep_mask)
from splatmap.raster import render
from splatmap.voxels import ColoredPoint

CAM = CameraModel(50.0, 50.0, 49.5, 39.5, 100, 80)


def kf(i=0, pose=None, depth=None, budget=60, cam=CAM):
    return Keyframe(id=i, pose=pose or Pose.identity(), color_image=np.zeros((cam.height, cam.width, 3)),
                    sparse_depth=np.zeros(cam.shape) if depth is None else depth, remaining_iters=budget)


def plane_depth(z: float, cam=CAM, pose=None) -> np.ndarray:
    """Sparse depth of a fronto-parallel plane densely sampled with LiDAR points."""
    xs, ys = np.meshgrid(np.linspace(-12, 12, 400), np.linspace(-10, 10, 300))
    pts = np.stack([xs.ravel(), ys.ravel(), np.full(xs.size, z)], axis=1)
    return project_sparse_depth(pts, pose or Pose.identity(), cam)


# --------------------------------------------------------------------------
# admission

def test_identical_poses_not_admitted():
    p = Pose(axis_angle_quat([0, 1, 0], 0.3), [1, 2, 3])
    assert not should_admit(p, p, 0.1, 0.1)


def test_translation_admits():
    assert should_admit(Pose(translation=[0.15, 0, 0]), Pose.identity(), 0.1, 0.1)


def test_small_motion_not_admitted():
    cand = Pose(axis_angle_quat([0, 0, 1], 0.05), [0, 0, 0])
    cand = Pose(cand.rotation, -cand.rotation_matrix() @ np.array([0.05, 0, 0]))  # centre moves 0.05 m
    assert not should_admit(cand, Pose.identity(), 0.1, 0.1)


def test_rotation_admits():
    assert should_admit(Pose(axis_angle_quat([1, 0, 0], 0.2)), Pose.identity(), 0.1, 0.1)


def test_admission_thresholds_must_be_positive():
    with pytest.raises(ConfigurationError):
        should_admit(Pose.identity(), Pose.identity(), 0.0, 0.1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.floats(0, 3),
       st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_admission_symmetric(axis, angle, t1, t2):
    if np.linalg.norm(axis) < 1e-3:
        axis = [0, 0, 1]
    a = Pose(axis_angle_quat(axis, angle), t1)
    b = Pose.identity()
    b = Pose(b.rotation, t2)
    assert should_admit(a, b, 0.1, 0.1) == should_admit(b, a, 0.1, 0.1)
    assert rotation_angle(a.rotation, b.rotation) == pytest.approx(rotation_angle(b.rotation, a.rotation))


# --------------------------------------------------------------------------
# overlap

def test_self_overlap_is_one():
    d = plane_depth(5.0)
    assert overlap_ratio(kf(0, depth=d), kf(1, depth=d), None, CAM) == 1.0


def test_opposite_views_do_not_overlap():
    back = Pose(axis_angle_quat([0, 1, 0], math.pi), [0, 0, 0])
    assert overlap_ratio(kf(0, depth=plane_depth(5.0)), kf(1, pose=back), None, CAM) == 0.0


def test_no_depth_gives_zero():
    assert overlap_ratio(kf(0), kf(1), None, CAM) == 0.0


def test_forty_percent_frustum_overlap():
    z = 5.0
    width_at_z = CAM.width * z / CAM.fx
    shift = 0.6 * width_at_z
    existing = Pose(translation=[-shift, 0, 0])  # camera centre moved +shift along x
    # geometric oracle: share of the candidate's footprint on the plane inside the other footprint
    expected = max(0.0, width_at_z - shift) / width_at_z
    got = overlap_ratio(kf(0, depth=plane_depth(z)), kf(1, pose=existing), None, CAM)
    assert expected == pytest.approx(0.4)
    assert abs(got - expected) <= 0.1


def test_overlap_falls_back_to_rendered_depth():
    gmap = make_map([[x, y, 4.0] for x in np.linspace(-5, 5, 40) for y in np.linspace(-4, 4, 32)],
                    opacities=np.full(40 * 32, 0.95), log_scales=np.full((40 * 32, 3), math.log(0.2)))
    existing = Pose(translation=[-4.0, 0, 0])
    with_map = overlap_ratio(kf(0), kf(1, pose=existing), gmap, CAM)
    assert 0.1 < with_map < 0.9
    assert overlap_ratio(kf(0), kf(1, pose=existing), None, CAM) == 0.0


# --------------------------------------------------------------------------
# visibility filtering

def test_empty_map_keeps_everything():
    pts = [ColoredPoint((x, 0, 3), (0.5, 0.5, 0.5)) for x in np.linspace(-1, 1, 9)]
    assert filter_points_by_visibility(pts, kf(), make_map(np.zeros((0, 3))), CAM, 0.5) == pts


def test_opaque_map_keeps_only_off_image_points():
    pos = np.array([[0, 0, 3.0], [0.5, 0.2, 3.0], [100, 0, 3.0], [0, 0, -3.0]])
    vis = np.ones(CAM.shape)
    keep = visibility_keep_mask(pos, vis, Pose.identity(), CAM, 0.5)
    assert keep.tolist() == [False, False, True, True]


def test_half_covered_image_matches_manual_lookup():
    xs, ys = np.meshgrid(np.linspace(-6, 0, 30), np.linspace(-5, 5, 40))
    wall = np.stack([xs.ravel(), ys.ravel(), np.full(xs.size, 5.0)], axis=1)
    gmap = make_map(wall, opacities=np.full(len(wall), 0.95), log_scales=np.full((len(wall), 3), math.log(0.2)))
    rng = np.random.default_rng(0)
    pos = np.stack([rng.uniform(-7, 7, 500), rng.uniform(-6, 6, 500), rng.uniform(2, 8, 500)], axis=1)
    pts = [ColoredPoint(tuple(p), (0.5, 0.5, 0.5)) for p in pos]
    vis = render(gmap, Pose.identity(), CAM).visibility
    kept = filter_points_by_visibility(pts, kf(), gmap, CAM, 0.5)
    manual = []
    for p in pts:
        pc = np.asarray(p.position)
        u = int(np.floor(CAM.fx * pc[0] / pc[2] + CAM.cx + 0.5))
        v = int(np.floor(CAM.fy * pc[1] / pc[2] + CAM.cy + 0.5))
        if not (0 <= u < CAM.width and 0 <= v < CAM.height) or vis[v, u] <= 0.5:
            manual.append(p)
    assert kept == manual
    assert 0 < len(kept) < len(pts)


def test_visibility_threshold_extremes():
    rng = np.random.default_rng(1)
    pos = rng.uniform(-2, 2, (200, 3)) + [0, 0, 4]
    vis = rng.uniform(0, 1, CAM.shape)
    vis[:, :20] = 0.0
    assert visibility_keep_mask(pos, vis, Pose.identity(), CAM, 1.0).all()
    keep0 = visibility_keep_mask(pos, vis, Pose.identity(), CAM, 0.0)
    u, v, _, inside = project_pixels(pos, Pose.identity(), CAM)
    expected = ~inside
    expected[inside] = vis[v[inside], u[inside]] == 0.0
    np.testing.assert_array_equal(keep0, expected)
    with pytest.raises(ConfigurationError):
        visibility_keep_mask(pos, vis, Pose.identity(), CAM, 1.5)


# --------------------------------------------------------------------------
# delay buffer and sampling

def test_zero_delay_releases_immediately():
    q = KeyframeQueue()
    k = kf(0)
    assert q.push_and_release(k, 0) == [k]
    assert q.state_of(0) == "active"


def test_delay_depth_two():
    q = KeyframeQueue()
    k1, k2, k3 = kf(1), kf(2), kf(3)
    assert q.push_and_release(k1, 2) == []
    assert q.push_and_release(k2, 2) == []
    assert q.push_and_release(k3, 2) == [k1]
    assert [q.state_of(i) for i in (1, 2, 3)] == ["active", "buffer", "buffer"]


def test_flush_releases_in_order():
    q = KeyframeQueue()
    ks = [kf(i) for i in range(5)]
    assert [q.push_and_release(k, 3) for k in ks[:3]] == [[], [], []]
    assert q.push_and_release(ks[3], 3) == [ks[0]]
    assert q.push_and_release(ks[4], 3) == [ks[1]]
    assert q.flush() == ks[2:]
    assert not q.buffer and q.active == ks


def test_negative_delay_rejected():
    with pytest.raises(ConfigurationError):
        KeyframeQueue().push_and_release(kf(), -1)


def test_empty_queue_samples_none():
    assert KeyframeQueue().sample_for_optimization(0) is None


def test_budget_exhaustion():
    q = KeyframeQueue()
    k = kf(0, budget=3)
    q.push_and_release(k, 0)
    rng = np.random.default_rng(0)
    assert [q.sample_for_optimization(rng) for _ in range(3)] == [k, k, k]
    assert q.sample_for_optimization(rng) is None
    assert k.remaining_iters == 0 and q.state_of(0) == "retired"


def test_sampling_is_uniform_within_three_sigma():
    q = KeyframeQueue()
    for i in range(10):
        q.push_and_release(kf(i, budget=10**6), 0)
    rng = np.random.default_rng(12345)
    n = 10000
    counts = np.bincount([q.sample_for_optimization(rng).id for _ in range(n)], minlength=10)
    sigma = math.sqrt(n * 0.1 * 0.9)
    assert np.all(np.abs(counts - n * 0.1) <= 3 * sigma), counts


def test_total_spend_never_exceeds_budget():
    rng = np.random.default_rng(2)
    q = KeyframeQueue()
    budgets = rng.integers(1, 20, 8)
    ks = [kf(i, budget=int(b)) for i, b in enumerate(budgets)]
    for k in ks:
        q.push_and_release(k, 2)
    q.flush()
    spent = np.zeros(8, dtype=int)
    while (k := q.sample_for_optimization(rng)) is not None:
        spent[k.id] += 1
    np.testing.assert_array_equal(spent, budgets)
    assert all(k.remaining_iters == 0 for k in ks)


def test_unready_keyframes_are_not_sampled():
    q = KeyframeQueue()
    k = kf(0)
    k.ready = False
    q.push_and_release(k, 0)
    assert q.sample_for_optimization(0) is None


def test_sharpness_separates_blur():
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 1, (48, 64, 3))
    blurred = np.full_like(img, img.mean())
    assert sharpness(img) > 100 > sharpness(blurred)


def test_keyframe_validation():
    with pytest.raises(ConfigurationError):
        kf(0, budget=-1)
    with pytest.raises(ConfigurationError):
        kf(0, depth=-np.ones(CAM.shape))
