import filecmp
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from conftest import make_map
from splatmap.checkpoint import load_checkpoint, save_checkpoint
from splatmap.core import CameraModel, Pose, axis_angle_quat
from splatmap.dataset import (Frame, load_sequence, project_pixels, project_sparse_depth, read_image,
                              write_sequence)
from splatmap.errors import SequenceError
from splatmap.gaussian_map import GaussianMap
from splatmap.gradcheck import random_scene
from splatmap.raster import render
from splatmap.synthetic import SyntheticSpec, build_synthetic_scene, generate_synthetic_scene

CAM = CameraModel(20.0, 20.0, 10.0, 8.0, 21, 17)


def three_frames():
    rng = np.random.default_rng(0)
    return [Frame(i, 0.1 * (i + 1), Pose(axis_angle_quat([0, 1, 0], 0.1 * i), [0.1 * i, 0, 0]),
                  rng.integers(0, 256, (17, 21, 3)) / 255.0, rng.normal(size=(30, 3)),
                  rng.integers(0, 256, (30, 3)) / 255.0) for i in range(3)]


def all_files(root: Path) -> list[str]:
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


# --------------------------------------------------------------------------
# sequences

def test_empty_directory_has_no_manifest(tmp_path):
    with pytest.raises(SequenceError, match="no manifest"):
        load_sequence(tmp_path)


def test_three_frames_in_order(tmp_path):
    frames = three_frames()
    write_sequence(tmp_path, CAM, frames)
    seq = load_sequence(tmp_path)
    got = list(seq)
    assert [f.index for f in got] == [0, 1, 2]
    assert seq.camera == CAM
    for a, b in zip(frames, got):
        assert b.timestamp == pytest.approx(a.timestamp)
        np.testing.assert_allclose(b.pose.rotation, a.pose.rotation, atol=1e-8)
        np.testing.assert_array_equal(b.image, a.image)
        np.testing.assert_allclose(b.positions, a.positions, rtol=1e-8)
        np.testing.assert_array_equal(b.colors, a.colors)


def test_round_trip_is_byte_identical(tmp_path):
    write_sequence(tmp_path / "a", CAM, three_frames(), extra={"note": "x"})
    seq = load_sequence(tmp_path / "a")
    write_sequence(tmp_path / "b", seq.camera, seq, extra=seq.manifest.extra)
    files = all_files(tmp_path / "a")
    assert files == all_files(tmp_path / "b")
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert mismatch == [] and errors == []


def test_non_monotonic_timestamps_rejected(tmp_path):
    frames = three_frames()
    frames[2].timestamp = 0.1
    write_sequence(tmp_path, CAM, frames)
    with pytest.raises(SequenceError, match="poses.csv:4"):
        load_sequence(tmp_path)


def test_missing_and_malformed_files_named(tmp_path):
    write_sequence(tmp_path, CAM, three_frames())
    (tmp_path / "clouds" / "000001.ply").unlink()
    with pytest.raises(SequenceError, match="000001.ply"):
        load_sequence(tmp_path)
    write_sequence(tmp_path, CAM, three_frames())
    with open(tmp_path / "poses.csv", "a") as fh:
        fh.write("9.0,1,0,0\n")
    with pytest.raises(SequenceError, match="expected 8 fields"):
        load_sequence(tmp_path)


def test_wrong_image_size_reported(tmp_path):
    frames = three_frames()
    frames[1].image = np.zeros((5, 5, 3))
    write_sequence(tmp_path, CAM, frames)
    with pytest.raises(SequenceError, match="does not match"):
        list(load_sequence(tmp_path))


# --------------------------------------------------------------------------
# sparse depth

def test_single_on_axis_point():
    cam = CameraModel(10, 10, 5, 5, 11, 11)
    d = project_sparse_depth([[0, 0, 2.0]], Pose.identity(), cam)
    assert d[5, 5] == 2.0 and np.count_nonzero(d) == 1


def test_occlusion_keeps_nearest():
    cam = CameraModel(10, 10, 5, 5, 11, 11)
    d = project_sparse_depth([[0, 0, 3.0], [0, 0, 2.0]], Pose.identity(), cam)
    assert d[5, 5] == 2.0


def test_sparse_depth_matches_per_point_oracle():
    rng = np.random.default_rng(1)
    cam = CameraModel(30, 30, 15, 12, 31, 25)
    pose = Pose(axis_angle_quat([1, 1, 0], 0.3), [0.2, -0.1, 0.5])
    pts = rng.uniform(-3, 3, (800, 3)) + [0, 0, 3]
    d = project_sparse_depth(pts, pose, cam)
    assert np.count_nonzero(d) <= len(pts)
    best = {}
    for p in pts:
        pc = pose.rotation_matrix() @ p + pose.translation
        if pc[2] <= 0.01:
            continue
        u = int(np.floor(cam.fx * pc[0] / pc[2] + cam.cx + 0.5))
        v = int(np.floor(cam.fy * pc[1] / pc[2] + cam.cy + 0.5))
        if 0 <= u < cam.width and 0 <= v < cam.height:
            best[(v, u)] = min(best.get((v, u), np.inf), pc[2])
    assert np.count_nonzero(d) == len(best)
    for (v, u), z in best.items():
        assert d[v, u] == pytest.approx(z, abs=1e-12)
    # any permutation of the cloud gives the same image
    np.testing.assert_array_equal(project_sparse_depth(pts[rng.permutation(len(pts))], pose, cam), d)


def test_project_pixels_rejects_behind_camera():
    _, _, _, inside = project_pixels(np.array([[0, 0, -1.0], [0, 0, 1.0]]), Pose.identity(), CAM)
    assert inside.tolist() == [False, True]


# --------------------------------------------------------------------------
# synthetic scenes

def test_synthetic_generation_is_deterministic(tmp_path):
    spec = SyntheticSpec(n_gaussians=120, n_frames=4, seed=11)
    generate_synthetic_scene(spec, tmp_path / "a")
    generate_synthetic_scene(spec, tmp_path / "b")
    files = all_files(tmp_path / "a")
    assert files == all_files(tmp_path / "b") and len(files) > 10
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert mismatch == [] and errors == []


def test_single_gaussian_scene_has_at_most_one_blob():
    scene = build_synthetic_scene(SyntheticSpec(n_gaussians=1, n_frames=6, seed=2))
    assert len(scene.gaussians) == 1
    for vis, col in zip(scene.visibilities, scene.colors):
        _, blobs = ndimage.label(vis > 0)
        assert blobs <= 1
        assert not col[vis == 0].any()


def test_synthetic_clouds_sit_on_gaussian_centres():
    scene = build_synthetic_scene(SyntheticSpec(n_gaussians=200, n_frames=3, seed=4))
    centres = {tuple(p) for p in scene.gaussians.positions}
    for pos, col in scene.clouds:
        assert len(pos) > 0
        assert all(tuple(p) in centres for p in pos)
        assert np.all((col >= 0) & (col <= 1))


def test_synthetic_ground_truth_renders_match(tmp_path):
    scene = generate_synthetic_scene(SyntheticSpec(n_gaussians=150, n_frames=3, seed=6), tmp_path)
    for i, pose in enumerate(scene.poses):
        out = render(scene.gaussians, pose, scene.camera)
        np.testing.assert_array_equal(np.clip(out.color, 0, 1), scene.colors[i])
        np.testing.assert_array_equal(np.load(tmp_path / "gt_depth" / f"{i:06d}.npy"), out.depth)
        img = read_image(tmp_path / "images" / f"{i:06d}.png")
        assert np.abs(img - scene.colors[i]).max() <= 0.5 / 255 + 1e-12


def test_orbit_trajectory_looks_at_scene():
    scene = build_synthetic_scene(SyntheticSpec(n_gaussians=200, n_frames=5, trajectory="orbit", seed=1))
    for pose in scene.poses:
        assert pose.transform(np.zeros((1, 3)))[0, 2] > 0


# --------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip_renders_bit_exactly(tmp_path):
    gmap, pose, cam = random_scene(np.random.default_rng(2), 80, 40, 40, degree=3)
    gmap.global_step = 123
    gmap.spatial_scale = 2.5
    save_checkpoint(tmp_path / "m.ckpt", gmap, cam)
    back, cam2 = load_checkpoint(tmp_path / "m.ckpt")
    assert cam2 == cam and back.global_step == 123 and back.spatial_scale == 2.5
    assert back.active_degree == 3
    a, b = render(gmap, pose, cam), render(back, pose, cam)
    assert np.array_equal(a.color, b.color) and np.array_equal(a.depth, b.depth)
    save_checkpoint(tmp_path / "m2.ckpt", back, cam2)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_empty_checkpoint(tmp_path):
    save_checkpoint(tmp_path / "e.ckpt", GaussianMap())
    gmap, cam = load_checkpoint(tmp_path / "e.ckpt")
    assert len(gmap) == 0 and cam is None


def test_corrupt_checkpoints_rejected(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", make_map([[0, 0, 1.0], [1, 0, 1.0]]))
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-8])
    with pytest.raises(SequenceError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"nonsense\n")
    with pytest.raises(SequenceError, match="not a splatmap checkpoint"):
        load_checkpoint(tmp_path / "x.ckpt")
    with pytest.raises(SequenceError, match="not found"):
        load_checkpoint(tmp_path / "missing.ckpt")
