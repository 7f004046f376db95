import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation
from scipy.special import sph_harm_y

from splatmap import core
from splatmap.core import CameraModel, Gaussian2D, Gaussian3D, Pose
from splatmap.errors import ConfigurationError
from splatmap.gradcheck import PRIMITIVE_TOL, check_primitives

finite = st.floats(-1e3, 1e3, allow_nan=False)
quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3)
log_scales = st.lists(st.floats(-5, 2), min_size=3, max_size=3)


def scipy_covariance(q, ls):
    R = Rotation.from_quat(np.r_[q[1:], q[0]]).as_matrix()
    S = np.diag(np.exp(ls))
    return R @ S @ S.T @ R.T


# --------------------------------------------------------------------------
# covariance

def test_covariance_axis_aligned():
    cov = core.build_covariance([1, 0, 0, 0], [0, math.log(2), math.log(3)])
    np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 9.0]), atol=1e-12)


def test_covariance_axis_swap_under_rotation():
    q = core.axis_angle_quat([0, 0, 1], math.pi / 2)
    cov = core.build_covariance(q, [0, math.log(2), 0])
    np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)


def test_covariance_matches_dense_oracle():
    rng = np.random.default_rng(0)
    for _ in range(500):
        q = rng.normal(size=4)
        ls = rng.uniform(-3, 1, 3)
        np.testing.assert_allclose(core.build_covariance(q, ls), scipy_covariance(q, ls), atol=1e-12, rtol=0)


@settings(max_examples=300, deadline=None)
@given(quats, log_scales)
def test_covariance_symmetric_psd(q, ls):
    cov = core.build_covariance(q, ls)
    np.testing.assert_array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-12 * max(1.0, np.abs(cov).max())


def test_covariance_psd_bulk():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(20000, 4))
    ls = rng.uniform(-5, 2, (20000, 3))
    worst = 0.0
    for qi, li in zip(q, ls):
        cov = core.build_covariance(qi, li)
        worst = min(worst, np.linalg.eigvalsh(cov).min() / max(1.0, np.abs(cov).max()))
    assert worst >= -1e-12


@settings(max_examples=200, deadline=None)
@given(quats, quats, log_scales)
def test_covariance_rotation_equivariant(q1, q2, ls):
    q1 = np.array(q1) / np.linalg.norm(q1)
    q2 = np.array(q2) / np.linalg.norm(q2)
    R1 = core.quat_to_rotmat(q1)
    lhs = core.build_covariance(core.quat_multiply(q1, q2), ls)
    rhs = R1 @ core.build_covariance(q2, ls) @ R1.T
    np.testing.assert_allclose(lhs, rhs, atol=1e-10 * max(1.0, np.abs(rhs).max()))


# --------------------------------------------------------------------------
# projection

def test_project_on_axis():
    cam = CameraModel(100, 100, 50, 50, 101, 101)
    g2 = core.project_gaussian(Gaussian3D([0, 0, 1]), Pose.identity(), cam)
    np.testing.assert_allclose(g2.mean, [50, 50], atol=1e-12)
    assert g2.depth == pytest.approx(1.0)


def test_project_behind_camera_culled():
    cam = CameraModel(100, 100, 50, 50, 101, 101)
    assert core.project_gaussian(Gaussian3D([0, 0, -1]), Pose.identity(), cam) is None


def test_project_near_plane_culled():
    cam = CameraModel(100, 100, 50, 50, 101, 101)
    assert core.project_gaussian(Gaussian3D([0, 0, 0.005]), Pose.identity(), cam) is None
    assert core.project_gaussian(Gaussian3D([0, 0, 0.02]), Pose.identity(), cam) is not None


def test_projected_covariance_matches_monte_carlo():
    rng = np.random.default_rng(2)
    cam = CameraModel(400, 380, 200, 200, 401, 401)
    for z, sigma in ((4.0, 0.2), (10.0, 0.1), (2.0, 0.05)):
        g = Gaussian3D([0, 0, z], log_scale=np.full(3, math.log(sigma)))
        g2 = core.project_gaussian(g, Pose.identity(), cam)
        pts = rng.normal(size=(400000, 3)) * sigma + [0, 0, z]
        uv = np.stack([cam.fx * pts[:, 0] / pts[:, 2], cam.fy * pts[:, 1] / pts[:, 2]], axis=1)
        mc = np.cov(uv.T)
        analytic = g2.cov2d - core.COV2D_DILATION * np.eye(2)
        expected = np.diag([(cam.fx * sigma / z) ** 2, (cam.fy * sigma / z) ** 2])
        np.testing.assert_allclose(np.diag(analytic), np.diag(mc), rtol=0.05)
        np.testing.assert_allclose(np.diag(analytic), np.diag(expected), rtol=0.05)


def test_project_mean_is_pinhole():
    rng = np.random.default_rng(3)
    cam = CameraModel(300, 280, 160, 120, 320, 240)
    for _ in range(300):
        pose = Pose(core.axis_angle_quat(rng.normal(size=3), rng.uniform(0, np.pi)), rng.normal(size=3))
        p = rng.normal(size=3) * 3
        pc = pose.rotation_matrix() @ p + pose.translation
        g2 = core.project_gaussian(Gaussian3D(p), pose, cam)
        if pc[2] <= core.NEAR_CLIP:
            assert g2 is None
            continue
        expected = [cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy]
        np.testing.assert_allclose(g2.mean, expected, atol=1e-10 * max(1.0, np.abs(expected).max()))


def test_radius_covers_three_sigma():
    cam = CameraModel(100, 100, 50, 50, 101, 101)
    g2 = core.project_gaussian(Gaussian3D([0, 0, 2], log_scale=[math.log(0.1), math.log(0.3), -3]),
                               Pose.identity(), cam)
    assert g2.radius == math.ceil(3 * math.sqrt(np.linalg.eigvalsh(g2.cov2d).max()))


# --------------------------------------------------------------------------
# 2D evaluation

def test_eval_2d_at_mean():
    g2 = Gaussian2D(np.array([3.0, 4.0]), np.array([[2.0, 0.3], [0.3, 1.0]]), 1.0, 5)
    assert core.eval_gaussian_2d(g2, [3.0, 4.0]) == 1.0


def test_eval_2d_unit_covariance():
    g2 = Gaussian2D(np.zeros(2), np.eye(2), 1.0, 3)
    assert core.eval_gaussian_2d(g2, [1.0, 0.0]) == pytest.approx(math.exp(-0.5), abs=1e-15)


def test_eval_2d_matches_dense_solve():
    rng = np.random.default_rng(4)
    for _ in range(500):
        A = rng.normal(size=(2, 2))
        cov = A @ A.T + 0.1 * np.eye(2)
        mean = rng.normal(size=2) * 10
        x = mean + rng.normal(size=2) * 2
        d = x - mean
        expected = math.exp(-0.5 * d @ np.linalg.solve(cov, d))
        assert core.eval_gaussian_2d(Gaussian2D(mean, cov, 1.0, 1), x) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.1, 10), st.floats(0.1, 10), st.floats(-0.9, 0.9))
def test_eval_2d_range(dx, dy, sx, sy, rho):
    cov = np.array([[sx * sx, rho * sx * sy], [rho * sx * sy, sy * sy]])
    g2 = Gaussian2D(np.zeros(2), cov, 1.0, 1)
    v = core.eval_gaussian_2d(g2, [dx, dy])
    assert 0.0 <= v <= 1.0
    assert v <= core.eval_gaussian_2d(g2, [0.0, 0.0])


# --------------------------------------------------------------------------
# spherical harmonics

def textbook_basis(d: np.ndarray) -> np.ndarray:
    """Real SH in the splatting sign convention, built from scipy's complex Y_l^m."""
    theta = math.acos(np.clip(d[2], -1, 1))
    phi = math.atan2(d[1], d[0])
    out = []
    for l in range(4):
        for m in range(-l, l + 1):
            y = sph_harm_y(l, abs(m), theta, phi)
            if m == 0:
                out.append(y.real)
            elif m > 0:
                out.append(math.sqrt(2) * y.real)
            else:
                out.append(math.sqrt(2) * y.imag)
    return np.array(out)


def test_sh_degree0_offset():
    out = core.eval_sh(np.array([[0.5 / 0.28209479, 0, 0]]), 0, [0, 0, 1])
    np.testing.assert_allclose(out, [1.0, 0.5, 0.5], atol=1e-7)


def test_sh_degree0_view_independent():
    rng = np.random.default_rng(5)
    sh = rng.normal(size=(16, 3))
    a = core.eval_sh(sh, 0, [0, 0, 1])
    b = core.eval_sh(sh, 0, np.array([1, 2, -3]) / math.sqrt(14))
    np.testing.assert_array_equal(a, b)


def test_sh_matches_textbook_constants():
    rng = np.random.default_rng(6)
    for _ in range(300):
        sh = rng.normal(size=(16, 3))
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        expected = textbook_basis(d) @ sh + 0.5
        np.testing.assert_allclose(core.eval_sh(sh, 3, d), expected, atol=1e-10)


def test_sh_lower_degrees_ignore_higher_bands():
    rng = np.random.default_rng(7)
    sh = rng.normal(size=(16, 3))
    d = np.array([0.3, -0.4, 0.866])
    d /= np.linalg.norm(d)
    B = textbook_basis(d)
    for deg in range(4):
        k = (deg + 1) ** 2
        np.testing.assert_allclose(core.eval_sh(sh, deg, d), B[:k] @ sh[:k] + 0.5, atol=1e-10)


def test_sh_rejects_short_coefficients():
    with pytest.raises(ConfigurationError):
        core.eval_sh(np.zeros((4, 3)), 2, [0, 0, 1])


def test_rgb_to_sh_dc_inverts_offset():
    rgb = np.array([0.1, 0.6, 0.95])
    out = core.eval_sh(core.rgb_to_sh_dc(rgb)[None], 0, [1, 0, 0])
    np.testing.assert_allclose(out, rgb, atol=1e-12)


# --------------------------------------------------------------------------
# primitive gradients, poses, cameras

def test_primitive_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    worst = {}
    for _ in range(1000):
        for k, v in check_primitives(rng).items():
            worst[k] = max(worst.get(k, 0.0), v)
    assert max(worst.values()) < PRIMITIVE_TOL, worst


def test_pose_look_at_and_center():
    pose = Pose.look_at([1.0, 2.0, 3.0], [1.0, 2.0, 10.0])
    np.testing.assert_allclose(pose.center(), [1, 2, 3], atol=1e-12)
    np.testing.assert_allclose(pose.transform(np.array([[1.0, 2.0, 5.0]])), [[0, 0, 2]], atol=1e-12)


def test_quaternion_round_trip():
    rng = np.random.default_rng(9)
    for _ in range(100):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        q *= np.sign(q[0])
        np.testing.assert_allclose(core.rotmat_to_quat(core.quat_to_rotmat(q)), q, atol=1e-12)


def test_degenerate_pose_rejected():
    with pytest.raises(ConfigurationError):
        Pose(np.zeros(4), np.zeros(3))


def test_camera_validation_and_scaling():
    with pytest.raises(ConfigurationError):
        CameraModel(0, 1, 0, 0, 10, 10)
    with pytest.raises(ConfigurationError):
        CameraModel(1, 1, 20, 0, 10, 10)
    cam = CameraModel(100, 100, 31.5, 23.5, 64, 48).scaled(1)
    assert (cam.fx, cam.cx, cam.cy, cam.width, cam.height) == (50, 15.5, 11.5, 32, 24)
