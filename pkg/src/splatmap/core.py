"""Gaussian parameterization, projection and spherical-harmonics colour.

Every primitive comes in two layers: a numba kernel (``_name``) that the
rasterizer calls per Gaussian, and a thin numpy-facing wrapper. Each
forward primitive has a matching vector-Jacobian product so gradients can
be checked against finite differences in isolation.

Conventions:
    * quaternions are (w, x, y, z) and need not be unit length; they are
      normalized before use.
    * poses map world to camera: ``p_cam = R(q) @ p_world + t``.
    * camera axes follow the pinhole convention x right, y down, z forward;
      pixel (u, v) has its centre at integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .errors import ConfigurationError

NEAR_CLIP = 0.01
COV2D_DILATION = 0.3
CUTOFF_SIGMA = 3.0
MAX_SH_DEGREE = 3
N_SH_COEFFS = 16

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = np.array([1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                  -1.0925484305920792, 0.5462742152960396])
SH_C3 = np.array([-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                  0.3731763325901154, -0.4570457994644658, 1.445305721320277,
                  -0.5900435899266435])


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------

@dataclass
class Pose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ConfigurationError(f"pose quaternion is degenerate: {q}")
        self.rotation = q / n
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, rot: np.ndarray, translation: np.ndarray) -> "Pose":
        return cls(rotmat_to_quat(rot), translation)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> "Pose":
        """Camera at ``eye`` looking toward ``target``; ``up`` is world up (y-down world)."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])  # rows: camera axes in world
        return cls.from_matrix(rot, -rot @ eye)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation_matrix().T @ self.translation

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map world points ``(N, 3)`` into the camera frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation_matrix().T + self.translation


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics; pixel centres sit at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, level: int) -> "CameraModel":
        """Intrinsics of pyramid level ``level`` (each level halves the image).

        A 2x2 box whose pixel centres are ``2u`` and ``2u + 1`` lands on pixel
        ``u``, so the principal point maps as ``c' = (c - 0.5) / 2``.
        """
        cam = self
        for _ in range(level):
            cam = CameraModel(cam.fx / 2.0, cam.fy / 2.0,
                              max(0.0, (cam.cx - 0.5) / 2.0), max(0.0, (cam.cy - 0.5) / 2.0),
                              cam.width // 2, cam.height // 2)
        return cam

    def as_tuple(self) -> tuple:
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass
class Gaussian3D:
    """One anisotropic splat in its optimizer-safe parameterization."""

    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros(3))
    opacity_logit: float = 0.0
    sh_coeffs: np.ndarray = field(default_factory=lambda: np.zeros((N_SH_COEFFS, 3)))
    active_degree: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        sh = np.zeros((N_SH_COEFFS, 3))
        given = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(-1, 3)
        sh[: len(given)] = given
        self.sh_coeffs = sh
        if not 0 <= self.active_degree <= MAX_SH_DEGREE:
            raise ConfigurationError(f"active_degree must be in 0..3, got {self.active_degree}")

    @property
    def opacity(self) -> float:
        return sigmoid(self.opacity_logit)

    def covariance(self) -> np.ndarray:
        return build_covariance(self.rotation, self.log_scale)


@dataclass
class Gaussian2D:
    """Screen-space footprint. ``cov2d`` already includes the dilation."""

    mean: np.ndarray
    cov2d: np.ndarray
    depth: float
    radius: int


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _normalize_quat(q, out):
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    for i in range(4):
        out[i] = q[i] / n
    return n


@njit(cache=True, nogil=True)
def _quat_to_rotmat(q, R):
    w, x, y, z = q[0], q[1], q[2], q[3]
    R[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[0, 1] = 2.0 * (x * y - w * z)
    R[0, 2] = 2.0 * (x * z + w * y)
    R[1, 0] = 2.0 * (x * y + w * z)
    R[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[1, 2] = 2.0 * (y * z - w * x)
    R[2, 0] = 2.0 * (x * z - w * y)
    R[2, 1] = 2.0 * (y * z + w * x)
    R[2, 2] = 1.0 - 2.0 * (x * x + y * y)


@njit(cache=True, nogil=True)
def _rotmat_vjp(qn, G, dq):
    """Pull ``dL/dR`` back to the unit quaternion ``qn``."""
    w, x, y, z = qn[0], qn[1], qn[2], qn[3]
    dq[0] = 2.0 * (-z * G[0, 1] + y * G[0, 2] + z * G[1, 0] - x * G[1, 2] - y * G[2, 0] + x * G[2, 1])
    dq[1] = 2.0 * (y * G[0, 1] + z * G[0, 2] + y * G[1, 0] - 2.0 * x * G[1, 1] - w * G[1, 2]
                   + z * G[2, 0] + w * G[2, 1] - 2.0 * x * G[2, 2])
    dq[2] = 2.0 * (-2.0 * y * G[0, 0] + x * G[0, 1] + w * G[0, 2] + x * G[1, 0] + z * G[1, 2]
                   - w * G[2, 0] + z * G[2, 1] - 2.0 * y * G[2, 2])
    dq[3] = 2.0 * (-2.0 * z * G[0, 0] - w * G[0, 1] + x * G[0, 2] + w * G[1, 0] - 2.0 * z * G[1, 1]
                   + y * G[1, 2] + x * G[2, 0] + y * G[2, 1])


@njit(cache=True, nogil=True)
def _unit_quat_vjp(q, qn, norm, dqn, dq):
    """Pull a gradient on ``q / |q|`` back to ``q``."""
    dot = qn[0] * dqn[0] + qn[1] * dqn[1] + qn[2] * dqn[2] + qn[3] * dqn[3]
    for i in range(4):
        dq[i] = (dqn[i] - qn[i] * dot) / norm


@njit(cache=True, nogil=True)
def _covariance(q, log_scale, cov):
    qn = np.empty(4)
    _normalize_quat(q, qn)
    R = np.empty((3, 3))
    _quat_to_rotmat(qn, R)
    s0 = math.exp(2.0 * log_scale[0])
    s1 = math.exp(2.0 * log_scale[1])
    s2 = math.exp(2.0 * log_scale[2])
    for i in range(3):
        for j in range(i, 3):
            cov[i, j] = R[i, 0] * s0 * R[j, 0] + R[i, 1] * s1 * R[j, 1] + R[i, 2] * s2 * R[j, 2]
            cov[j, i] = cov[i, j]  # mirrored so the result is exactly symmetric


@njit(cache=True, nogil=True)
def _covariance_vjp(q, log_scale, G, dq, dls):
    """Sigma = M M^T with M = R S; ``G`` is dL/dSigma (any 3x3)."""
    qn = np.empty(4)
    norm = _normalize_quat(q, qn)
    R = np.empty((3, 3))
    _quat_to_rotmat(qn, R)
    s = np.empty(3)
    for k in range(3):
        s[k] = math.exp(log_scale[k])
    # dL/dM = (G + G^T) M
    GM = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += (G[i, k] + G[k, i]) * R[k, j] * s[j]
            GM[i, j] = acc
    dR = np.empty((3, 3))
    for j in range(3):
        ds = 0.0
        for i in range(3):
            ds += GM[i, j] * R[i, j]
            dR[i, j] = GM[i, j] * s[j]
        dls[j] = ds * s[j]
    dqn = np.empty(4)
    _rotmat_vjp(qn, dR, dqn)
    _unit_quat_vjp(q, qn, norm, dqn, dq)


@njit(cache=True, nogil=True)
def _project(pos, q, log_scale, Rcw, t, fx, fy, cx, cy, out):
    """Project one Gaussian.

    ``out`` receives ``[u, v, z, cov00, cov01, cov11, x_cam, y_cam]`` where
    the covariance includes the dilation. Returns False when culled.
    """
    xc = Rcw[0, 0] * pos[0] + Rcw[0, 1] * pos[1] + Rcw[0, 2] * pos[2] + t[0]
    yc = Rcw[1, 0] * pos[0] + Rcw[1, 1] * pos[1] + Rcw[1, 2] * pos[2] + t[1]
    zc = Rcw[2, 0] * pos[0] + Rcw[2, 1] * pos[1] + Rcw[2, 2] * pos[2] + t[2]
    if zc <= NEAR_CLIP:
        return False
    cov = np.empty((3, 3))
    _covariance(q, log_scale, cov)
    # camera-frame covariance W Sigma W^T
    tmp = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            tmp[i, j] = Rcw[i, 0] * cov[0, j] + Rcw[i, 1] * cov[1, j] + Rcw[i, 2] * cov[2, j]
    sc = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            sc[i, j] = tmp[i, 0] * Rcw[j, 0] + tmp[i, 1] * Rcw[j, 1] + tmp[i, 2] * Rcw[j, 2]
    iz = 1.0 / zc
    j00 = fx * iz
    j02 = -fx * xc * iz * iz
    j11 = fy * iz
    j12 = -fy * yc * iz * iz
    # rows of J Sigma_c
    a0 = j00 * sc[0, 0] + j02 * sc[2, 0]
    a1 = j00 * sc[0, 1] + j02 * sc[2, 1]
    a2 = j00 * sc[0, 2] + j02 * sc[2, 2]
    b1 = j11 * sc[1, 1] + j12 * sc[2, 1]
    b2 = j11 * sc[1, 2] + j12 * sc[2, 2]
    out[0] = fx * xc * iz + cx
    out[1] = fy * yc * iz + cy
    out[2] = zc
    out[3] = a0 * j00 + a2 * j02 + COV2D_DILATION
    out[4] = a1 * j11 + a2 * j12
    out[5] = b1 * j11 + b2 * j12 + COV2D_DILATION
    out[6] = xc
    out[7] = yc
    return True


@njit(cache=True, nogil=True)
def _project_vjp(pos, q, log_scale, Rcw, t, fx, fy, g_mean, g_cov, g_depth, dpos, dq, dls):
    """Pull gradients on (mean2d, full 2x2 cov2d, depth) back to the 3D parameters.

    Results are written into ``dpos``, ``dq`` and ``dls`` (overwritten).
    """
    xc = Rcw[0, 0] * pos[0] + Rcw[0, 1] * pos[1] + Rcw[0, 2] * pos[2] + t[0]
    yc = Rcw[1, 0] * pos[0] + Rcw[1, 1] * pos[1] + Rcw[1, 2] * pos[2] + t[1]
    zc = Rcw[2, 0] * pos[0] + Rcw[2, 1] * pos[1] + Rcw[2, 2] * pos[2] + t[2]
    cov = np.empty((3, 3))
    _covariance(q, log_scale, cov)
    tmp = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            tmp[i, j] = Rcw[i, 0] * cov[0, j] + Rcw[i, 1] * cov[1, j] + Rcw[i, 2] * cov[2, j]
    sc = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            sc[i, j] = tmp[i, 0] * Rcw[j, 0] + tmp[i, 1] * Rcw[j, 1] + tmp[i, 2] * Rcw[j, 2]
    iz = 1.0 / zc
    J = np.zeros((2, 3))
    J[0, 0] = fx * iz
    J[0, 2] = -fx * xc * iz * iz
    J[1, 1] = fy * iz
    J[1, 2] = -fy * yc * iz * iz

    # dL/dSigma_c = J^T G J ; dL/dJ = G J Sc^T + G^T J Sc
    GJ = np.zeros((2, 3))
    GtJ = np.zeros((2, 3))
    for i in range(2):
        for k in range(3):
            GJ[i, k] = g_cov[i, 0] * J[0, k] + g_cov[i, 1] * J[1, k]
            GtJ[i, k] = g_cov[0, i] * J[0, k] + g_cov[1, i] * J[1, k]
    dSc = np.zeros((3, 3))
    for a in range(3):
        for b in range(3):
            dSc[a, b] = J[0, a] * GJ[0, b] + J[1, a] * GJ[1, b]
    dJ = np.zeros((2, 3))
    for i in range(2):
        for k in range(3):
            acc = 0.0
            for m in range(3):
                acc += GJ[i, m] * sc[k, m] + GtJ[i, m] * sc[m, k]
            dJ[i, k] = acc

    # camera-frame point gradient from mean2d, depth and J
    iz2 = iz * iz
    dxc = g_mean[0] * fx * iz - dJ[0, 2] * fx * iz2
    dyc = g_mean[1] * fy * iz - dJ[1, 2] * fy * iz2
    dzc = (g_depth
           - g_mean[0] * fx * xc * iz2 - g_mean[1] * fy * yc * iz2
           - dJ[0, 0] * fx * iz2 - dJ[1, 1] * fy * iz2
           + dJ[0, 2] * 2.0 * fx * xc * iz2 * iz + dJ[1, 2] * 2.0 * fy * yc * iz2 * iz)
    for i in range(3):
        dpos[i] = Rcw[0, i] * dxc + Rcw[1, i] * dyc + Rcw[2, i] * dzc

    # dL/dSigma_w = W^T dSc W
    tmp2 = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            tmp2[i, j] = Rcw[0, i] * dSc[0, j] + Rcw[1, i] * dSc[1, j] + Rcw[2, i] * dSc[2, j]
    dcov = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            dcov[i, j] = tmp2[i, 0] * Rcw[0, j] + tmp2[i, 1] * Rcw[1, j] + tmp2[i, 2] * Rcw[2, j]
    _covariance_vjp(q, log_scale, dcov, dq, dls)


@njit(cache=True, nogil=True)
def _gauss2d(dx, dy, k00, k01, k11):
    """Mahalanobis power and value for offset (dx, dy) under conic K."""
    qf = k00 * dx * dx + 2.0 * k01 * dx * dy + k11 * dy * dy
    return qf, math.exp(-0.5 * qf)


@njit(cache=True, nogil=True)
def _sh_basis(x, y, z, deg, out):
    out[0] = SH_C0
    if deg < 1:
        return
    out[1] = -SH_C1 * y
    out[2] = SH_C1 * z
    out[3] = -SH_C1 * x
    if deg < 2:
        return
    xx, yy, zz = x * x, y * y, z * z
    out[4] = SH_C2[0] * x * y
    out[5] = SH_C2[1] * y * z
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[7] = SH_C2[3] * x * z
    out[8] = SH_C2[4] * (xx - yy)
    if deg < 3:
        return
    out[9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[10] = SH_C3[1] * x * y * z
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[14] = SH_C3[5] * z * (xx - yy)
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy)


@njit(cache=True, nogil=True)
def _sh_basis_grad(x, y, z, deg, g):
    """Partial derivatives of each basis function, ``g[k] = dY_k/d(x, y, z)``."""
    for k in range(16):
        g[k, 0] = 0.0
        g[k, 1] = 0.0
        g[k, 2] = 0.0
    if deg < 1:
        return
    g[1, 1] = -SH_C1
    g[2, 2] = SH_C1
    g[3, 0] = -SH_C1
    if deg < 2:
        return
    xx, yy, zz = x * x, y * y, z * z
    g[4, 0] = SH_C2[0] * y
    g[4, 1] = SH_C2[0] * x
    g[5, 1] = SH_C2[1] * z
    g[5, 2] = SH_C2[1] * y
    g[6, 0] = -2.0 * SH_C2[2] * x
    g[6, 1] = -2.0 * SH_C2[2] * y
    g[6, 2] = 4.0 * SH_C2[2] * z
    g[7, 0] = SH_C2[3] * z
    g[7, 2] = SH_C2[3] * x
    g[8, 0] = 2.0 * SH_C2[4] * x
    g[8, 1] = -2.0 * SH_C2[4] * y
    if deg < 3:
        return
    g[9, 0] = SH_C3[0] * 6.0 * x * y
    g[9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
    g[10, 0] = SH_C3[1] * y * z
    g[10, 1] = SH_C3[1] * x * z
    g[10, 2] = SH_C3[1] * x * y
    g[11, 0] = -2.0 * SH_C3[2] * x * y
    g[11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
    g[11, 2] = 8.0 * SH_C3[2] * y * z
    g[12, 0] = -6.0 * SH_C3[3] * x * z
    g[12, 1] = -6.0 * SH_C3[3] * y * z
    g[12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    g[13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
    g[13, 1] = -2.0 * SH_C3[4] * x * y
    g[13, 2] = 8.0 * SH_C3[4] * x * z
    g[14, 0] = 2.0 * SH_C3[5] * x * z
    g[14, 1] = -2.0 * SH_C3[5] * y * z
    g[14, 2] = SH_C3[5] * (xx - yy)
    g[15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
    g[15, 1] = -6.0 * SH_C3[6] * x * y


@njit(cache=True, nogil=True)
def _eval_sh(sh, deg, d, out):
    basis = np.zeros(16)
    _sh_basis(d[0], d[1], d[2], deg, basis)
    n = (deg + 1) * (deg + 1)
    for c in range(3):
        acc = 0.0
        for k in range(n):
            acc += basis[k] * sh[k, c]
        out[c] = acc + 0.5


@njit(cache=True, nogil=True)
def _eval_sh_vjp(sh, deg, d, g_rgb, dsh, ddir):
    """``dsh`` (16, 3) is overwritten; ``ddir`` receives dL/d(view_dir)."""
    basis = np.zeros(16)
    _sh_basis(d[0], d[1], d[2], deg, basis)
    bg = np.empty((16, 3))
    _sh_basis_grad(d[0], d[1], d[2], deg, bg)
    n = (deg + 1) * (deg + 1)
    ddir[0] = 0.0
    ddir[1] = 0.0
    ddir[2] = 0.0
    for k in range(16):
        if k < n:
            for c in range(3):
                dsh[k, c] = basis[k] * g_rgb[c]
            s = sh[k, 0] * g_rgb[0] + sh[k, 1] * g_rgb[1] + sh[k, 2] * g_rgb[2]
            ddir[0] += bg[k, 0] * s
            ddir[1] += bg[k, 1] * s
            ddir[2] += bg[k, 2] * s
        else:
            dsh[k, 0] = 0.0
            dsh[k, 1] = 0.0
            dsh[k, 2] = 0.0


# --------------------------------------------------------------------------
# public numpy-facing API
# --------------------------------------------------------------------------

def quat_to_rotmat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    qn = np.empty(4)
    _normalize_quat(q, qn)
    R = np.empty((3, 3))
    _quat_to_rotmat(qn, R)
    return R


def rotmat_to_quat(R) -> np.ndarray:
    """Rotation matrix to (w, x, y, z) with non-negative w."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` of (w, x, y, z) quaternions."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2.0)], math.sin(angle / 2.0) * axis])


def build_covariance(q, log_scale) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(exp(log_scale)); ``q`` is normalized here."""
    cov = np.empty((3, 3))
    _covariance(np.asarray(q, dtype=np.float64), np.asarray(log_scale, dtype=np.float64), cov)
    return cov


def build_covariance_vjp(q, log_scale, grad_cov) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_cov * build_covariance(q, log_scale))``.

    Returns:
        ``(d_q, d_log_scale)``; ``d_q`` is taken with respect to the raw,
        un-normalized quaternion.
    """
    dq = np.empty(4)
    dls = np.empty(3)
    _covariance_vjp(np.asarray(q, dtype=np.float64), np.asarray(log_scale, dtype=np.float64),
                    np.asarray(grad_cov, dtype=np.float64), dq, dls)
    return dq, dls


def _pose_arrays(pose: Pose):
    return pose.rotation_matrix(), np.asarray(pose.translation, dtype=np.float64)


def project_gaussian(g: Gaussian3D, pose: Pose, cam: CameraModel) -> Optional[Gaussian2D]:
    """Splat ``g`` into the image of ``cam`` at ``pose``; None when behind the near plane."""
    Rcw, t = _pose_arrays(pose)
    out = np.empty(8)
    ok = _project(g.position, g.rotation, g.log_scale, Rcw, t, cam.fx, cam.fy, cam.cx, cam.cy, out)
    if not ok:
        return None
    cov2d = np.array([[out[3], out[4]], [out[4], out[5]]])
    lam_max = 0.5 * (out[3] + out[5]) + math.sqrt(0.25 * (out[3] - out[5]) ** 2 + out[4] ** 2)
    radius = max(1, int(math.ceil(CUTOFF_SIGMA * math.sqrt(lam_max))))
    return Gaussian2D(mean=out[:2].copy(), cov2d=cov2d, depth=float(out[2]), radius=radius)


def project_gaussian_vjp(g: Gaussian3D, pose: Pose, cam: CameraModel,
                         grad_mean, grad_cov2d, grad_depth: float = 0.0):
    """Gradients of a scalar ``L(mean, cov2d, depth)`` with respect to g's geometry.

    ``grad_cov2d`` is the full 2x2 matrix ``dL/dcov2d``.

    Returns:
        ``(d_position, d_rotation, d_log_scale)``.
    """
    Rcw, t = _pose_arrays(pose)
    dpos, dq, dls = np.empty(3), np.empty(4), np.empty(3)
    _project_vjp(g.position, g.rotation, g.log_scale, Rcw, t, cam.fx, cam.fy,
                 np.asarray(grad_mean, dtype=np.float64), np.asarray(grad_cov2d, dtype=np.float64),
                 float(grad_depth), dpos, dq, dls)
    return dpos, dq, dls


def eval_gaussian_2d(g2: Gaussian2D, x) -> float:
    """exp(-1/2 (x - mu) Sigma^-1 (x - mu)^T) with no cutoff applied."""
    d = np.asarray(x, dtype=np.float64) - g2.mean
    K = np.linalg.inv(g2.cov2d)
    _, val = _gauss2d(d[0], d[1], K[0, 0], 0.5 * (K[0, 1] + K[1, 0]), K[1, 1])
    return val


def eval_gaussian_2d_grad(g2: Gaussian2D, x):
    """Value and gradients with respect to the mean, the full covariance and x.

    Returns:
        ``(value, d_mean, d_cov2d, d_x)``.
    """
    d = np.asarray(x, dtype=np.float64) - g2.mean
    K = np.linalg.inv(g2.cov2d)
    Kd = K @ d
    val = math.exp(-0.5 * float(d @ Kd))
    d_x = -val * Kd
    d_cov = 0.5 * val * np.outer(K.T @ d, Kd)
    return val, -d_x, d_cov, d_x


def eval_sh(sh_coeffs, active_degree: int, view_dir) -> np.ndarray:
    """RGB from SH coefficients plus the 0.5 offset; clamping happens at compositing."""
    sh = np.zeros((N_SH_COEFFS, 3))
    given = np.asarray(sh_coeffs, dtype=np.float64).reshape(-1, 3)
    if sh_coeff_count(active_degree) > len(given):
        raise ConfigurationError(
            f"degree {active_degree} needs {sh_coeff_count(active_degree)} coefficients, got {len(given)}")
    sh[: len(given)] = given
    out = np.empty(3)
    _eval_sh(sh, int(active_degree), np.asarray(view_dir, dtype=np.float64), out)
    return out


def eval_sh_vjp(sh_coeffs, active_degree: int, view_dir, grad_rgb):
    """Returns ``(d_sh (16, 3), d_view_dir (3,))`` treating view_dir components as free."""
    sh = np.zeros((N_SH_COEFFS, 3))
    given = np.asarray(sh_coeffs, dtype=np.float64).reshape(-1, 3)
    sh[: len(given)] = given
    dsh = np.empty((N_SH_COEFFS, 3))
    ddir = np.empty(3)
    _eval_sh_vjp(sh, int(active_degree), np.asarray(view_dir, dtype=np.float64),
                 np.asarray(grad_rgb, dtype=np.float64), dsh, ddir)
    return dsh, ddir


def rgb_to_sh_dc(rgb) -> np.ndarray:
    """Degree-0 coefficient whose evaluation reproduces ``rgb``."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0
