"""Slow, independent numpy implementations used as test oracles.

Nothing here shares code with the numba kernels. Rotations come from scipy,
2D covariances are inverted with ``np.linalg.inv`` and the SH basis is
written out separately, so agreement with the fast path is meaningful.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from .core import COV2D_DILATION, CUTOFF_SIGMA, NEAR_CLIP, CameraModel, Pose

_ALPHA_MAX = 0.99

# real SH constants (3DGS sign convention)
_Y0 = 0.28209479177387814
_Y1 = 0.4886025119029199
_Y2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792,
       0.5462742152960396)
_Y3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
       -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def rotmats(quats_wxyz: np.ndarray) -> np.ndarray:
    """Rotation matrices for (N, 4) w-first quaternions (normalized by scipy)."""
    q = np.atleast_2d(quats_wxyz)
    return Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """(N, 16) real SH basis values for unit directions; unused degrees are 0."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.zeros((len(dirs), 16))
    out[:, 0] = _Y0
    if degree >= 1:
        out[:, 1] = -_Y1 * y
        out[:, 2] = _Y1 * z
        out[:, 3] = -_Y1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = _Y2[0] * x * y
        out[:, 5] = _Y2[1] * y * z
        out[:, 6] = _Y2[2] * (2 * zz - xx - yy)
        out[:, 7] = _Y2[3] * x * z
        out[:, 8] = _Y2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = _Y3[0] * y * (3 * xx - yy)
        out[:, 10] = _Y3[1] * x * y * z
        out[:, 11] = _Y3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = _Y3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = _Y3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = _Y3[5] * z * (xx - yy)
        out[:, 15] = _Y3[6] * x * (xx - 3 * yy)
    return out


def splat(positions, rotations, log_scales, opacity_logits, sh, degree, pose: Pose, cam: CameraModel):
    """Project a batch of Gaussians.

    Returns:
        dict with ``mean`` (N, 2), ``conic`` (N, 2, 2), ``depth`` (N,),
        ``opacity`` (N,), ``rgb_raw`` (N, 3) unclamped colour and ``valid`` (N,).
    """
    positions = np.atleast_2d(positions)
    Rcw = pose.rotation_matrix()
    t = np.asarray(pose.translation)
    pc = positions @ Rcw.T + t
    valid = pc[:, 2] > NEAR_CLIP
    z = np.where(valid, pc[:, 2], 1.0)
    R = rotmats(rotations)
    S2 = np.exp(2.0 * np.atleast_2d(log_scales))
    cov3 = np.einsum("nij,nj,nkj->nik", R, S2, R)
    J = np.zeros((len(pc), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * pc[:, 0] / z**2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * pc[:, 1] / z**2
    M = J @ Rcw
    cov2 = M @ cov3 @ np.swapaxes(M, 1, 2) + COV2D_DILATION * np.eye(2)
    mean = np.stack([cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy], axis=1)
    campos = -Rcw.T @ t
    v = positions - campos
    dirs = v / np.linalg.norm(v, axis=1, keepdims=True)
    rgb = np.einsum("nk,nkc->nc", sh_basis(dirs, degree), np.asarray(sh).reshape(len(pc), 16, 3)) + 0.5
    return {"mean": mean, "conic": np.linalg.inv(cov2), "cov2d": cov2, "depth": pc[:, 2],
            "opacity": 1.0 / (1.0 + np.exp(-np.asarray(opacity_logits))), "rgb_raw": rgb,
            "valid": valid}


def render_brute_force(gmap, pose: Pose, cam: CameraModel):
    """Composite every Gaussian at every pixel, sorted by depth, with no early exit.

    Returns:
        ``(color, depth, visibility, transmittance)`` where transmittance is
        the running product of ``1 - alpha`` over all contributions.
    """
    H, W = cam.height, cam.width
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    T = np.ones((H, W))
    n = len(gmap.positions)
    if n == 0:
        return color, depth, 1.0 - T, T
    s = splat(gmap.positions, gmap.rotations, gmap.log_scales, gmap.opacity_logits, gmap.sh,
              gmap.active_degree, pose, cam)
    rgb = np.clip(s["rgb_raw"], 0.0, 1.0)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    order = sorted((i for i in range(n) if s["valid"][i]), key=lambda i: (s["depth"][i], i))
    for i in order:
        dx = xs - s["mean"][i, 0]
        dy = ys - s["mean"][i, 1]
        K = s["conic"][i]
        q = K[0, 0] * dx * dx + (K[0, 1] + K[1, 0]) * dx * dy + K[1, 1] * dy * dy
        a = np.minimum(_ALPHA_MAX, s["opacity"][i] * np.exp(-0.5 * q))
        a[q > CUTOFF_SIGMA**2] = 0.0
        w = a * T
        color += w[..., None] * rgb[i]
        depth += w * s["depth"][i]
        T = T * (1.0 - a)
    return color, depth, 1.0 - T, T


# --------------------------------------------------------------------------
# finite differences on a frozen compositing structure
# --------------------------------------------------------------------------

def _variants(vec: np.ndarray, h: float) -> np.ndarray:
    """Rows vec + s h e_k for s in (1, -1, 2, -2), each block covering every k."""
    eye = np.eye(len(vec)) * h
    return np.concatenate([vec + eye, vec - eye, vec + 2 * eye, vec - 2 * eye])


def central_difference(f_p1, f_m1, f_p2, f_m2, h: float):
    """Fourth-order central difference from values at x+h, x-h, x+2h, x-2h."""
    return (8.0 * (f_p1 - f_m1) - (f_p2 - f_m2)) / (12.0 * h)


def frozen_fd_gradients(gmap, pose: Pose, cam: CameraModel, out, w_color: np.ndarray,
                        w_depth: np.ndarray, h: float = 1e-4) -> dict[str, np.ndarray]:
    """Central differences (step ``h``) of ``sum(w_color * C) + sum(w_depth * D)``.

    The contributor list of every pixel, the alpha-clamp flags and the colour
    clamp flags are taken from ``out`` and held fixed, so the differenced
    function is the smooth piece the analytic gradient describes. Because a
    perturbation of Gaussian ``i`` only changes ``alpha_i``, ``c_i`` and
    ``d_i``, each pixel is recomposed in closed form:
    ``C = P + c_i a_i T_i + (1 - a_i) / (1 - a_i0) * S_after``.
    """
    n = len(gmap.positions)
    H, W = cam.height, cam.width
    deg = int(gmap.active_degree)
    grads = {"position": np.zeros((n, 3)), "rotation": np.zeros((n, 4)), "log_scale": np.zeros((n, 3)),
             "opacity_logit": np.zeros(n), "sh": np.zeros((n, 16, 3))}
    if n == 0 or len(out.contrib_index) == 0:
        return grads

    # per-slot pixel coordinates and weights
    counts = np.diff(out.offsets)
    pix = np.repeat(np.arange(H * W), counts)
    py, px = np.divmod(pix, W)
    wc = w_color.reshape(-1, 3)[pix]
    wd = w_depth.reshape(-1)[pix]
    idx = out.contrib_index
    a0 = out.contrib_alpha
    T0 = out.contrib_trans
    # per-slot weighted value c.w + d.w of the contributing Gaussian at base
    base = splat(gmap.positions, gmap.rotations, gmap.log_scales, gmap.opacity_logits, gmap.sh,
                 deg, pose, cam)
    rgb0 = np.clip(base["rgb_raw"], 0.0, 1.0)
    val = np.einsum("sc,sc->s", rgb0[idx], wc) + base["depth"][idx] * wd
    contrib = val * a0 * T0
    # S_after: weighted contributions behind each slot within its pixel
    csum = np.cumsum(contrib)
    pix_end = out.offsets[1:][pix]
    after = csum[pix_end - 1] - csum

    rgb_clamped = out.rgb_clamp
    for i in range(n):
        slots = np.nonzero(idx == i)[0]
        if len(slots) == 0:
            continue
        x0 = np.concatenate([gmap.positions[i], gmap.rotations[i], gmap.log_scales[i],
                             [gmap.opacity_logits[i]], np.asarray(gmap.sh[i]).reshape(-1)])
        V = _variants(x0, h)
        m = len(V)
        s = splat(V[:, 0:3], V[:, 3:7], V[:, 7:10], V[:, 10], V[:, 11:59], deg, pose, cam)
        # colour clamp frozen at the base state
        rgb = np.where(rgb_clamped[i], rgb0[i], s["rgb_raw"])
        dx = px[slots][None, :] - s["mean"][:, 0:1]
        dy = py[slots][None, :] - s["mean"][:, 1:2]
        K = s["conic"]
        q = (K[:, 0, 0, None] * dx * dx + (K[:, 0, 1, None] + K[:, 1, 0, None]) * dx * dy
             + K[:, 1, 1, None] * dy * dy)
        a = s["opacity"][:, None] * np.exp(-0.5 * q)
        clamped = out.contrib_clamped[slots]
        a = np.where(clamped[None, :], _ALPHA_MAX, a)
        v = rgb @ wc[slots].T + s["depth"][:, None] * wd[slots][None, :]
        T = T0[slots][None, :]
        total = (v * a * T + (1.0 - a) / (1.0 - a0[slots])[None, :] * after[slots][None, :]).sum(axis=1)
        k = m // 4
        g = central_difference(total[:k], total[k:2 * k], total[2 * k:3 * k], total[3 * k:], h)
        grads["position"][i] = g[0:3]
        grads["rotation"][i] = g[3:7]
        grads["log_scale"][i] = g[7:10]
        grads["opacity_logit"][i] = g[10]
        grads["sh"][i] = g[11:59].reshape(16, 3)
    return grads


def frozen_loss(gmap, pose: Pose, cam: CameraModel, out, w_color, w_depth) -> float:
    """The loss ``frozen_fd_gradients`` differentiates, recomposed pixel by pixel."""
    deg = int(gmap.active_degree)
    s = splat(gmap.positions, gmap.rotations, gmap.log_scales, gmap.opacity_logits, gmap.sh,
              deg, pose, cam)
    rgb = np.where(out.rgb_clamp, np.clip(s["rgb_raw"], 0.0, 1.0), s["rgb_raw"])
    H, W = cam.height, cam.width
    total = 0.0
    for p in range(H * W):
        y, x = divmod(p, W)
        T = 1.0
        for slot in range(out.offsets[p], out.offsets[p + 1]):
            i = out.contrib_index[slot]
            if out.contrib_clamped[slot]:
                a = _ALPHA_MAX
            else:
                d = np.array([x, y]) - s["mean"][i]
                a = s["opacity"][i] * np.exp(-0.5 * d @ s["conic"][i] @ d)
            total += a * T * (rgb[i] @ w_color[y, x] + s["depth"][i] * w_depth[y, x])
            T *= 1.0 - a
    return float(total)
