"""Tile-based forward rendering and its analytic adjoint.

The forward pass projects every Gaussian, bins it into 16x16 pixel tiles by
its 3-sigma radius, sorts the (tile, Gaussian) pairs front to back, then
composites colour, depth and visibility per pixel. Each pixel's ordered
contributor list is recorded so the backward pass can replay it in reverse.

Parallelism is over tiles. The backward pass writes one gradient record per
(tile, Gaussian) pair and reduces them per Gaussian in a fixed order, so
results do not depend on the thread count.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from numba import njit, prange

from .core import (COV2D_DILATION, CUTOFF_SIGMA, N_SH_COEFFS, CameraModel, Pose,
                   _eval_sh, _eval_sh_vjp, _gauss2d, _project, _project_vjp)
from .errors import ConfigurationError, ConsistencyError

# the pipeline renders from more than one Python thread; the default
# workqueue layer aborts on concurrent entry
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "threadsafe"
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]
warnings.filterwarnings("ignore", message="The TBB threading layer requires")

TILE = 16
ALPHA_MAX = 0.99
T_MIN = 1e-4
CUTOFF_Q = CUTOFF_SIGMA * CUTOFF_SIGMA

# gradient record layout per (tile, gaussian) pair
_G_MX, _G_MY, _G_K00, _G_K01, _G_K11, _G_OP, _G_R, _G_G, _G_B, _G_D = range(10)


def set_threads(n: int) -> None:
    """Set the rasterizer thread count (clamped to what numba was started with)."""
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    visibility: np.ndarray
    # contributor lists in CSR form: pixel p owns slots offsets[p]:offsets[p+1]
    offsets: np.ndarray = field(repr=False)
    contrib_index: np.ndarray = field(repr=False)
    contrib_alpha: np.ndarray = field(repr=False)
    contrib_trans: np.ndarray = field(repr=False)
    contrib_entry: np.ndarray = field(repr=False)
    contrib_clamped: np.ndarray = field(repr=False)
    # per-Gaussian screen-space state reused by the backward pass
    geo: np.ndarray = field(repr=False)
    conic: np.ndarray = field(repr=False)
    opacity: np.ndarray = field(repr=False)
    rgb: np.ndarray = field(repr=False)
    rgb_clamp: np.ndarray = field(repr=False)
    valid: np.ndarray = field(repr=False)
    n_entries: int = 0
    entry_index: np.ndarray = field(default=None, repr=False)
    n_gaussians: int = 0
    sh_degree: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def contributors(self, y: int, x: int) -> list[tuple[int, float]]:
        """Ordered ``(gaussian index, alpha)`` pairs composited at pixel (y, x)."""
        p = y * self.depth.shape[1] + x
        lo, hi = self.offsets[p], self.offsets[p + 1]
        return [(int(i), float(a)) for i, a in zip(self.contrib_index[lo:hi], self.contrib_alpha[lo:hi])]

    @property
    def per_pixel_contributors(self):
        h, w = self.depth.shape
        return [[self.contributors(y, x) for x in range(w)] for y in range(h)]


@dataclass
class RenderGradients:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"position": self.position, "rotation": self.rotation, "log_scale": self.log_scale,
                "opacity_logit": self.opacity_logit, "sh": self.sh}


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

@njit(parallel=True, cache=True, nogil=True)
def _preprocess(pos, rot, lsc, olog, sh, deg, Rcw, t, campos, fx, fy, cx, cy, W, H,
                geo, conic, opac, rgb, rgb_clamp, rect, valid):
    n = pos.shape[0]
    for i in prange(n):
        valid[i] = False
        out = np.empty(8)
        if not _project(pos[i], rot[i], lsc[i], Rcw, t, fx, fy, cx, cy, out):
            continue
        a, b, c = out[3], out[4], out[5]
        det = a * c - b * b
        if det <= 0.0:
            continue
        lam = 0.5 * (a + c) + math.sqrt(0.25 * (a - c) * (a - c) + b * b)
        r = math.ceil(CUTOFF_SIGMA * math.sqrt(lam))
        if r < 1.0:
            r = 1.0
        px0 = max(0.0, math.ceil(out[0] - r))
        px1 = min(W - 1.0, math.floor(out[0] + r))
        py0 = max(0.0, math.ceil(out[1] - r))
        py1 = min(H - 1.0, math.floor(out[1] + r))
        if px0 > px1 or py0 > py1:
            continue
        for k in range(8):
            geo[i, k] = out[k]
        conic[i, 0] = c / det
        conic[i, 1] = -b / det
        conic[i, 2] = a / det
        opac[i] = 1.0 / (1.0 + math.exp(-olog[i]))
        d = np.empty(3)
        nrm = 0.0
        for k in range(3):
            d[k] = pos[i, k] - campos[k]
            nrm += d[k] * d[k]
        nrm = math.sqrt(nrm)
        for k in range(3):
            d[k] /= nrm
        col = np.empty(3)
        _eval_sh(sh[i], deg, d, col)
        for k in range(3):
            if col[k] < 0.0:
                rgb[i, k] = 0.0
                rgb_clamp[i, k] = True
            elif col[k] > 1.0:
                rgb[i, k] = 1.0
                rgb_clamp[i, k] = True
            else:
                rgb[i, k] = col[k]
                rgb_clamp[i, k] = False
        rect[i, 0] = int(px0) // 16
        rect[i, 1] = int(py0) // 16
        rect[i, 2] = int(px1) // 16
        rect[i, 3] = int(py1) // 16
        valid[i] = True


@njit(cache=True, nogil=True)
def _bin(rect, valid, n_tx, counts, tile_ids, gidx):
    off = 0
    for i in range(rect.shape[0]):
        if not valid[i]:
            continue
        for ty in range(rect[i, 1], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 2] + 1):
                tile_ids[off] = ty * n_tx + tx
                gidx[off] = i
                off += 1
    return off


@njit(parallel=True, cache=True, nogil=True)
def _forward(tile_start, tile_end, s_gidx, geo, conic, opac, rgb, n_tx, n_tiles, W, H,
             out_color, out_depth, out_vis, counts):
    for tile in prange(n_tiles):
        ty = tile // n_tx
        tx = tile - ty * n_tx
        s = tile_start[tile]
        e = tile_end[tile]
        for py in range(ty * 16, min(H, ty * 16 + 16)):
            for px in range(tx * 16, min(W, tx * 16 + 16)):
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                dd = 0.0
                n = 0
                for k in range(s, e):
                    gi = s_gidx[k]
                    qf, G = _gauss2d(px - geo[gi, 0], py - geo[gi, 1], conic[gi, 0], conic[gi, 1], conic[gi, 2])
                    if qf > CUTOFF_Q:
                        continue
                    a = opac[gi] * G
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a <= 0.0:
                        continue
                    w = a * T
                    cr += rgb[gi, 0] * w
                    cg += rgb[gi, 1] * w
                    cb += rgb[gi, 2] * w
                    dd += geo[gi, 2] * w
                    T *= 1.0 - a
                    n += 1
                    if T < T_MIN:
                        break
                p = py * W + px
                out_color[py, px, 0] = cr
                out_color[py, px, 1] = cg
                out_color[py, px, 2] = cb
                out_depth[py, px] = dd
                out_vis[py, px] = 1.0 - T
                counts[p] = n


@njit(parallel=True, cache=True, nogil=True)
def _record(tile_start, tile_end, s_gidx, geo, conic, opac, n_tx, n_tiles, W, H,
            offsets, c_idx, c_alpha, c_trans, c_entry, c_clamp):
    for tile in prange(n_tiles):
        ty = tile // n_tx
        tx = tile - ty * n_tx
        s = tile_start[tile]
        e = tile_end[tile]
        for py in range(ty * 16, min(H, ty * 16 + 16)):
            for px in range(tx * 16, min(W, tx * 16 + 16)):
                slot = offsets[py * W + px]
                T = 1.0
                for k in range(s, e):
                    gi = s_gidx[k]
                    qf, G = _gauss2d(px - geo[gi, 0], py - geo[gi, 1], conic[gi, 0], conic[gi, 1], conic[gi, 2])
                    if qf > CUTOFF_Q:
                        continue
                    a = opac[gi] * G
                    clamped = False
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                        clamped = True
                    if a <= 0.0:
                        continue
                    c_idx[slot] = gi
                    c_alpha[slot] = a
                    c_trans[slot] = T
                    c_entry[slot] = k
                    c_clamp[slot] = clamped
                    slot += 1
                    T *= 1.0 - a
                    if T < T_MIN:
                        break


@njit(parallel=True, cache=True, nogil=True)
def _backward_pixels(n_tx, n_tiles, W, H, offsets, c_idx, c_alpha, c_trans, c_entry, c_clamp,
                     geo, conic, opac, rgb, g_color, g_depth, gbuf):
    for tile in prange(n_tiles):
        ty = tile // n_tx
        tx = tile - ty * n_tx
        for py in range(ty * 16, min(H, ty * 16 + 16)):
            for px in range(tx * 16, min(W, tx * 16 + 16)):
                p = py * W + px
                gr = g_color[py, px, 0]
                gg = g_color[py, px, 1]
                gb = g_color[py, px, 2]
                gd = g_depth[py, px]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0:
                    continue
                suffix = 0.0
                for slot in range(offsets[p + 1] - 1, offsets[p] - 1, -1):
                    gi = c_idx[slot]
                    a = c_alpha[slot]
                    T = c_trans[slot]
                    e = c_entry[slot]
                    w = a * T
                    cdot = gr * rgb[gi, 0] + gg * rgb[gi, 1] + gb * rgb[gi, 2] + gd * geo[gi, 2]
                    gbuf[e, _G_R] += gr * w
                    gbuf[e, _G_G] += gg * w
                    gbuf[e, _G_B] += gb * w
                    gbuf[e, _G_D] += gd * w
                    d_alpha = T * cdot - suffix / (1.0 - a)
                    suffix += cdot * w
                    if c_clamp[slot]:
                        continue
                    o = opac[gi]
                    G = a / o
                    gbuf[e, _G_OP] += d_alpha * G
                    # alpha = o * exp(-q/2)  ->  dL/dq = -1/2 * dL/dalpha * alpha
                    dq = -0.5 * d_alpha * a
                    dx = px - geo[gi, 0]
                    dy = py - geo[gi, 1]
                    k00 = conic[gi, 0]
                    k01 = conic[gi, 1]
                    k11 = conic[gi, 2]
                    gbuf[e, _G_MX] += -2.0 * dq * (k00 * dx + k01 * dy)
                    gbuf[e, _G_MY] += -2.0 * dq * (k01 * dx + k11 * dy)
                    gbuf[e, _G_K00] += dq * dx * dx
                    gbuf[e, _G_K01] += dq * dx * dy
                    gbuf[e, _G_K11] += dq * dy * dy


@njit(parallel=True, cache=True, nogil=True)
def _backward_gaussians(order, g_start, g_end, gbuf, pos, rot, lsc, sh, deg, Rcw, t, campos, fx, fy,
                        conic, opac, rgb_clamp, valid,
                        d_pos, d_rot, d_lsc, d_olog, d_sh):
    n = pos.shape[0]
    for i in prange(n):
        if not valid[i] or g_start[i] == g_end[i]:
            continue
        acc = np.zeros(10)
        for k in range(g_start[i], g_end[i]):
            e = order[k]
            for j in range(10):
                acc[j] += gbuf[e, j]
        o = opac[i]
        d_olog[i] = acc[_G_OP] * o * (1.0 - o)

        # colour through the SH basis (clamped channels pass no gradient)
        dcol = np.empty(3)
        for c in range(3):
            dcol[c] = 0.0 if rgb_clamp[i, c] else acc[_G_R + c]
        v = np.empty(3)
        nrm = 0.0
        for k in range(3):
            v[k] = pos[i, k] - campos[k]
            nrm += v[k] * v[k]
        nrm = math.sqrt(nrm)
        dirn = v / nrm
        ddir = np.empty(3)
        dsh = np.empty((16, 3))
        _eval_sh_vjp(sh[i], deg, dirn, dcol, dsh, ddir)
        for k in range(16):
            for c in range(3):
                d_sh[i, k, c] = dsh[k, c]
        dot = dirn[0] * ddir[0] + dirn[1] * ddir[1] + dirn[2] * ddir[2]

        # conic K = cov^-1  ->  dL/dcov = -K G K
        K = np.empty((2, 2))
        K[0, 0] = conic[i, 0]
        K[0, 1] = conic[i, 1]
        K[1, 0] = conic[i, 1]
        K[1, 1] = conic[i, 2]
        Gk = np.empty((2, 2))
        Gk[0, 0] = acc[_G_K00]
        Gk[0, 1] = acc[_G_K01]
        Gk[1, 0] = acc[_G_K01]
        Gk[1, 1] = acc[_G_K11]
        dcov = np.empty((2, 2))
        for r in range(2):
            for c in range(2):
                dcov[r, c] = -(K[r, 0] * (Gk[0, 0] * K[0, c] + Gk[0, 1] * K[1, c])
                               + K[r, 1] * (Gk[1, 0] * K[0, c] + Gk[1, 1] * K[1, c]))
        gm = np.empty(2)
        gm[0] = acc[_G_MX]
        gm[1] = acc[_G_MY]
        dp = np.empty(3)
        dq = np.empty(4)
        dl = np.empty(3)
        _project_vjp(pos[i], rot[i], lsc[i], Rcw, t, fx, fy, gm, dcov, acc[_G_D], dp, dq, dl)
        for k in range(3):
            d_pos[i, k] = dp[k] + (ddir[k] - dirn[k] * dot) / nrm
            d_lsc[i, k] = dl[k]
        for k in range(4):
            d_rot[i, k] = dq[k]


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------

def _map_arrays(gmap):
    return (np.ascontiguousarray(gmap.positions, dtype=np.float64),
            np.ascontiguousarray(gmap.rotations, dtype=np.float64),
            np.ascontiguousarray(gmap.log_scales, dtype=np.float64),
            np.ascontiguousarray(gmap.opacity_logits, dtype=np.float64),
            np.ascontiguousarray(gmap.sh, dtype=np.float64))


def render(gmap, pose: Pose, cam: CameraModel, buffers: Optional[tuple] = None) -> RenderOutput:
    """Render colour, depth and visibility of ``gmap`` seen from ``pose``.

    Args:
        gmap: any object exposing ``positions``, ``rotations``, ``log_scales``,
            ``opacity_logits``, ``sh`` and ``active_degree`` arrays/attributes.
        pose: world-to-camera pose.
        cam: intrinsics; the output has shape ``(cam.height, cam.width)``.
        buffers: optional preallocated ``(color, depth, visibility)`` arrays.

    Raises:
        ConfigurationError: if ``buffers`` do not match the camera size.
    """
    H, W = cam.height, cam.width
    if buffers is not None:
        color, depth, vis = buffers
        if color.shape != (H, W, 3) or depth.shape != (H, W) or vis.shape != (H, W):
            raise ConfigurationError(
                f"render buffers {color.shape}/{depth.shape}/{vis.shape} do not match camera {W}x{H}")
    else:
        color = np.zeros((H, W, 3))
        depth = np.zeros((H, W))
        vis = np.zeros((H, W))

    pos, rot, lsc, olog, sh = _map_arrays(gmap)
    n = pos.shape[0]
    deg = int(gmap.active_degree)
    Rcw = pose.rotation_matrix()
    t = np.asarray(pose.translation, dtype=np.float64)
    campos = -Rcw.T @ t

    geo = np.zeros((n, 8))
    conic = np.zeros((n, 3))
    opac = np.zeros(n)
    rgb = np.zeros((n, 3))
    rgb_clamp = np.zeros((n, 3), dtype=np.bool_)
    rect = np.zeros((n, 4), dtype=np.int64)
    valid = np.zeros(n, dtype=np.bool_)
    if n:
        _preprocess(pos, rot, lsc, olog, sh, deg, Rcw, t, campos, cam.fx, cam.fy, cam.cx, cam.cy,
                    float(W), float(H), geo, conic, opac, rgb, rgb_clamp, rect, valid)

    n_tx = (W + TILE - 1) // TILE
    n_ty = (H + TILE - 1) // TILE
    n_tiles = n_tx * n_ty
    per_g = np.where(valid, (rect[:, 2] - rect[:, 0] + 1) * (rect[:, 3] - rect[:, 1] + 1), 0)
    total = int(per_g.sum())
    tile_ids = np.empty(total, dtype=np.int64)
    gidx = np.empty(total, dtype=np.int64)
    if total:
        _bin(rect, valid, n_tx, per_g, tile_ids, gidx)
    # tile-major, then front to back, ties by Gaussian index
    order = np.lexsort((gidx, geo[gidx, 2], tile_ids))
    s_tiles = tile_ids[order]
    s_gidx = np.ascontiguousarray(gidx[order])
    tiles = np.arange(n_tiles)
    tile_start = np.searchsorted(s_tiles, tiles, side="left")
    tile_end = np.searchsorted(s_tiles, tiles, side="right")

    counts = np.zeros(H * W, dtype=np.int64)
    color.fill(0.0)
    depth.fill(0.0)
    vis.fill(0.0)
    _forward(tile_start, tile_end, s_gidx, geo, conic, opac, rgb, n_tx, n_tiles, W, H,
             color, depth, vis, counts)

    offsets = np.zeros(H * W + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    m = int(offsets[-1])
    c_idx = np.empty(m, dtype=np.int64)
    c_alpha = np.empty(m)
    c_trans = np.empty(m)
    c_entry = np.empty(m, dtype=np.int64)
    c_clamp = np.empty(m, dtype=np.bool_)
    _record(tile_start, tile_end, s_gidx, geo, conic, opac, n_tx, n_tiles, W, H,
            offsets, c_idx, c_alpha, c_trans, c_entry, c_clamp)

    return RenderOutput(color=color, depth=depth, visibility=vis, offsets=offsets,
                        contrib_index=c_idx, contrib_alpha=c_alpha, contrib_trans=c_trans,
                        contrib_entry=c_entry, contrib_clamped=c_clamp, geo=geo, conic=conic,
                        opacity=opac, rgb=rgb, rgb_clamp=rgb_clamp, valid=valid,
                        n_entries=total, entry_index=s_gidx, n_gaussians=n, sh_degree=deg)


def render_backward(gmap, pose: Pose, cam: CameraModel, out: RenderOutput,
                    dL_dcolor: np.ndarray, dL_ddepth: np.ndarray) -> RenderGradients:
    """Exact gradients of ``sum(dL_dcolor * color) + sum(dL_ddepth * depth)``.

    Raises:
        ConsistencyError: if ``out`` was not produced from this map and camera.
    """
    H, W = cam.height, cam.width
    n = len(gmap.positions)
    if out is None or out.offsets is None or out.entry_index is None:
        raise ConsistencyError("render output carries no contributor lists")
    if out.n_gaussians != n or out.shape != (H, W) or out.sh_degree != int(gmap.active_degree):
        raise ConsistencyError(
            f"render output ({out.n_gaussians} gaussians, {out.shape}) does not match "
            f"map ({n} gaussians) and camera ({H}, {W})")
    dL_dcolor = np.ascontiguousarray(dL_dcolor, dtype=np.float64)
    dL_ddepth = np.ascontiguousarray(dL_ddepth, dtype=np.float64)
    if dL_dcolor.shape != (H, W, 3) or dL_ddepth.shape != (H, W):
        raise ConfigurationError("output gradient buffers do not match the render size")

    pos, rot, lsc, olog, sh = _map_arrays(gmap)
    grads = RenderGradients(position=np.zeros((n, 3)), rotation=np.zeros((n, 4)),
                            log_scale=np.zeros((n, 3)), opacity_logit=np.zeros(n),
                            sh=np.zeros((n, N_SH_COEFFS, 3)))
    if n == 0 or out.n_entries == 0:
        return grads

    n_tx = (W + TILE - 1) // TILE
    n_tiles = n_tx * ((H + TILE - 1) // TILE)
    gbuf = np.zeros((out.n_entries, 10))
    _backward_pixels(n_tx, n_tiles, W, H, out.offsets, out.contrib_index, out.contrib_alpha,
                     out.contrib_trans, out.contrib_entry, out.contrib_clamped,
                     out.geo, out.conic, out.opacity, out.rgb, dL_dcolor, dL_ddepth, gbuf)

    order = np.argsort(out.entry_index, kind="stable")
    ids = np.arange(n)
    g_start = np.searchsorted(out.entry_index[order], ids, side="left")
    g_end = np.searchsorted(out.entry_index[order], ids, side="right")
    Rcw = pose.rotation_matrix()
    t = np.asarray(pose.translation, dtype=np.float64)
    campos = -Rcw.T @ t
    _backward_gaussians(order, g_start, g_end, gbuf, pos, rot, lsc, sh, int(gmap.active_degree),
                        Rcw, t, campos, cam.fx, cam.fy, out.conic, out.opacity, out.rgb_clamp,
                        out.valid, grads.position, grads.rotation, grads.log_scale,
                        grads.opacity_logit, grads.sh)
    return grads


__all__ = ["render", "render_backward", "RenderOutput", "RenderGradients", "set_threads",
           "TILE", "ALPHA_MAX", "T_MIN", "COV2D_DILATION"]
