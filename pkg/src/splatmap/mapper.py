"""Map growth from LiDAR points and coarse-to-fine photometric/depth optimization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import MAX_SH_DEGREE, N_SH_COEFFS, CameraModel, logit, rgb_to_sh_dc, sigmoid
from .errors import BudgetExhausted, ConfigurationError
from .gaussian_map import GaussianMap
from .keyframes import Keyframe
from .metrics import SSIM_WINDOW, psnr, ssim_with_grad
from .raster import RenderOutput, render, render_backward

INIT_OPACITY = 0.1
MIN_SCALE = 1e-4
LONE_POINT_SCALE = 0.01
KNN = 3


@dataclass
class TrainConfig:
    lam: float = 0.2
    lam_d: float = 0.5
    pyramid_levels: int = 2
    iters_per_level: Optional[int] = None  # None: budget // (levels + 1)
    lr_position: float = 1.6e-4
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    prune_threshold: float = 0.005
    prune_interval: int = 100
    sh_interval: int = 300
    scene_extent: Optional[float] = None  # None: measured from the first point batch

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must be in [0, 1], got {self.lam}")
        if self.lam_d < 0:
            raise ConfigurationError(f"lambda_d must be nonnegative, got {self.lam_d}")
        if self.pyramid_levels < 0:
            raise ConfigurationError("pyramid_levels must be nonnegative")
        if self.iters_per_level is not None and self.iters_per_level < 1:
            raise ConfigurationError("iters_per_level must be positive")
        if not 0.0 < self.prune_threshold < 1.0:
            raise ConfigurationError("prune_threshold must be in (0, 1)")
        if self.sh_interval < 1 or self.prune_interval < 1:
            raise ConfigurationError("intervals must be positive")

    def learning_rates(self, extent: float) -> dict[str, float]:
        return {"position": self.lr_position * extent, "rotation": self.lr_rotation,
                "log_scale": self.lr_scale, "opacity_logit": self.lr_opacity, "sh": self.lr_sh}


@dataclass
class StepReport:
    level: int
    loss: float
    psnr: float
    global_step: int
    keyframe: int = -1


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def neighbor_scales(positions: np.ndarray, k: int = KNN, context: Optional[np.ndarray] = None) -> np.ndarray:
    """Mean distance from each point to its (up to) ``k`` nearest neighbours.

    Args:
        positions: (N, 3) query points; they are also neighbour candidates.
        k: neighbours to average.
        context: extra (M, 3) neighbour candidates, e.g. existing Gaussian centres.
    """
    n = len(positions)
    pool = positions if context is None or len(context) == 0 else np.concatenate([positions, context])
    if len(pool) == 1:
        return np.array([LONE_POINT_SCALE])
    kk = min(k, len(pool) - 1)
    dist, _ = cKDTree(pool).query(positions, k=kk + 1)
    return np.maximum(dist[:, 1:].reshape(n, kk).mean(axis=1), MIN_SCALE)


def init_gaussians_from_points(gmap: GaussianMap, positions, colors, use_map_neighbors: bool = False) -> int:
    """Append one isotropic Gaussian per point; returns how many were added.

    Scale is the mean distance to the 3 nearest neighbours within this
    batch (floored at 0.1 mm), opacity starts at 0.1 and the degree-0 SH
    term reproduces the point colour.

    Args:
        gmap: map to grow.
        positions: (N, 3) point positions.
        colors: (N, 3) point colours in [0, 1].
        use_map_neighbors: also count existing Gaussian centres as neighbours,
            so a small batch on the edge of mapped space gets a local scale.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    if n == 0:
        return 0
    scales = neighbor_scales(positions, context=gmap.positions if use_map_neighbors else None)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    sh = np.zeros((n, N_SH_COEFFS, 3))
    sh[:, 0] = rgb_to_sh_dc(colors)
    with gmap.lock.write():
        if gmap.spatial_scale is None:
            gmap.spatial_scale = scene_extent(positions)
        gmap.append(positions, rot, np.log(np.repeat(scales[:, None], 3, axis=1)),
                    np.full(n, logit(INIT_OPACITY)), sh)
    return n


def scene_extent(positions: np.ndarray) -> float:
    """Radius of the point set about its centroid (1.0 when degenerate)."""
    r = float(np.linalg.norm(positions - positions.mean(axis=0), axis=1).max()) if len(positions) else 0.0
    return r if r > 0 else 1.0


# --------------------------------------------------------------------------
# pyramids
# --------------------------------------------------------------------------

def _check_levels(shape, levels: int) -> None:
    if levels < 0:
        raise ConfigurationError("pyramid levels must be nonnegative")
    if min(shape[:2]) < 2**levels:
        raise ConfigurationError(f"image {shape[:2]} too small for {levels} pyramid levels")


def _blocks(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2, img.shape[1] // 2
    return img[: 2 * h, : 2 * w].reshape(h, 2, w, 2, *img.shape[2:])


def build_pyramid(image, levels: int) -> list[np.ndarray]:
    """``levels + 1`` images, each a 2x2 box average of the previous one."""
    img = np.asarray(image, dtype=np.float64)
    _check_levels(img.shape, levels)
    out = [img]
    for _ in range(levels):
        out.append(_blocks(out[-1]).mean(axis=(1, 3)))
    return out


def build_depth_pyramid(depth, levels: int) -> list[np.ndarray]:
    """Sparse-depth pyramid: each 2x2 block averages its nonzero entries (0 if none)."""
    d = np.asarray(depth, dtype=np.float64)
    _check_levels(d.shape, levels)
    out = [d]
    for _ in range(levels):
        b = _blocks(out[-1])
        cnt = (b > 0).sum(axis=(1, 3))
        out.append(np.where(cnt > 0, b.sum(axis=(1, 3)) / np.maximum(cnt, 1), 0.0))
    return out


def prepare_keyframe(kf: Keyframe, levels: int) -> None:
    """Fill ``kf.pyramid`` with (colour, depth) pairs, finest first."""
    colors = build_pyramid(kf.color_image, levels)
    depths = build_depth_pyramid(kf.sparse_depth, levels)
    kf.pyramid = list(zip(colors, depths))


def iters_per_level(budget: int, levels: int, configured: Optional[int] = None) -> int:
    if configured is not None:
        return configured
    return max(1, budget // (levels + 1))


def pyramid_level(iters_done: int, levels: int, per_level: int) -> int:
    """Level to train at after ``iters_done`` steps: coarsest first, native last."""
    stage = min(levels, iters_done // per_level)
    return levels - stage


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def compute_loss(rendered: RenderOutput, kf: Keyframe, level: int, cfg: TrainConfig):
    """Photometric plus LiDAR depth loss and its gradients.

    Returns:
        ``(loss, dL_dcolor, dL_ddepth, parts)`` where ``parts`` holds the
        ``l1``, ``ssim``, ``color`` and ``depth`` terms.

    Raises:
        ConfigurationError: if the render does not match the pyramid level.
    """
    target, lidar = kf.pyramid[level]
    color = rendered.color
    if color.shape != target.shape:
        raise ConfigurationError(f"render {color.shape} does not match pyramid level {level} {target.shape}")
    diff = color - target
    l1 = float(np.abs(diff).mean())
    g_color = (1.0 - cfg.lam) * np.sign(diff) / diff.size
    ssim_val = 1.0
    if cfg.lam > 0 and min(target.shape[:2]) >= SSIM_WINDOW:
        ssim_val, g_ssim = ssim_with_grad(target, color)
        g_color = g_color - cfg.lam * g_ssim
    lc = (1.0 - cfg.lam) * l1 + cfg.lam * (1.0 - ssim_val)

    valid = lidar > 0
    g_depth = np.zeros_like(lidar)
    ld = 0.0
    nv = int(valid.sum())
    if nv and cfg.lam_d > 0:
        dd = rendered.depth - lidar
        ld = float(np.abs(dd[valid]).sum() / nv)
        g_depth[valid] = cfg.lam_d * np.sign(dd[valid]) / nv
    total = lc + cfg.lam_d * ld
    return total, g_color, g_depth, {"l1": l1, "ssim": ssim_val, "color": lc, "depth": ld}


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------

def train_keyframe_step(gmap: GaussianMap, kf: Keyframe, cfg: TrainConfig, cam: CameraModel) -> StepReport:
    """One optimization step on ``kf`` at its scheduled pyramid level.

    Raises:
        BudgetExhausted: when ``kf`` already used its whole budget.
    """
    if kf.iters_done >= kf.budget:
        raise BudgetExhausted(f"keyframe {kf.id} used all {kf.budget} iterations")
    if not kf.pyramid:
        prepare_keyframe(kf, cfg.pyramid_levels)
    levels = len(kf.pyramid) - 1
    level = pyramid_level(kf.iters_done, levels, iters_per_level(kf.budget, levels, cfg.iters_per_level))
    lcam = cam.scaled(level)
    out = render(gmap, kf.pose, lcam)
    loss, g_color, g_depth, _ = compute_loss(out, kf, level, cfg)
    grads = render_backward(gmap, kf.pose, lcam, out, g_color, g_depth).as_dict()
    extent = cfg.scene_extent or gmap.spatial_scale or 1.0
    with gmap.lock.write():
        gmap.adam_step(grads, cfg.learning_rates(extent))
        gmap.global_step += 1
    kf.iters_done += 1
    return StepReport(level=level, loss=loss, psnr=psnr(np.clip(out.color, 0, 1), kf.pyramid[level][0]),
                      global_step=gmap.global_step, keyframe=kf.id)


def maybe_upgrade_sh(gmap: GaussianMap, cfg: TrainConfig) -> int:
    """Raise the active SH degree by one every ``sh_interval`` global steps (max 3)."""
    target = min(MAX_SH_DEGREE, gmap.global_step // cfg.sh_interval)
    if target > gmap.active_degree:
        with gmap.lock.write():
            gmap.active_degree = target
    return gmap.active_degree


def prune(gmap: GaussianMap, threshold: float) -> int:
    """Remove Gaussians whose opacity fell below ``threshold``; returns the count."""
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError("prune threshold must be in (0, 1)")
    mask = sigmoid(gmap.opacity_logits) < threshold
    if not mask.any():
        return 0
    with gmap.lock.write():
        return gmap.remove(mask)
