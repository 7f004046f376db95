"""Keyframe admission, visibility filtering, delay buffer and budgeted sampling."""

from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import CameraModel, Pose
from .dataset import project_pixels
from .errors import ConfigurationError
from .voxels import ColoredPoint

DEFAULT_TAU_R = math.radians(5.0)
DEFAULT_TAU_T = 0.1
DEFAULT_TAU_OVERLAP = 0.95
DEFAULT_TAU_ALPHA = 0.5
DEFAULT_DELAY = 3
DEFAULT_BUDGET = 60
DEFAULT_BLUR_THRESHOLD = 100.0
OVERLAP_HISTORY = 5


@dataclass(eq=False)
class Keyframe:
    """A posed image with its sparse LiDAR depth, new points and training budget."""

    id: int
    pose: Pose
    color_image: np.ndarray
    sparse_depth: np.ndarray
    point_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    point_colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    remaining_iters: int = DEFAULT_BUDGET
    timestamp: float = 0.0
    pyramid: list = field(default_factory=list)  # [(color, depth), ...] level 0 = native
    iters_done: int = 0
    budget: int = -1
    ready: bool = True  # False until its points are in the map; unready frames are never sampled

    def __post_init__(self):
        if self.remaining_iters < 0:
            raise ConfigurationError("keyframe budget must be nonnegative")
        if np.any(np.asarray(self.sparse_depth) < 0):
            raise ConfigurationError("sparse depth must be nonnegative")
        if self.budget < 0:
            self.budget = self.remaining_iters

    @property
    def points(self) -> list[ColoredPoint]:
        return [ColoredPoint(tuple(p), tuple(c), self.timestamp)
                for p, c in zip(self.point_positions, self.point_colors)]


def rotation_angle(q1, q2) -> float:
    """Geodesic angle between two unit quaternions, in radians."""
    d = abs(float(np.dot(np.asarray(q1, dtype=np.float64), np.asarray(q2, dtype=np.float64))))
    return 2.0 * math.acos(min(1.0, d))


def should_admit(candidate: Pose, last: Pose, tau_r: float = DEFAULT_TAU_R,
                 tau_t: float = DEFAULT_TAU_T) -> bool:
    """True when the camera turned more than ``tau_r`` or moved more than ``tau_t``.

    Translation distance is measured between camera centres, so it does not
    depend on how far the camera sits from the world origin.
    """
    if tau_r <= 0 or tau_t <= 0:
        raise ConfigurationError("admission thresholds must be positive")
    if rotation_angle(candidate.rotation, last.rotation) > tau_r:
        return True
    return float(np.linalg.norm(candidate.center() - last.center())) > tau_t


def backproject(depth: np.ndarray, pose: Pose, cam: CameraModel) -> np.ndarray:
    """World points for every pixel with ``depth > 0`` (pixel centres at integers)."""
    v, u = np.nonzero(depth > 0)
    z = depth[v, u]
    pc = np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=1)
    return (pc - pose.translation) @ pose.rotation_matrix()


def overlap_ratio(candidate: Keyframe, existing: Keyframe, gmap=None, cam: CameraModel = None) -> float:
    """Share of the candidate's depth pixels that land inside ``existing``'s view.

    Depth comes from the candidate's sparse LiDAR image; where that is empty
    and ``gmap`` is given, the rendered depth of visible pixels fills in.
    Returns 0 when no pixel has depth.
    """
    depth = np.asarray(candidate.sparse_depth, dtype=np.float64)
    if gmap is not None and len(gmap.positions):
        from .raster import render

        with gmap.lock.read():
            out = render(gmap, candidate.pose, cam)
        # composited depth is alpha-weighted; normalize where the map is solid
        solid = out.visibility > 0.5
        rendered = np.where(solid, out.depth / np.where(solid, out.visibility, 1.0), 0.0)
        depth = np.where(depth > 0, depth, rendered)
    if not np.any(depth > 0):
        return 0.0
    pts = backproject(depth, candidate.pose, cam)
    _, _, _, inside = project_pixels(pts, existing.pose, cam)
    return float(inside.mean())


def visibility_keep_mask(positions: np.ndarray, visibility: np.ndarray, pose: Pose, cam: CameraModel,
                         tau_alpha: float) -> np.ndarray:
    """Points to keep: those off-image or landing on a pixel with ``V <= tau_alpha``."""
    if not 0.0 <= tau_alpha <= 1.0:
        raise ConfigurationError("tau_alpha must lie in [0, 1]")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    u, v, _, inside = project_pixels(positions, pose, cam)
    keep = np.ones(len(positions), dtype=bool)
    keep[inside] = visibility[v[inside], u[inside]] <= tau_alpha
    return keep


def filter_points_by_visibility(points, keyframe: Keyframe, gmap, cam: CameraModel,
                                tau_alpha: float = DEFAULT_TAU_ALPHA):
    """Drop points whose pixel is already explained by the map (``V > tau_alpha``).

    ``points`` may be a list of :class:`ColoredPoint` or an (N, 3) position
    array; the result has the same form.
    """
    as_list = isinstance(points, list)
    positions = np.array([p.position for p in points]).reshape(-1, 3) if as_list else np.asarray(points)
    if gmap is None or len(gmap.positions) == 0:
        vis = np.zeros((cam.height, cam.width))
    else:
        from .raster import render

        with gmap.lock.read():
            vis = render(gmap, keyframe.pose, cam).visibility
    keep = visibility_keep_mask(positions, vis, keyframe.pose, cam, tau_alpha)
    if as_list:
        return [p for p, k in zip(points, keep) if k]
    return positions[keep]


def sharpness(image: np.ndarray) -> float:
    """Variance of the Laplacian of the 0-255 grayscale image; low means blurry."""
    img = np.asarray(image, dtype=np.float64)
    gray = img @ np.array([0.299, 0.587, 0.114]) if img.ndim == 3 else img
    return float(ndimage.laplace(gray * 255.0).var())


class KeyframeQueue:
    """Delay buffer, active training pool and retired ids; all methods are atomic."""

    def __init__(self):
        self.buffer: deque[Keyframe] = deque()
        self.active: list[Keyframe] = []
        self.retired: list[int] = []
        self._lock = threading.Lock()

    def push_and_release(self, kf: Keyframe, delay_depth: int = DEFAULT_DELAY) -> list[Keyframe]:
        """Buffer ``kf``; release (and return) whatever sits beyond ``delay_depth``."""
        if delay_depth < 0:
            raise ConfigurationError("delay_depth must be nonnegative")
        with self._lock:
            self.buffer.append(kf)
            released = []
            while len(self.buffer) > delay_depth:
                k = self.buffer.popleft()
                self._activate(k)
                released.append(k)
            return released

    def _activate(self, kf: Keyframe) -> None:
        if kf.remaining_iters > 0:
            self.active.append(kf)
        else:
            self.retired.append(kf.id)

    def flush(self) -> list[Keyframe]:
        """Release every buffered keyframe in order (end of sequence)."""
        with self._lock:
            released = list(self.buffer)
            self.buffer.clear()
            for k in released:
                self._activate(k)
            return released

    def consume(self, kf: Keyframe, iters: int = 1) -> None:
        """Charge ``iters`` iterations to ``kf``; retire it when the budget hits 0."""
        with self._lock:
            self._charge(kf, iters)

    def _charge(self, kf: Keyframe, iters: int) -> None:
        kf.remaining_iters = max(0, kf.remaining_iters - iters)
        if kf.remaining_iters == 0 and kf in self.active:
            self.active.remove(kf)
            self.retired.append(kf.id)

    def sample_for_optimization(self, rng, iters: int = 1) -> Optional[Keyframe]:
        """Uniformly pick an active keyframe with budget left and charge it.

        Args:
            rng: a ``numpy.random.Generator`` or an integer seed.
            iters: iterations charged to the chosen keyframe.

        Returns:
            The keyframe, or None when nothing is trainable.
        """
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        with self._lock:
            pool = [k for k in self.active if k.remaining_iters > 0 and k.ready]
            if not pool:
                return None
            kf = pool[int(rng.integers(len(pool)))]
            self._charge(kf, iters)
            return kf

    def has_work(self) -> bool:
        with self._lock:
            return any(k.remaining_iters > 0 for k in self.active)

    def state_of(self, kf_id: int) -> str:
        with self._lock:
            if any(k.id == kf_id for k in self.buffer):
                return "buffer"
            if any(k.id == kf_id for k in self.active):
                return "active"
            if kf_id in self.retired:
                return "retired"
            return "unknown"
