"""Synthetic scenes with exact ground truth, written as sequences.

Two scenes, both tiled with flat, nearly opaque Gaussians: a long wall the
camera tracks past ("line", which keeps revealing new surface) and a cube
the camera circles ("orbit"). The camera always stays well away from every
Gaussian, which avoids the huge footprints of splats lying almost in the
camera plane. Each frame's point cloud holds the centres of the
camera-facing Gaussians whose footprint reaches the image.

Surface details are chosen so the scenes are learnable and pass the
keyframe sharpness gate at the default resolution: splats sit at random
heights above the surface (so overlapping neighbours composite in a stable
order) and a share of them are small, high-contrast speckles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .core import N_SH_COEFFS, SH_C0, CameraModel, Pose, logit, project_gaussian, quat_to_rotmat, rgb_to_sh_dc
from .dataset import Frame, to_uint8, write_sequence
from .errors import ConfigurationError
from .gaussian_map import GaussianMap
from .raster import render

GT_DEPTH_DIR = "gt_depth"
GT_MAP = "gt_map.ckpt"
TRAJECTORIES = ("orbit", "line")
ORBIT_RADIUS = 1.6  # camera distance from the cube centre, in units of the cube side
WALL_LENGTH = 5.0  # wall size and camera path, in units of extent
WALL_HEIGHT = 1.5
WALL_DISTANCE = 1.5
LINE_TRAVEL = 3.0
DISC_SIZE = (0.55, 0.75)  # in-plane scale range, in units of the mean spacing
FLATNESS = 0.01  # normal scale, in units of the mean spacing
OPACITY_RANGE = (0.9, 0.99)
SPECKLE_FRACTION = 0.15
SPECKLE_SCALE = 0.5
SPECKLE_LIFT = 0.1
RELIEF = 1.0  # surface roughness, in units of the mean spacing


@dataclass
class SyntheticSpec:
    n_gaussians: int = 500
    extent: float = 2.0  # cube side; wall and camera path scale with it too
    trajectory: str = "line"
    n_frames: int = 20
    seed: int = 0
    width: int = 64
    height: int = 48
    hfov_deg: float = 60.0

    def __post_init__(self):
        if self.n_gaussians < 1 or self.n_frames < 1:
            raise ConfigurationError("need at least one Gaussian and one frame")
        if self.extent <= 0:
            raise ConfigurationError("extent must be positive")
        if self.trajectory not in TRAJECTORIES:
            raise ConfigurationError(f"trajectory must be one of {TRAJECTORIES}, got {self.trajectory!r}")

    def camera(self) -> CameraModel:
        f = 0.5 * self.width / math.tan(math.radians(self.hfov_deg) / 2.0)
        return CameraModel(f, f, (self.width - 1) / 2.0, (self.height - 1) / 2.0, self.width, self.height)


@dataclass
class SyntheticScene:
    spec: SyntheticSpec
    gaussians: GaussianMap
    camera: CameraModel
    poses: list[Pose]
    timestamps: np.ndarray
    colors: list[np.ndarray] = field(repr=False)
    depths: list[np.ndarray] = field(repr=False)
    visibilities: list[np.ndarray] = field(repr=False)
    clouds: list[tuple[np.ndarray, np.ndarray]] = field(repr=False)


def _box_faces(half: float):
    """(origin, u axis, v axis, outward normal) of the six faces of a cube."""
    a = half
    faces = []
    for s in (-1.0, 1.0):
        faces.append((np.array([s * a, -a, -a]), np.array([0, 0, 2 * a]), np.array([0, 2 * a, 0]),
                      np.array([s, 0, 0])))
        faces.append((np.array([-a, -a, s * a]), np.array([2 * a, 0, 0]), np.array([0, 2 * a, 0]),
                      np.array([0, 0, s])))
        faces.append((np.array([-a, s * a, -a]), np.array([2 * a, 0, 0]), np.array([0, 0, 2 * a]),
                      np.array([0, s, 0])))
    return faces


def _frame_from_axes(u: np.ndarray, v: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) of the rotation whose columns are the given unit axes."""
    q = Rotation.from_matrix(np.stack([u, v, n], axis=1)).as_quat()
    return np.array([q[3], q[0], q[1], q[2]])


def _wall_faces(extent: float):
    """A single wall in the z = 0 plane facing -z, long in x."""
    w, h = WALL_LENGTH * extent, WALL_HEIGHT * extent
    return [(np.array([-w / 2, -h / 2, 0.0]), np.array([w, 0, 0]), np.array([0, h, 0]), np.array([0, 0, -1.0]))]


def make_box(spec: SyntheticSpec, rng: np.random.Generator) -> GaussianMap:
    """Flat Gaussians tiling the faces of a textured cube."""
    return _tile_faces(_box_faces(0.5 * spec.extent), spec.n_gaussians, rng)


def make_wall(spec: SyntheticSpec, rng: np.random.Generator) -> GaussianMap:
    """Flat Gaussians tiling a long textured wall."""
    return _tile_faces(_wall_faces(spec.extent), spec.n_gaussians, rng)


def _tile_faces(faces, n_gaussians: int, rng: np.random.Generator) -> GaussianMap:
    """Stratified, jittered flat Gaussians over rectangular faces, in proportion to area."""
    areas = np.array([np.linalg.norm(np.cross(f[1], f[2])) for f in faces])
    counts = np.floor(n_gaussians * areas / areas.sum()).astype(int)
    counts[np.argsort(-areas, kind="stable")[: n_gaussians - counts.sum()]] += 1
    spacing = math.sqrt(areas.sum() / n_gaussians)

    pos, rot, ls, col = [], [], [], []
    for (origin, eu, ev, normal), k in zip(faces, counts):
        if k == 0:
            continue
        lu, lv = np.linalg.norm(eu), np.linalg.norm(ev)
        nu = max(1, int(round(math.sqrt(k * lu / lv))))
        nv = max(1, int(math.ceil(k / nu)))
        cells = rng.permutation(nu * nv)[:k]
        fu = (cells % nu + rng.uniform(0.15, 0.85, k)) / nu
        fv = (cells // nu + rng.uniform(0.15, 0.85, k)) / nv
        pts = origin + fu[:, None] * eu + fv[:, None] * ev
        # a base tint per face plus a smooth wave and per-splat variation gives texture
        base = rng.uniform(0.25, 0.75, 3)
        freq_u, freq_v = rng.uniform(0.5, 2, 3), rng.uniform(0.5, 2, 3)
        wave = 0.15 * np.sin(2 * math.pi * (fu[:, None] * freq_u + fv[:, None] * freq_v))
        c = np.clip(base + wave + rng.choice([-0.3, 0.3], k)[:, None] + rng.normal(0.0, 0.08, (k, 3)), 0.05, 0.95)
        u_ax, v_ax = eu / lu, ev / lv
        for _ in range(k):
            th = rng.uniform(0, math.pi)  # random in-plane orientation
            a1 = math.cos(th) * u_ax + math.sin(th) * v_ax
            a2 = np.cross(normal, a1)
            rot.append(_frame_from_axes(a1, a2, normal))
        # near-round discs; the aspect ratio stays within 15% of 1
        s_in = spacing * rng.uniform(*DISC_SIZE, (k, 1)) * rng.uniform(0.87, 1.15, (k, 2))
        # small high-contrast speckles sit just in front of the surface
        speck = rng.random(k) < SPECKLE_FRACTION
        s_in[speck] *= SPECKLE_SCALE
        c[speck] = np.where(c[speck].mean(axis=1, keepdims=True) > 0.5, 0.05, 0.95)
        pts[speck] += SPECKLE_LIFT * spacing * normal
        # a rough surface: distinct depths keep the compositing order of overlapping
        # neighbours stable under small position changes
        pts += RELIEF * spacing * rng.random((k, 1)) * normal
        ls.append(np.log(np.concatenate([s_in, np.full((k, 1), FLATNESS * spacing)], axis=1)))
        pos.append(pts)
        col.append(c)
    pos = np.concatenate(pos)
    col = np.concatenate(col)
    n = len(pos)
    sh = np.zeros((n, N_SH_COEFFS, 3))
    sh[:, 0] = rgb_to_sh_dc(col)
    gmap = GaussianMap()
    gmap.append(pos, np.array(rot), np.concatenate(ls), logit(rng.uniform(*OPACITY_RANGE, n)), sh)
    return gmap


def make_trajectory(spec: SyntheticSpec, rng: np.random.Generator) -> list[Pose]:
    """Camera poses: a circle around the cube looking at its centre, or a pass along the wall."""
    poses = []
    r = ORBIT_RADIUS * spec.extent
    phase = rng.uniform(0, 2 * math.pi)
    for i in range(spec.n_frames):
        s = i / max(1, spec.n_frames)
        if spec.trajectory == "orbit":
            yaw = phase + 2 * math.pi * s
            eye = np.array([r * math.sin(yaw), 0.25 * spec.extent * math.sin(2 * math.pi * s + 1.0),
                            r * math.cos(yaw)])
            target = np.zeros(3)
        else:
            # sideways along the wall with a gentle yaw and height wobble
            x = (-0.5 + s) * LINE_TRAVEL * spec.extent
            eye = np.array([x, 0.05 * spec.extent * math.sin(3 * math.pi * s), -WALL_DISTANCE * spec.extent])
            target = np.array([x + 0.3 * spec.extent * math.sin(2 * math.pi * s + phase), 0.0, 0.0])
        poses.append(Pose.look_at(eye, target))
    return poses


def visible_points(gmap: GaussianMap, pose: Pose, cam: CameraModel):
    """Centres of the camera-facing Gaussians whose footprint reaches the image.

    This mimics a LiDAR with a slightly wider field of view than the camera:
    splats centred just outside the frame still colour its border, so their
    points are included. On a convex surface facing the camera is the same
    as being unoccluded.
    """
    keep = np.zeros(len(gmap), dtype=bool)
    center = pose.center()
    for i in range(len(gmap)):
        g = gmap.gaussian(i)
        normal = quat_to_rotmat(g.rotation)[:, 2]
        if np.dot(normal, center - g.position) <= 0:
            continue
        p2 = project_gaussian(g, pose, cam)
        if p2 is None:
            continue
        (u, v), r = p2.mean, p2.radius
        keep[i] = -r <= u <= cam.width - 1 + r and -r <= v <= cam.height - 1 + r
    return gmap.positions[keep], np.clip(gmap.sh[keep, 0] * SH_C0 + 0.5, 0.0, 1.0)


def build_synthetic_scene(spec: SyntheticSpec) -> SyntheticScene:
    """Generate the scene, trajectory, ground-truth renders and point clouds in memory."""
    rng = np.random.default_rng(spec.seed)
    gmap = make_box(spec, rng) if spec.trajectory == "orbit" else make_wall(spec, rng)
    cam = spec.camera()
    poses = make_trajectory(spec, rng)
    colors, depths, vis, clouds = [], [], [], []
    for pose in poses:
        out = render(gmap, pose, cam)
        colors.append(out.color.copy())
        depths.append(out.depth.copy())
        vis.append(out.visibility.copy())
        clouds.append(visible_points(gmap, pose, cam))
    times = 0.1 * np.arange(1, spec.n_frames + 1)
    return SyntheticScene(spec, gmap, cam, poses, times, colors, depths, vis, clouds)


def generate_synthetic_scene(spec: SyntheticSpec, out_dir) -> SyntheticScene:
    """Build a scene and write it as a sequence plus ground-truth extras.

    Besides the regular sequence files, ``gt_depth/%06d.npy`` holds the
    composited ground-truth depth of each frame and ``gt_map.ckpt`` the
    ground-truth Gaussians. Output is byte-identical for a fixed seed.
    """
    from .checkpoint import save_checkpoint

    scene = build_synthetic_scene(spec)
    root = Path(out_dir)
    frames = [Frame(i, float(t), p, to_uint8(c) / 255.0, pts, col)
              for i, (t, p, c, (pts, col)) in enumerate(zip(scene.timestamps, scene.poses, scene.colors, scene.clouds))]
    write_sequence(root, scene.camera, frames,
                   extra={"synthetic_seed": spec.seed, "synthetic_gaussians": spec.n_gaussians,
                          "synthetic_trajectory": spec.trajectory})
    (root / GT_DEPTH_DIR).mkdir(exist_ok=True)
    for i, d in enumerate(scene.depths):
        np.save(root / GT_DEPTH_DIR / f"{i:06d}.npy", d)
    save_checkpoint(root / GT_MAP, scene.gaussians, camera=scene.camera)
    return scene
