"""On-disk sequence format and sparse LiDAR depth projection.

Layout of a sequence directory::

    manifest            key = value lines (intrinsics, resolution, frame count)
    poses.csv           timestamp,qw,qx,qy,qz,tx,ty,tz   (world to camera)
    images/%06d.png     8-bit RGB
    clouds/%06d.ply     ASCII PLY with x y z red green blue (colours 0-255)
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .core import NEAR_CLIP, CameraModel, Pose
from .errors import SequenceError

MANIFEST = "manifest"
POSES = "poses.csv"
IMAGES = "images"
CLOUDS = "clouds"
FORMAT_NAME = "splatmap-sequence"
FORMAT_VERSION = 1
POSE_HEADER = "# timestamp,qw,qx,qy,qz,tx,ty,tz"


def fmt_float(x: float) -> str:
    return "%.9g" % x


def fmt_time(t: float) -> str:
    return "%.6f" % t


@dataclass
class Frame:
    index: int
    timestamp: float
    pose: Pose
    image: np.ndarray  # H x W x 3 in [0, 1]
    positions: np.ndarray  # N x 3
    colors: np.ndarray  # N x 3 in [0, 1]


@dataclass
class SequenceManifest:
    camera: CameraModel
    n_frames: int
    poses: str = POSES
    images: str = IMAGES
    clouds: str = CLOUDS
    extra: Optional[dict] = None

    def to_text(self) -> str:
        c = self.camera
        lines = [f"format = {FORMAT_NAME}", f"version = {FORMAT_VERSION}",
                 f"fx = {c.fx!r}", f"fy = {c.fy!r}", f"cx = {c.cx!r}", f"cy = {c.cy!r}",
                 f"width = {c.width}", f"height = {c.height}", f"frames = {self.n_frames}",
                 f"poses = {self.poses}", f"images = {self.images}", f"clouds = {self.clouds}"]
        for k, v in (self.extra or {}).items():
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse_key_values(text: str, source: str) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SequenceError(f"{source}:{no}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_manifest(root) -> SequenceManifest:
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise SequenceError(f"no manifest in {root}")
    kv = parse_key_values(path.read_text(), str(path))
    try:
        cam = CameraModel(float(kv.pop("fx")), float(kv.pop("fy")), float(kv.pop("cx")),
                          float(kv.pop("cy")), int(kv.pop("width")), int(kv.pop("height")))
        n = int(kv.pop("frames"))
    except KeyError as e:
        raise SequenceError(f"{path}: missing key {e.args[0]!r}") from None
    except ValueError as e:
        raise SequenceError(f"{path}: {e}") from None
    kv.pop("format", None)
    kv.pop("version", None)
    return SequenceManifest(camera=cam, n_frames=n, poses=kv.pop("poses", POSES),
                            images=kv.pop("images", IMAGES), clouds=kv.pop("clouds", CLOUDS), extra=kv)


def read_poses(path) -> tuple[np.ndarray, list[Pose]]:
    path = Path(path)
    if not path.is_file():
        raise SequenceError(f"missing pose file {path}")
    times, poses = [], []
    for no, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise SequenceError(f"{path}:{no}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise SequenceError(f"{path}:{no}: non-numeric field in {raw!r}") from None
        if times and vals[0] <= times[-1]:
            raise SequenceError(f"{path}:{no}: timestamp {parts[0]} not after {times[-1]:.6f}")
        times.append(vals[0])
        poses.append(Pose(rotation=np.array(vals[1:5]), translation=np.array(vals[5:8])))
    return np.array(times), poses


def write_poses(path, times, poses) -> None:
    lines = [POSE_HEADER]
    for t, p in zip(times, poses):
        vals = list(p.rotation) + list(p.translation)
        lines.append(",".join([fmt_time(t)] + [fmt_float(v) for v in vals]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """ASCII PLY with x y z red green blue; returns positions and colours in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise SequenceError(f"missing cloud file {path}")
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise SequenceError(f"{path}: not a PLY file")
        n = None
        props = []
        for raw in fh:
            line = raw.strip()
            if line.startswith("format") and "ascii" not in line:
                raise SequenceError(f"{path}: only ASCII PLY is supported")
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        if n is None or props[:6] != ["x", "y", "z", "red", "green", "blue"]:
            raise SequenceError(f"{path}: expected vertex properties x y z red green blue")
        body = fh.read().split()
    if len(body) != 6 * n:
        raise SequenceError(f"{path}: expected {n} vertices, found {len(body) / 6:g}")
    try:
        data = np.array(body, dtype=np.float64).reshape(n, 6)
    except ValueError:
        raise SequenceError(f"{path}: malformed vertex record") from None
    return data[:, :3], data[:, 3:] / 255.0


def write_ply(path, positions, colors) -> None:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    rgb = np.clip(np.round(np.asarray(colors, dtype=np.float64).reshape(-1, 3) * 255.0), 0, 255).astype(int)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(positions)}", "property double x",
             "property double y", "property double z", "property uchar red", "property uchar green",
             "property uchar blue", "end_header"]
    for p, c in zip(positions, rgb):
        lines.append(f"{fmt_float(p[0])} {fmt_float(p[1])} {fmt_float(p[2])} {c[0]} {c[1]} {c[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise SequenceError(f"missing image {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise SequenceError(f"{path}: cannot decode image ({e})") from None


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path)


class Sequence:
    """A validated sequence directory; iterate to stream frames in order."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = read_manifest(self.root)
        self.times, self.poses = read_poses(self.root / self.manifest.poses)
        n = self.manifest.n_frames
        if len(self.poses) != n:
            raise SequenceError(f"{self.root}: manifest lists {n} frames but poses.csv has {len(self.poses)}")
        for i in range(n):
            for p in (self.image_path(i), self.cloud_path(i)):
                if not p.is_file():
                    raise SequenceError(f"{self.root}: frame {i} is missing {p.relative_to(self.root)}")

    @property
    def camera(self) -> CameraModel:
        return self.manifest.camera

    def __len__(self) -> int:
        return len(self.poses)

    def image_path(self, i: int) -> Path:
        return self.root / self.manifest.images / f"{i:06d}.png"

    def cloud_path(self, i: int) -> Path:
        return self.root / self.manifest.clouds / f"{i:06d}.ply"

    def frame(self, i: int) -> Frame:
        img = read_image(self.image_path(i))
        if img.shape[:2] != self.camera.shape:
            raise SequenceError(f"{self.image_path(i)}: size {img.shape[1]}x{img.shape[0]} does not match "
                                f"the manifest's {self.camera.width}x{self.camera.height}")
        pos, col = read_ply(self.cloud_path(i))
        return Frame(i, float(self.times[i]), self.poses[i], img, pos, col)

    def __iter__(self) -> Iterator[Frame]:
        for i in range(len(self)):
            yield self.frame(i)


def load_sequence(path) -> Sequence:
    """Open and validate a sequence; iterating the result yields :class:`Frame` objects.

    Raises:
        SequenceError: missing manifest or files, malformed records, or
            timestamps that do not strictly increase.
    """
    return Sequence(path)


def write_sequence(path, camera: CameraModel, frames, extra: Optional[dict] = None) -> Path:
    """Write ``frames`` (any iterable of :class:`Frame`) as a sequence directory."""
    root = Path(path)
    frames = list(frames)
    (root / IMAGES).mkdir(parents=True, exist_ok=True)
    (root / CLOUDS).mkdir(parents=True, exist_ok=True)
    man = SequenceManifest(camera=camera, n_frames=len(frames), extra=extra)
    (root / MANIFEST).write_text(man.to_text())
    write_poses(root / POSES, [f.timestamp for f in frames], [f.pose for f in frames])
    for i, f in enumerate(frames):
        write_image(root / IMAGES / f"{i:06d}.png", f.image)
        write_ply(root / CLOUDS / f"{i:06d}.ply", f.positions, f.colors)
    return root


def project_pixels(points, pose: Pose, cam: CameraModel):
    """Pixel indices of world points (pixel centres at integer coordinates).

    Returns:
        ``(u, v, z, inside)``: rounded column and row, camera-frame depth and
        whether the point lands on the image in front of the near plane.
    """
    pc = pose.transform(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    front = z > NEAR_CLIP
    zs = np.where(front, z, 1.0)
    u = np.floor(cam.fx * pc[:, 0] / zs + cam.cx + 0.5).astype(np.int64)
    v = np.floor(cam.fy * pc[:, 1] / zs + cam.cy + 0.5).astype(np.int64)
    inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return u, v, z, inside


def project_sparse_depth(positions, pose: Pose, cam: CameraModel) -> np.ndarray:
    """Depth image from a point cloud; each pixel keeps the nearest point's z (0 = empty)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    depth = np.zeros(cam.shape)
    if len(positions) == 0:
        return depth
    u, v, z, ok = project_pixels(positions, pose, cam)
    flat = np.full(cam.width * cam.height, np.inf)
    np.minimum.at(flat, v[ok] * cam.width + u[ok], z[ok])
    flat[np.isinf(flat)] = 0.0
    return flat.reshape(cam.shape)


def sequence_exists(path) -> bool:
    return os.path.isfile(os.path.join(path, MANIFEST))
