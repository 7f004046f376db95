"""Versioned map checkpoints: a text header followed by raw little-endian float64 arrays.

Header lines (one ``key value`` pair each)::

    SPLATMAP-CHECKPOINT
    version 1
    count N
    sh_degree D
    global_step S
    spatial_scale X | none
    camera fx fy cx cy width height     (optional)
    end_header

Then positions (N x 3), rotations (N x 4), log_scales (N x 3),
opacity_logits (N) and sh (N x 16 x 3), each as ``<f8`` in C order.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import numpy as np

from .core import N_SH_COEFFS, CameraModel
from .errors import ConfigurationError, SequenceError
from .gaussian_map import GaussianMap

MAGIC = "SPLATMAP-CHECKPOINT"
VERSION = 1
_LAYOUT = (("positions", (3,)), ("rotations", (4,)), ("log_scales", (3,)), ("opacity_logits", ()),
           ("sh", (N_SH_COEFFS, 3)))


def save_checkpoint(path, gmap: GaussianMap, camera: Optional[CameraModel] = None) -> Path:
    """Write ``gmap`` atomically (temp file then rename)."""
    path = Path(path)
    header = [MAGIC, f"version {VERSION}", f"count {len(gmap)}", f"sh_degree {gmap.active_degree}",
              f"global_step {gmap.global_step}",
              f"spatial_scale {'none' if gmap.spatial_scale is None else repr(float(gmap.spatial_scale))}"]
    if camera is not None:
        header.append("camera " + " ".join(repr(v) for v in camera.as_tuple()))
    header.append("end_header")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for name, _ in _LAYOUT:
            fh.write(np.ascontiguousarray(getattr(gmap, name), dtype="<f8").tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[GaussianMap, Optional[CameraModel]]:
    """Read a checkpoint; returns the map and the camera stored with it (if any).

    Raises:
        SequenceError: unreadable file, bad magic, unknown version or truncated data.
    """
    path = Path(path)
    if not path.is_file():
        raise SequenceError(f"checkpoint {path} not found")
    with open(path, "rb") as fh:
        if fh.readline().decode("ascii", "replace").strip() != MAGIC:
            raise SequenceError(f"{path}: not a splatmap checkpoint")
        fields = {}
        while True:
            line = fh.readline()
            if not line:
                raise SequenceError(f"{path}: header has no end_header line")
            text = line.decode("ascii", "replace").strip()
            if text == "end_header":
                break
            key, _, value = text.partition(" ")
            fields[key] = value
        payload = fh.read()
    try:
        version = int(fields["version"])
        n = int(fields["count"])
        degree = int(fields["sh_degree"])
        step = int(fields["global_step"])
    except (KeyError, ValueError) as e:
        raise SequenceError(f"{path}: malformed header ({e})") from None
    if version != VERSION:
        raise SequenceError(f"{path}: unsupported checkpoint version {version}")
    arrays = {}
    off = 0
    for name, tail in _LAYOUT:
        size = n * int(np.prod(tail, dtype=np.int64)) * 8
        if off + size > len(payload):
            raise SequenceError(f"{path}: truncated at array {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=size // 8, offset=off).reshape((n,) + tail).copy()
        off += size
    if off != len(payload):
        raise SequenceError(f"{path}: {len(payload) - off} trailing bytes")
    gmap = GaussianMap()
    gmap.append(arrays["positions"], arrays["rotations"], arrays["log_scales"], arrays["opacity_logits"],
                arrays["sh"])
    gmap.active_degree = degree
    gmap.global_step = step
    scale = fields.get("spatial_scale", "none")
    gmap.spatial_scale = None if scale == "none" else float(scale)
    camera = None
    if "camera" in fields:
        try:
            v = fields["camera"].split()
            camera = CameraModel(float(v[0]), float(v[1]), float(v[2]), float(v[3]), int(v[4]), int(v[5]))
        except (IndexError, ValueError, ConfigurationError) as e:
            raise SequenceError(f"{path}: bad camera line ({e})") from None
    return gmap, camera
