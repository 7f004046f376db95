"""Voxel-hashed store of coloured points with dedup, density caps and recency."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigurationError

DEFAULT_VOXEL_SIZE = 0.1
DEFAULT_CAP = 20


@dataclass(frozen=True)
class ColoredPoint:
    position: tuple
    color: tuple
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "color", tuple(float(v) for v in self.color))
        if any(not 0.0 <= c <= 1.0 for c in self.color):
            raise ConfigurationError(f"point colour {self.color} outside [0, 1]")


@dataclass
class InsertStats:
    accepted: int = 0
    rejected_duplicate: int = 0
    rejected_cap: int = 0

    @property
    def total(self) -> int:
        return self.accepted + self.rejected_duplicate + self.rejected_cap


@dataclass
class Voxel:
    points: list[int] = field(default_factory=list)  # indices into the store's point table
    last_update: float = -math.inf


def voxel_index(position, voxel_size: float) -> tuple[int, int, int]:
    """Integer grid cell containing ``position``: componentwise floor(p / size)."""
    if voxel_size <= 0:
        raise ConfigurationError("voxel_size must be positive")
    p = np.asarray(position, dtype=np.float64)
    return tuple(int(v) for v in np.floor(p / voxel_size))


class VoxelStore:
    """Coloured LiDAR points bucketed by voxel.

    A point is rejected when another point of the same voxel lies closer
    than ``min_separation`` or when the voxel already holds ``cap`` points.
    Accepted points join a pending queue in insertion order; draining moves
    a cursor along it, and drained points remain stored so later arrivals
    at the same spot are still recognised as duplicates.
    """

    def __init__(self, voxel_size: float = DEFAULT_VOXEL_SIZE, cap: int = DEFAULT_CAP,
                 min_separation: Optional[float] = None):
        if voxel_size <= 0:
            raise ConfigurationError("voxel_size must be positive")
        if cap < 1:
            raise ConfigurationError("voxel cap must be at least 1")
        self.voxel_size = float(voxel_size)
        self.cap = int(cap)
        self.min_separation = self.voxel_size / 4.0 if min_separation is None else float(min_separation)
        self.voxels: dict[tuple[int, int, int], Voxel] = {}
        self._pos: list[np.ndarray] = []
        self._col: list[np.ndarray] = []
        self._time: list[float] = []
        self._cursor = 0
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._pos)

    @property
    def pending(self) -> int:
        return len(self._pos) - self._cursor

    def insert_points(self, points: Iterable[ColoredPoint], now: float) -> InsertStats:
        pts = list(points)
        if not pts:
            return InsertStats()
        return self.insert_arrays(np.array([p.position for p in pts]), np.array([p.color for p in pts]),
                                  now, np.array([p.timestamp for p in pts]))

    def insert_arrays(self, positions, colors, now: float, timestamps=None) -> InsertStats:
        """Array form of :meth:`insert_points`; colours are RGB in [0, 1]."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        if timestamps is None:
            timestamps = np.full(len(positions), float(now))
        keys = np.floor(positions / self.voxel_size).astype(np.int64)
        sep2 = self.min_separation**2
        stats = InsertStats()
        with self._lock:
            for p, c, t, k in zip(positions, colors, timestamps, keys):
                key = (int(k[0]), int(k[1]), int(k[2]))
                vox = self.voxels.get(key)
                if vox is None:
                    vox = self.voxels[key] = Voxel()
                if any(float(np.sum((self._pos[j] - p) ** 2)) < sep2 for j in vox.points):
                    stats.rejected_duplicate += 1
                    continue
                if len(vox.points) >= self.cap:
                    stats.rejected_cap += 1
                    continue
                vox.points.append(len(self._pos))
                vox.last_update = float(now)
                self._pos.append(p.copy())
                self._col.append(c.copy())
                self._time.append(float(t))
                stats.accepted += 1
        return stats

    def active_voxels(self, now: float, window: float) -> list[tuple[int, int, int]]:
        """Voxels whose last accepted point arrived within ``window`` seconds of ``now``."""
        if window <= 0:
            raise ConfigurationError("window must be positive")
        with self._lock:
            return [k for k, v in self.voxels.items() if now - v.last_update <= window]

    def drain_arrays(self, count: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Next ``count`` undrained points as ``(positions, colors, timestamps)`` arrays."""
        if count <= 0:
            raise ConfigurationError("drain count must be positive")
        with self._lock:
            lo = self._cursor
            hi = min(len(self._pos), lo + int(count))
            self._cursor = hi
            if hi == lo:
                return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
            return np.array(self._pos[lo:hi]), np.array(self._col[lo:hi]), np.array(self._time[lo:hi])

    def drain_for_frame(self, count: int) -> list[ColoredPoint]:
        """Remove up to ``count`` points from the pending queue, in insertion order."""
        pos, col, ts = self.drain_arrays(count)
        return [ColoredPoint(tuple(p), tuple(c), float(t)) for p, c, t in zip(pos, col, ts)]

    def voxel_points(self, key) -> np.ndarray:
        with self._lock:
            vox = self.voxels.get(tuple(key))
            return np.array([self._pos[j] for j in vox.points]) if vox else np.zeros((0, 3))


def voxel_index_array(positions: np.ndarray, voxel_size: float) -> np.ndarray:
    """Vectorized :func:`voxel_index` for an (N, 3) array."""
    if voxel_size <= 0:
        raise ConfigurationError("voxel_size must be positive")
    return np.floor(np.asarray(positions, dtype=np.float64) / voxel_size).astype(np.int64)
