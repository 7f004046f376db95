"""The trainable scene: a growable struct-of-arrays of Gaussians plus Adam state."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Optional

import numpy as np

from .core import MAX_SH_DEGREE, N_SH_COEFFS, Gaussian3D
from .errors import ConsistencyError

PARAM_GROUPS = ("position", "rotation", "log_scale", "opacity_logit", "sh")

_ATTR = {
    "position": "positions",
    "rotation": "rotations",
    "log_scale": "log_scales",
    "opacity_logit": "opacity_logits",
    "sh": "sh",
}


class RWLock:
    """Many readers or one writer. Writers wait for active readers to leave."""

    def __init__(self):
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class GaussianMap:
    """Parameters of every Gaussian in the scene and their optimizer moments.

    Indices stay stable until :meth:`remove` compacts the arrays. Adam
    moments and per-Gaussian step counts are always kept the same length as
    the parameter arrays.
    """

    def __init__(self):
        self.positions = np.zeros((0, 3))
        self.rotations = np.zeros((0, 4))
        self.log_scales = np.zeros((0, 3))
        self.opacity_logits = np.zeros(0)
        self.sh = np.zeros((0, N_SH_COEFFS, 3))
        self.active_degree = 0
        self.global_step = 0
        self.spatial_scale: Optional[float] = None
        self.moments = {name: (np.zeros_like(self.param(name)), np.zeros_like(self.param(name)))
                        for name in PARAM_GROUPS}
        self.steps = np.zeros(0, dtype=np.int64)
        self.lock = RWLock()

    def __len__(self) -> int:
        return len(self.positions)

    def param(self, name: str) -> np.ndarray:
        return getattr(self, _ATTR[name])

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.positions[i], self.rotations[i], self.log_scales[i],
                          float(self.opacity_logits[i]), self.sh[i], self.active_degree)

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian3D], active_degree: Optional[int] = None) -> "GaussianMap":
        m = cls()
        if gaussians:
            m.append(np.array([g.position for g in gaussians]),
                     np.array([g.rotation for g in gaussians]),
                     np.array([g.log_scale for g in gaussians]),
                     np.array([g.opacity_logit for g in gaussians]),
                     np.array([g.sh_coeffs for g in gaussians]))
            m.active_degree = max(g.active_degree for g in gaussians)
        if active_degree is not None:
            m.active_degree = active_degree
        return m

    def append(self, positions, rotations, log_scales, opacity_logits, sh) -> None:
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        k = len(positions)
        new = {
            "position": positions,
            "rotation": np.asarray(rotations, dtype=np.float64).reshape(k, 4),
            "log_scale": np.asarray(log_scales, dtype=np.float64).reshape(k, 3),
            "opacity_logit": np.asarray(opacity_logits, dtype=np.float64).reshape(k),
            "sh": np.asarray(sh, dtype=np.float64).reshape(k, N_SH_COEFFS, 3),
        }
        for name in PARAM_GROUPS:
            setattr(self, _ATTR[name], np.concatenate([self.param(name), new[name]]))
            m, v = self.moments[name]
            z = np.zeros_like(new[name])
            self.moments[name] = (np.concatenate([m, z]), np.concatenate([v, z]))
        self.steps = np.concatenate([self.steps, np.zeros(k, dtype=np.int64)])
        self.check()

    def remove(self, mask: np.ndarray) -> int:
        """Drop Gaussians where ``mask`` is True; returns how many were removed."""
        mask = np.asarray(mask, dtype=bool)
        keep = ~mask
        for name in PARAM_GROUPS:
            setattr(self, _ATTR[name], self.param(name)[keep])
            m, v = self.moments[name]
            self.moments[name] = (m[keep], v[keep])
        self.steps = self.steps[keep]
        self.check()
        return int(mask.sum())

    def check(self) -> None:
        n = len(self.positions)
        for name in PARAM_GROUPS:
            p = self.param(name)
            m, v = self.moments[name]
            if len(p) != n or m.shape != p.shape or v.shape != p.shape:
                raise ConsistencyError(f"parameter group {name!r} out of step with the map ({n} gaussians)")
        if len(self.steps) != n:
            raise ConsistencyError("optimizer step counts out of step with the map")
        if not 0 <= self.active_degree <= MAX_SH_DEGREE:
            raise ConsistencyError(f"active SH degree {self.active_degree} out of range")

    def adam_step(self, grads: dict[str, np.ndarray], lrs: dict[str, float],
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15) -> None:
        """One Adam update of every parameter group, bias-corrected per Gaussian."""
        self.steps += 1
        t = self.steps.astype(np.float64)
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        for name in PARAM_GROUPS:
            g = grads[name]
            p = self.param(name)
            m, v = self.moments[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            shape = (-1,) + (1,) * (p.ndim - 1)
            mhat = m / bc1.reshape(shape)
            vhat = v / bc2.reshape(shape)
            p -= lrs[name] * mhat / (np.sqrt(vhat) + eps)

    def copy(self) -> "GaussianMap":
        m = GaussianMap()
        for name in PARAM_GROUPS:
            setattr(m, _ATTR[name], self.param(name).copy())
            a, b = self.moments[name]
            m.moments[name] = (a.copy(), b.copy())
        m.steps = self.steps.copy()
        m.active_degree = self.active_degree
        m.global_step = self.global_step
        m.spatial_scale = self.spatial_scale
        return m
