"""Randomized finite-difference checks of every analytic gradient.

Two families are checked:

* rasterizer gradients (``render_backward``) against central differences of
  the composited loss with the compositing structure held fixed;
* the per-Gaussian primitives (covariance, projection, 2D evaluation, SH)
  against central differences of their own forward functions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import CameraModel, Gaussian2D, Gaussian3D, Pose
from .gaussian_map import GaussianMap
from .raster import render, render_backward
from .reference import central_difference, frozen_fd_gradients

RASTER_TOL = 1e-3
PRIMITIVE_TOL = 1e-4
FD_STEP = 1e-4
# gradients are compared relative to the largest entry of their group;
# components this far below it are dominated by rounding in the differences
REL_FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None) -> float:
    """Max of |a - n| / max(|a|, |n|, floor), floor = REL_FLOOR * scale."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    if scale is None:
        scale = max(np.abs(a).max(), np.abs(n).max())
    floor = max(REL_FLOOR * scale, 1e-12)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())


def random_scene(rng: np.random.Generator, n: int, width: int = 32, height: int = 32,
                 degree: int | None = None):
    """A random map in front of a random camera.

    Returns:
        ``(gmap, pose, cam)``.
    """
    f = rng.uniform(0.8, 1.4) * width
    cam = CameraModel(f, f * rng.uniform(0.9, 1.1), width / 2 + rng.uniform(-2, 2),
                      height / 2 + rng.uniform(-2, 2), width, height)
    pose = Pose(rotation=core.axis_angle_quat(rng.normal(size=3), rng.uniform(0, np.pi)),
                translation=rng.normal(size=3))
    z = rng.uniform(2.0, 6.0, n)
    u = rng.uniform(-0.2, 1.2, n) * width
    v = rng.uniform(-0.2, 1.2, n) * height
    pc = np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=1)
    world = (pc - pose.translation) @ pose.rotation_matrix()
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    ls = np.log(rng.uniform(0.03, 0.4, (n, 3)) * z[:, None] / 4.0)
    ol = rng.normal(0.0, 1.5, n)
    if degree is None:
        degree = int(rng.integers(0, 4))
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = rng.normal(0.0, 1.0, (n, 3))
    sh[:, 1:] = rng.normal(0.0, 0.3, (n, 15, 3))
    gmap = GaussianMap()
    gmap.append(world, rot, ls, ol, sh)
    gmap.active_degree = degree
    return gmap, pose, cam


@dataclass
class GradCheckReport:
    configs: int = 0
    max_raster_error: float = 0.0
    max_primitive_error: float = 0.0
    worst: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_raster_error < RASTER_TOL and self.max_primitive_error < PRIMITIVE_TOL

    def summary(self) -> str:
        return (f"configs={self.configs} max_rel_err_raster={self.max_raster_error:.3e} "
                f"(tol {RASTER_TOL:g}) max_rel_err_primitives={self.max_primitive_error:.3e} "
                f"(tol {PRIMITIVE_TOL:g}) time={self.seconds:.1f}s "
                f"{'PASS' if self.passed else 'FAIL'}")


def check_raster(gmap, pose, cam, rng) -> dict[str, float]:
    """Relative error per parameter group for one random scene and loss."""
    out = render(gmap, pose, cam)
    wc = rng.normal(size=(cam.height, cam.width, 3))
    wd = rng.normal(size=(cam.height, cam.width))
    analytic = render_backward(gmap, pose, cam, out, wc, wd).as_dict()
    numeric = frozen_fd_gradients(gmap, pose, cam, out, wc, wd, FD_STEP)
    return {k: rel_error(analytic[k], numeric[k]) for k in analytic}


def _central(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Jacobian of f at x by central differences, shape ``f(x).shape + x.shape``."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.asarray(f(x))
    jac = np.zeros(f0.shape + x.shape)
    for k in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[k] = h
        jac[(...,) + k] = central_difference(np.asarray(f(x + e)), np.asarray(f(x - e)),
                                             np.asarray(f(x + 2 * e)), np.asarray(f(x - 2 * e)), h)
    return jac


def check_primitives(rng: np.random.Generator) -> dict[str, float]:
    """Check the VJPs of the Gaussian primitives on one random configuration."""
    errs = {}
    q = rng.normal(size=4)
    ls = rng.uniform(-2.0, 0.5, 3)

    # covariance: contract with a random cotangent
    G = rng.normal(size=(3, 3))
    dq, dls = core.build_covariance_vjp(q, ls, G)
    nq = _central(lambda x: np.sum(G * core.build_covariance(x, ls)), q)
    nls = _central(lambda x: np.sum(G * core.build_covariance(q, x)), ls)
    errs["covariance"] = max(rel_error(dq, nq), rel_error(dls, nls))

    # projection of a Gaussian in front of the camera
    cam = CameraModel(60.0, 55.0, 32.0, 30.0, 64, 64)
    pose = Pose(rotation=core.axis_angle_quat(rng.normal(size=3), rng.uniform(0, 0.5)),
                translation=np.array([0.0, 0.0, 0.0]))
    pc = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 5)])
    pos = pose.rotation_matrix().T @ (pc - pose.translation)
    gm, gc, gd = rng.normal(size=2), rng.normal(size=(2, 2)), rng.normal()

    def proj_loss(p, r, s):
        g2 = core.project_gaussian(Gaussian3D(p, r, s, 0.0, np.zeros((16, 3)), 0), pose, cam)
        return gm @ g2.mean + np.sum(gc * g2.cov2d) + gd * g2.depth

    dp, dr, ds = core.project_gaussian_vjp(Gaussian3D(pos, q, ls, 0.0, np.zeros((16, 3)), 0),
                                           pose, cam, gm, gc, gd)
    errs["projection"] = max(rel_error(dp, _central(lambda x: proj_loss(x, q, ls), pos)),
                             rel_error(dr, _central(lambda x: proj_loss(pos, x, ls), q)),
                             rel_error(ds, _central(lambda x: proj_loss(pos, q, x), ls)))

    # 2D evaluation
    A = rng.normal(size=(2, 2))
    cov = A @ A.T + 0.5 * np.eye(2)
    mean = rng.uniform(0, 10, 2)
    x = mean + rng.normal(size=2)
    _, d_mean, d_cov, d_x = core.eval_gaussian_2d_grad(Gaussian2D(mean, cov, 1.0, 1), x)
    n_mean = _central(lambda m: core.eval_gaussian_2d(Gaussian2D(m, cov, 1.0, 1), x), mean)
    n_cov = _central(lambda c: core.eval_gaussian_2d(Gaussian2D(mean, c, 1.0, 1), x), cov)
    n_x = _central(lambda y: core.eval_gaussian_2d(Gaussian2D(mean, cov, 1.0, 1), y), x)
    errs["gaussian_2d"] = max(rel_error(d_mean, n_mean), rel_error(d_cov, n_cov), rel_error(d_x, n_x))

    # spherical harmonics
    deg = int(rng.integers(0, 4))
    sh = rng.normal(size=(16, 3))
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    gr = rng.normal(size=3)
    dsh, ddir = core.eval_sh_vjp(sh, deg, d, gr)
    n_sh = _central(lambda c: gr @ core.eval_sh(c, deg, d), sh)
    n_dir = _central(lambda v: gr @ core.eval_sh(sh, deg, v), d)
    errs["sh"] = max(rel_error(dsh, n_sh), rel_error(ddir, n_dir))
    return errs


def run_gradcheck(seed: int = 0, configs: int = 1000, max_gaussians: int = 50, size: int = 32,
                  log=None) -> GradCheckReport:
    """Run the randomized suite; ``log`` receives one line per failing config."""
    rng = np.random.default_rng(seed)
    rep = GradCheckReport()
    t0 = time.perf_counter()
    for c in range(configs):
        n = int(rng.integers(1, max_gaussians + 1))
        gmap, pose, cam = random_scene(rng, n, size, size)
        r_err = check_raster(gmap, pose, cam, rng)
        p_err = check_primitives(rng)
        for k, v in r_err.items():
            if v > rep.worst.get("raster." + k, 0.0):
                rep.worst["raster." + k] = v
        for k, v in p_err.items():
            if v > rep.worst.get("core." + k, 0.0):
                rep.worst["core." + k] = v
        rep.max_raster_error = max(rep.max_raster_error, max(r_err.values()))
        rep.max_primitive_error = max(rep.max_primitive_error, max(p_err.values()))
        if log is not None and (max(r_err.values()) >= RASTER_TOL or max(p_err.values()) >= PRIMITIVE_TOL):
            log(f"config {c}: n={n} raster={r_err} primitives={p_err}")
        rep.configs += 1
    rep.seconds = time.perf_counter() - t0
    return rep
