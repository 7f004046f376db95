"""Image and depth quality metrics, plus the evaluation report container."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError

PSNR_IDENTICAL = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _gauss_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian window over axes 0 and 1, valid positions only."""
    r = sliding_window_view(img, len(_KERNEL), axis=0) @ _KERNEL
    return sliding_window_view(r, len(_KERNEL), axis=1) @ _KERNEL


def _filter_adjoint(img: np.ndarray) -> np.ndarray:
    """Transpose of ``_filter_valid``: zero-pad then correlate (kernel is symmetric)."""
    p = len(_KERNEL) - 1
    pad = [(p, p), (p, p)] + [(0, 0)] * (img.ndim - 2)
    return _filter_valid(np.pad(img, pad))


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Identical images return ``PSNR_IDENTICAL`` (100 dB).

    Raises:
        ConfigurationError: on a shape mismatch.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def _ssim_terms(a: np.ndarray, b: np.ndarray):
    mu_a, mu_b = _filter_valid(a), _filter_valid(b)
    e_aa, e_bb, e_ab = _filter_valid(a * a), _filter_valid(b * b), _filter_valid(a * b)
    s_aa = e_aa - mu_a**2
    s_bb = e_bb - mu_b**2
    s_ab = e_ab - mu_a * mu_b
    A1 = 2.0 * mu_a * mu_b + SSIM_C1
    A2 = 2.0 * s_ab + SSIM_C2
    B1 = mu_a**2 + mu_b**2 + SSIM_C1
    B2 = s_aa + s_bb + SSIM_C2
    return mu_a, mu_b, A1, A2, B1, B2


def _as_hwc(img: np.ndarray) -> np.ndarray:
    return img[..., None] if img.ndim == 2 else img


def ssim(a, b) -> float:
    """Mean structural similarity over valid window positions and channels.

    Uses an 11x11 Gaussian window (sigma 1.5) and constants (0.01)^2, (0.03)^2
    for data in [0, 1]. Accepts H x W or H x W x C arrays.

    Raises:
        ConfigurationError: on a shape mismatch or a side shorter than 11.
    """
    return ssim_with_grad(a, b, need_grad=False)[0]


def ssim_with_grad(a, b, need_grad: bool = True):
    """SSIM and its gradient with respect to ``b``.

    Returns:
        ``(value, d_value/d_b)``; the gradient is None when ``need_grad`` is False.
    """
    a = _as_hwc(np.asarray(a, dtype=np.float64))
    b_in = np.asarray(b, dtype=np.float64)
    b = _as_hwc(b_in)
    _check_same(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ConfigurationError(f"SSIM needs images at least {SSIM_WINDOW}px per side, got {a.shape[:2]}")
    mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b)
    D = B1 * B2
    S = A1 * A2 / D
    value = float(S.mean())
    if not need_grad:
        return value, None
    scale = 1.0 / S.size
    d_mu_b = (2.0 * mu_a * (A2 - A1) / D - 2.0 * mu_b * S * (1.0 / B1 - 1.0 / B2)) * scale
    d_e_ab = 2.0 * A1 / D * scale
    d_e_bb = -S / B2 * scale
    grad = _filter_adjoint(d_mu_b) + a * _filter_adjoint(d_e_ab) + 2.0 * b * _filter_adjoint(d_e_bb)
    return value, grad.reshape(b_in.shape)


def depth_rmse(rendered, gt, mask=None) -> float:
    """RMS depth error over ``mask`` (default: pixels where ``gt > 0``).

    An empty mask returns NaN and emits a ``RuntimeWarning``.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same(rendered, gt)
    mask = gt > 0 if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        warnings.warn("depth_rmse: empty mask, returning NaN", RuntimeWarning, stacklevel=2)
        return float("nan")
    d = rendered[mask] - gt[mask]
    return float(np.sqrt(np.mean(d * d)))


@dataclass
class FrameEval:
    frame: int
    psnr: float
    ssim: float
    depth_rmse: float = float("nan")
    iteration: int = 0
    wall_time: float = 0.0


@dataclass
class EvalReport:
    """Per-frame metrics with arithmetic-mean aggregates."""

    frames: list[FrameEval] = field(default_factory=list)

    def add(self, frame: FrameEval) -> None:
        self.frames.append(frame)

    def __len__(self) -> int:
        return len(self.frames)

    def _mean(self, key: str) -> float:
        vals = np.array([getattr(f, key) for f in self.frames], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if len(vals) else float("nan")

    @property
    def psnr(self) -> float:
        return self._mean("psnr")

    @property
    def ssim(self) -> float:
        return self._mean("ssim")

    @property
    def depth_rmse(self) -> float:
        return self._mean("depth_rmse")

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for f in self.frames:
                fh.write(json.dumps(asdict(f)) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "EvalReport":
        rep = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                rep.add(FrameEval(**json.loads(line)))
        return rep

    def summary_table(self) -> str:
        lines = [f"{'frame':>6} {'psnr':>8} {'ssim':>7} {'depth_rmse':>10} {'iter':>6}"]
        for f in self.frames:
            lines.append(f"{f.frame:>6d} {f.psnr:>8.3f} {f.ssim:>7.4f} {f.depth_rmse:>10.4f} {f.iteration:>6d}")
        lines.append(f"{'mean':>6} {self.psnr:>8.3f} {self.ssim:>7.4f} {self.depth_rmse:>10.4f}")
        return "\n".join(lines)
