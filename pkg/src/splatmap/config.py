"""Pipeline configuration: dotted keys, text files and environment overrides.

A config file holds ``key = value`` lines such as ``train.lr.position = 0.00016``.
Any key can be overridden from the environment as ``SPLATMAP_`` followed by the
key upper-cased with dots written as double underscores, for example
``SPLATMAP_KF__ITER_BUDGET=120``.
"""

from __future__ import annotations

import math
import os
from pathlib import Path
from typing import Mapping, Optional

from .errors import ConfigurationError
from .keyframes import (DEFAULT_BLUR_THRESHOLD, DEFAULT_BUDGET, DEFAULT_DELAY, DEFAULT_TAU_ALPHA,
                        DEFAULT_TAU_OVERLAP, DEFAULT_TAU_T, OVERLAP_HISTORY)
from .mapper import TrainConfig

ENV_PREFIX = "SPLATMAP_"

DEFAULTS: dict[str, object] = {
    "kf.tau_r_deg": 5.0,
    "kf.tau_t_m": DEFAULT_TAU_T,
    "kf.tau_overlap": DEFAULT_TAU_OVERLAP,
    "kf.tau_alpha": DEFAULT_TAU_ALPHA,
    "kf.delay_depth": DEFAULT_DELAY,
    "kf.iter_budget": DEFAULT_BUDGET,
    "kf.blur_threshold": DEFAULT_BLUR_THRESHOLD,
    "kf.overlap_history": OVERLAP_HISTORY,
    "train.lambda": 0.2,
    "train.lambda_d": 0.5,
    "train.pyramid_levels": 2,
    "train.iters_per_level": 0,  # 0: budget // (levels + 1)
    "train.lr.position": 1.6e-4,
    "train.lr.sh": 2.5e-3,
    "train.lr.opacity": 5e-2,
    "train.lr.scale": 5e-3,
    "train.lr.rotation": 1e-3,
    "train.prune_threshold": 0.005,
    "train.prune_interval": 100,
    "train.sh_interval": 300,
    "train.scene_extent": 0.0,  # 0: measured from the first point batch
    "voxel.size": 0.1,
    "voxel.cap": 20,
    "voxel.min_separation": 0.0,  # 0: voxel.size / 4
    "pipeline.points_per_frame": 2048,
    "runtime.single_thread": False,
    "runtime.raster_threads": 0,  # 0: all available
    "runtime.steps_per_frame": 4,
    "runtime.checkpoint_interval": 0,  # 0: only at the end
    "runtime.output_dir": "out",
    "runtime.seed": 0,
}


def _convert(key: str, raw, default):
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError("must be finite")
            return v
        return str(raw)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"config key {key!r}: {e}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class PipelineConfig:
    """All tunables of the pipeline, addressed by dotted keys."""

    def __init__(self, values: Optional[Mapping[str, object]] = None):
        self._values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)
        self.validate()

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown config key {key!r}")
        self._values[key] = _convert(key, value, DEFAULTS[key])

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigurationError(f"unknown config key {key!r}")
        return self._values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, PipelineConfig) and self._values == other._values

    def as_dict(self) -> dict[str, object]:
        return dict(self._values)

    def validate(self) -> None:
        v = self._values
        for key in ("kf.tau_r_deg", "kf.tau_t_m", "voxel.size", "pipeline.points_per_frame"):
            if v[key] <= 0:
                raise ConfigurationError(f"{key} must be positive")
        for key in ("kf.tau_overlap", "kf.tau_alpha"):
            if not 0.0 <= v[key] <= 1.0:
                raise ConfigurationError(f"{key} must lie in [0, 1]")
        for key in ("kf.delay_depth", "kf.iter_budget", "kf.blur_threshold", "runtime.raster_threads",
                    "runtime.checkpoint_interval", "train.iters_per_level", "train.scene_extent",
                    "voxel.min_separation"):
            if v[key] < 0:
                raise ConfigurationError(f"{key} must be nonnegative")
        if v["voxel.cap"] < 1 or v["kf.overlap_history"] < 1 or v["runtime.steps_per_frame"] < 1:
            raise ConfigurationError("voxel.cap, kf.overlap_history and runtime.steps_per_frame must be >= 1")
        self.train_config()

    def train_config(self) -> TrainConfig:
        v = self._values
        return TrainConfig(lam=v["train.lambda"], lam_d=v["train.lambda_d"],
                           pyramid_levels=v["train.pyramid_levels"],
                           iters_per_level=v["train.iters_per_level"] or None,
                           lr_position=v["train.lr.position"], lr_sh=v["train.lr.sh"],
                           lr_opacity=v["train.lr.opacity"], lr_scale=v["train.lr.scale"],
                           lr_rotation=v["train.lr.rotation"], prune_threshold=v["train.prune_threshold"],
                           prune_interval=v["train.prune_interval"], sh_interval=v["train.sh_interval"],
                           scene_extent=v["train.scene_extent"] or None)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(self._values[k])}\n" for k in sorted(self._values))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "PipelineConfig":
        values = {}
        for no, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{source}:{no}: expected 'key = value', got {raw!r}")
            k, val = (s.strip() for s in line.split("=", 1))
            if k not in DEFAULTS:
                raise ConfigurationError(f"{source}:{no}: unknown config key {k!r}")
            values[k] = val
        return cls(values)

    @classmethod
    def load(cls, path=None, env: Optional[Mapping[str, str]] = None) -> "PipelineConfig":
        """Defaults, then the file at ``path`` (if any), then environment overrides."""
        values = {}
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigurationError(f"config file {p} not found")
            values.update(cls.loads(p.read_text(), str(p)).as_dict())
        values.update(env_overrides(os.environ if env is None else env))
        return cls(values)


def env_overrides(env: Mapping[str, str]) -> dict[str, str]:
    """Config values named by ``SPLATMAP_*`` environment variables."""
    out = {}
    for name, value in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        if key not in DEFAULTS:
            raise ConfigurationError(f"environment variable {name} names no config key ({key!r})")
        out[key] = value
    return out
