"""Command-line entry point: ``splatmap {synth,train,render,eval,grad-check}``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence as Seq

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint
from .config import ENV_PREFIX, PipelineConfig
from .core import CameraModel, Pose
from .dataset import load_sequence, project_sparse_depth, to_uint8, write_image
from .errors import ConfigurationError, SplatError
from .gaussian_map import GaussianMap
from .metrics import EvalReport, FrameEval, depth_rmse, psnr, ssim

DEFAULT_CAMERA = (500.0, 500.0, 319.5, 255.5, 640, 512)
DEPTH_PNG_SCALE = 1000.0  # 16-bit depth PNGs store millimetres

log = logging.getLogger("splatmap")


def parse_pose(text: str) -> Pose:
    """``"qw qx qy qz tx ty tz"`` (world to camera) to a :class:`Pose`."""
    try:
        v = [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigurationError(f"pose must be 7 numbers 'qw qx qy qz tx ty tz', got {text!r}") from None
    if len(v) != 7:
        raise ConfigurationError(f"pose must be 7 numbers 'qw qx qy qz tx ty tz', got {len(v)}")
    q = np.array(v[:4])
    n = np.linalg.norm(q)
    if n == 0:
        raise ConfigurationError("pose quaternion must be nonzero")
    return Pose(q / n, np.array(v[4:]))


def parse_camera(text: str) -> CameraModel:
    """``"fx fy cx cy width height"`` to a :class:`CameraModel`."""
    v = text.replace(",", " ").split()
    if len(v) != 6:
        raise ConfigurationError(f"camera must be 'fx fy cx cy width height', got {text!r}")
    try:
        return CameraModel(float(v[0]), float(v[1]), float(v[2]), float(v[3]), int(v[4]), int(v[5]))
    except ValueError:
        raise ConfigurationError(f"camera must be 'fx fy cx cy width height', got {text!r}") from None


def write_depth_png(path, depth: np.ndarray) -> None:
    mm = np.clip(np.round(np.asarray(depth) * DEPTH_PNG_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthetic import SyntheticSpec, generate_synthetic_scene

    spec = SyntheticSpec(n_gaussians=args.gaussians, n_frames=args.frames, seed=args.seed,
                         trajectory=args.trajectory, width=args.width, height=args.height, extent=args.extent)
    scene = generate_synthetic_scene(spec, args.out)
    print(f"wrote {len(scene.poses)} frames of a {len(scene.gaussians)}-Gaussian scene to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .pipeline import run_pipeline

    cfg = PipelineConfig.load(args.config)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value.strip())
    cfg.validate()
    out = Path(args.out or cfg["runtime.output_dir"])
    single = True if args.single_thread else None
    t0 = time.perf_counter()
    res = run_pipeline(args.seq, cfg, out, single_thread=single)
    print(res.report.summary_table() if res.report.frames else "no keyframes")
    print(f"keyframes={len(res.keyframes)} iterations={res.total_iterations} gaussians={len(res.gmap)} "
          f"final_loss={res.final_loss:.6f} time={time.perf_counter() - t0:.1f}s checkpoint={res.checkpoint}")
    return 0


def cmd_render(args) -> int:
    from .raster import render

    gmap, cam = load_checkpoint(args.map)
    if args.camera:
        cam = parse_camera(args.camera)
    if cam is None:
        cam = CameraModel(*DEFAULT_CAMERA)
    out = render(gmap, parse_pose(args.pose), cam)
    write_image(args.out, np.clip(out.color, 0.0, 1.0))
    if args.depth:
        write_depth_png(args.depth, out.depth)
    print(f"rendered {len(gmap)} Gaussians at {cam.width}x{cam.height} to {args.out}")
    return 0


def evaluate_sequence(gmap: GaussianMap, seq_path) -> EvalReport:
    """Score renders of ``gmap`` at every frame of a sequence.

    Renders are quantized to 8 bits first, matching how sequence images are
    stored, so a map compared with its own renders scores the identical-image
    PSNR.
    """
    from .raster import render

    seq = load_sequence(seq_path)
    cam = seq.camera
    rep = EvalReport()
    t0 = time.perf_counter()
    for frame in seq:
        out = render(gmap, frame.pose, cam)
        img = to_uint8(out.color) / 255.0
        lidar = project_sparse_depth(frame.positions, frame.pose, cam)
        d = depth_rmse(out.depth, lidar) if np.any(lidar > 0) else float("nan")
        s = ssim(frame.image, img) if min(cam.shape) >= 11 else float("nan")
        rep.add(FrameEval(frame=frame.index, psnr=psnr(frame.image, img), ssim=s, depth_rmse=d,
                          iteration=gmap.global_step, wall_time=time.perf_counter() - t0))
    return rep


def cmd_eval(args) -> int:
    gmap, _ = load_checkpoint(args.map)
    rep = evaluate_sequence(gmap, args.seq)
    rep.to_jsonl(args.out)
    print(rep.summary_table() if rep.frames else "empty sequence")
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import run_gradcheck

    rep = run_gradcheck(seed=args.seed, configs=args.configs, max_gaussians=args.gaussians, size=args.size,
                        log=(lambda m: print(m, file=sys.stderr)) if args.verbose else None)
    print(f"max relative error: {max(rep.max_raster_error, rep.max_primitive_error):.3e}")
    print(rep.summary())
    return 0 if rep.passed else 1


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatmap", description="LiDAR-camera Gaussian splatting mapper.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", help="generate a synthetic sequence with ground truth")
    s.add_argument("--out", required=True, help="output sequence directory")
    s.add_argument("--gaussians", type=_positive_int, default=500)
    s.add_argument("--frames", type=_positive_int, default=20)
    s.add_argument("--seed", type=_nonneg_int, default=0)
    s.add_argument("--trajectory", choices=("line", "orbit"), default="line")
    s.add_argument("--width", type=_positive_int, default=64)
    s.add_argument("--height", type=_positive_int, default=48)
    s.add_argument("--extent", type=float, default=2.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="build a map from a sequence",
                       epilog=f"Config keys may also be set through {ENV_PREFIX}* environment variables, "
                              f"e.g. {ENV_PREFIX}KF__ITER_BUDGET=120.")
    t.add_argument("--seq", required=True, help="sequence directory")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--out", help="output directory (default: runtime.output_dir)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--single-thread", action="store_true", help="run ingestion and optimization in one thread")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render one view of a map checkpoint")
    r.add_argument("--map", required=True, help="checkpoint file")
    r.add_argument("--pose", required=True, help='world-to-camera pose "qw qx qy qz tx ty tz"')
    r.add_argument("--out", required=True, help="colour PNG")
    r.add_argument("--depth", help="16-bit depth PNG in millimetres")
    r.add_argument("--camera", help='"fx fy cx cy width height" (default: stored with the map, else 640x512)')
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score a map against every view of a sequence")
    e.add_argument("--map", required=True, help="checkpoint file")
    e.add_argument("--seq", required=True, help="sequence directory")
    e.add_argument("--out", required=True, help="report file (one JSON record per frame)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("grad-check", help="finite-difference gradient suite")
    g.add_argument("--seed", type=_nonneg_int, default=0)
    g.add_argument("--gaussians", type=_positive_int, default=50, help="max Gaussians per configuration")
    g.add_argument("--configs", type=_positive_int, default=1000)
    g.add_argument("--size", type=_positive_int, default=32, help="image side in pixels")
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv: Optional[Seq[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 and usage on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except SplatError as e:
        print(f"splatmap {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
