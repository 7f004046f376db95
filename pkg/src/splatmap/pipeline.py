"""Replay a recorded sequence through ingestion and map optimization.

Ingestion feeds each frame's points into the voxel store, decides whether
the frame becomes a keyframe (motion, sharpness and overlap tests), packages
pending points with it and pushes it through the delay buffer. Optimization
takes released keyframes, keeps only points the map does not yet explain,
turns them into Gaussians, runs one step on the new keyframe and then keeps
training on randomly sampled keyframes until every budget is spent.

Ingestion never reads the map, so which frames become keyframes does not
depend on how fast optimization runs.
"""

from __future__ import annotations

import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import save_checkpoint
from .config import PipelineConfig
from .core import CameraModel
from .dataset import Frame, load_sequence, project_sparse_depth
from .gaussian_map import GaussianMap
from .keyframes import Keyframe, KeyframeQueue, overlap_ratio, sharpness, should_admit, visibility_keep_mask
from .mapper import (StepReport, TrainConfig, init_gaussians_from_points, maybe_upgrade_sh,
                     prepare_keyframe, prune, train_keyframe_step)
from .metrics import EvalReport, FrameEval, depth_rmse, psnr, ssim
from .raster import render, set_threads
from .voxels import VoxelStore

log = logging.getLogger("splatmap.pipeline")

CHECKPOINT_NAME = "map.ckpt"
PARTIAL_CHECKPOINT_NAME = "map.partial.ckpt"
REPORT_NAME = "report.jsonl"


@dataclass
class PipelineResult:
    gmap: GaussianMap
    report: EvalReport
    keyframes: list[Keyframe]
    steps: list[StepReport] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    rejected: dict = field(default_factory=dict)

    @property
    def total_iterations(self) -> int:
        return len(self.steps)

    @property
    def final_loss(self) -> float:
        return self.steps[-1].loss if self.steps else float("nan")


@dataclass
class _Arrival:
    kf: Keyframe
    extra_points: bool = False  # leftover points only, keyframe already initialized


class Ingestor:
    """Turns frames into keyframes. Owns the voxel store and the delay buffer."""

    def __init__(self, cfg: PipelineConfig, cam: CameraModel, kq: KeyframeQueue,
                 emit: Callable[[_Arrival], None]):
        self.cfg = cfg
        self.cam = cam
        self.kq = kq
        self.emit = emit
        self.store = VoxelStore(cfg["voxel.size"], cfg["voxel.cap"], cfg["voxel.min_separation"] or None)
        self.admitted: list[Keyframe] = []
        self.rejected = {"motion": 0, "blur": 0, "overlap": 0}

    def _release(self, kfs) -> None:
        for k in kfs:
            self.emit(_Arrival(k))

    def feed(self, frame: Frame) -> Optional[Keyframe]:
        cfg = self.cfg
        self.store.insert_arrays(frame.positions, frame.colors, frame.timestamp)
        if self.admitted and not should_admit(frame.pose, self.admitted[-1].pose,
                                              math.radians(cfg["kf.tau_r_deg"]), cfg["kf.tau_t_m"]):
            self.rejected["motion"] += 1
            return None
        thr = cfg["kf.blur_threshold"]
        if thr > 0 and sharpness(frame.image) < thr:
            self.rejected["blur"] += 1
            return None
        depth = project_sparse_depth(frame.positions, frame.pose, self.cam)
        kf = Keyframe(id=len(self.admitted), pose=frame.pose, color_image=frame.image, sparse_depth=depth,
                      remaining_iters=cfg["kf.iter_budget"], timestamp=frame.timestamp, ready=False)
        recent = self.admitted[-cfg["kf.overlap_history"]:]
        if any(overlap_ratio(kf, prev, None, self.cam) > cfg["kf.tau_overlap"] for prev in recent):
            self.rejected["overlap"] += 1
            return None
        kf.point_positions, kf.point_colors, _ = self.store.drain_arrays(cfg["pipeline.points_per_frame"])
        self.admitted.append(kf)
        log.debug("frame %d admitted as keyframe %d with %d points", frame.index, kf.id, len(kf.point_positions))
        self._release(self.kq.push_and_release(kf, cfg["kf.delay_depth"]))
        return kf

    def finish(self) -> None:
        """Flush the delay buffer and hand over points no keyframe has claimed yet."""
        self._release(self.kq.flush())
        if self.admitted and self.store.pending:
            pos, col, _ = self.store.drain_arrays(self.store.pending)
            last = self.admitted[-1]
            extra = Keyframe(id=last.id, pose=last.pose, color_image=last.color_image,
                             sparse_depth=last.sparse_depth, point_positions=pos, point_colors=col,
                             remaining_iters=0, ready=False)
            self.emit(_Arrival(extra, extra_points=True))


class Optimizer:
    """Owns the map: initializes Gaussians from arrivals and runs training steps."""

    def __init__(self, cfg: PipelineConfig, cam: CameraModel, kq: KeyframeQueue, gmap: GaussianMap,
                 out_dir: Optional[Path] = None):
        self.cfg = cfg
        self.tcfg: TrainConfig = cfg.train_config()
        self.cam = cam
        self.kq = kq
        self.gmap = gmap
        self.rng = np.random.default_rng(cfg["runtime.seed"])
        self.steps: list[StepReport] = []
        self.keyframes: list[Keyframe] = []
        self.out_dir = out_dir
        self.t0 = time.perf_counter()

    def arrive(self, a: _Arrival) -> None:
        kf = a.kf
        pos = kf.point_positions
        if len(pos):
            keep = self._unexplained(kf)
            init_gaussians_from_points(self.gmap, pos[keep], kf.point_colors[keep], use_map_neighbors=True)
        if a.extra_points:
            return
        prepare_keyframe(kf, self.tcfg.pyramid_levels)
        kf.ready = True
        self.keyframes.append(kf)
        if kf.remaining_iters > 0:
            # the keyframe is optimized once as a submap on arrival
            self.kq.consume(kf, 1)
            self._step(kf)
            s = self.steps[-1]
            log.info("keyframe %d step %d level %d loss %.5f psnr %.2f gaussians %d",
                     kf.id, s.global_step, s.level, s.loss, s.psnr, len(self.gmap))

    def _unexplained(self, kf: Keyframe) -> np.ndarray:
        """Mask of the keyframe's points whose pixel the map does not already cover."""
        if len(self.gmap) == 0:
            return np.ones(len(kf.point_positions), dtype=bool)
        with self.gmap.lock.read():
            vis = render(self.gmap, kf.pose, self.cam).visibility
        return visibility_keep_mask(kf.point_positions, vis, kf.pose, self.cam, self.cfg["kf.tau_alpha"])

    def _step(self, kf: Keyframe) -> None:
        rep = train_keyframe_step(self.gmap, kf, self.tcfg, self.cam)
        self.steps.append(rep)
        maybe_upgrade_sh(self.gmap, self.tcfg)
        if self.gmap.global_step % self.tcfg.prune_interval == 0:
            prune(self.gmap, self.tcfg.prune_threshold)
        every = self.cfg["runtime.checkpoint_interval"]
        if every and self.out_dir is not None and self.gmap.global_step % every == 0:
            save_checkpoint(self.out_dir / CHECKPOINT_NAME, self.gmap, self.cam)
        if kf.remaining_iters == 0:
            log.info("keyframe %d done: step %d level %d loss %.5f psnr %.2f",
                     kf.id, rep.global_step, rep.level, rep.loss, rep.psnr)

    def sampled_step(self) -> bool:
        kf = self.kq.sample_for_optimization(self.rng)
        if kf is None:
            return False
        self._step(kf)
        return True


def evaluate_keyframes(gmap: GaussianMap, keyframes: list[Keyframe], cam: CameraModel,
                       gt_depth: Optional[dict] = None, t0: float = 0.0) -> EvalReport:
    """Render every keyframe at native resolution and score it against its image.

    Depth error is measured on the keyframe's LiDAR pixels unless ``gt_depth``
    maps keyframe ids to other reference depth images.
    """
    rep = EvalReport()
    for kf in keyframes:
        out = render(gmap, kf.pose, cam)
        img = np.clip(out.color, 0.0, 1.0)
        ref_depth = gt_depth.get(kf.id) if gt_depth else None
        if ref_depth is None:
            ref_depth = kf.sparse_depth
        drmse = depth_rmse(out.depth, ref_depth) if np.any(ref_depth > 0) else float("nan")
        s = ssim(kf.color_image, img) if min(cam.shape) >= 11 else float("nan")
        rep.add(FrameEval(frame=kf.id, psnr=psnr(kf.color_image, img), ssim=s, depth_rmse=drmse,
                          iteration=gmap.global_step, wall_time=time.perf_counter() - t0))
    return rep


def run_pipeline(seq_path, cfg: Optional[PipelineConfig] = None, out_dir=None,
                 single_thread: Optional[bool] = None) -> PipelineResult:
    """Build a map from the sequence at ``seq_path``.

    Args:
        seq_path: sequence directory.
        cfg: configuration (defaults when None).
        out_dir: where the checkpoint and report go; None writes nothing.
        single_thread: overrides ``runtime.single_thread``.

    Returns:
        The final map, per-keyframe evaluation and the step log. On an error
        mid-run a partial checkpoint is written before the exception propagates.
    """
    cfg = cfg or PipelineConfig()
    seq = load_sequence(seq_path)  # sequence errors surface before any work starts
    cam = seq.camera
    if single_thread is None:
        single_thread = cfg["runtime.single_thread"]
    if cfg["runtime.raster_threads"]:
        set_threads(cfg["runtime.raster_threads"])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    gmap = GaussianMap()
    kq = KeyframeQueue()
    inbox: "queue.Queue[_Arrival]" = queue.Queue()
    ingest = Ingestor(cfg, cam, kq, inbox.put)
    opt = Optimizer(cfg, cam, kq, gmap, out)

    def drain_inbox() -> None:
        while True:
            try:
                a = inbox.get_nowait()
            except queue.Empty:
                return
            opt.arrive(a)

    try:
        if single_thread:
            for frame in seq:
                ingest.feed(frame)
                drain_inbox()
                for _ in range(cfg["runtime.steps_per_frame"]):
                    if not opt.sampled_step():
                        break
            ingest.finish()
            drain_inbox()
            while opt.sampled_step():
                pass
        else:
            _run_threaded(seq, ingest, opt, inbox)
    except BaseException:
        if out is not None:
            save_checkpoint(out / PARTIAL_CHECKPOINT_NAME, gmap, cam)
            log.error("pipeline aborted; partial checkpoint written to %s", out / PARTIAL_CHECKPOINT_NAME)
        raise

    report = evaluate_keyframes(gmap, opt.keyframes, cam, t0=opt.t0)
    result = PipelineResult(gmap=gmap, report=report, keyframes=opt.keyframes, steps=opt.steps,
                            rejected=dict(ingest.rejected))
    if out is not None:
        result.checkpoint = save_checkpoint(out / CHECKPOINT_NAME, gmap, cam)
        report.to_jsonl(out / REPORT_NAME)
    return result


def _run_threaded(seq, ingest: Ingestor, opt: Optimizer, inbox: queue.Queue) -> None:
    done = threading.Event()
    errors: list[BaseException] = []

    def ingestion() -> None:
        try:
            for frame in seq:
                if errors:
                    return
                ingest.feed(frame)
            ingest.finish()
        except BaseException as e:  # handed to the caller below
            errors.append(e)
        finally:
            done.set()

    th = threading.Thread(target=ingestion, name="splatmap-ingestion", daemon=True)
    th.start()
    try:
        while True:
            try:
                opt.arrive(inbox.get_nowait())
                continue
            except queue.Empty:
                pass
            if opt.sampled_step():
                continue
            if done.is_set() and inbox.empty():
                break
            try:
                opt.arrive(inbox.get(timeout=0.05))
            except queue.Empty:
                pass
    except BaseException as e:
        errors.append(e)
    th.join()
    if errors:
        raise errors[0]
