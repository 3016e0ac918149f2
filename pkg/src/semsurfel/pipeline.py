"""Per-frame odometry: project, refine labels, register against the map, integrate.

Three modes are supported:

* ``geometric``: labels are dropped on input; plain surfel odometry.
* ``nomovable``: points with a movable class are deleted before projection,
  otherwise geometric.
* ``semantic``: label refinement, semantic ICP weights, penalized stability
  update and pruning of movable classes during initialization.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import kitti_io
from .config import RunConfig
from .kitti_io import Scan
from .projection import compute_normals, project, render_model
from .registration import (DegenerateAssociationError, IcpResult, RankDeficiencyError,
                           associate_surfels, icp)
from .semantics import movable_mask, refine
from .surfel_map import SurfelMap, UpdateStats, integrate, penalize_see_through

log = logging.getLogger(__name__)


class Mode(str, Enum):
    GEOMETRIC = "geometric"
    NOMOVABLE = "nomovable"
    SEMANTIC = "semantic"

    @property
    def uses_labels(self) -> bool:
        return self is not Mode.GEOMETRIC


class MissingLabelsError(FileNotFoundError):
    pass


@dataclass
class FrameResult:
    frame: int
    pose: np.ndarray
    increment: np.ndarray
    stats: UpdateStats
    icp: IcpResult | None = None
    fallback: bool = False
    seconds: float = 0.0


@dataclass
class OdometryReport:
    mode: str
    poses: list[np.ndarray] = field(default_factory=list)
    increments: list[np.ndarray] = field(default_factory=list)
    frames: list[FrameResult] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.poses)


class Odometry:
    """Holds the map and trajectory; feed frames strictly in order."""

    def __init__(self, cfg: RunConfig, mode: Mode | str = Mode.SEMANTIC):
        self.cfg = cfg
        self.mode = Mode(mode)
        self.map = SurfelMap()
        self.poses: list[np.ndarray] = []
        self.increments: list[np.ndarray] = []
        self.last_obs = None

    @property
    def semantic(self) -> bool:
        return self.mode is Mode.SEMANTIC

    def prepare(self, scan: Scan):
        """Scan -> observation rasters according to the mode."""
        cfg = self.cfg
        if self.mode is Mode.GEOMETRIC:
            scan = scan.without_labels()
        elif scan.labels is None:
            raise MissingLabelsError(f"{self.mode.value} mode needs per-point labels")
        elif scan.confidences is None:
            scan = scan.with_labels(scan.labels, np.full(len(scan), cfg.default_confidence))
        scan = kitti_io.filter_scan(scan, cfg.min_range, cfg.max_range)
        if self.mode is Mode.NOMOVABLE:
            scan = scan.select(~movable_mask(scan.labels, cfg.movable))
        maps = compute_normals(project(scan, cfg), cfg)
        if self.semantic:
            maps = refine(maps, cfg)
        return maps

    def process_frame(self, scan: Scan) -> FrameResult:
        t0 = time.perf_counter()
        cfg = self.cfg
        frame = len(self.poses)
        obs = self.prepare(scan)
        self.last_obs = obs
        see_through = 0

        if frame == 0:
            pose = np.eye(4)
            inc = np.eye(4)
            result, fallback = None, False
            assoc = np.full(obs.shape, -1, dtype=np.int64)
        else:
            prev = self.poses[-1]
            T_init = self.increments[-1] if frame > 1 else np.eye(4)
            model = render_model(self.map, prev, cfg, stable_only=True)
            try:
                result = icp(obs, model, T_init, cfg, semantic=self.semantic)
                inc, fallback = result.pose, False
            except (DegenerateAssociationError, RankDeficiencyError) as exc:
                log.warning("frame %d: registration failed (%s); using motion prior", frame, exc)
                result, inc, fallback = None, T_init.copy(), True
            pose = prev @ inc
            assoc = associate_surfels(obs, self.map, pose, cfg)
            if self.semantic:
                see_through = penalize_see_through(self.map, obs, pose, cfg, exclude=assoc[assoc >= 0])

        stats = integrate(self.map, obs, assoc, pose, frame, cfg, semantic=self.semantic, seed=frame == 0)
        stats.see_through = see_through
        self.poses.append(pose)
        self.increments.append(inc)
        return FrameResult(frame, pose, inc, stats, result, fallback, time.perf_counter() - t0)


def run_scans(scans, cfg: RunConfig, mode: Mode | str) -> tuple[OdometryReport, Odometry]:
    """Run odometry over an iterable of scans held in memory."""
    odo = Odometry(cfg, mode)
    report = OdometryReport(Mode(mode).value)
    for scan in scans:
        fr = odo.process_frame(scan)
        report.poses.append(fr.pose)
        report.increments.append(fr.increment)
        report.frames.append(fr)
    return report, odo


def write_report(report: OdometryReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kitti_io.write_poses(report.poses, out / "poses.txt")
    stat_keys = list(UpdateStats().as_dict())
    with open(out / "stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "seconds", "fallback", "icp_iterations", "icp_converged", *stat_keys])
        for fr in report.frames:
            it = fr.icp.iterations if fr.icp else 0
            conv = int(fr.icp.converged) if fr.icp else 0
            w.writerow([fr.frame, f"{fr.seconds:.6f}", int(fr.fallback), it, conv,
                        *fr.stats.as_dict().values()])
    with open(out / "icp_diag.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "iteration", "cost", "correspondences", "mean_weight"])
        for fr in report.frames:
            for h in (fr.icp.history if fr.icp else []):
                w.writerow([fr.frame, h["iteration"], f"{h['cost']:.9g}", h["correspondences"],
                            f"{h['mean_weight']:.6f}"])


def run_sequence(data_dir: str | Path, cfg: RunConfig, mode: Mode | str,
                 max_frames: int | None = None) -> tuple[OdometryReport, Odometry]:
    """Run odometry over a sequence directory (velodyne/, labels/)."""
    mode = Mode(mode)
    seq = kitti_io.Sequence.open(data_dir)
    n = len(seq) if max_frames is None else min(len(seq), max_frames)
    if mode.uses_labels:
        missing = [str(seq.label_path(i)) for i in range(n) if not seq.has_labels(i)]
        if missing:
            raise MissingLabelsError(f"{mode.value} mode needs labels; {len(missing)} missing, "
                                     f"first: {missing[0]}")
    scans = (seq.load(i, mode.uses_labels, cfg.default_confidence) for i in range(n))
    return run_scans(scans, cfg, mode)
