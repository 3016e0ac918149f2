"""KITTI-style relative pose errors and per-frame error series.

Relative errors compare the motion between two frames of the estimate
against the same motion in the ground truth, for segments of fixed
travelled length. Rotational errors are kept in degrees per metre and
shown as degrees per 100 m in tables; translational errors are percent.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import inverse, rotation_angle

log = logging.getLogger(__name__)

ODOM_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
ROAD_LENGTHS = (5, 10, 50, 100, 150, 200, 250, 300, 350, 400)
PRESETS = {"odom": ODOM_LENGTHS, "road": ROAD_LENGTHS}


class TrajectoryMismatchError(ValueError):
    pass


@dataclass
class SegmentError:
    length: float
    samples: int
    rot_deg_per_m: float
    trans_pct: float


@dataclass
class RelErrorReport:
    lengths: list[float]
    segments: list[SegmentError] = field(default_factory=list)
    rot_deg_per_m: float = 0.0
    trans_pct: float = 0.0
    samples: int = 0
    skipped: list[float] = field(default_factory=list)
    stride: int = 1

    @property
    def rot_deg_per_100m(self) -> float:
        return 100.0 * self.rot_deg_per_m

    def row(self, name: str) -> str:
        """One table row: name, rotation (deg/100 m) / translation (%)."""
        return f"{name:<16s} {self.rot_deg_per_100m:7.3f} / {self.trans_pct:6.3f}"

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["length_m", "samples", "rot_deg_per_m", "rot_deg_per_100m", "trans_pct"])
            for s in self.segments:
                w.writerow([f"{s.length:g}", s.samples, f"{s.rot_deg_per_m:.9g}",
                            f"{100 * s.rot_deg_per_m:.9g}", f"{s.trans_pct:.9g}"])
            w.writerow(["average", self.samples, f"{self.rot_deg_per_m:.9g}",
                        f"{self.rot_deg_per_100m:.9g}", f"{self.trans_pct:.9g}"])


def parse_lengths(spec) -> list[float]:
    """'odom', 'road', a comma list '100,200' or a sequence of numbers."""
    if isinstance(spec, str):
        if spec in PRESETS:
            return [float(x) for x in PRESETS[spec]]
        try:
            out = [float(x) for x in spec.split(",") if x.strip()]
        except ValueError as exc:
            raise ValueError(f"bad length set {spec!r}; use odom, road or a comma list") from exc
    else:
        out = [float(x) for x in spec]
    if not out or any(x <= 0 for x in out):
        raise ValueError("segment lengths must be positive")
    return out


def _stack(poses) -> np.ndarray:
    arr = np.asarray(poses, dtype=float)
    if arr.ndim != 3 or arr.shape[1:] != (4, 4):
        raise ValueError("expected a sequence of 4x4 poses")
    return arr


def path_lengths(poses) -> np.ndarray:
    """Cumulative travelled distance at each frame (0 at frame 0)."""
    P = _stack(poses)
    if len(P) == 0:
        return np.zeros(0)
    steps = np.linalg.norm(np.diff(P[:, :3, 3], axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _segment_end(dist: np.ndarray, start: int, length: float) -> int:
    """First frame whose distance from ``start`` reaches ``length`` (-1 if none)."""
    j = int(np.searchsorted(dist, dist[start] + length, side="left"))
    return j if j < len(dist) else -1


def relative_errors(est, gt, lengths=ODOM_LENGTHS, stride: int = 1) -> RelErrorReport:
    est, gt = _stack(est), _stack(gt)
    if len(est) != len(gt):
        raise TrajectoryMismatchError(f"estimate has {len(est)} poses, ground truth {len(gt)}")
    if len(gt) < 2:
        raise TrajectoryMismatchError("need at least two poses")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    lengths = parse_lengths(lengths)
    dist = path_lengths(gt)
    report = RelErrorReport(lengths=list(lengths), stride=stride)
    all_r, all_t = [], []
    for L in lengths:
        if dist[-1] < L:
            report.skipped.append(L)
            log.info("segment length %g m skipped: trajectory is only %.1f m long", L, dist[-1])
            continue
        rs, ts = [], []
        for i in range(0, len(gt), stride):
            j = _segment_end(dist, i, L)
            if j < 0:
                break
            gt_rel = inverse(gt[i]) @ gt[j]
            est_rel = inverse(est[i]) @ est[j]
            if np.array_equal(gt_rel, est_rel):
                rs.append(0.0)
                ts.append(0.0)
                continue
            E = inverse(gt_rel) @ est_rel
            rs.append(math.degrees(rotation_angle(E[:3, :3])) / L)
            ts.append(100.0 * float(np.linalg.norm(E[:3, 3])) / L)
        if rs:
            report.segments.append(SegmentError(L, len(rs), float(np.mean(rs)), float(np.mean(ts))))
            all_r += rs
            all_t += ts
    if all_r:
        report.rot_deg_per_m = float(np.mean(all_r))
        report.trans_pct = float(np.mean(all_t))
        report.samples = len(all_r)
    return report


def error_timeline(est, gt, window: int = 1) -> np.ndarray:
    """Translational error (%) of the motion over the last ``window`` frames, per frame.

    Frames before ``window`` get 0. A frame whose ground-truth segment has
    no length gets NaN unless its error is exactly zero.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(est) == 0 and len(gt) == 0:
        return np.zeros(0)
    est, gt = _stack(est), _stack(gt)
    if len(est) != len(gt):
        raise TrajectoryMismatchError(f"estimate has {len(est)} poses, ground truth {len(gt)}")
    dist = path_lengths(gt)
    out = np.zeros(len(gt))
    for i in range(window, len(gt)):
        k = i - window
        E = inverse(inverse(gt[k]) @ gt[i]) @ (inverse(est[k]) @ est[i])
        err = float(np.linalg.norm(E[:3, 3]))
        seg = dist[i] - dist[k]
        if err == 0.0:
            out[i] = 0.0
        elif seg < 1e-9:
            out[i] = np.nan
        else:
            out[i] = 100.0 * err / seg
    return out


def increment_errors(est, gt) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame translation (m) and rotation (deg) error of the frame-to-frame motion."""
    est, gt = _stack(est), _stack(gt)
    if len(est) != len(gt):
        raise TrajectoryMismatchError(f"estimate has {len(est)} poses, ground truth {len(gt)}")
    t = np.zeros(max(len(gt) - 1, 0))
    r = np.zeros_like(t)
    for i in range(1, len(gt)):
        E = inverse(inverse(gt[i - 1]) @ gt[i]) @ (inverse(est[i - 1]) @ est[i])
        t[i - 1] = np.linalg.norm(E[:3, 3])
        r[i - 1] = math.degrees(rotation_angle(E[:3, :3]))
    return t, r


def final_drift(est, gt) -> float:
    """Distance between final positions once both trajectories start at the identity."""
    est, gt = _stack(est), _stack(gt)
    e = inverse(est[0]) @ est[-1]
    g = inverse(gt[0]) @ gt[-1]
    return float(np.linalg.norm(e[:3, 3] - g[:3, 3]))


def to_camera_frame(poses, Tr: np.ndarray) -> np.ndarray:
    """Express LiDAR-frame poses in the camera frame used by KITTI ground truth."""
    P = _stack(poses)
    Tr_inv = inverse(Tr)
    return np.stack([Tr @ T @ Tr_inv for T in P]) if len(P) else P


def format_table(reports: dict[str, RelErrorReport]) -> str:
    header = f"{'method':<16s} {'rot/100m':>7s} / {'trans%':>6s}"
    return "\n".join([header] + [rep.row(name) for name, rep in reports.items()])
