"""Readers and writers for KITTI odometry / SemanticKITTI files.

Layout of a sequence directory::

    <seq>/velodyne/000000.bin   float32 x, y, z, intensity (16 bytes/point)
    <seq>/labels/000000.label   uint32 per point, class id in the low 16 bits
    <seq>/labels/000000.prob    optional float32 label confidence per point
    <seq>/poses.txt             ground truth, 12 values per line (3x4 row-major)
    <seq>/calib.txt             optional, ``Tr:`` velodyne -> camera
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import orthonormalize

log = logging.getLogger(__name__)

LABEL_MASK = 0xFFFF


class MalformedFileError(ValueError):
    pass


class LabelCountError(ValueError):
    pass


class PoseParseError(ValueError):
    pass


@dataclass
class Scan:
    points: np.ndarray  # (N, 3) float64, sensor frame
    intensities: np.ndarray  # (N,)
    labels: np.ndarray | None = None  # (N,) uint16
    confidences: np.ndarray | None = None  # (N,) float64

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        self.intensities = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
        if len(self.intensities) != n:
            raise ValueError("intensities length differs from points")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint16).reshape(-1)
            if len(self.labels) != n:
                raise LabelCountError(f"{len(self.labels)} labels for {n} points")
        if self.confidences is not None:
            self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
            if len(self.confidences) != n:
                raise LabelCountError(f"{len(self.confidences)} confidences for {n} points")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def select(self, mask: np.ndarray) -> "Scan":
        return Scan(
            self.points[mask],
            self.intensities[mask],
            None if self.labels is None else self.labels[mask],
            None if self.confidences is None else self.confidences[mask],
        )

    def with_labels(self, labels, confidences) -> "Scan":
        return Scan(self.points, self.intensities, labels, confidences)

    def without_labels(self) -> "Scan":
        return Scan(self.points, self.intensities)


def read_scan(path: str | os.PathLike) -> Scan:
    """Read a KITTI ``.bin`` velodyne scan, every point in file order."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise MalformedFileError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return Scan(data[:, :3].astype(np.float64), data[:, 3].astype(np.float64))


def write_scan(scan: Scan, path: str | os.PathLike) -> None:
    data = np.empty((len(scan), 4), dtype="<f4")
    data[:, :3] = scan.points
    data[:, 3] = scan.intensities
    Path(path).write_bytes(data.tobytes())


def mask_label(values) -> np.ndarray:
    return (np.asarray(values, dtype=np.uint32) & LABEL_MASK).astype(np.uint16)


def read_labels(path: str | os.PathLike, n_points: int, default_confidence: float = 0.8):
    """Return ``(labels, confidences)`` for a ``.label`` file.

    Confidences come from a sibling ``.prob`` file when one exists, otherwise
    every point gets ``default_confidence``.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 4:
        raise MalformedFileError(f"{path}: size {len(raw)} is not a multiple of 4 bytes")
    values = np.frombuffer(raw, dtype="<u4")
    if len(values) != n_points:
        raise LabelCountError(f"{path}: {len(values)} labels for {n_points} points")
    labels = mask_label(values)
    prob_path = path.with_suffix(".prob")
    if prob_path.exists():
        conf = np.frombuffer(prob_path.read_bytes(), dtype="<f4").astype(np.float64)
        if len(conf) != n_points:
            raise LabelCountError(f"{prob_path}: {len(conf)} confidences for {n_points} points")
        conf = np.clip(conf, 1e-6, 1.0)
    else:
        conf = np.full(n_points, float(default_confidence))
    return labels, conf


def write_labels(labels, path: str | os.PathLike, confidences=None, instances=None) -> None:
    values = np.asarray(labels, dtype=np.uint32) & LABEL_MASK
    if instances is not None:
        values = values | (np.asarray(instances, dtype=np.uint32) << 16)
    path = Path(path)
    path.write_bytes(values.astype("<u4").tobytes())
    if confidences is not None:
        path.with_suffix(".prob").write_bytes(np.asarray(confidences, dtype="<f4").tobytes())


def filter_scan(scan: Scan, min_range: float = 0.5, max_range: float = 120.0) -> Scan:
    finite = np.all(np.isfinite(scan.points), axis=1)
    rng = np.linalg.norm(np.where(finite[:, None], scan.points, 0.0), axis=1)
    keep = finite & (rng >= min_range) & (rng <= max_range)
    dropped = int(len(scan) - keep.sum())
    if dropped:
        log.info("dropped %d of %d points (non-finite or outside [%g, %g] m)",
                 dropped, len(scan), min_range, max_range)
    return scan.select(keep)


def _parse_pose_line(line: str, lineno: int, path) -> np.ndarray:
    tokens = line.split()
    if len(tokens) != 12:
        raise PoseParseError(f"{path}:{lineno}: expected 12 values, got {len(tokens)}")
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise PoseParseError(f"{path}:{lineno}: {exc}") from None
    T = np.eye(4)
    T[:3, :] = np.reshape(vals, (3, 4))
    return T


def read_poses(path: str | os.PathLike) -> list[np.ndarray]:
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            T = _parse_pose_line(line, lineno, path)
            R = T[:3, :3]
            drift = np.abs(R.T @ R - np.eye(3)).max()
            if drift > 1e-6:
                log.warning("%s:%d: rotation off orthonormal by %.2e, re-orthonormalizing",
                            path, lineno, drift)
                T[:3, :3] = orthonormalize(R)
            poses.append(T)
    return poses


def format_pose(T: np.ndarray) -> str:
    return " ".join(f"{v:.17g}" for v in np.asarray(T)[:3, :].reshape(-1))


def write_poses(poses, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for T in poses:
            fh.write(format_pose(T) + "\n")


def read_calib(path: str | os.PathLike) -> np.ndarray:
    """Velodyne-to-camera transform from the ``Tr:`` line of a calib file."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            key, _, rest = line.partition(":")
            if key.strip() == "Tr":
                return _parse_pose_line(rest, lineno, path)
    raise MalformedFileError(f"{path}: no 'Tr:' entry")


def write_calib(Tr: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).write_text("Tr: " + format_pose(Tr) + "\n", encoding="utf-8")


@dataclass
class Sequence:
    """File index of one sequence directory."""

    root: Path
    scan_files: list[Path]

    @classmethod
    def open(cls, root: str | os.PathLike) -> "Sequence":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"{root}: not a directory")
        vel = root / "velodyne"
        files = sorted(vel.glob("*.bin")) if vel.is_dir() else []
        return cls(root, files)

    def __len__(self) -> int:
        return len(self.scan_files)

    def label_path(self, i: int) -> Path:
        return self.root / "labels" / (self.scan_files[i].stem + ".label")

    def has_labels(self, i: int) -> bool:
        return self.label_path(i).exists()

    def load(self, i: int, with_labels: bool, default_confidence: float = 0.8) -> Scan:
        scan = read_scan(self.scan_files[i])
        if with_labels:
            lp = self.label_path(i)
            if not lp.exists():
                raise FileNotFoundError(f"missing label file {lp}")
            labels, conf = read_labels(lp, len(scan), default_confidence)
            scan = scan.with_labels(labels, conf)
        return scan

    @property
    def gt_path(self) -> Path:
        return self.root / "poses.txt"

    @property
    def calib_path(self) -> Path:
        return self.root / "calib.txt"
