"""Deterministic ray-cast LiDAR simulator over oriented boxes.

Every primitive is an oriented box (planes are thin boxes). Static boxes
never move; movers follow either a constant world velocity or stay
attached to the sensor with an optional drift, which models a traffic jam
moving along with the ego vehicle.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import kitti_io
from .config import RunConfig, save_config
from .geometry import rot_z
from .kitti_io import Scan
from .projection import pixel_directions

CANONICAL = ("static_room", "highway_jam", "urban_parked")


@dataclass
class Box:
    center: np.ndarray
    size: np.ndarray  # full extents along the box axes
    yaw: float = 0.0
    label: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(np.asarray(d["center"], float), np.asarray(d["size"], float),
                   math.radians(float(d.get("yaw_deg", 0.0))), int(d.get("label", 0)))


@dataclass
class Mover:
    box: Box
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    follow_sensor: bool = False
    drift: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def from_dict(cls, d: dict) -> "Mover":
        follow = bool(d.get("follow_sensor", False))
        box = Box.from_dict({**d, "center": d.get("offset" if follow else "center", d.get("center"))})
        return cls(box, np.asarray(d.get("velocity", [0, 0, 0]), float), follow,
                   np.asarray(d.get("drift", [0, 0, 0]), float))


@dataclass
class SensorPath:
    start: np.ndarray
    yaw_deg: float = 0.0
    speed: float = 0.0
    speed_amplitude: float = 0.0
    speed_period: float = 20.0
    yaw_rate_deg: float = 0.0

    def speed_at(self, k: int) -> float:
        return self.speed + self.speed_amplitude * math.sin(2.0 * math.pi * k / self.speed_period)

    def pose(self, frame: int) -> np.ndarray:
        yaw0 = math.radians(self.yaw_deg)
        rate = math.radians(self.yaw_rate_deg)
        pos = np.array(self.start, dtype=float)
        for k in range(frame):
            heading = yaw0 + k * rate
            pos = pos + self.speed_at(k) * np.array([math.cos(heading), math.sin(heading), 0.0])
        T = np.eye(4)
        T[:3, :3] = rot_z(yaw0 + frame * rate)
        T[:3, 3] = pos
        return T


@dataclass
class Scenario:
    name: str
    frames: int
    width: int = 512
    height: int = 64
    fov_up: float = 3.0
    fov_down: float = -25.0
    max_range: float = 120.0
    noise_sigma: float = 0.0
    seed: int = 42
    sensor: SensorPath = field(default_factory=lambda: SensorPath(np.zeros(3)))
    boxes: list[Box] = field(default_factory=list)
    movers: list[Mover] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        raster = d.get("raster", {})
        s = d.get("sensor", {})
        return cls(
            name=str(d.get("name", "scenario")),
            frames=int(d["frames"]),
            width=int(raster.get("width", 512)),
            height=int(raster.get("height", 64)),
            fov_up=float(raster.get("fov_up", 3.0)),
            fov_down=float(raster.get("fov_down", -25.0)),
            max_range=float(d.get("max_range", 120.0)),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            seed=int(d.get("seed", 42)),
            sensor=SensorPath(np.asarray(s.get("start", [0, 0, 0]), float),
                              float(s.get("yaw_deg", 0.0)), float(s.get("speed", 0.0)),
                              float(s.get("speed_amplitude", 0.0)), float(s.get("speed_period", 20.0)),
                              float(s.get("yaw_rate_deg", 0.0))),
            boxes=[Box.from_dict(b) for b in d.get("boxes", [])],
            movers=[Mover.from_dict(m) for m in d.get("movers", [])],
        )

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def run_config(self, base: RunConfig | None = None) -> RunConfig:
        """Run configuration whose raster matches this scenario's ray grid."""
        base = base or RunConfig()
        return base.replace(width=self.width, height=self.height, fov_up=self.fov_up,
                            fov_down=self.fov_down, seed=self.seed)

    def mover_box(self, i: int, frame: int) -> Box:
        m = self.movers[i]
        if m.follow_sensor:
            T = self.sensor.pose(frame)
            local = m.box.center + frame * m.drift
            center = T[:3, :3] @ local + T[:3, 3]
            yaw = m.box.yaw + math.atan2(T[1, 0], T[0, 0])
        else:
            center = m.box.center + frame * m.velocity
            yaw = m.box.yaw
        return Box(center, m.box.size, yaw, m.box.label)


def load_scenario(path_or_name: str | Path) -> Scenario:
    name = str(path_or_name)
    if name in CANONICAL:
        text = resources.files("semsurfel").joinpath(f"data/scenarios/{name}.yaml").read_text(encoding="utf-8")
    else:
        text = Path(path_or_name).read_text(encoding="utf-8")
    return Scenario.from_dict(yaml.safe_load(text))


def _ray_box(origin: np.ndarray, dirs: np.ndarray, box: Box) -> np.ndarray:
    """Distance along each unit ray to the first box surface in front (inf if missed)."""
    Rb = rot_z(box.yaw)
    o = Rb.T @ (origin - box.center)
    d = dirs @ Rb
    d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    h = 0.5 * box.size
    t1 = (-h - o) / d
    t2 = (h - o) / d
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = tmax >= np.maximum(tmin, 0.0)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where(hit & (t > 1e-9), t, np.inf)


def cast(scn: Scenario, frame: int):
    """Ray-cast one frame. Returns (range, label, instance), each (H, W); misses have range inf."""
    T = scn.sensor.pose(frame)
    dirs = pixel_directions(RunConfig(width=scn.width, height=scn.height,
                                      fov_up=scn.fov_up, fov_down=scn.fov_down)).reshape(-1, 3)
    dirs_w = dirs @ T[:3, :3].T
    origin = T[:3, 3]
    best = np.full(len(dirs), np.inf)
    label = np.zeros(len(dirs), dtype=np.uint16)
    inst = np.zeros(len(dirs), dtype=np.uint32)
    prims = [(b, 0) for b in scn.boxes] + [(scn.mover_box(i, frame), i + 1) for i in range(len(scn.movers))]
    for box, iid in prims:
        t = _ray_box(origin, dirs_w, box)
        closer = t < best
        best[closer] = t[closer]
        label[closer] = box.label
        inst[closer] = iid
    shape = (scn.height, scn.width)
    return best.reshape(shape), label.reshape(shape), inst.reshape(shape)


def simulate(scn: Scenario, frame: int, return_instances: bool = False):
    """Scan (sensor frame, true labels) and ground-truth pose for one frame."""
    if not 0 <= frame < scn.frames:
        raise IndexError(f"frame {frame} outside scenario horizon {scn.frames}")
    rng_img, label, inst = cast(scn, frame)
    dirs = pixel_directions(RunConfig(width=scn.width, height=scn.height,
                                      fov_up=scn.fov_up, fov_down=scn.fov_down))
    hit = np.isfinite(rng_img) & (rng_img <= scn.max_range)
    r = rng_img[hit]
    if scn.noise_sigma > 0:
        gen = np.random.default_rng([scn.seed, frame])
        r = r + gen.normal(0.0, scn.noise_sigma, size=r.shape)
    pts = dirs[hit] * r[:, None]
    scan = Scan(pts, np.full(len(pts), 0.5), label[hit], None)
    pose = scn.sensor.pose(frame)
    if return_instances:
        return scan, pose, inst[hit]
    return scan, pose


def corrupt_labels(scan: Scan, error_rate: float, seed: int = 42, classes=None) -> Scan:
    """Flip a random ``error_rate`` fraction of labels to a different class."""
    if scan.labels is None:
        raise ValueError("scan carries no labels")
    gen = np.random.default_rng(seed)
    labels = scan.labels.copy()
    pool = np.array(sorted(set(int(c) for c in (classes if classes is not None else labels)) | {40, 50, 70}),
                    dtype=np.uint16)
    flip = gen.random(len(labels)) < error_rate
    idx = np.flatnonzero(flip)
    choice = gen.integers(0, len(pool) - 1, size=len(idx))
    # draw from the pool with the true label removed
    for j, i in enumerate(idx):
        others = pool[pool != labels[i]]
        labels[i] = others[choice[j] % len(others)]
    return scan.with_labels(labels, scan.confidences)


def export_sequence(scn: Scenario, out_dir: str | Path, label_noise: float = 0.0, seed: int | None = None) -> Path:
    """Write velodyne/, labels/, poses.txt, calib.txt and a matching config.yaml."""
    out = Path(out_dir)
    (out / "velodyne").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    seed = scn.seed if seed is None else seed
    poses = []
    for t in range(scn.frames):
        scan, pose, inst = simulate(scn, t, return_instances=True)
        if label_noise > 0:
            scan = corrupt_labels(scan, label_noise, seed=seed * 100003 + t)
        kitti_io.write_scan(scan, out / "velodyne" / f"{t:06d}.bin")
        kitti_io.write_labels(scan.labels, out / "labels" / f"{t:06d}.label", instances=inst)
        poses.append(pose)
    kitti_io.write_poses(poses, out / "poses.txt")
    kitti_io.write_calib(np.eye(4), out / "calib.txt")
    save_config(scn.run_config(), out / "config.yaml")
    return out
