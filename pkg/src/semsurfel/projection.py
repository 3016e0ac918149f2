"""Spherical range-image rasters for scans and rendered surfel maps.

All rasters are indexed ``[row, col] = [v, u]`` with ``u`` running over
azimuth (left edge at yaw = +pi) and ``v`` over elevation (top row at
``fov_up``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .geometry import inverse, rotate, transform_points
from .kitti_io import Scan


class EmptyScanError(ValueError):
    pass


@dataclass
class FrameMaps:
    vertex: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool
    normal: np.ndarray  # (H, W, 3)
    normal_valid: np.ndarray  # (H, W) bool
    label: np.ndarray  # (H, W) uint16, 0 = unlabeled / empty
    prob: np.ndarray  # (H, W) label probability
    range: np.ndarray  # (H, W), 0 where invalid
    index: np.ndarray  # (H, W) source point or surfel id, -1 where empty
    stability: np.ndarray = field(default=None)  # (H, W) surfel log-odds, rendered maps only

    @classmethod
    def empty(cls, height: int, width: int) -> "FrameMaps":
        H, W = height, width
        return cls(
            vertex=np.zeros((H, W, 3)),
            valid=np.zeros((H, W), dtype=bool),
            normal=np.zeros((H, W, 3)),
            normal_valid=np.zeros((H, W), dtype=bool),
            label=np.zeros((H, W), dtype=np.uint16),
            prob=np.zeros((H, W)),
            range=np.zeros((H, W)),
            index=np.full((H, W), -1, dtype=np.int64),
            stability=np.full((H, W), np.nan),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def copy(self) -> "FrameMaps":
        return FrameMaps(**{k: (None if v is None else v.copy()) for k, v in self.__dict__.items()})

    def with_semantic(self, label: np.ndarray, prob: np.ndarray) -> "FrameMaps":
        out = self.copy()
        out.label = label.astype(np.uint16)
        out.prob = prob
        return out


def pixel_coords(points: np.ndarray, cfg: RunConfig, clamp: bool = True):
    """Return integer ``(u, v)`` pixel coordinates and ranges for sensor-frame points."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    rng = np.linalg.norm(points, axis=1)
    yaw = np.arctan2(points[:, 1], points[:, 0])
    with np.errstate(invalid="ignore", divide="ignore"):
        pitch = np.arcsin(np.clip(points[:, 2] / rng, -1.0, 1.0))
    fov_down = cfg.fov_down_rad
    fov = cfg.fov_up_rad - fov_down
    u = np.floor(0.5 * (1.0 - yaw / np.pi) * cfg.width)
    v = np.floor((1.0 - (pitch - fov_down) / fov) * cfg.height)
    inside = (v >= 0) & (v <= cfg.height - 1)
    u = np.clip(u, 0, cfg.width - 1).astype(np.int64)
    v = np.clip(v, 0, cfg.height - 1).astype(np.int64)
    if clamp:
        return u, v, rng
    return u, v, rng, inside


def pixel_directions(cfg: RunConfig) -> np.ndarray:
    """Unit ray direction through every pixel centre, shape (H, W, 3)."""
    u = np.arange(cfg.width) + 0.5
    v = np.arange(cfg.height) + 0.5
    yaw = np.pi * (1.0 - 2.0 * u / cfg.width)
    pitch = cfg.fov_down_rad + (1.0 - v / cfg.height) * (cfg.fov_up_rad - cfg.fov_down_rad)
    pitch, yaw = np.meshgrid(pitch, yaw, indexing="ij")
    return np.stack(
        [np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)], axis=-1
    )


def _nearest_per_pixel(flat: np.ndarray, rng: np.ndarray, ids: np.ndarray):
    # sort by pixel, then range, then id so the first entry per pixel wins
    order = np.lexsort((ids, rng, flat))
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat[order][1:] != flat[order][:-1]
    return order[first]


def project(scan: Scan, cfg: RunConfig) -> FrameMaps:
    if len(scan) == 0:
        raise EmptyScanError("cannot project an empty scan")
    H, W = cfg.height, cfg.width
    u, v, rng = pixel_coords(scan.points, cfg)
    flat = v * W + u
    ids = np.arange(len(scan))
    win = _nearest_per_pixel(flat, rng, ids)

    maps = FrameMaps.empty(H, W)
    pix = flat[win]
    maps.vertex.reshape(-1, 3)[pix] = scan.points[win]
    maps.valid.reshape(-1)[pix] = True
    maps.range.reshape(-1)[pix] = rng[win]
    maps.index.reshape(-1)[pix] = win
    if scan.labels is not None:
        maps.label.reshape(-1)[pix] = scan.labels[win]
        conf = scan.confidences if scan.confidences is not None else np.full(len(scan), cfg.default_confidence)
        maps.prob.reshape(-1)[pix] = conf[win]
    return maps


def compute_normals(maps: FrameMaps, cfg: RunConfig) -> FrameMaps:
    """Normals from right/down neighbour differences, oriented towards the sensor.

    Azimuth wraps around; the bottom row has no lower neighbour.
    """
    V, ok, R = maps.vertex, maps.valid, maps.range
    right_V = np.roll(V, -1, axis=1)
    right_ok = np.roll(ok, -1, axis=1)
    right_R = np.roll(R, -1, axis=1)
    down_V = np.zeros_like(V)
    down_V[:-1] = V[1:]
    down_ok = np.zeros_like(ok)
    down_ok[:-1] = ok[1:]
    down_R = np.zeros_like(R)
    down_R[:-1] = R[1:]

    n = np.cross(right_V - V, down_V - V)
    norm = np.linalg.norm(n, axis=-1)
    limit = cfg.discontinuity_ratio * R
    good = (
        ok & right_ok & down_ok
        & (np.abs(right_R - R) <= limit)
        & (np.abs(down_R - R) <= limit)
        & (norm >= 1e-8)
    )
    n = np.where(good[..., None], n / np.where(norm > 0, norm, 1.0)[..., None], 0.0)
    flip = np.sum(n * V, axis=-1) > 0
    n[flip] *= -1.0

    out = maps.copy()
    out.normal = n
    out.normal_valid = good
    return out


def render_model(smap, pose: np.ndarray, cfg: RunConfig, stable_only: bool = True) -> FrameMaps:
    """Splat surfels (one pixel each, nearest wins) into the raster seen from ``pose``.

    Positions and normals are expressed in the sensor frame of ``pose``.
    ``index`` holds surfel ids into ``smap``.
    """
    H, W = cfg.height, cfg.width
    maps = FrameMaps.empty(H, W)
    ids = np.flatnonzero(smap.stable_mask(cfg)) if stable_only else np.arange(len(smap))
    if len(ids) == 0:
        return maps
    T_inv = inverse(pose)
    p = transform_points(T_inv, smap.position[ids])
    n = rotate(T_inv, smap.normal[ids])
    u, v, rng, inside = pixel_coords(p, cfg, clamp=False)
    keep = inside & (rng >= cfg.min_range) & (rng <= cfg.max_range)
    if not keep.any():
        return maps
    ids, p, n, u, v, rng = ids[keep], p[keep], n[keep], u[keep], v[keep], rng[keep]
    flat = v * W + u
    win = _nearest_per_pixel(flat, rng, ids)
    pix = flat[win]
    n = n[win]
    flip = np.sum(n * p[win], axis=1) > 0
    n[flip] *= -1.0

    sid = ids[win]
    maps.vertex.reshape(-1, 3)[pix] = p[win]
    maps.valid.reshape(-1)[pix] = True
    maps.normal.reshape(-1, 3)[pix] = n
    maps.normal_valid.reshape(-1)[pix] = True
    maps.range.reshape(-1)[pix] = rng[win]
    maps.index.reshape(-1)[pix] = sid
    maps.label.reshape(-1)[pix] = smap.label[sid]
    maps.prob.reshape(-1)[pix] = smap.prob[sid]
    maps.stability.reshape(-1)[pix] = smap.log_odds[sid]
    return maps
