"""Surfel map with a semantically penalized stability filter.

Each surfel keeps a stability log-odds ``l_s``. Every associated
measurement adds the (angle- and distance-attenuated) log-odds of
``p_stable`` and subtracts the prior. If the measured label conflicts with
the surfel's label and one of the two classes is movable, the log-odds of
``p_penalty`` is subtracted as well, which eventually removes surfels that
sit on moving objects.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .geometry import inverse, rotate, transform_points
from .projection import FrameMaps, pixel_coords
from .semantics import ClassTable, movable_mask

_P_CLAMP = 1e-6


def odds(p):
    """Log-odds ``log(p / (1 - p))``; raises for p outside (0, 1)."""
    arr = np.asarray(p, dtype=float)
    if np.any((arr <= 0.0) | (arr >= 1.0)):
        raise ValueError(f"odds() requires 0 < p < 1, got {p}")
    out = np.log(arr / (1.0 - arr))
    return float(out) if out.ndim == 0 else out


def stability_increment(alpha, dist, penalize, cfg: RunConfig):
    """Change of l_s caused by one measurement (vectorized over arrays)."""
    alpha = np.asarray(alpha, dtype=float)
    dist = np.asarray(dist, dtype=float)
    p = cfg.p_stable * np.exp(-(alpha**2) / cfg.sigma_alpha**2) * np.exp(-(dist**2) / cfg.sigma_d**2)
    p = np.clip(p, _P_CLAMP, 1.0 - _P_CLAMP)
    inc = np.log(p / (1.0 - p)) - odds(cfg.p_prior)
    inc = inc - np.where(penalize, odds(cfg.p_penalty), 0.0)
    return float(inc) if inc.ndim == 0 else inc


def stability_update(l_prev, alpha, dist, penalize, cfg: RunConfig):
    if np.any(np.asarray(alpha) < 0) or np.any(np.asarray(dist) < 0):
        raise ValueError("alpha and dist must be non-negative")
    return l_prev + stability_increment(alpha, dist, penalize, cfg)


@dataclass
class Surfel:
    position: np.ndarray
    normal: np.ndarray
    radius: float
    log_odds: float
    t_created: int
    t_updated: int
    label: int
    prob: float


@dataclass
class UpdateStats:
    created: int = 0
    updated: int = 0
    fused: int = 0
    penalized: int = 0
    deleted: int = 0
    pruned: int = 0
    created_movable: int = 0
    see_through: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


class SurfelMap:
    """Column store of surfels; removal compacts the arrays."""

    _fields = ("position", "normal", "radius", "log_odds", "t_created", "t_updated", "label", "prob")

    def __init__(self):
        self.position = np.zeros((0, 3))
        self.normal = np.zeros((0, 3))
        self.radius = np.zeros(0)
        self.log_odds = np.zeros(0)
        self.t_created = np.zeros(0, dtype=np.int64)
        self.t_updated = np.zeros(0, dtype=np.int64)
        self.label = np.zeros(0, dtype=np.uint16)
        self.prob = np.zeros(0)
        self.frame_counter = 0

    def __len__(self) -> int:
        return len(self.radius)

    def __getitem__(self, i: int) -> Surfel:
        return Surfel(
            self.position[i].copy(), self.normal[i].copy(), float(self.radius[i]),
            float(self.log_odds[i]), int(self.t_created[i]), int(self.t_updated[i]),
            int(self.label[i]), float(self.prob[i]),
        )

    def stable_mask(self, cfg: RunConfig) -> np.ndarray:
        return self.log_odds >= cfg.l_stable

    def add(self, position, normal, radius, log_odds, frame, label, prob) -> np.ndarray:
        position = np.asarray(position, dtype=float).reshape(-1, 3)
        n = len(position)
        normal = np.asarray(normal, dtype=float).reshape(-1, 3)
        normal = normal / np.linalg.norm(normal, axis=1, keepdims=True)
        start = len(self)
        self.position = np.vstack([self.position, position])
        self.normal = np.vstack([self.normal, normal])
        self.radius = np.concatenate([self.radius, np.broadcast_to(radius, n)])
        self.log_odds = np.concatenate([self.log_odds, np.broadcast_to(log_odds, n)])
        self.t_created = np.concatenate([self.t_created, np.full(n, frame, dtype=np.int64)])
        self.t_updated = np.concatenate([self.t_updated, np.full(n, frame, dtype=np.int64)])
        self.label = np.concatenate([self.label, np.broadcast_to(label, n).astype(np.uint16)])
        self.prob = np.concatenate([self.prob, np.clip(np.broadcast_to(prob, n), _P_CLAMP, 1.0)])
        return np.arange(start, start + n)

    def remove(self, mask: np.ndarray) -> int:
        keep = ~np.asarray(mask, dtype=bool)
        for name in self._fields:
            setattr(self, name, getattr(self, name)[keep])
        return int((~keep).sum())

    def copy(self) -> "SurfelMap":
        out = SurfelMap()
        for name in self._fields:
            setattr(out, name, getattr(self, name).copy())
        out.frame_counter = self.frame_counter
        return out


def footprint_radius(points: np.ndarray, normals: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """Pixel footprint: range * tan(azimuth step) / max(cos incidence, 0.1)."""
    rng = np.linalg.norm(points, axis=1)
    cos_inc = np.abs(np.sum(points * normals, axis=1)) / np.maximum(rng, 1e-12)
    return rng * math.tan(2.0 * math.pi / cfg.width) / np.maximum(cos_inc, 0.1)


def integrate(smap: SurfelMap, obs: FrameMaps, assoc: np.ndarray, pose: np.ndarray, frame: int,
              cfg: RunConfig, semantic: bool = True, seed: bool = False) -> UpdateStats:
    """Fuse one registered observation into the map.

    ``assoc`` is an (H, W) array of surfel ids (-1 = unassociated) produced
    by projective association at the converged ``pose``. Only pixels with a
    valid vertex and normal take part. With ``seed`` new surfels start out
    stable, which is used to bootstrap the map from the first scan.
    """
    stats = UpdateStats()
    usable = obs.valid & obs.normal_valid
    assoc = np.where(usable, assoc, -1)
    movable = cfg.movable

    # updates, one observation per surfel (first pixel in raster order)
    pix_all = np.flatnonzero(assoc.reshape(-1) >= 0)
    sid_all = assoc.reshape(-1)[pix_all]
    sid, first = np.unique(sid_all, return_index=True)
    pix = pix_all[first]
    if len(sid):
        p_w = transform_points(pose, obs.vertex.reshape(-1, 3)[pix])
        n_w = rotate(pose, obs.normal.reshape(-1, 3)[pix])
        ns = smap.normal[sid]
        ns = np.where((np.sum(ns * n_w, axis=1) < 0)[:, None], -ns, ns)
        alpha = np.arccos(np.clip(np.sum(ns * n_w, axis=1), -1.0, 1.0))
        dist = np.abs(np.sum(ns * (p_w - smap.position[sid]), axis=1))

        obs_label = obs.label.reshape(-1)[pix]
        obs_prob = obs.prob.reshape(-1)[pix]
        if semantic:
            conflict = obs_label != smap.label[sid]
            penalize = conflict & (movable_mask(obs_label, movable) | movable_mask(smap.label[sid], movable))
        else:
            penalize = np.zeros(len(sid), dtype=bool)

        smap.log_odds[sid] += stability_increment(alpha, dist, penalize, cfg)
        smap.t_updated[sid] = frame

        fuse = (alpha < math.radians(cfg.alpha_max_deg)) & (dist < cfg.d_max) & ~penalize
        f, w = sid[fuse], cfg.fusion_weight
        if len(f):
            smap.position[f] = (1 - w) * smap.position[f] + w * p_w[fuse]
            n_new = (1 - w) * ns[fuse] + w * n_w[fuse]
            smap.normal[f] = n_new / np.linalg.norm(n_new, axis=1, keepdims=True)
            r_new = footprint_radius(obs.vertex.reshape(-1, 3)[pix[fuse]],
                                     obs.normal.reshape(-1, 3)[pix[fuse]], cfg)
            smap.radius[f] = (1 - w) * smap.radius[f] + w * r_new
            relabel = obs_prob[fuse] > smap.prob[f]
            smap.label[f[relabel]] = obs_label[fuse][relabel]
            smap.prob[f[relabel]] = obs_prob[fuse][relabel]

        stats.updated = len(sid)
        stats.fused = int(fuse.sum())
        stats.penalized = int(penalize.sum())

    # creation from unassociated pixels
    new = np.flatnonzero(usable.reshape(-1) & (assoc.reshape(-1) < 0))
    labels = obs.label.reshape(-1)[new]
    if semantic and frame < cfg.init_prune_frames:
        prune = movable_mask(labels, movable)
        stats.pruned = int(prune.sum())
        new, labels = new[~prune], labels[~prune]
    if len(new):
        p_s = obs.vertex.reshape(-1, 3)[new]
        n_s = obs.normal.reshape(-1, 3)[new]
        l0 = odds(cfg.p_prior) + odds(cfg.p_stable)
        if seed:
            l0 = max(l0, cfg.l_stable)
        smap.add(transform_points(pose, p_s), rotate(pose, n_s), footprint_radius(p_s, n_s, cfg),
                 l0, frame, labels, obs.prob.reshape(-1)[new])
        stats.created = len(new)
        stats.created_movable = int(movable_mask(labels, movable).sum())

    dead = (smap.log_odds < cfg.l_unstable) & (frame - smap.t_created > cfg.grace_frames)
    stats.deleted = smap.remove(dead)
    smap.frame_counter = frame + 1
    return stats


def penalize_see_through(smap: SurfelMap, obs: FrameMaps, pose: np.ndarray, cfg: RunConfig,
                         exclude: np.ndarray | None = None) -> int:
    """Penalize movable-class surfels that the current scan looks straight through.

    A surfel projecting onto a pixel whose measurement lies more than
    ``cfg.d_assoc`` behind it is semantically compared with that
    measurement. When the labels differ and either is movable, the surfel
    receives the full stability update with the penalty term. Surfels in
    ``exclude`` (already associated this frame) are skipped. Returns the
    number of penalized surfels.
    """
    if len(smap) == 0:
        return 0
    H, W = obs.shape
    p = transform_points(inverse(pose), smap.position)
    u, v, rng, inside = pixel_coords(p, cfg, clamp=False)
    flat = v * W + u
    usable = (obs.valid & obs.normal_valid).reshape(-1)
    ok = inside & usable[flat]
    ok &= rng < obs.range.reshape(-1)[flat] - cfg.d_assoc
    obs_label = obs.label.reshape(-1)[flat]
    ok &= obs_label != smap.label
    ok &= movable_mask(obs_label, cfg.movable) | movable_mask(smap.label, cfg.movable)
    if exclude is not None and len(exclude):
        ok[np.asarray(exclude, dtype=np.int64)] = False
    sid = np.flatnonzero(ok)
    if len(sid) == 0:
        return 0
    pix = flat[sid]
    p_w = transform_points(pose, obs.vertex.reshape(-1, 3)[pix])
    n_w = rotate(pose, obs.normal.reshape(-1, 3)[pix])
    ns = smap.normal[sid]
    cos_a = np.abs(np.sum(ns * n_w, axis=1))
    alpha = np.arccos(np.clip(cos_a, -1.0, 1.0))
    dist = np.abs(np.sum(ns * (p_w - smap.position[sid]), axis=1))
    smap.log_odds[sid] += stability_increment(alpha, dist, np.ones(len(sid), dtype=bool), cfg)
    return len(sid)


def export_ply(smap: SurfelMap, path: str | Path, cfg: RunConfig, mode: str = "all", color: str = "class",
               table: ClassTable | None = None, binary: bool = True) -> int:
    """Write surfels as PLY vertices; returns the number written."""
    if mode not in ("all", "stable"):
        raise ValueError("mode must be 'all' or 'stable'")
    sel = smap.stable_mask(cfg) if mode == "stable" else np.ones(len(smap), dtype=bool)
    n = int(sel.sum())
    if color == "class":
        rgb = (table or ClassTable.load(cfg.class_table or None)).colors(smap.label[sel])
    elif color == "normal":
        rgb = np.round((smap.normal[sel] * 0.5 + 0.5) * 255).astype(np.uint8)
    elif color == "gray":
        s = 1.0 / (1.0 + np.exp(-smap.log_odds[sel]))
        rgb = np.repeat(np.round(s * 255).astype(np.uint8)[:, None], 3, axis=1)
    else:
        raise ValueError("color must be 'class', 'normal' or 'gray'")

    dtype = np.dtype([
        ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
        ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
        ("radius", "<f4"), ("label", "<u2"),
        ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ])
    rows = np.empty(n, dtype=dtype)
    for i, k in enumerate("xyz"):
        rows[k] = smap.position[sel, i]
        rows["n" + k] = smap.normal[sel, i]
    rows["radius"] = smap.radius[sel]
    rows["label"] = smap.label[sel]
    rows["red"], rows["green"], rows["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]

    header = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        "property float radius", "property ushort label",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rows.tobytes())
        else:
            for r in rows:
                fh.write((" ".join(str(v) for v in r.tolist()) + "\n").encode("ascii"))
    return n


def read_ply(path: str | Path) -> np.ndarray:
    """Read back a PLY written by :func:`export_ply` as a structured array."""
    with open(path, "rb") as fh:
        props, n, binary = [], 0, True
        while True:
            line = fh.readline().decode("ascii").strip()
            if line.startswith("format"):
                binary = "binary" in line
            elif line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property"):
                _, typ, name = line.split()
                props.append((name, {"float": "<f4", "ushort": "<u2", "uchar": "u1"}[typ]))
            elif line == "end_header":
                break
        dtype = np.dtype(props)
        if binary:
            return np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype)
        out = np.zeros(n, dtype=dtype)
        lines = [line.split() for line in fh.read().decode("ascii").splitlines() if line.strip()]
        if lines:
            table = np.array(lines, dtype=float)
            for j, (name, _) in enumerate(props):
                out[name] = table[:, j]
        return out
