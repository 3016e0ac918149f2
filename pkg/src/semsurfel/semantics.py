"""Class registry and the erosion / depth-guided fill refinement of label rasters.

Label rasters are ``(H, W)`` arrays of class ids where 0 marks an empty or
unlabeled pixel. Windows wrap around in azimuth (columns) and are clipped
at the top and bottom rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .config import RunConfig
from .projection import FrameMaps


@dataclass(frozen=True)
class ClassInfo:
    name: str
    color: tuple[int, int, int]
    movable: bool


class ClassTable:
    """Mapping ClassId -> (name, RGB, movable); unknown ids are static and grey."""

    UNKNOWN_COLOR = (128, 128, 128)

    def __init__(self, entries: dict[int, ClassInfo]):
        self.entries = dict(entries)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ClassTable":
        if path:
            text = Path(path).read_text(encoding="utf-8")
        else:
            text = resources.files("semsurfel").joinpath("data/semantic_kitti.yaml").read_text(encoding="utf-8")
        raw = yaml.safe_load(text) or {}
        entries = {}
        for key, val in raw.items():
            cid = int(key)
            entries[cid] = ClassInfo(
                str(val.get("name", cid)),
                tuple(int(c) for c in val.get("color", cls.UNKNOWN_COLOR)),
                bool(val.get("movable", False)) and cid != 0,
            )
        return cls(entries)

    def name(self, cid: int) -> str:
        info = self.entries.get(int(cid))
        return info.name if info else f"class-{int(cid)}"

    def id_of(self, name: str) -> int:
        for cid, info in self.entries.items():
            if info.name == name:
                return cid
        raise KeyError(name)

    @property
    def movable_ids(self) -> frozenset[int]:
        return frozenset(c for c, info in self.entries.items() if info.movable)

    def colors(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        lut = np.tile(np.array(self.UNKNOWN_COLOR, dtype=np.uint8), (65536, 1))
        for cid, info in self.entries.items():
            lut[cid] = info.color
        return lut[labels]


def is_movable(y: int, movable) -> bool:
    return int(y) != 0 and int(y) in movable


def movable_mask(labels: np.ndarray, movable) -> np.ndarray:
    ids = np.fromiter((int(c) for c in movable if int(c) != 0), dtype=np.int64)
    return np.isin(np.asarray(labels, dtype=np.int64), ids)


def _window(d: int):
    r = d // 2
    for dv in range(-r, r + 1):
        for du in range(-r, r + 1):
            if dv or du:
                yield dv, du


def _shift(a: np.ndarray, dv: int, du: int, fill=0) -> np.ndarray:
    """``out[v, u] = a[v + dv, (u + du) mod W]``; rows beyond the border get ``fill``."""
    out = np.roll(a, -du, axis=1)
    if dv > 0:
        out = np.concatenate([out[dv:], np.full_like(out[:dv], fill)], axis=0)
    elif dv < 0:
        out = np.concatenate([np.full_like(out[dv:], fill), out[:dv]], axis=0)
    return out


def erode_mask(raw: np.ndarray, d: int) -> np.ndarray:
    """Zero every pixel whose d x d window holds a different non-zero label."""
    if d < 1 or d % 2 == 0:
        raise ValueError("kernel size must be odd and >= 1")
    raw = np.asarray(raw)
    conflict = np.zeros(raw.shape, dtype=bool)
    for dv, du in _window(d):
        nb = _shift(raw, dv, du)
        conflict |= (nb != 0) & (nb != raw)
    return np.where(conflict, 0, raw).astype(raw.dtype)


def fill_mask(eroded: np.ndarray, vertex: np.ndarray, valid: np.ndarray, theta: float, d: int,
              return_donors: bool = False):
    """Give empty pixels the label of the first depth-consistent labelled neighbour.

    A neighbour ``n`` of pixel ``u`` qualifies when it carries a label and
    ``|u - u_n| < theta * |u|``. Neighbours are visited row-major over the
    window. Labelled pixels are copied unchanged.

    With ``return_donors`` the flat index of each pixel's donor (-1 if none)
    is returned as well.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    eroded = np.asarray(eroded)
    H, W = eroded.shape
    out = eroded.copy()
    donor = np.full((H, W), -1, dtype=np.int64)
    flat_ids = np.arange(H * W).reshape(H, W)
    norm_u = np.linalg.norm(vertex, axis=-1)
    open_ = (eroded == 0) & valid
    for dv, du in _window(d):
        if not open_.any():
            break
        nb_label = _shift(eroded, dv, du)
        nb_valid = _shift(valid, dv, du, fill=False)
        nb_vertex = _shift(vertex, dv, du)
        dist = np.linalg.norm(vertex - nb_vertex, axis=-1)
        take = open_ & (nb_label != 0) & nb_valid & (dist < theta * norm_u)
        out[take] = nb_label[take]
        donor[take] = _shift(flat_ids, dv, du, fill=-1)[take]
        open_ &= ~take
    if return_donors:
        return out, donor
    return out


def refine(maps: FrameMaps, cfg: RunConfig) -> FrameMaps:
    """Erode then depth-fill the semantic raster of ``maps``; probabilities follow their labels."""
    eroded = erode_mask(maps.label, cfg.flood_kernel)
    labels, donor = fill_mask(eroded, maps.vertex, maps.valid, cfg.flood_theta,
                              cfg.flood_kernel, return_donors=True)
    prob = np.where(eroded != 0, maps.prob, 0.0)
    filled = donor >= 0
    prob[filled] = maps.prob.reshape(-1)[donor[filled]]
    return maps.with_semantic(labels, prob)
