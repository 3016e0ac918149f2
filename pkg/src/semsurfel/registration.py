"""Frame-to-model projective point-to-plane ICP with Huber, semantic and stability weights."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .geometry import inverse, rotate, se3_exp, transform_points
from .projection import FrameMaps, pixel_coords


class DegenerateAssociationError(RuntimeError):
    pass


class RankDeficiencyError(RuntimeError):
    pass


@dataclass
class Correspondences:
    """Batch of projective associations; row i pairs observation pixel ``pixel[i]`` with a model pixel."""

    pixel: np.ndarray  # flat observation pixel index
    obs_vertex: np.ndarray  # u, current sensor frame
    point: np.ndarray  # T_k u, model (previous sensor) frame
    model_vertex: np.ndarray
    model_normal: np.ndarray
    residual: np.ndarray
    obs_label: np.ndarray
    obs_prob: np.ndarray
    model_label: np.ndarray
    model_prob: np.ndarray
    model_index: np.ndarray
    model_stability: np.ndarray
    weight: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.pixel)


@dataclass
class IcpResult:
    pose: np.ndarray
    iterations: int
    cost: float
    counts: list[int]
    converged: bool
    history: list[dict] = field(default_factory=list)
    correspondences: Correspondences | None = None


def point_to_plane_residuals(T: np.ndarray, u: np.ndarray, v: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.sum(n * (transform_points(T, u) - v), axis=1)


def point_to_plane_jacobian(points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Rows d r / d (rho, phi) for a left increment exp(delta) applied to points already moved by T."""
    return np.hstack([normals, np.cross(points, normals)])


def associate(obs: FrameMaps, model: FrameMaps, T: np.ndarray, cfg: RunConfig,
              require_nonempty: bool = True) -> Correspondences:
    src = np.flatnonzero((obs.valid & obs.normal_valid).reshape(-1))
    u = obs.vertex.reshape(-1, 3)[src]
    p = transform_points(T, u)
    pu, pv, _, inside = pixel_coords(p, cfg, clamp=False)
    tgt = pv * cfg.width + pu
    ok = inside & model.valid.reshape(-1)[tgt] & model.normal_valid.reshape(-1)[tgt]

    v = model.vertex.reshape(-1, 3)[tgt]
    n = model.normal.reshape(-1, 3)[tgt]
    ok &= np.linalg.norm(p - v, axis=1) <= cfg.d_assoc
    n_obs = rotate(T, obs.normal.reshape(-1, 3)[src])
    ok &= np.sum(n_obs * n, axis=1) >= math.cos(math.radians(cfg.alpha_assoc_deg))

    if require_nonempty and not ok.any():
        raise DegenerateAssociationError("no observation pixel found a model correspondence")
    src, tgt, u, p, v, n = src[ok], tgt[ok], u[ok], p[ok], v[ok], n[ok]
    stab = model.stability.reshape(-1)[tgt] if model.stability is not None else np.full(len(tgt), np.inf)
    return Correspondences(
        pixel=src, obs_vertex=u, point=p, model_vertex=v, model_normal=n,
        residual=np.sum(n * (p - v), axis=1),
        obs_label=obs.label.reshape(-1)[src], obs_prob=obs.prob.reshape(-1)[src],
        model_label=model.label.reshape(-1)[tgt], model_prob=model.prob.reshape(-1)[tgt],
        model_index=model.index.reshape(-1)[tgt], model_stability=stab,
    )


def association_raster(obs: FrameMaps, model: FrameMaps, cfg: RunConfig) -> np.ndarray:
    """Surfel id per observation pixel (-1 = none) for a model rendered at the observation pose."""
    out = np.full(obs.shape, -1, dtype=np.int64)
    corr = associate(obs, model, np.eye(4), cfg, require_nonempty=False)
    out.reshape(-1)[corr.pixel] = corr.model_index
    return out


def associate_surfels(obs: FrameMaps, smap, pose: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """Surfel id per observation pixel for the map update (-1 = none).

    Every surfel projecting onto a pixel is a candidate, not only the
    nearest one. Candidates must pass the distance and normal gates; the
    one closest to the measured point along the ray wins.
    """
    H, W = obs.shape
    out = np.full((H, W), -1, dtype=np.int64)
    if len(smap) == 0:
        return out
    T_inv = inverse(pose)
    p = transform_points(T_inv, smap.position)
    u, v, rng, inside = pixel_coords(p, cfg, clamp=False)
    flat = v * W + u
    ok = inside & obs.valid.reshape(-1)[flat] & obs.normal_valid.reshape(-1)[flat]
    ids = np.flatnonzero(ok)
    if len(ids) == 0:
        return out
    flat, p, rng = flat[ids], p[ids], rng[ids]
    q = obs.vertex.reshape(-1, 3)[flat]
    n_obs = obs.normal.reshape(-1, 3)[flat]
    n_s = rotate(T_inv, smap.normal[ids])
    gate = (np.linalg.norm(q - p, axis=1) <= cfg.d_assoc) & \
        (np.abs(np.sum(n_s * n_obs, axis=1)) >= math.cos(math.radians(cfg.alpha_assoc_deg)))
    ids, flat = ids[gate], flat[gate]
    gap = np.abs(rng[gate] - obs.range.reshape(-1)[flat])
    order = np.lexsort((ids, gap, flat))
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat[order][1:] != flat[order][:-1]
    win = order[first]
    out.reshape(-1)[flat[win]] = ids[win]
    return out


def huber_weight(r, delta: float) -> np.ndarray:
    r = np.abs(np.asarray(r, dtype=float))
    return np.where(r < delta, 1.0, delta / np.maximum(r, 1e-300))


def semantic_compatibility(obs_label, obs_prob, model_label) -> np.ndarray:
    obs_prob = np.asarray(obs_prob, dtype=float)
    return np.where(np.asarray(obs_label) == np.asarray(model_label), obs_prob, 1.0 - obs_prob)


def weight(c: Correspondences, l_s, cfg: RunConfig, semantic: bool = True) -> np.ndarray:
    """w = huber(r) * C_semantic * [l_s >= l_stable]; C_semantic is 1 when ``semantic`` is off."""
    w = huber_weight(c.residual, cfg.huber_delta)
    if semantic:
        w = w * semantic_compatibility(c.obs_label, c.obs_prob, c.model_label)
    return w * (np.asarray(l_s) >= cfg.l_stable)


def gauss_newton_step(corrs: Correspondences, cfg: RunConfig) -> np.ndarray:
    """Solve (J^T W J) delta = -J^T W r for the left increment delta = (rho, phi)."""
    w = corrs.weight
    if int(np.count_nonzero(w > 0)) < 6:
        raise RankDeficiencyError("fewer than 6 correspondences carry weight")
    J = point_to_plane_jacobian(corrs.point, corrs.model_normal)
    JtW = J.T * w
    A = JtW @ J
    b = JtW @ corrs.residual
    if not np.any(b):
        return np.zeros(6)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > cfg.cond_cap:
        raise RankDeficiencyError(f"normal equations ill-conditioned (cond={cond:.3g})")
    return -np.linalg.solve(A, b)


def _fixed_cost(T: np.ndarray, c: Correspondences) -> float:
    r = point_to_plane_residuals(T, c.obs_vertex, c.model_vertex, c.model_normal)
    return float(np.sum(c.weight * r * r))


def icp(obs: FrameMaps, model: FrameMaps, T_init: np.ndarray, cfg: RunConfig,
        semantic: bool = True) -> IcpResult:
    """Estimate the increment mapping the current sensor frame into the model's frame.

    ``model`` is rendered once per frame at the previous pose; every
    iteration re-associates against it. A step that raises the weighted cost
    of the current association is halved up to ``cfg.max_halvings`` times.
    """
    T = np.array(T_init, dtype=float)
    history: list[dict] = []
    counts: list[int] = []
    converged = False
    corrs = None
    cost = float("inf")
    k = 0
    for k in range(1, cfg.max_iter + 1):
        corrs = associate(obs, model, T, cfg)
        corrs.weight = weight(corrs, corrs.model_stability, cfg, semantic)
        cost = float(np.sum(corrs.weight * corrs.residual**2))
        counts.append(len(corrs))
        delta = gauss_newton_step(corrs, cfg)

        accepted = False
        for _ in range(cfg.max_halvings + 1):
            T_new = se3_exp(delta) @ T
            new_cost = _fixed_cost(T_new, corrs)
            if new_cost <= cost:
                accepted = True
                break
            delta = 0.5 * delta
        step = float(np.linalg.norm(delta))
        history.append({
            "iteration": k, "cost": cost, "cost_after": new_cost if accepted else cost,
            "correspondences": len(corrs), "mean_weight": float(np.mean(corrs.weight)),
            "step": step if accepted else 0.0,
        })
        if not accepted:
            converged = True
            break
        T = T_new
        if step < cfg.eps_converge:
            converged = True
            break
    return IcpResult(T, k, cost, counts, converged, history, corrs)
