"""Acceptance criteria, each run at its stated tolerance.

Every test records a PASS/FAIL line (shown in the terminal summary and on
stdout with ``-s``) before asserting. Criterion 10 needs KITTI sequence 04
with SemanticKITTI labels; point SEMSURFEL_KITTI_04 at a directory holding
velodyne/, labels/, poses.txt (camera frame) and calib.txt.
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import record
from conftest import random_pose
from scenes import single_class_room, speckled_wall, wrong_label_rate
from semsurfel.cli import main
from semsurfel.config import RunConfig
from semsurfel.evaluation import final_drift, increment_errors, relative_errors
from semsurfel.geometry import inverse, rotation_angle, se3_exp, so3_exp
from semsurfel.kitti_io import read_calib, read_poses
from semsurfel.pipeline import run_scans, run_sequence
from semsurfel.projection import FrameMaps, compute_normals, project, render_model
from semsurfel.registration import icp
from semsurfel.semantics import erode_mask, fill_mask, movable_mask, refine
from semsurfel.surfel_map import SurfelMap, export_ply, integrate, read_ply, stability_update
from semsurfel.synthworld import corrupt_labels, export_sequence, load_scenario, simulate

from test_registration import fd_jacobian_error

pytestmark = pytest.mark.slow


def check(number, passed, detail):
    record(number, passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, detail


def test_c1_jacobian_matches_finite_differences():
    t0 = time.perf_counter()
    err = fd_jacobian_error(np.random.default_rng(1), n=1000)
    dt = time.perf_counter() - t0
    check(1, err < 1e-5 and dt < 10.0, f"max relative error {err:.2e}, {dt:.2f} s")


def test_c2_icp_recovers_perturbation_on_static_room():
    scn = load_scenario("static_room")
    cfg = scn.run_config()
    gen = np.random.default_rng(2)
    frames = [simulate(scn, t) for t in range(scn.frames)]
    worst_t = worst_r = 0.0
    for t in range(1, scn.frames):
        (prev_scan, prev_pose), (scan, pose) = frames[t - 1], frames[t]
        # map built from the previous scan, placed at its true pose
        smap = SurfelMap()
        prev_obs = compute_normals(project(prev_scan, cfg), cfg)
        integrate(smap, prev_obs, np.full(prev_obs.shape, -1), np.eye(4), 0, cfg, seed=True)
        model = render_model(smap, np.eye(4), cfg)
        obs = compute_normals(project(scan, cfg), cfg)
        truth = inverse(prev_pose) @ pose
        axis_t, axis_r = gen.normal(size=3), gen.normal(size=3)
        P = np.eye(4)
        P[:3, :3] = so3_exp(axis_r / np.linalg.norm(axis_r) * math.radians(2.0))
        P[:3, 3] = 0.1 * axis_t / np.linalg.norm(axis_t)
        res = icp(obs, model, P @ truth, cfg, semantic=False)
        E = inverse(truth) @ res.pose
        worst_t = max(worst_t, float(np.linalg.norm(E[:3, 3])))
        worst_r = max(worst_r, math.degrees(rotation_angle(E[:3, :3])))
    check(2, worst_t < 1e-3 and worst_r < 0.05,
          f"{scn.frames - 1} frames, worst error {worst_t:.2e} m / {worst_r:.4f} deg")


def test_c3_stability_arithmetic():
    cfg = RunConfig()
    ref = [
        (stability_update(0.0, 0.0, 0.0, False, cfg), math.log(1.5)),
        (stability_update(0.0, 0.0, 0.0, True, cfg), 0.0),
        (stability_update(0.0, 1e3, 0.0, False, cfg), math.log(1e-6 / (1 - 1e-6))),
        # alpha = sigma_alpha and d = sigma_d attenuate p_stable by exp(-2)
        (stability_update(2.0, cfg.sigma_alpha, cfg.sigma_d, False, cfg),
         2.0 + math.log(0.6 * math.exp(-2) / (1 - 0.6 * math.exp(-2)))),
    ]
    worst = max(abs(a - b) for a, b in ref)
    # a stable car surfel repeatedly contradicted by a "road" measurement d = 0.05 m away
    from test_surfel_map import CAR, ROAD, _one_pixel_obs
    small = RunConfig(width=128, height=32)
    l0, d = small.l_stable + 1.0, 0.05
    m = SurfelMap()
    m.add([[10.0, 0, 0]], [[-1.0, 0, 0]], 0.1, l0, 0, CAR, 0.9)
    obs, assoc, pix = _one_pixel_obs(small, [10.0 - d, 0, 0], [-1.0, 0, 0], ROAD)
    assoc[pix] = 0
    p = small.p_stable * math.exp(-d**2 / small.sigma_d**2)
    inc = math.log(p / (1 - p)) - math.log(small.p_prior / (1 - small.p_prior)) \
        - math.log(small.p_penalty / (1 - small.p_penalty))
    k_pred = math.floor((l0 - small.l_stable) / -inc) + 1
    k = 0
    while m.log_odds[0] >= small.l_stable and k < 1000:
        integrate(m, obs, assoc, np.eye(4), 1 + k, small)
        k += 1
    check(3, worst < 1e-9 and k == k_pred,
          f"reference values max error {worst:.1e}; penalty flips stability after {k} updates (predicted {k_pred})")


@pytest.fixture(scope="module")
def highway():
    scn = load_scenario("highway_jam")
    cfg = scn.run_config()
    frames = [simulate(scn, t) for t in range(scn.frames)]
    scans, gt = [s for s, _ in frames], np.array([p for _, p in frames])
    return cfg, gt, {m: run_scans(scans, cfg, m) for m in ("semantic", "geometric")}


def test_c4_dynamic_filtering(highway, tmp_path):
    cfg, gt, runs = highway
    drift = {m: final_drift(rep.poses, gt) for m, (rep, _) in runs.items()}
    rep, odo = runs["semantic"]
    export_ply(odo.map, tmp_path / "stable.ply", cfg, mode="stable")
    exported = read_ply(tmp_path / "stable.ply")
    stable_movable = int(movable_mask(exported["label"], cfg.movable).sum())
    created = sum(fr.stats.created_movable for fr in rep.frames)
    absent = 1.0 - stable_movable / max(created, 1)
    ratio = drift["geometric"] / max(drift["semantic"], 1e-12)
    check(4, ratio >= 2.0 and absent >= 0.95,
          f"drift semantic {drift['semantic']:.3f} m vs geometric {drift['geometric']:.3f} m "
          f"(ratio {ratio:.1f}); {100 * absent:.1f}% of {created} moving-object surfels absent from stable map")


def test_c5_parked_cars_help():
    scn = load_scenario("urban_parked")
    cfg = scn.run_config()
    frames = [simulate(scn, t) for t in range(scn.frames)]
    scans = [corrupt_labels(s, 0.1, seed=scn.seed * 100003 + t) for t, (s, _) in enumerate(frames)]
    gt = np.array([p for _, p in frames])
    err = {}
    for mode in ("semantic", "nomovable"):
        rep, _ = run_scans(scans, cfg, mode)
        err[mode] = float(np.mean(increment_errors(rep.poses, gt)[0]))
    check(5, err["semantic"] <= err["nomovable"],
          f"mean per-frame translation error semantic {err['semantic']:.5f} m, nomovable {err['nomovable']:.5f} m")


def test_c6_flood_fill_reduces_label_errors():
    cfg = RunConfig()
    truth, raw, V, valid = speckled_wall(height=64, width=256, rate=0.1, seed=6)
    maps = FrameMaps.empty(*raw.shape)
    maps.vertex, maps.valid, maps.label = V, valid, raw
    maps.prob = np.where(raw > 0, 0.8, 0.0)
    maps.range = np.linalg.norm(V, axis=-1)
    out = refine(maps, cfg)
    before, after = wrong_label_rate(raw, truth), wrong_label_rate(out.label, truth)
    reduction = 1.0 - after / before
    eroded = erode_mask(raw, cfg.flood_kernel)
    filled, donor = fill_mask(eroded, V, valid, cfg.flood_theta, cfg.flood_kernel, return_donors=True)
    sel = donor >= 0
    gap = np.linalg.norm(V[sel] - V.reshape(-1, 3)[donor[sel]], axis=1)
    theta_ok = bool(np.all(gap < cfg.flood_theta * np.linalg.norm(V[sel], axis=1)))
    coverage = float(np.mean(out.label > 0))
    check(6, reduction >= 0.3 and theta_ok and np.array_equal(filled, out.label),
          f"wrong-label rate {100 * before:.2f}% -> {100 * after:.2f}% ({100 * reduction:.0f}% reduction, "
          f"labelled coverage {100 * coverage:.0f}%); {int(sel.sum())} fills satisfy the distance test: {theta_ok}")


def test_c7_metric():
    gt = np.tile(np.eye(4), (901, 1, 1))
    gt[:, 0, 3] = np.arange(901)
    est = gt.copy()
    est[:, :3, 3] *= 1.01
    scaled = relative_errors(est, gt)
    gen = np.random.default_rng(7)
    curvy = [np.eye(4)]
    for _ in range(299):
        curvy.append(curvy[-1] @ se3_exp(np.concatenate([[1.0, 0, 0], gen.normal(0, 0.02, 3)])))
    curvy = np.array(curvy)
    noisy = np.array([T @ se3_exp(gen.normal(0, 0.01, 6)) for T in curvy])
    zero = relative_errors(curvy, curvy, [50, 100])
    base = relative_errors(noisy, curvy, [50, 100])
    G = random_pose(gen, 100.0, 2.0)
    moved = relative_errors(G @ noisy, G @ curvy, [50, 100])
    change = max(abs(moved.trans_pct - base.trans_pct), abs(moved.rot_deg_per_m - base.rot_deg_per_m))
    ok = (zero.trans_pct == 0.0 and zero.rot_deg_per_m == 0.0 and abs(scaled.trans_pct - 1.0) < 1e-6
          and scaled.rot_deg_per_m == 0.0 and change < 1e-9)
    check(7, ok, f"identical -> {zero.trans_pct}/{zero.rot_deg_per_m}; scaled -> {scaled.trans_pct:.9f}%; "
                 f"rigid transform change {change:.1e}")


def test_c8_conflict_free_equivalence():
    scn = single_class_room()
    cfg = scn.run_config()
    scans = [simulate(scn, t)[0] for t in range(scn.frames)]
    g, _ = run_scans(scans, cfg, "geometric")
    s, _ = run_scans(scans, cfg, "semantic")
    gap = max(float(np.linalg.norm(a[:3, 3] - b[:3, 3])) for a, b in zip(g.poses, s.poses))
    check(8, gap < 1e-6, f"{scn.frames} frames, max per-frame position difference {gap:.1e} m")


def test_c9_determinism(tmp_path):
    scn = load_scenario("urban_parked").replace(frames=20)
    data = export_sequence(scn, tmp_path / "seq", label_noise=0.1)
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["odometry", "--data", str(data), "--mode", "semantic", "--out", str(out)]) == 0
        outs.append((out / "poses.txt").read_bytes())
    check(9, outs[0] == outs[1], f"two CLI runs over {scn.frames} frames, poses.txt identical: {outs[0] == outs[1]}")


KITTI_04 = os.environ.get("SEMSURFEL_KITTI_04")


@pytest.mark.skipif(not KITTI_04 or not Path(KITTI_04).is_dir(), reason="SEMSURFEL_KITTI_04 not set")
def test_c10_kitti_sequence_04():
    from semsurfel.evaluation import to_camera_frame
    data = Path(KITTI_04)
    cfg = RunConfig()
    t0 = time.perf_counter()
    rep, _ = run_sequence(data, cfg, "semantic")
    dt = time.perf_counter() - t0
    gt = read_poses(data / "poses.txt")
    est = to_camera_frame(rep.poses, read_calib(data / "calib.txt"))
    err = relative_errors(est, gt, [100, 200, 300, 400])
    check(10, len(rep) == 271 and err.trans_pct < 1.5 and dt < 600,
          f"{len(rep)} frames in {dt:.0f} s, {err.rot_deg_per_100m:.3f} deg/100m / {err.trans_pct:.3f}%")
