import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from semsurfel.config import RunConfig
from semsurfel.kitti_io import Scan
from semsurfel.projection import (EmptyScanError, FrameMaps, compute_normals, pixel_coords, pixel_directions,
                                  project, render_model)
from semsurfel.surfel_map import SurfelMap, integrate
from semsurfel.synthworld import load_scenario, simulate


def _scan(points, labels=None):
    points = np.asarray(points, float).reshape(-1, 3)
    return Scan(points, np.zeros(len(points)), labels)


def test_forward_point_pixel(cfg):
    u, v, _ = pixel_coords(np.array([[1.0, 0.0, 0.0]]), cfg)
    # hand evaluation: u = floor(0.5 * 900), v = floor((1 - 25/28) * 64)
    assert u[0] == math.floor(0.5 * 900) == 450
    assert v[0] == math.floor((1 - 25 / 28) * 64) == 6


def test_backward_point_maps_to_left_edge(cfg):
    u, _, _ = pixel_coords(np.array([[-1.0, 0.0, 0.0]]), cfg)
    assert u[0] == 0


def test_nearest_point_wins_on_collision(cfg):
    maps = project(_scan([[7.0, 0, 0], [5.0, 0, 0]], [1, 2]), cfg)
    assert maps.valid.sum() == 1
    assert maps.range[6, 450] == 5.0 and maps.label[6, 450] == 2 and maps.index[6, 450] == 1


def test_equal_range_tie_broken_by_index(cfg):
    maps = project(_scan([[5.0, 0, 0], [5.0, 0, 0]], [1, 2]), cfg)
    assert maps.index[6, 450] == 0 and maps.label[6, 450] == 1


def test_empty_scan_rejected(cfg):
    with pytest.raises(EmptyScanError):
        project(_scan(np.zeros((0, 3))), cfg)


pts = hnp.arrays(np.float64, st.tuples(st.integers(1, 300), st.just(3)),
                 elements=st.floats(-30, 30, allow_nan=False))


@given(pts)
def test_nearest_wins_and_round_trip(points):
    cfg = RunConfig(width=64, height=16)
    r = np.linalg.norm(points, axis=1)
    points = points[r > 0.5]
    if len(points) == 0:
        return
    maps = project(_scan(points), cfg)
    u, v, rng = pixel_coords(points, cfg)
    expected = np.full((16, 64), np.inf)
    np.minimum.at(expected, (v, u), rng)
    hit = np.isfinite(expected)
    np.testing.assert_array_equal(maps.valid, hit)
    np.testing.assert_allclose(maps.range[hit], expected[hit], rtol=0, atol=0)
    # every valid vertex re-projects onto its own pixel, and its range is its norm
    vv, uu = np.nonzero(maps.valid)
    pu, pv, pr = pixel_coords(maps.vertex[vv, uu], cfg)
    np.testing.assert_array_equal(pu, uu)
    np.testing.assert_array_equal(pv, vv)
    np.testing.assert_allclose(pr, maps.range[vv, uu], atol=1e-6)


def _ground_plane(cfg, z=-2.0):
    d = pixel_directions(cfg).reshape(-1, 3)
    down = d[:, 2] < -0.05
    t = z / d[down, 2]
    return d[down] * t[:, None]


def test_plane_normal_points_up(small_cfg):
    maps = compute_normals(project(_scan(_ground_plane(small_cfg)), small_cfg), small_cfg)
    assert maps.normal_valid.sum() > 100
    np.testing.assert_allclose(maps.normal[maps.normal_valid], np.tile([0, 0, 1.0], (maps.normal_valid.sum(), 1)),
                               atol=1e-6)


def test_normal_invariants_on_simulated_room():
    scn = load_scenario("static_room")
    cfg = scn.run_config()
    maps = compute_normals(project(simulate(scn, 0)[0], cfg), cfg)
    nv = maps.normal_valid
    assert not np.any(nv & ~maps.valid)
    np.testing.assert_allclose(np.linalg.norm(maps.normal[nv], axis=1), 1.0, atol=1e-6)
    assert np.all(np.sum(maps.normal[nv] * maps.vertex[nv], axis=1) <= 0)
    np.testing.assert_allclose(maps.range[maps.valid], np.linalg.norm(maps.vertex[maps.valid], axis=1), atol=1e-6)


def _tiny(vertices):
    H, W = vertices.shape[:2]
    maps = FrameMaps.empty(H, W)
    maps.vertex = vertices
    maps.valid = np.linalg.norm(vertices, axis=-1) > 0
    maps.range = np.linalg.norm(vertices, axis=-1)
    return maps


def test_missing_right_neighbour_gives_no_normal():
    cfg = RunConfig(width=3, height=2)
    V = np.zeros((2, 3, 3))
    V[0, 0] = [10, 0, -2]
    V[1, 0] = [10, 0, -2.2]  # below, but the right neighbour is missing
    maps = compute_normals(_tiny(V), cfg)
    assert not maps.normal_valid[0, 0]


def test_range_discontinuity_invalidates_normal():
    cfg = RunConfig(width=3, height=2)
    V = np.zeros((2, 3, 3))
    V[0, 0] = [10, 0, 0]
    V[0, 1] = [10, 0.5, 0]
    V[1, 0] = [10, 0, -0.5]
    ok = compute_normals(_tiny(V.copy()), cfg)
    assert ok.normal_valid[0, 0]
    V[0, 1] = [20, 1.0, 0]  # twice the centre range: 100% jump > 30%
    assert not compute_normals(_tiny(V), cfg).normal_valid[0, 0]


def test_render_empty_map(cfg):
    maps = render_model(SurfelMap(), np.eye(4), cfg)
    assert maps.valid.sum() == 0


def test_render_single_surfel(cfg):
    m = SurfelMap()
    m.add([[10.0, 0, 0]], [[-1.0, 0, 0]], 0.1, cfg.l_stable, 0, 50, 0.9)
    maps = render_model(m, np.eye(4), cfg)
    assert maps.valid.sum() == 1
    u, v, _ = pixel_coords(np.array([[10.0, 0, 0]]), cfg)
    assert maps.valid[v[0], u[0]] and maps.index[v[0], u[0]] == 0 and maps.label[v[0], u[0]] == 50


def test_render_nearer_surfel_wins(cfg):
    m = SurfelMap()
    m.add([[12.0, 0, 0], [10.0, 0, 0]], [[-1.0, 0, 0]] * 2, 0.1, cfg.l_stable, 0, [1, 2], 0.9)
    maps = render_model(m, np.eye(4), cfg)
    assert maps.valid.sum() == 1 and maps.label[6, 450] == 2


def test_render_skips_unstable_and_orients_normals(cfg):
    m = SurfelMap()
    m.add([[10.0, 0, 0]], [[1.0, 0, 0]], 0.1, cfg.l_stable, 0, 1, 0.9)
    m.add([[0, 10.0, 0]], [[0, 1.0, 0]], 0.1, 0.0, 0, 1, 0.9)
    maps = render_model(m, np.eye(4), cfg)
    assert maps.valid.sum() == 1
    np.testing.assert_allclose(maps.normal[6, 450], [-1, 0, 0])
    assert render_model(m, np.eye(4), cfg, stable_only=False).valid.sum() == 2


def test_render_of_seeded_map_reproduces_scan():
    scn = load_scenario("static_room")
    cfg = scn.run_config()
    obs = compute_normals(project(simulate(scn, 0)[0], cfg), cfg)
    m = SurfelMap()
    integrate(m, obs, np.full(obs.shape, -1), np.eye(4), 0, cfg, semantic=False, seed=True)
    model = render_model(m, np.eye(4), cfg)
    both = obs.valid & model.valid
    close = both & (np.linalg.norm(obs.vertex - model.vertex, axis=-1) <= 1e-3)
    assert close.sum() >= 0.9 * obs.valid.sum()
