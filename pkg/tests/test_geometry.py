import math

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from semsurfel.geometry import (inverse, is_valid_pose, make_pose, orthonormalize, rot_z, rotation_angle,
                                se3_exp, se3_log, so3_exp, so3_log, transform_points)

vec3 = st.lists(st.floats(-3, 3, allow_nan=False), min_size=3, max_size=3)


def test_so3_exp_quarter_turn_about_z():
    # independent oracle: the textbook z rotation matrix
    R = so3_exp(np.array([0, 0, math.pi / 2]))
    np.testing.assert_allclose(R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    np.testing.assert_allclose(rot_z(math.pi / 2), R, atol=1e-15)


@given(vec3)
def test_so3_log_inverts_exp(phi):
    phi = np.array(phi)
    if np.linalg.norm(phi) >= math.pi - 1e-3:
        phi = phi / np.linalg.norm(phi) * (math.pi - 1e-3)
    np.testing.assert_allclose(so3_log(so3_exp(phi)), phi, atol=1e-9)


def test_so3_log_at_pi():
    axis = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
    R = so3_exp(axis * math.pi)
    np.testing.assert_allclose(so3_exp(so3_log(R)), R, atol=1e-9)


@given(vec3, vec3)
def test_se3_round_trip(rho, phi):
    xi = np.concatenate([rho, np.clip(phi, -1.5, 1.5)])
    T = se3_exp(xi)
    assert is_valid_pose(T, 1e-9)
    np.testing.assert_allclose(se3_log(T), xi, atol=1e-9)


@given(vec3, vec3)
def test_inverse_composes_to_identity(rho, phi):
    T = se3_exp(np.concatenate([rho, phi]))
    np.testing.assert_allclose(T @ inverse(T), np.eye(4), atol=1e-12)


def test_se3_exp_pure_translation():
    T = se3_exp(np.array([1.0, 2.0, 3.0, 0, 0, 0]))
    np.testing.assert_allclose(T, make_pose(t=[1, 2, 3]))


def test_transform_points_matches_homogeneous_product():
    rng = np.random.default_rng(1)
    T = se3_exp(rng.normal(size=6))
    p = rng.normal(size=(20, 3))
    hom = (T @ np.hstack([p, np.ones((20, 1))]).T).T[:, :3]
    np.testing.assert_allclose(transform_points(T, p), hom, atol=1e-12)


def test_orthonormalize_and_rotation_angle():
    R = rot_z(0.3) + 1e-4
    Q = orthonormalize(R)
    np.testing.assert_allclose(Q.T @ Q, np.eye(3), atol=1e-12)
    assert math.isclose(np.linalg.det(Q), 1.0, abs_tol=1e-12)
    assert math.isclose(rotation_angle(rot_z(0.3)), 0.3, abs_tol=1e-12)


def test_is_valid_pose_rejects_reflection():
    T = np.eye(4)
    T[0, 0] = -1
    assert not is_valid_pose(T)
