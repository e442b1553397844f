import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from redirtrans import geometry as G
from redirtrans import tensor as T

HALF_PI = 0.5 * np.pi
angle = st.floats(-1.5, 1.5)


@pytest.mark.parametrize("cond, expected", [
    ((0.0, 0.0), np.eye(3)),
    ((0.0, HALF_PI), [[0, 0, 1], [0, 1, 0], [-1, 0, 0]]),
    ((HALF_PI, 0.0), [[1, 0, 0], [0, 0, -1], [0, 1, 0]]),
])
def test_rotation_examples(cond, expected):
    r = G.rotation_from_condition(np.array(cond, np.float64)).data
    np.testing.assert_allclose(r, expected, atol=1e-12)


def test_zero_angle_is_exact_identity():
    r = G.rotation_from_condition(np.zeros(2, np.float32)).data
    np.testing.assert_array_equal(r, np.eye(3))


def test_rotation_is_yaw_after_pitch():
    p, y = 0.3, -0.7
    r_pitch = G.np_rotation(p, 0.0)
    r_yaw = G.np_rotation(0.0, y)
    np.testing.assert_allclose(G.np_rotation(p, y), r_yaw @ r_pitch, atol=1e-12)


def test_tensor_and_numpy_rotations_agree(rng):
    c = rng.uniform(-1.5, 1.5, (20, 2))
    np.testing.assert_allclose(G.rotation_from_condition(c).data, G.np_rotation(c[:, 0], c[:, 1]), atol=1e-12)


def test_thousand_rotations_are_proper(rng):
    c = rng.uniform(-HALF_PI, HALF_PI, (1000, 2))
    r = G.rotation_from_condition(c.astype(np.float64)).data
    eye = np.einsum("nji,njk->nik", r, r)
    assert np.abs(eye - np.eye(3)).max() < 1e-6
    assert np.abs(np.linalg.det(r) - 1).max() < 1e-6


def test_inverse_is_transpose(rng):
    r = G.rotation_from_condition(rng.uniform(-1, 1, 2))
    np.testing.assert_allclose(G.inverse_rotation(r).data @ r.data, np.eye(3), atol=1e-12)


def test_composition_through_intermediate_condition(rng):
    for _ in range(50):
        c0, c1, c2 = (G.np_rotation(*rng.uniform(-HALF_PI, HALF_PI, 2)) for _ in range(3))
        z = rng.standard_normal((3, 16))
        via = c2 @ c1.T @ (c1 @ c0.T @ z)
        np.testing.assert_allclose(via, c2 @ c0.T @ z, atol=1e-5)


@pytest.mark.parametrize("cond, expected", [
    ((0.0, 0.0), (0, 0, 1)),
    ((HALF_PI, 0.0), (0, 1, 0)),
    ((0.0, HALF_PI), (1, 0, 0)),
])
def test_condition_to_vector_examples(cond, expected):
    np.testing.assert_allclose(G.condition_to_vector(np.array(cond)).data, expected, atol=1e-12)


@given(angle, angle)
def test_condition_vector_is_unit(p, y):
    v = G.np_condition_to_vector(np.array([p, y]))
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)


@given(angle, angle, angle, angle)
def test_condition_to_vector_injective(p1, y1, p2, y2):
    v1 = G.np_condition_to_vector(np.array([p1, y1]))
    v2 = G.np_condition_to_vector(np.array([p2, y2]))
    if np.allclose(v1, v2, atol=0, rtol=0):
        assert (p1, y1) == (p2, y2)
    # recover the condition from the vector on the open box
    np.testing.assert_allclose([np.arcsin(v1[1]), np.arctan2(v1[0], v1[2])], [p1, y1], atol=1e-9)


@pytest.mark.parametrize("u, v, expected", [
    ((1.0, 2.0, 3.0), (1.0, 2.0, 3.0), 0.0),
    ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), HALF_PI),
    ((0.0, 0.0, 1.0), (0.0, 0.0, -1.0), np.pi),
])
def test_angular_distance_examples(u, v, expected):
    got = G.angular_distance(np.array(u), np.array(v)).data
    assert got == pytest.approx(expected, abs=2e-3)
    assert G.np_angular_distance(u, v) == pytest.approx(expected, abs=1e-7)


@pytest.mark.parametrize("fn", [G.angular_distance, G.np_angular_distance])
def test_angular_distance_rejects_zero_vector(fn):
    with pytest.raises((ValueError, FloatingPointError)):
        fn(np.zeros(3), np.ones(3))


@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_angular_distance_symmetric_and_bounded(vals):
    u, v = np.array(vals[:3]), np.array(vals[3:])
    if min(np.linalg.norm(u), np.linalg.norm(v)) < 1e-3:
        return
    a = G.angular_distance(u, v).data
    b = G.angular_distance(v, u).data
    assert a == b
    assert 0.0 <= a <= np.pi


def test_condition_error_small_yaw_arc():
    assert G.condition_angular_error(np.zeros(2), np.array([0.0, 0.1])).data == pytest.approx(0.1, abs=1e-9)


def test_condition_error_self_is_zero(rng):
    c = rng.uniform(-1, 1, (10, 2))
    np.testing.assert_allclose(G.np_condition_angular_error(c, c), 0.0, atol=1e-7)


def test_condition_error_matches_64bit_oracle(rng):
    a = rng.uniform(-HALF_PI, HALF_PI, (200, 2))
    b = rng.uniform(-HALF_PI, HALF_PI, (200, 2))

    def vec(c):
        return np.stack([np.cos(c[:, 0]) * np.sin(c[:, 1]), np.sin(c[:, 0]), np.cos(c[:, 0]) * np.cos(c[:, 1])], -1)

    oracle = np.arccos(np.clip(np.sum(vec(a) * vec(b), -1), -1, 1))
    np.testing.assert_allclose(G.condition_angular_error(a, b).data, oracle, atol=1e-7)
    np.testing.assert_allclose(G.np_condition_angular_error(a, b), oracle, atol=1e-12)


def test_rotation_is_differentiable(rng):
    z = rng.standard_normal((3, 16))
    err = T.gradcheck(lambda c: T.sum_(T.matmul(G.rotation_from_condition(c), z)), [rng.uniform(-1, 1, 2)])
    assert err < 1e-6
