import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from keycongeal import geometry
from keycongeal.geometry import WeightedResiduals

from conftest import random_homography

seeds = st.integers(0, 2**32 - 1)


def homogeneous_warp(H, pt):
    v = H @ np.array([pt[0], pt[1], 1.0])
    return v[:2] / v[2]


def test_warp_point_identity_and_translation():
    assert geometry.warp_point(np.eye(3), (3, 4)) == (3.0, 4.0)
    assert geometry.warp_point(geometry.translation(2, -1), (3, 4)) == (5.0, 3.0)


def test_warp_point_projective_matches_homogeneous_multiply():
    H = np.eye(3)
    H[2, 0] = 0.001
    np.testing.assert_allclose(geometry.warp_point(H, (100, 50)), homogeneous_warp(H, (100, 50)),
                               rtol=0, atol=1e-12)


def test_warp_to_infinity_raises():
    H = np.eye(3)
    H[2, 0] = -0.01
    with pytest.raises(geometry.DegenerateWarpError):
        geometry.warp_point(H, (100, 0))


def test_compose_identity_and_inverse(rng):
    H = random_homography(rng)
    np.testing.assert_allclose(geometry.compose(np.eye(3), H), H, atol=1e-12)
    np.testing.assert_allclose(geometry.compose(H, geometry.invert(H)), np.eye(3), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_compose_matches_two_step_warp(seed):
    rng = np.random.default_rng(seed)
    A, B = random_homography(rng), random_homography(rng)
    pts = rng.uniform(0, 320, (20, 2))
    two_step = geometry.warp_points(A, geometry.warp_points(B, pts))
    np.testing.assert_allclose(geometry.warp_points(geometry.compose(A, B), pts), two_step,
                               atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_composition_associative_on_points(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (random_homography(rng) for _ in range(3))
    pts = rng.uniform(0, 320, (10, 2))
    left = geometry.compose(A, geometry.compose(B, C))
    right = geometry.compose(geometry.compose(A, B), C)
    np.testing.assert_allclose(geometry.warp_points(left, pts), geometry.warp_points(right, pts),
                               atol=1e-8)


def test_invert_translation_is_exact():
    assert np.array_equal(geometry.invert(geometry.translation(7, -3)), geometry.translation(-7, 3))
    assert np.array_equal(geometry.invert(np.eye(3)), np.eye(3))


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_invert_round_trip(seed):
    H = random_homography(np.random.default_rng(seed))
    np.testing.assert_allclose(geometry.compose(geometry.invert(H), H), np.eye(3), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_results_are_normalized(seed):
    rng = np.random.default_rng(seed)
    A = random_homography(rng) * rng.uniform(0.5, 3)
    B = random_homography(rng)
    for H in (geometry.normalize(A), geometry.compose(A, B), geometry.invert(A),
              geometry.apply_increment(B, rng.normal(0, 1e-3, 8))):
        assert H[2, 2] == 1.0


def test_singular_inputs_rejected():
    with pytest.raises(geometry.SingularHomographyError):
        geometry.invert(np.zeros((3, 3)) + np.eye(3) * [1, 0, 1])
    with pytest.raises(geometry.SingularHomographyError):
        geometry.normalize(np.diag([1.0, 1.0, 0.0]))


def test_jacobian_rows_examples():
    jx, jy = geometry.jacobian_rows((0, 0), (0, 0))
    assert list(jx) == [0, 0, 1, 0, 0, 0, 0, 0]
    assert list(jy) == [0, 0, 0, 0, 0, 1, 0, 0]
    jx, jy = geometry.jacobian_rows((2, 3), (5, 7))
    assert list(jx) == [2, 3, 1, 0, 0, 0, -10, -15]
    assert list(jy) == [0, 0, 0, 2, 3, 1, -14, -21]


def test_residual_jacobian_modes_agree_with_rows():
    start = np.array([[2.0, 3.0]])
    end = np.array([[5.0, 7.0]])
    J = WeightedResiduals(start, end, [1.0], "endpoint").jac
    jx, jy = geometry.jacobian_rows(start[0], end[0])
    np.testing.assert_array_equal(J, np.vstack([jx, jy]))
    J = WeightedResiduals(start, end, [1.0], "start").jac
    jx, jy = geometry.jacobian_rows(start[0], start[0])
    np.testing.assert_array_equal(J, np.vstack([jx, jy]))
    with pytest.raises(ValueError):
        WeightedResiduals(start, end, [1.0], "midpoint")


def test_solve_update_zero_residual():
    pts = np.random.default_rng(0).uniform(0, 100, (10, 2))
    r = WeightedResiduals(pts, pts, np.ones(10))
    assert not np.any(geometry.solve_update(r, 1.0))


def test_solve_update_translation_removes_offset():
    pts = np.random.default_rng(1).uniform(0, 300, (30, 2))
    r = WeightedResiduals(pts + [2.0, 0.0], pts, np.ones(30), "start")
    dp = geometry.solve_update(r, 1e-6)
    assert dp[2] == pytest.approx(-2.0, abs=1e-6)
    moved = geometry.warp_points(geometry.increment_matrix(dp), pts + [2.0, 0.0])
    assert np.abs(moved - pts).max() < 1e-6


def test_solve_update_matches_dense_solver(rng):
    start = rng.uniform(0, 50, (40, 2))
    end = start + rng.normal(0, 1, (40, 2))
    w = rng.uniform(0.1, 1, 40)
    r = WeightedResiduals(start, end, w)
    J, e, W = r.jac, r.e, np.diag(r.w)
    A = J.T @ W @ J + np.diag(geometry.DEFAULT_MASK)
    oracle = np.linalg.solve(A, -J.T @ W @ e)
    np.testing.assert_allclose(geometry.solve_update(r, 1.0), oracle, rtol=1e-8, atol=1e-12)


def test_solve_update_rank_deficient():
    pts = np.array([[1.0, 1.0]] * 6)
    r = WeightedResiduals(pts, pts + 1, np.ones(6))
    with pytest.raises(geometry.SingularSystemError):
        geometry.solve_update(r, 1.0, mask=np.zeros(8))


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_quadratic_model_decreases(seed):
    rng = np.random.default_rng(seed)
    start = rng.uniform(0, 100, (12, 2))
    end = start + rng.normal(0, 2, (12, 2))
    r = WeightedResiduals(start, end, rng.uniform(0.1, 1, 12))
    dp = geometry.solve_update(r, 0.5)
    J, e, w = r.jac, r.e, r.w
    model = np.sum(w * (e + J @ dp) ** 2)
    assert model < np.sum(w * e ** 2)


def test_apply_increment_examples(rng):
    H = random_homography(rng)
    np.testing.assert_array_equal(geometry.apply_increment(H, np.zeros(8)), H)
    dp = np.zeros(8)
    dp[2] = 1.0
    np.testing.assert_array_equal(geometry.apply_increment(np.eye(3), dp), geometry.translation(1, 0))
    dp = rng.normal(0, 1e-3, 8)
    dp[6:] *= 1e-3
    pts = rng.uniform(0, 320, (20, 2))
    two_step = geometry.warp_points(geometry.increment_matrix(dp), geometry.warp_points(H, pts))
    np.testing.assert_allclose(geometry.warp_points(geometry.apply_increment(H, dp), pts),
                               two_step, atol=1e-9)


def test_dlt_examples(rng):
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    np.testing.assert_allclose(geometry.dlt_homography(sq, sq), np.eye(3), atol=1e-12)
    pts = rng.uniform(0, 100, (4, 2))
    np.testing.assert_allclose(geometry.dlt_homography(pts, pts + [3, -2]),
                               geometry.translation(3, -2), atol=1e-9)
    H = random_homography(rng)
    src = rng.uniform(0, 320, (8, 2))
    dst = geometry.warp_points(H, src)
    est = geometry.dlt_homography(src, dst)
    assert np.abs(geometry.warp_points(est, src) - dst).max() < 1e-6


def test_dlt_degenerate():
    with pytest.raises(geometry.GeometryError):
        geometry.dlt_homography(np.zeros((3, 2)), np.zeros((3, 2)))
    line = np.array([[0, 0], [1, 1], [2, 2], [3, 3]], float)
    with pytest.raises(geometry.GeometryError):
        geometry.dlt_homography(line, line)
