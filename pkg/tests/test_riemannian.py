import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tdsampler.errors import DomainError
from tdsampler.riemannian import (
    SO3_VOLUME,
    check_flat_limit,
    check_frobenius_limit,
    check_jacobian_cancellation,
    check_normalization,
    check_round_trip,
    check_walk_drift,
    exp_so3,
    frobenius_log_twist,
    geodesic_distance,
    geodesic_walk_step,
    haar_sample,
    hat,
    is_rotation,
    log_so3,
    orthonormality_residual,
    riemannian_weight,
    rotation_angle,
    run_property_suite,
    tangent_normal_logpdf,
    vee,
)

I3 = np.eye(3)
vectors = st.tuples(*[st.floats(-2, 2)] * 3).map(np.array)


def test_exp_zero_is_base():
    R = haar_sample(1, np.random.default_rng(0))[0]
    assert np.allclose(exp_so3(R, np.zeros(3)), R, atol=1e-15)


def test_exp_quarter_turn_about_z():
    R = exp_so3(I3, [0, 0, np.pi / 2])
    assert np.allclose(R[:, 0], [0, 1, 0], atol=1e-15)
    assert np.allclose(log_so3(I3, R), [0, 0, np.pi / 2], atol=1e-12)


def test_log_same_point_is_zero():
    R = haar_sample(1, np.random.default_rng(1))[0]
    assert np.allclose(log_so3(R, R), 0.0, atol=1e-12)


def test_small_angle_series():
    v = np.array([1e-10, -2e-10, 3e-11])
    R = exp_so3(I3, v)
    assert np.allclose(R, I3 + hat(v), atol=1e-19)
    assert np.allclose(log_so3(I3, R), v, rtol=1e-6, atol=1e-20)


def test_hat_vee_inverse():
    v = np.array([0.1, -0.2, 0.3])
    assert np.array_equal(vee(hat(v)), v)
    assert np.allclose(hat(v) @ np.array([1.0, 2.0, 3.0]), np.cross(v, [1.0, 2.0, 3.0]))


def test_log_rejects_near_antipodal():
    with pytest.raises(DomainError):
        log_so3(I3, exp_so3(I3, [np.pi, 0, 0]))
    with pytest.raises(DomainError):
        log_so3(I3, exp_so3(I3, [0, np.pi - 1e-7, 0]))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), v=vectors)
def test_round_trip_and_angle(seed, v):
    n = np.linalg.norm(v)
    if n > np.pi - 0.1:
        v = v * (np.pi - 0.1) / n
    base = haar_sample(1, np.random.default_rng(seed))[0]
    R = exp_so3(base, v)
    assert is_rotation(R)
    w = log_so3(base, R)
    assert np.linalg.norm(w - v) <= 1e-9
    assert np.linalg.norm(w) == pytest.approx(rotation_angle(base.T @ R), abs=1e-9)
    assert geodesic_distance(base, R) == pytest.approx(np.linalg.norm(v), abs=1e-9)


def test_haar_samples_are_rotations():
    R = haar_sample(1000, np.random.default_rng(2))
    assert all(is_rotation(r) for r in R)
    assert np.allclose(R.mean(0), 0.0, atol=0.05)


def test_tangent_normal_at_center():
    var = 0.3
    R = haar_sample(1, np.random.default_rng(3))[0]
    got = tangent_normal_logpdf(R, R, np.zeros(3), var)
    assert got == pytest.approx(-1.5 * np.log(2 * np.pi * var), abs=1e-14)


def test_tangent_normal_concentrates():
    # for small var the log-density falls like -r^2 / (2 var)
    var = 1e-4
    r = np.array([0.005, 0.01, 0.02])
    vals = [tangent_normal_logpdf(I3, exp_so3(I3, [0, ri, 0]), np.zeros(3), var) for ri in r]
    top = tangent_normal_logpdf(I3, I3, np.zeros(3), var)
    assert np.allclose(np.array(vals) - top, -r**2 / (2 * var), atol=1e-3)


def test_walk_zero_variance_limit():
    R = haar_sample(1, np.random.default_rng(4))[0]
    out = geodesic_walk_step(R, np.array([1.0, 0.0, -1.0]), 1e-14, np.random.default_rng(5))
    assert np.allclose(out, R, atol=1e-6)


def test_walk_mean_tangent_is_zero():
    rng = np.random.default_rng(6)
    base = haar_sample(1, rng)[0]
    n = 20_000
    v = np.array([log_so3(base, geodesic_walk_step(base, np.zeros(3), 0.05, rng)) for _ in range(n)])
    se = v.std(0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(v.mean(0)) <= 4 * se)


def test_riemannian_weight_identical_densities():
    rng = np.random.default_rng(7)
    x_next = haar_sample(1, rng)[0]
    x_t = geodesic_walk_step(x_next, np.zeros(3), 0.1, rng)
    s = rng.normal(size=3)
    assert riemannian_weight(x_t, x_next, s, s, 0.1, 0.1, 0.7, 0.7) == pytest.approx(0.0, abs=1e-14)


def test_riemannian_weight_twist_ratio_only():
    rng = np.random.default_rng(8)
    x_next = haar_sample(1, rng)[0]
    x_t = geodesic_walk_step(x_next, np.zeros(3), 0.1, rng)
    s = rng.normal(size=3)
    got = riemannian_weight(x_t, x_next, s, s, 0.1, 0.1, -1.25, 0.5)
    assert got == pytest.approx(-1.75, abs=1e-14)


def test_jacobian_cancellation_explicit():
    rng = np.random.default_rng(9)
    x_next = haar_sample(1, rng)[0]
    x_t = exp_so3(x_next, [1.0, 0.5, -1.2])
    args = (x_t, x_next, rng.normal(size=3), rng.normal(size=3), 0.2, 0.3, 0.1, -0.4)
    a = riemannian_weight(*args, include_jacobian=True)
    b = riemannian_weight(*args)
    assert abs(a - b) <= 1e-10


def test_frobenius_twist_identity():
    R = exp_so3(I3, [0.0, 0.0, 0.3])
    # ||I - R||_F^2 = 4 (1 - cos theta)
    got = frobenius_log_twist(I3, R, 0.5)
    assert got == pytest.approx(-4 * (1 - np.cos(0.3)) / 2.0 - 1.5 * np.log(2 * np.pi * 0.5))


def test_so3_volume():
    assert SO3_VOLUME == pytest.approx(8 * np.pi**2)


def test_drift_free_chain():
    rng = np.random.default_rng(10)
    R = I3
    for _ in range(10_000):
        R = geodesic_walk_step(R, rng.normal(size=3), 0.05, rng)
    assert orthonormality_residual(R) <= 1e-9
    assert abs(np.linalg.det(R) - 1) <= 1e-9


@pytest.mark.parametrize("check", [check_round_trip, check_walk_drift, check_jacobian_cancellation,
                                   check_frobenius_limit, check_flat_limit])
def test_property_checks(check):
    res = check(np.random.default_rng(11))
    assert res.passed, res.detail


def test_normalization_million_draws():
    res = check_normalization(np.random.default_rng(12))
    assert res.passed, res.detail


def test_quick_suite_passes():
    assert all(r.passed for r in run_property_suite(seed=0, quick=True))
