import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from tdsampler.errors import NumericalFailure, UnsupportedCombination
from tdsampler.oracle import ExactLinearGaussianKernel
from tdsampler.rng import normals
from tdsampler.schedule import (
    Framework,
    NoiseSchedule,
    make_quadratic_vp_schedule,
    make_ve_const_schedule,
    reverse_transition_params,
)
from tdsampler.score_model import (
    DenoiserOutput,
    GaussianTarget,
    correlated_gaussian_target,
    denoiser,
    denoiser_at_zero,
    marginal_score,
    three_component_gmm,
)
from tdsampler.twisting import (
    DPS_VARIANCE_FLOOR,
    Flat,
    Inpaint,
    InpaintDOF,
    SmoothNorm,
    TwistConfig,
    conditional_score,
    evaluate_twist,
    exact_final_proposal,
    log_likelihood,
    mask_responsibilities,
    twist_grad,
    twist_log,
    twist_variance,
)

VP = make_quadratic_vp_schedule()
VE = make_ve_const_schedule(10, 0.1)
LOG_2PI = np.log(2 * np.pi)


def _den(x_hat):
    x_hat = np.asarray(x_hat, float)
    return DenoiserOutput(x_hat, np.eye(x_hat.size))


# --- values ---------------------------------------------------------------------


def test_inpaint_twist_value():
    # forward variance of VE_CONST(0.1) at t = 10 is exactly 1
    cfg = TwistConfig(variance_scheme="forward_var")
    val = twist_log(Inpaint((0,), [0.0]), cfg, _den([0.3, 5.0]), VE, 10)
    assert val == pytest.approx(-0.5 * LOG_2PI - 0.045, abs=1e-14)


def test_dof_single_mask_equals_inpaint():
    cfg = TwistConfig(data_var=1.0)
    X = np.random.default_rng(0).normal(size=(20, 2))
    for t in (1, 30, 100):
        den = denoiser(correlated_gaussian_target(), VP, X, t)
        a = twist_log(Inpaint((1,), [0.4]), cfg, den, VP, t)
        b = twist_log(InpaintDOF(((1,),), [0.4]), cfg, den, VP, t)
        assert np.array_equal(a, b)


def test_smooth_norm_zero_residual():
    assert twist_log(SmoothNorm(5.0), TwistConfig(), _den([3.0, 4.0]), VP, 7) == pytest.approx(
        np.log(0.5), abs=1e-15
    )


def test_smooth_norm_is_laplace():
    # Laplace density on the residual: decreasing away from y
    cfg = TwistConfig()
    vals = [twist_log(SmoothNorm(1.0), cfg, _den([r, 0.0]), VP, 3) for r in (1.0, 1.5, 3.0)]
    assert vals[0] > vals[1] > vals[2]
    assert vals[2] == pytest.approx(np.log(0.5) - 2.0)


def test_twist_at_zero_is_exact_likelihood():
    X = np.random.default_rng(1).normal(size=(50, 2))
    lik = SmoothNorm(0.7)
    got = twist_log(lik, TwistConfig(), denoiser_at_zero(None, X), VP, 0)
    assert np.array_equal(got, log_likelihood(lik, X))


def test_twist_scale_multiplies_log_value():
    den = denoiser(correlated_gaussian_target(), VP, np.array([[0.2, -1.0]]), 20)
    lik = InpaintDOF(((0,), (1,)), [0.0])
    a = twist_log(lik, TwistConfig(1.0, data_var=1.0), den, VP, 20)
    b = twist_log(lik, TwistConfig(2.5, data_var=1.0), den, VP, 20)
    assert np.allclose(b, 2.5 * a, rtol=1e-15)


def test_nan_denoiser_reported():
    with pytest.raises(NumericalFailure, match="step 4"):
        twist_log(Inpaint((0,), [0.0]), TwistConfig(data_var=1.0), _den([np.nan, 0.0]), VP, 4)


@settings(max_examples=100, deadline=None)
@given(
    x=st.tuples(st.floats(-4, 4), st.floats(-4, 4)),
    t=st.integers(1, 100),
    y=st.floats(-2, 2),
)
def test_dof_logsumexp_bounds(x, t, y):
    den = denoiser(three_component_gmm(), VP, np.array(x), t)
    cfg = TwistConfig(data_var=1.0)
    single = [twist_log(Inpaint(m, [y]), cfg, den, VP, t) for m in ((0,), (1,))]
    dof = twist_log(InpaintDOF(((0,), (1,)), [y]), cfg, den, VP, t)
    assert max(single) - np.log(2) - 1e-12 <= dof <= max(single) + 1e-12


# --- variance schemes -------------------------------------------------------------


def test_tds_scaling_harmonic():
    # one VP step with (1 - a) / a = 0.12
    s = NoiseSchedule(Framework.VP, [0.12 / 1.12])
    v = twist_variance(TwistConfig(data_var=0.12), s, 1)
    assert v == pytest.approx(0.06, abs=1e-15)


def test_forward_var_ve():
    assert twist_variance(TwistConfig(variance_scheme="forward_var"), VE, 5) == pytest.approx(0.5)


def test_pigdm_unit_scale():
    v = twist_variance(TwistConfig(variance_scheme="pigdm"), VE, 4)
    assert v == VE.step_var(4)
    s = make_quadratic_vp_schedule()
    assert twist_variance(TwistConfig(variance_scheme="pigdm"), s, 50) == pytest.approx(
        s.step_var(50) / np.sqrt(s.cum_alpha[50])
    )


def test_noise_level_scheme():
    cfg = TwistConfig(variance_scheme="noise_level")
    a = VP.cum_alpha[60]
    assert twist_variance(cfg, VP, 60) == pytest.approx((1 - a) / a, rel=1e-14)
    assert twist_variance(cfg, VE, 5) == pytest.approx(0.5)


def test_final_step_variance_is_first_step_var():
    for scheme in ("tds_scaling", "dps", "pigdm", "forward_var", "noise_level"):
        cfg = TwistConfig(variance_scheme=scheme, data_var=1.0)
        assert twist_variance(cfg, VP, 0) == VP.step_var(1)


def test_tds_scaling_needs_data_var():
    with pytest.raises(ValueError):
        twist_variance(TwistConfig(), VP, 10)
    assert TwistConfig().resolved(correlated_gaussian_target()).data_var == 1.0


def test_dps_value_and_floor():
    cfg = TwistConfig(variance_scheme="dps")
    t = 40
    v = twist_variance(cfg, VP, t, _den([0.5, 1.0]), [0.2], (0,))
    assert v == pytest.approx(2 * 0.3 * VP.step_var(t))
    assert twist_variance(cfg, VP, t, _den([0.2, 1.0]), [0.2], (0,)) == DPS_VARIANCE_FLOOR
    ev = evaluate_twist(Inpaint((0,), [0.2]), cfg, DenoiserOutput(np.array([[0.2, 1.0], [0.9, 0.0]]),
                                                               np.eye(2)), VP, t)
    assert ev.floor_hits == 1
    assert np.all(np.isfinite(ev.log_value)) and np.all(np.isfinite(ev.grad_x))


def test_twist_config_validation():
    with pytest.raises(ValueError):
        TwistConfig(twist_scale=-1.0)
    with pytest.raises(ValueError):
        TwistConfig(data_var=0.0)
    with pytest.raises(ValueError):
        TwistConfig(variance_scheme="bogus")


# --- gradients -----------------------------------------------------------------------


def test_flat_twist_zero_gradient():
    g = twist_grad(Flat(), TwistConfig(), correlated_gaussian_target(), VP, np.array([1.0, 2.0]), 5)
    assert np.array_equal(g, np.zeros(2))


def _probe_cases():
    liks = [Inpaint((0,), [0.0]), Inpaint((1,), [0.8]), InpaintDOF(((0,), (1,)), [0.3]),
            SmoothNorm(0.0), SmoothNorm(1.5)]
    schemes = ["tds_scaling", "noise_level", "forward_var", "pigdm", "dps"]
    return liks, schemes


def test_twist_grad_finite_difference_500_probes():
    rng = np.random.default_rng(11)
    targets = [correlated_gaussian_target(), three_component_gmm()]
    liks, schemes = _probe_cases()
    h = 1e-5
    worst = 0.0
    for _ in range(500):
        tgt = targets[rng.integers(2)]
        lik = liks[rng.integers(len(liks))]
        cfg = TwistConfig(rng.uniform(0.5, 2.0), schemes[rng.integers(len(schemes))]).resolved(tgt)
        t = int(rng.integers(1, VP.T + 1))
        x = rng.normal(0, 1.5, size=2)
        g = twist_grad(lik, cfg, tgt, VP, x, t)
        fd = np.empty(2)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd[j] = (twist_log(lik, cfg, denoiser(tgt, VP, x + e, t), VP, t)
                     - twist_log(lik, cfg, denoiser(tgt, VP, x - e, t), VP, t)) / (2 * h)
        err = np.linalg.norm(g - fd) / np.linalg.norm(fd)
        worst = max(worst, err)
    assert worst <= 1e-5


def test_duplicated_masks_same_gradient():
    tgt = three_component_gmm()
    cfg = TwistConfig(data_var=1.0)
    x = np.array([0.4, -0.9])
    one = twist_grad(Inpaint((0,), [0.1]), cfg, tgt, VP, x, 12)
    dup = twist_grad(InpaintDOF(((0,), (0,), (0,)), [0.1]), cfg, tgt, VP, x, 12)
    assert np.allclose(one, dup, rtol=1e-14, atol=1e-15)


def test_conditional_score_flat_is_unconditional():
    tgt = three_component_gmm()
    x = np.array([0.1, 0.2])
    assert np.array_equal(conditional_score(tgt, Flat(), TwistConfig(), VP, x, 9),
                          marginal_score(tgt, VP, x, 9))


def test_conditional_score_linear_gaussian_closed_form():
    # x_hat_M is affine in x: x_hat_M = mu_M + a^T (x - c * mu) with a = c S[:, M] / (c^2 S + v I)
    tgt = correlated_gaussian_target()
    mu, S = tgt.mean, tgt.covariance
    y = 0.0
    cfg = TwistConfig(variance_scheme="noise_level")
    rng = np.random.default_rng(5)
    for _ in range(50):
        t = int(rng.integers(1, VP.T + 1))
        x = rng.normal(size=2)
        c, v = np.sqrt(VP.cum_alpha[t]), VP.cum_var[t]
        A = c * c * S + v * np.eye(2)
        a = np.linalg.solve(A, c * S[:, 0])
        xm = mu[0] + a @ (x - c * mu)
        tv = v / (c * c)
        expected = -np.linalg.solve(A, x - c * mu) + a * (y - xm) / tv
        got = conditional_score(tgt, Inpaint((0,), [y]), cfg, VP, x, t)
        assert np.allclose(got, expected, rtol=1e-10, atol=1e-12)


def test_doubling_gamma_doubles_twist_component_only():
    tgt = three_component_gmm()
    lik = InpaintDOF(((0,), (1,)), [0.0])
    x = np.array([0.7, -0.2])
    base = marginal_score(tgt, VP, x, 25)
    c1 = conditional_score(tgt, lik, TwistConfig(1.0, data_var=1.0), VP, x, 25)
    c2 = conditional_score(tgt, lik, TwistConfig(2.0, data_var=1.0), VP, x, 25)
    assert np.allclose(c2 - base, 2 * (c1 - base), rtol=1e-12, atol=1e-14)


class _CountingGaussian(GaussianTarget):
    calls = 0

    def posterior(self, x, scale, var):
        type(self).calls += 1
        return super().posterior(x, scale, var)


def test_dof_twist_shares_one_denoiser_call():
    tgt = _CountingGaussian([0.0, 0.0, 0.0], np.eye(3))
    masks = ((0,), (1,), (2,), (0,))
    _CountingGaussian.calls = 0
    twist_grad(InpaintDOF(masks, [0.0]), TwistConfig(data_var=1.0), tgt, VP, np.ones((8, 3)), 10)
    assert _CountingGaussian.calls == 1
    _CountingGaussian.calls = 0
    conditional_score(tgt, InpaintDOF(masks, [0.0]), TwistConfig(data_var=1.0), VP, np.ones(3), 3)
    assert _CountingGaussian.calls == 1


# --- exact final step ---------------------------------------------------------------------


def test_exact_final_pins_observed_bitwise():
    tgt = three_component_gmm()
    X1 = np.random.default_rng(2).normal(size=(500, 2))
    y = np.array([0.123456789])
    x0, log_pred = exact_final_proposal(Inpaint((0,), y), tgt, VP, X1, np.random.default_rng(3))
    assert np.all(x0[:, 0] == y[0])
    assert np.unique(x0[:, 1]).size == 500
    assert np.all(np.isfinite(log_pred))


def test_exact_final_full_mask_is_deterministic():
    tgt = correlated_gaussian_target()
    y = np.array([0.25, -0.5])
    x0, _ = exact_final_proposal(Inpaint((0, 1), y), tgt, VP, np.ones((10, 2)),
                                 np.random.default_rng(0))
    assert np.array_equal(x0, np.tile(y, (10, 1)))


def test_exact_final_rejects_smooth_norm():
    with pytest.raises(UnsupportedCombination):
        exact_final_proposal(SmoothNorm(0.0), correlated_gaussian_target(), VP, np.zeros(2),
                             np.random.default_rng(0))


def test_exact_final_log_pred_matches_normal_density():
    tgt = correlated_gaussian_target()
    x1 = np.array([0.3, 0.1])
    _, log_pred = exact_final_proposal(Inpaint((1,), [0.2]), tgt, VP, x1, np.random.default_rng(0))
    mean, var = reverse_transition_params(VP, 1, x1, marginal_score(tgt, VP, x1, 1))
    assert log_pred == pytest.approx(norm.logpdf(0.2, mean[1], np.sqrt(var)), rel=1e-12)


def test_exact_final_dof_mask_frequencies():
    tgt = correlated_gaussian_target()
    lik = InpaintDOF(((0,), (1,)), [0.01])
    x1 = np.array([0.012, 0.006])
    n = 40_000
    X1 = np.tile(x1, (n, 1))
    x0, _ = exact_final_proposal(lik, tgt, VP, X1, np.random.default_rng(4))
    # responsibilities from an independent evaluation of the model transition
    mean, var = reverse_transition_params(VP, 1, x1, marginal_score(tgt, VP, x1, 1))
    dens = norm.pdf(0.01, mean, np.sqrt(var))
    expected = dens / dens.sum()
    assert np.allclose(mask_responsibilities(lik, VP, mean)[:, 0], expected, rtol=1e-10)
    freq0 = np.mean(x0[:, 0] == 0.01)
    assert np.mean((x0[:, 0] == 0.01) | (x0[:, 1] == 0.01)) == 1.0
    se = np.sqrt(expected[0] * expected[1] / n)
    assert abs(freq0 - expected[0]) < 4 * se


def test_exact_final_noise_argument_is_used():
    tgt = correlated_gaussian_target()
    z = normals(1, 3, 0, (4, 2))
    a, _ = exact_final_proposal(Inpaint((0,), [0.0]), tgt, VP, np.ones((4, 2)),
                                np.random.default_rng(0), noise=z)
    b, _ = exact_final_proposal(Inpaint((0,), [0.0]), tgt, VP, np.ones((4, 2)),
                                np.random.default_rng(99), noise=z)
    assert np.array_equal(a, b)


# --- approximation quality ------------------------------------------------------------------


def test_twist_approximation_improves_as_t_decreases():
    """Mean |twist - exact log p(y | x^t)| over 100 conditional trajectories."""
    tgt = correlated_gaussian_target()
    lik = Inpaint((0,), [0.0])
    ex = ExactLinearGaussianKernel(tgt, lik, VP)
    cfg = TwistConfig(variance_scheme="noise_level")
    grid = (100, 80, 60, 40, 20, 10, 5, 2, 1)
    X, _, _ = ex.initial(100, seed=0)
    gaps = {}
    for t in range(VP.T, 0, -1):
        if t in grid:
            den = denoiser(tgt, VP, X, t)
            gaps[t] = np.mean(np.abs(twist_log(lik, cfg, den, VP, t) - ex.exact_log_twist(X, t)))
        if t > 1:
            X, _ = ex.propose(ex.cache(X, t), X, t, normals(1, 1, t, X.shape), 1.0)
    seq = [gaps[t] for t in grid]
    assert all(b <= a for a, b in zip(seq, seq[1:])), seq


def test_likelihood_validation():
    with pytest.raises(ValueError):
        Inpaint((0, 0), [1.0, 2.0])
    with pytest.raises(ValueError):
        Inpaint((0,), [1.0, 2.0])
    with pytest.raises(ValueError):
        InpaintDOF((), [0.0])
    with pytest.raises(ValueError):
        InpaintDOF(((0,), (0, 1)), [0.0])
    with pytest.raises(ValueError):
        Inpaint((3,), [0.0]).validate(2)
    assert Inpaint((0,), [0.0]) == Inpaint([0], np.array([0.0]))
