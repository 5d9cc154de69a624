import math

import numpy as np
import pytest
import scipy.integrate

import oracles

from rip.core import align_bundle
from rip.errors import TrainingError
from rip.estimator import (
    FEATURE_DIM,
    PARAM_KEYS,
    FitConfig,
    StudentTEstimator,
    extract_mean,
    fit_array,
    gradient_check,
    log_density,
    log_gamma,
    loss_gradient,
    loss_gradient_array,
    mean_curve,
    nll_loss,
    nll_loss_array,
)


def param_shapes(hidden, n_channels):
    h1, h2 = hidden
    return {
        "W1": (FEATURE_DIM, h1), "b1": (h1,),
        "W2": (h1, h2), "b2": (h2,),
        "W3": (h2, n_channels), "b3": (n_channels,),
    }


def constant_estimator(mu_values, var_values, nu, hidden=(4, 4), var_floor=1e-6):
    """Estimator whose mean/variance are constant in t: zero weights, set biases."""
    mu_values = np.asarray(mu_values, dtype=float)
    var_values = np.asarray(var_values, dtype=float)
    params = {}
    for head in ("mu", "s"):
        for name, shape in param_shapes(hidden, len(mu_values)).items():
            params[f"{head}_{name}"] = np.zeros(shape)
    params["mu_b3"][:] = mu_values
    params["s_b3"][:] = np.log(np.expm1(var_values - var_floor))
    return StudentTEstimator(params=params, nu=nu, hidden=hidden,
                             n_channels=len(mu_values), var_floor=var_floor)


def random_estimator(rng, hidden, n_channels, nu, affine=False):
    params = {}
    for head in ("mu", "s"):
        for name, shape in param_shapes(hidden, n_channels).items():
            params[f"{head}_{name}"] = rng.normal(0.0, 0.4, shape)
    shift = rng.normal(0.0, 1.0, n_channels) if affine else None
    scale = rng.uniform(0.5, 2.0, n_channels) if affine else None
    return StudentTEstimator(params=params, nu=nu, hidden=hidden,
                             n_channels=n_channels, var_floor=1e-6,
                             channel_shift=shift, channel_scale=scale)


class TestLogGamma:
    def test_known_values(self):
        assert log_gamma(1.0) == pytest.approx(0.0, abs=1e-12)
        assert log_gamma(0.5) == pytest.approx(0.5 * math.log(math.pi), abs=1e-12)
        assert log_gamma(10.0) == pytest.approx(math.log(362880.0), abs=1e-10)

    def test_against_reference_grid(self):
        xs = np.linspace(0.5, 100.0, 101)
        for x in xs:
            assert abs(log_gamma(float(x)) - oracles.ref_log_gamma(x)) <= 1e-10

    def test_reflection_region(self):
        for x in (0.1, 0.25, 0.4):
            assert abs(log_gamma(x) - oracles.ref_log_gamma(x)) <= 1e-10

    def test_domain_error(self):
        with pytest.raises(ValueError):
            log_gamma(0.0)
        with pytest.raises(ValueError):
            log_gamma(-3.0)

    def test_vectorized(self):
        out = log_gamma(np.array([1.0, 2.0, 3.0]))
        assert out == pytest.approx([0.0, 0.0, math.log(2.0)])


class TestLogDensity:
    def test_cauchy_mode(self):
        est = constant_estimator([0.0], [1.0], nu=1.0)
        assert log_density(0.0, 0.5, est)[0] == pytest.approx(-math.log(math.pi), abs=1e-12)

    def test_symmetry(self):
        est = constant_estimator([0.3], [0.7], nu=2.5)
        for delta in (0.1, 1.0, 4.2):
            assert log_density(0.3 + delta, 0.2, est)[0] == pytest.approx(
                log_density(0.3 - delta, 0.2, est)[0])

    def test_nu3_unit_scale_at_one(self):
        est = constant_estimator([0.0], [1.0], nu=3.0)
        value = math.exp(log_density(1.0, 0.0, est)[0])
        assert value == pytest.approx(0.2067, abs=2e-4)
        assert log_density(1.0, 0.0, est)[0] == pytest.approx(
            oracles.ref_t_log_density(1.0, 0.0, 1.0, 3.0), abs=1e-10)

    def test_matches_reference_across_nu(self, rng):
        for _ in range(40):
            nu = float(rng.uniform(0.6, 40.0))
            mu = float(rng.normal(0, 2))
            var = float(rng.uniform(0.05, 9.0))
            a = float(rng.normal(mu, 3))
            est = constant_estimator([mu], [var], nu=nu)
            assert log_density(a, 0.5, est)[0] == pytest.approx(
                oracles.ref_t_log_density(a, mu, var, nu), abs=1e-9)

    def test_gaussian_mode(self):
        est = constant_estimator([1.0], [2.0], nu=math.inf)
        expect = -0.5 * math.log(2 * math.pi * 2.0) - 0.25 / 4.0
        assert log_density(1.5, 0.1, est)[0] == pytest.approx(expect, abs=1e-12)


class TestDensityProperties:
    @pytest.mark.parametrize("nu", [1.25, 1.5, 3.0, 30.0])
    def test_normalizes_to_one(self, nu):
        est = constant_estimator([0.4], [0.8], nu=nu)

        def pdf(a):
            return math.exp(log_density(a, 0.5, est)[0])

        mass, _ = scipy.integrate.quad(pdf, -np.inf, np.inf, limit=400)
        assert abs(mass - 1.0) <= 1e-3

    def test_gaussian_limit_on_density_scale(self):
        sigma2 = 1.0
        est_t = constant_estimator([0.0], [sigma2], nu=1e6)
        est_g = constant_estimator([0.0], [sigma2], nu=math.inf)
        xs = np.linspace(-5.0, 5.0, 401)
        worst = max(
            abs(math.exp(log_density(x, 0.5, est_t)[0])
                - math.exp(log_density(x, 0.5, est_g)[0]))
            for x in xs
        )
        assert worst <= 1e-4

    def test_heavy_tails_dominate_past_four_sigma(self):
        est_t = constant_estimator([0.0], [1.0], nu=1.5)
        est_g = constant_estimator([0.0], [1.0], nu=math.inf)
        for x in np.concatenate([np.linspace(4.0, 10.0, 30), [20.0, 50.0]]):
            assert log_density(x, 0.5, est_t)[0] > log_density(x, 0.5, est_g)[0]


class TestNllLoss:
    def test_single_element_is_negative_log_density(self):
        est = constant_estimator([0.2], [0.5], nu=1.5)
        data = np.array([[[1.1]]])
        grid = np.array([0.0])
        expect = -oracles.ref_t_log_density(1.1, 0.2, 0.5, 1.5)
        assert nll_loss_array(data, grid, est) == pytest.approx(expect, abs=1e-9)

    def test_duplicating_bundle_doubles_loss(self, rng):
        est = constant_estimator([0.0, 0.5], [1.0, 2.0], nu=2.0)
        data = rng.normal(0, 1, (3, 4, 2))
        grid = np.linspace(0, 1, 4)
        once = nll_loss_array(data, grid, est)
        twice = nll_loss_array(np.concatenate([data, data]), grid, est)
        assert twice == pytest.approx(2 * once)

    def test_loss_prefers_mean_on_data(self):
        grid = np.linspace(0, 1, 5)
        data = np.full((4, 5, 1), 2.0)
        near = constant_estimator([2.0], [1.0], nu=1.5)
        far = constant_estimator([7.0], [1.0], nu=1.5)
        assert nll_loss_array(data, grid, near) < nll_loss_array(data, grid, far)

    def test_bundle_api_matches_array_api(self, rng):
        from conftest import random_trajectory

        bundle = align_bundle([random_trajectory(rng, n=9), random_trajectory(rng, n=12)], 12)
        est = constant_estimator([0.0] * 10, [1.0] * 10, nu=1.5)
        assert nll_loss(bundle, est) == pytest.approx(
            nll_loss_array(bundle.to_array(), bundle.grid(), est))


class TestLossGradient:
    def test_matches_central_differences(self, rng):
        for nu in (1.25, 1.5, 3.0, math.inf):
            est = random_estimator(rng, (5, 4), 2, nu, affine=True)
            data = rng.normal(0.0, 1.5, (3, 4, 2))
            grid = np.linspace(0, 1, 4)
            analytic = loss_gradient_array(data, grid, est)
            numeric = oracles.central_difference_gradient(
                lambda: nll_loss_array(data, grid, est), est.params)
            assert oracles.max_relative_error(analytic, numeric) <= 1e-4

    def test_symmetric_bundle_zeroes_mean_gradient(self):
        est = constant_estimator([0.0], [1.0], nu=1.5)
        grid = np.linspace(0, 1, 3)
        c = 0.8
        data = np.stack([np.full((3, 1), c), np.full((3, 1), -c)])
        grads = loss_gradient_array(data, grid, est)
        for key in PARAM_KEYS:
            if key.startswith("mu"):
                assert np.abs(grads[key]).max() == pytest.approx(0.0, abs=1e-12)

    def test_gaussian_mode_is_large_nu_limit(self, rng):
        est_inf = random_estimator(rng, (5, 4), 2, math.inf)
        est_big = StudentTEstimator(params=est_inf.params, nu=1e8,
                                    hidden=est_inf.hidden, n_channels=2,
                                    var_floor=est_inf.var_floor)
        data = rng.normal(0.0, 1.0, (3, 5, 2))
        grid = np.linspace(0, 1, 5)
        g_inf = loss_gradient_array(data, grid, est_inf)
        g_big = loss_gradient_array(data, grid, est_big)
        assert oracles.max_relative_error(g_big, g_inf, floor=1e-8) <= 1e-4

    def test_bundle_api(self, rng):
        from conftest import random_trajectory

        bundle = align_bundle([random_trajectory(rng, n=8)], 8)
        est = constant_estimator([0.1] * 10, [1.0] * 10, nu=1.5)
        grads = loss_gradient(bundle, est)
        assert set(grads) == set(PARAM_KEYS)

    def test_builtin_checker_is_tight(self):
        assert gradient_check(seed=0, n_configs=6) <= 1e-4


@pytest.fixture(scope="module")
def outlier_fits():
    """The 4-vs-1 planted-outlier bundle fitted in both modes."""
    data = np.zeros((5, 20, 1))
    data[4] = 10.0
    grid = np.linspace(0, 1, 20)
    t_est, t_trace = fit_array(data, grid, FitConfig(nu=1.5, seed=0))
    g_est, g_trace = fit_array(data, grid, FitConfig(nu=math.inf, seed=0))
    return data, grid, t_est, t_trace, g_est, g_trace


class TestFit:
    def test_constant_bundle_recovers_value(self):
        for c in (0.0, 3.0, -1.7):
            data = np.full((5, 12, 2), c)
            grid = np.linspace(0, 1, 12)
            est, _ = fit_array(data, grid, FitConfig(nu=1.5, seed=1, steps=1500))
            err = np.abs(mean_curve(est, grid) - c).max()
            assert err <= 1e-2 * max(1.0, abs(c))

    def test_outlier_bundle_t_mode_stays_robust(self, outlier_fits):
        data, grid, t_est, _, _, _ = outlier_fits
        assert np.abs(mean_curve(t_est, grid)).max() <= 0.5

    def test_outlier_bundle_matches_grid_oracle(self, outlier_fits):
        data, grid, t_est, _, _, _ = outlier_fits
        mu_star, _, _ = oracles.grid_search_location([0, 0, 0, 0, 10], 1.5)
        assert abs(mu_star) <= 0.05  # the robust location is at the inliers
        assert np.abs(mean_curve(t_est, grid) - mu_star).max() <= 0.5

    def test_outlier_bundle_gaussian_mode_is_dragged(self, outlier_fits):
        data, grid, _, _, g_est, _ = outlier_fits
        mu = mean_curve(g_est, grid)
        assert np.all(np.abs(mu - 2.0) <= 0.3)
        mu_star, _, _ = oracles.grid_search_location([0, 0, 0, 0, 10], math.inf)
        assert mu_star == pytest.approx(2.0, abs=0.01)

    def test_loss_tail_settles(self, outlier_fits):
        _, _, _, t_trace, _, g_trace = outlier_fits
        for trace in (t_trace, g_trace):
            losses = [l for _, l in trace.loss_curve]
            n = max(1, len(losses) // 10)
            tail = np.mean(losses[-n:])
            prev = np.mean(losses[-2 * n:-n])
            assert tail <= prev + 1e-3 * max(1.0, abs(prev))

    def test_translation_equivariance(self):
        rng = np.random.default_rng(5)
        data = rng.normal(0.0, 0.1, (4, 10, 1))
        grid = np.linspace(0, 1, 10)
        cfg = FitConfig(nu=1.5, seed=3, steps=1500)
        base, _ = fit_array(data, grid, cfg)
        shifted, _ = fit_array(data + 2.5, grid, cfg)
        diff = mean_curve(shifted, grid) - mean_curve(base, grid)
        assert np.abs(diff - 2.5).max() <= 2e-2

    def test_deterministic_given_seed(self):
        data = np.random.default_rng(0).normal(0, 1, (3, 8, 2))
        grid = np.linspace(0, 1, 8)
        a, _ = fit_array(data, grid, FitConfig(seed=11, steps=500))
        b, _ = fit_array(data, grid, FitConfig(seed=11, steps=500))
        for k in PARAM_KEYS:
            assert np.array_equal(a.params[k], b.params[k])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported_with_step(self):
        data = np.full((2, 4, 1), np.nan)
        grid = np.linspace(0, 1, 4)
        with pytest.raises(TrainingError) as err:
            fit_array(data, grid, FitConfig(steps=50))
        assert err.value.step is not None

    def test_full_batch_used_for_small_bundles(self):
        data = np.random.default_rng(1).normal(0, 1, (2, 5, 1))  # 10 pairs < 64
        grid = np.linspace(0, 1, 5)
        a, _ = fit_array(data, grid, FitConfig(seed=0, steps=300))
        b, _ = fit_array(data, grid, FitConfig(seed=999, steps=300))
        # Full-batch path has no sampling noise; different seeds only change init.
        assert np.abs(mean_curve(a, grid) - mean_curve(b, grid)).max() < 0.2


class TestRobustnessOrdering:
    def test_planted_outlier_rmse_ratio(self):
        wins = 0
        seeds = range(8)
        for seed in seeds:
            rng = np.random.default_rng(seed)
            path = np.linspace(0.0, 0.4, 25)[:, None]
            data = np.stack([path + rng.normal(0, 0.005, path.shape) for _ in range(5)])
            direction = rng.normal(0, 1, 1)
            data[2] += 0.14 * np.sign(direction)
            grid = np.linspace(0, 1, 25)
            t_est, _ = fit_array(data, grid, FitConfig(nu=1.5, seed=seed))
            g_est, _ = fit_array(data, grid, FitConfig(nu=math.inf, seed=seed))
            rmse_t = float(np.sqrt(np.mean((mean_curve(t_est, grid) - path) ** 2)))
            rmse_g = float(np.sqrt(np.mean((mean_curve(g_est, grid) - path) ** 2)))
            if rmse_t < 0.5 * rmse_g:
                wins += 1
        assert wins >= 0.9 * len(list(seeds))


class TestExtractMean:
    def test_shape_contract(self):
        est = constant_estimator([0.1] * 10, [1.0] * 10, nu=1.5)
        grid = np.linspace(0, 1, 17)
        assert len(extract_mean(est, grid)) == 17

    def test_gripper_thresholding(self):
        mu = [0.0] * 9 + [0.9]
        est = constant_estimator(mu, [1.0] * 10, nu=1.5)
        out = extract_mean(est, np.linspace(0, 1, 5))
        assert set(out.gripper_states()) == {1}
        mu = [0.0] * 9 + [0.4]
        est = constant_estimator(mu, [1.0] * 10, nu=1.5)
        out = extract_mean(est, np.linspace(0, 1, 5))
        assert set(out.gripper_states()) == {0}

    def test_fitted_constant_bundle_extracts_constant(self):
        data = np.full((4, 10, 10), 0.25)
        data[:, :, 9] = 1.0
        grid = np.linspace(0, 1, 10)
        est, _ = fit_array(data, grid, FitConfig(seed=0, steps=1500))
        out = extract_mean(est, grid)
        arr = out.to_array()
        assert np.abs(arr[:, :9] - 0.25).max() <= 1e-2
        assert set(out.gripper_states()) == {1}

    def test_grid_validation(self):
        est = constant_estimator([0.0] * 10, [1.0] * 10, nu=1.5)
        with pytest.raises(ValueError):
            extract_mean(est, [0.0, 1.2])
        with pytest.raises(ValueError):
            extract_mean(est, [0.5])

    def test_channel_count_guard(self):
        est = constant_estimator([0.0], [1.0], nu=1.5)
        with pytest.raises(ValueError):
            extract_mean(est, np.linspace(0, 1, 4))


class TestSerialization:
    def test_roundtrip_preserves_evaluation(self, rng):
        data = rng.normal(0, 0.2, (3, 9, 10))
        grid = np.linspace(0, 1, 9)
        est, _ = fit_array(data, grid, FitConfig(seed=2, steps=400))
        back = StudentTEstimator.from_dict(est.to_dict())
        mu_a, var_a = est.mean_and_variance(grid)
        mu_b, var_b = back.mean_and_variance(grid)
        assert np.allclose(mu_a, mu_b)
        assert np.allclose(var_a, var_b)
        assert back.nu == est.nu

    def test_gaussian_nu_survives_json(self, rng):
        import json

        data = rng.normal(0, 0.2, (2, 6, 1))
        grid = np.linspace(0, 1, 6)
        est, _ = fit_array(data, grid, FitConfig(seed=0, steps=200, nu=math.inf))
        payload = json.loads(json.dumps(est.to_dict()))
        back = StudentTEstimator.from_dict(payload)
        assert math.isinf(back.nu)

    def test_unknown_schema_rejected(self):
        with pytest.raises(ValueError):
            StudentTEstimator.from_dict({"schema_version": 99})


class TestFitConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            FitConfig(nu=0.0)
        with pytest.raises(ValueError):
            FitConfig(steps=0)
        with pytest.raises(ValueError):
            FitConfig(hidden=(0, 4))
        with pytest.raises(ValueError):
            FitConfig(var_floor=0.0)

    def test_gaussian_helper(self):
        cfg = FitConfig(nu=1.5).gaussian()
        assert math.isinf(cfg.nu)
