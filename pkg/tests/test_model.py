"""Core density and reparameterization tests against independent oracles."""

import numpy as np
import pytest
from scipy import stats

from rnaiscreen.errors import ContractError, DomainError
from rnaiscreen.model import (LOG_2PI, ModelState, MuPrior, ScreenData,
                              UnitInfo, ig_shape_scale,
                              ig_shape_scale_jacobian,
                              log_conditional_density, log_joint_density)

from conftest import random_screen, random_state_in_support, toy_prior


def oracle_log_joint(data, state, prior):
    """Factor-by-factor recomputation of the joint with scipy densities.

    The reparameterization Jacobian is derived independently through the
    inverse map: mean = scale/(shape-1), variance = scale^2/((shape-1)^2(shape-2)),
    whose determinant is scale^2/((shape-1)^3 (shape-2)^2).
    """
    total = 0.0
    n_units, n_rep = data.x.shape
    nu = state.alpha0 + state.gamma * state.beta + state.alpha1 * state.mu
    for i in range(n_units):
        for j in range(n_rep):
            total += stats.norm.logpdf(
                data.x[i, j], state.mu[i],
                np.sqrt(state.sigma2_x[i] / state.omega_x[i, j]))
            total += stats.norm.logpdf(
                data.y[i, j], nu[i],
                np.sqrt(state.sigma2_y[i] / state.omega_y[i, j]))
            total += stats.gamma.logpdf(state.omega_x[i, j], state.dof_x / 2,
                                        scale=2 / state.dof_x)
            total += stats.gamma.logpdf(state.omega_y[i, j], state.dof_y / 2,
                                        scale=2 / state.dof_y)
    k = state.gamma.sum()
    total += ((n_units - k + prior.p_shape1 - 1) * np.log(state.p)
              + (k + prior.p_shape2 - 1) * np.log(1 - state.p))
    for i in range(n_units):
        if state.gamma[i] == 1:
            total += stats.norm.logpdf(state.beta[i], 0, np.sqrt(state.v))
    total += stats.norm.logpdf(state.alpha0, 0, np.sqrt(state.v))
    total += stats.norm.logpdf(state.alpha1, 0, np.sqrt(state.v))
    total += stats.invgamma.logpdf(state.v, prior.v_shape, scale=prior.v_scale)
    for sigma2, m, v in ((state.sigma2_x, state.ig_mean_x, state.ig_var_x),
                         (state.sigma2_y, state.ig_mean_y, state.ig_var_y)):
        shape = m * m / v + 2
        scale = (m * m / v + 1) * m
        for i in range(n_units):
            total += stats.invgamma.logpdf(sigma2[i], shape, scale=scale)
        total += np.log(scale ** 2
                        / ((shape - 1) ** 3 * (shape - 2) ** 2))
    mu_prior = prior.mu_prior
    for i in range(n_units):
        if mu_prior.kind == "uniform":
            total += stats.uniform.logpdf(state.mu[i], mu_prior.low,
                                          mu_prior.high - mu_prior.low)
        else:
            z = (state.mu[i] - mu_prior.low) / (mu_prior.high - mu_prior.low)
            total += (stats.beta.logpdf(z, mu_prior.shape1, mu_prior.shape2)
                      - np.log(mu_prior.high - mu_prior.low))
    return total


class TestIgShapeScale:
    def test_known_pairs(self):
        assert ig_shape_scale(0.1, 0.01) == (3.0, pytest.approx(0.2))
        assert ig_shape_scale(0.5, 0.25) == (3.0, pytest.approx(1.0))
        assert ig_shape_scale(1.0, 1.0) == (3.0, pytest.approx(2.0))

    def test_resulting_moments(self, rng):
        for _ in range(20):
            mean = rng.uniform(0.05, 3.0)
            var = rng.uniform(0.01, 2.0)
            shape, scale = ig_shape_scale(mean, var)
            assert scale / (shape - 1) == pytest.approx(mean, rel=1e-12)
            assert (scale ** 2 / ((shape - 1) ** 2 * (shape - 2))
                    == pytest.approx(var, rel=1e-12))

    def test_rejects_nonpositive(self):
        with pytest.raises(DomainError):
            ig_shape_scale(0.0, 1.0)
        with pytest.raises(DomainError):
            ig_shape_scale(1.0, -0.5)

    def test_jacobian_matches_finite_differences(self):
        mean, var = 0.1, 0.01
        h = 1e-7

        def forward(m, v):
            return np.array(ig_shape_scale(m, v))

        col_m = (forward(mean + h, var) - forward(mean - h, var)) / (2 * h)
        col_v = (forward(mean, var + h) - forward(mean, var - h)) / (2 * h)
        fd_det = col_m[0] * col_v[1] - col_m[1] * col_v[0]
        assert ig_shape_scale_jacobian(mean, var) == pytest.approx(
            1.0 / fd_det, rel=1e-6)


def _point_state(n_units, n_rep, **overrides):
    base = dict(
        gamma=np.zeros(n_units, dtype=np.int64), beta=np.zeros(n_units),
        mu=np.zeros(n_units), alpha0=1.0, alpha1=2.0,
        sigma2_x=np.ones(n_units), sigma2_y=np.ones(n_units),
        omega_x=np.ones((n_units, n_rep)), omega_y=np.ones((n_units, n_rep)),
        dof_x=3, dof_y=3, p=0.5, v=1.0,
        ig_mean_x=0.1, ig_var_x=0.1, ig_mean_y=0.1, ig_var_y=0.1)
    base.update(overrides)
    return ModelState(**base)


class TestConditionalDensity:
    def test_single_point_at_mean(self):
        state = _point_state(1, 1, mu=np.array([0.5]))
        nu = 1.0 + 2.0 * 0.5
        data = ScreenData([[0.5]], [[nu]], [UnitInfo("u0")])
        assert log_conditional_density(data, state) == pytest.approx(
            -LOG_2PI, abs=1e-12)

    def test_precision_multipliers_enter_normalizer(self):
        state = _point_state(1, 1, mu=np.array([0.5]),
                             omega_x=np.array([[4.0]]),
                             omega_y=np.array([[4.0]]))
        nu = 1.0 + 2.0 * 0.5
        data = ScreenData([[0.5]], [[nu]], [UnitInfo("u0")])
        assert log_conditional_density(data, state) == pytest.approx(
            -LOG_2PI + np.log(4.0), abs=1e-12)

    def test_matches_term_by_term_oracle(self, rng):
        prior = toy_prior()
        for _ in range(10):
            data = random_screen(rng, 3, 2)
            state = random_state_in_support(rng, 3, 2, prior)
            expected = 0.0
            nu = state.nu()
            for i in range(3):
                for j in range(2):
                    expected += stats.norm.logpdf(
                        data.x[i, j], state.mu[i],
                        np.sqrt(state.sigma2_x[i] / state.omega_x[i, j]))
                    expected += stats.norm.logpdf(
                        data.y[i, j], nu[i],
                        np.sqrt(state.sigma2_y[i] / state.omega_y[i, j]))
            assert log_conditional_density(data, state) == pytest.approx(
                expected, rel=1e-12)

    def test_shape_mismatch_raises(self, rng):
        prior = toy_prior()
        data = random_screen(rng, 4, 2)
        state = random_state_in_support(rng, 3, 2, prior)
        with pytest.raises(ContractError):
            log_conditional_density(data, state)


class TestJointDensity:
    def test_outside_support_is_minus_inf(self, rng):
        prior = toy_prior()
        data = random_screen(rng, 2, 2)
        state = random_state_in_support(rng, 2, 2, prior)
        state.mu[0] = prior.mu_prior.high + 1.0
        assert log_joint_density(data, state, prior) == -np.inf

    def test_outside_dof_support_is_minus_inf(self, rng):
        prior = toy_prior()
        data = random_screen(rng, 2, 2)
        state = random_state_in_support(rng, 2, 2, prior)
        state.dof_x = prior.dof_support[1] + 1
        assert log_joint_density(data, state, prior) == -np.inf

    def test_matches_brute_force_oracle(self, rng):
        prior = toy_prior()
        for _ in range(20):
            data = random_screen(rng, 2, 2)
            state = random_state_in_support(rng, 2, 2, prior)
            assert log_joint_density(data, state, prior) == pytest.approx(
                oracle_log_joint(data, state, prior), rel=1e-10)

    def test_matches_oracle_with_beta_mu_prior(self, rng):
        prior = toy_prior(mu_prior=MuPrior.scaled_beta(6, 2, -2.77, 0.248))
        for _ in range(5):
            data = random_screen(rng, 2, 2)
            state = random_state_in_support(rng, 2, 2, prior)
            assert log_joint_density(data, state, prior) == pytest.approx(
                oracle_log_joint(data, state, prior), rel=1e-10)

    def test_inactive_beta_never_enters(self, rng):
        prior = toy_prior()
        data = random_screen(rng, 3, 2)
        state = random_state_in_support(rng, 3, 2, prior)
        k = int(np.where(state.gamma == 0)[0][0])
        other = state.copy()
        other.beta[k] = 123.456
        assert (log_joint_density(data, other, prior)
                == log_joint_density(data, state, prior))

    def test_prior_part_constant_in_data(self, rng):
        prior = toy_prior()
        state = random_state_in_support(rng, 3, 2, prior)
        data_a = random_screen(rng, 3, 2)
        data_b = random_screen(rng, 3, 2)
        diff_a = (log_joint_density(data_a, state, prior)
                  - log_conditional_density(data_a, state))
        diff_b = (log_joint_density(data_b, state, prior)
                  - log_conditional_density(data_b, state))
        assert diff_a == pytest.approx(diff_b, rel=1e-12)

    def test_unit_permutation_invariance(self, rng):
        prior = toy_prior()
        data = random_screen(rng, 5, 2)
        state = random_state_in_support(rng, 5, 2, prior)
        perm = rng.permutation(5)
        data_p = ScreenData(data.x[perm], data.y[perm],
                            [data.units[i] for i in perm])
        state_p = state.copy()
        for name in ("gamma", "beta", "mu", "sigma2_x", "sigma2_y",
                     "omega_x", "omega_y"):
            setattr(state_p, name, getattr(state, name)[perm])
        assert log_joint_density(data_p, state_p, prior) == pytest.approx(
            log_joint_density(data, state, prior), rel=1e-12)
        assert log_conditional_density(data_p, state_p) == pytest.approx(
            log_conditional_density(data, state), rel=1e-12)

    def test_finite_and_positive_density(self, rng):
        prior = toy_prior()
        data = random_screen(rng, 4, 3)
        state = random_state_in_support(rng, 4, 3, prior)
        value = log_joint_density(data, state, prior)
        assert np.isfinite(value)


class TestMuPrior:
    def test_uniform_log_pdf(self):
        prior = MuPrior.uniform(-3, 1)
        assert prior.log_pdf(0.0) == pytest.approx(-np.log(4.0))
        assert prior.log_pdf(2.0) == -np.inf

    def test_scaled_beta_integrates_to_one(self):
        prior = MuPrior.scaled_beta(6, 2, -2.77, 0.248)
        grid = np.linspace(-2.77 + 1e-9, 0.248 - 1e-9, 200001)
        mass = np.trapezoid(np.exp(prior.log_pdf(grid)), grid)
        assert mass == pytest.approx(1.0, abs=1e-6)

    def test_scaled_beta_samples_in_support(self, rng):
        prior = MuPrior.scaled_beta(6, 2, -2.77, 0.248)
        draws = prior.sample(rng, 10_000)
        assert draws.min() > -2.77 and draws.max() < 0.248
        expected_mean = -2.77 + (0.248 + 2.77) * 6 / 8
        assert draws.mean() == pytest.approx(expected_mean, abs=0.02)


class TestModelStateValidation:
    def test_nu_accessor(self):
        state = _point_state(2, 2, gamma=np.array([1, 0]),
                             beta=np.array([0.5, 0.0]),
                             mu=np.array([0.1, 0.2]))
        np.testing.assert_allclose(
            state.nu(), [1.0 + 0.5 + 2.0 * 0.1, 1.0 + 2.0 * 0.2])

    def test_invariant_violations_raise(self):
        state = _point_state(2, 2)
        state.beta[0] = 1.0  # gamma is 0
        with pytest.raises(ContractError):
            state.validate()
        state = _point_state(2, 2, p=1.0)
        with pytest.raises(ContractError):
            state.validate()
        state = _point_state(2, 2)
        state.sigma2_x[1] = 0.0
        with pytest.raises(ContractError):
            state.validate()

    def test_screen_data_shape_contracts(self):
        with pytest.raises(ContractError):
            ScreenData(np.ones((2, 2)), np.ones((3, 2)),
                       [UnitInfo("a"), UnitInfo("b")])
        with pytest.raises(ContractError):
            ScreenData(np.array([[1.0, np.inf]]), np.ones((1, 2)),
                       [UnitInfo("a")])
        data = ScreenData(np.ones((2, 1)), np.ones((2, 1)),
                          [UnitInfo("a"), UnitInfo("b")])
        with pytest.raises(ContractError):
            data.validate()  # single replicate
