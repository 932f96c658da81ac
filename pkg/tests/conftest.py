import numpy as np
import pytest

from rnaiscreen.model import ModelState, MuPrior, PriorConfig, ScreenData, UnitInfo


def toy_prior(**overrides) -> PriorConfig:
    base = dict(
        ig_mean_bound_x=0.5, ig_var_bound_x=0.5,
        ig_mean_bound_y=2.0, ig_var_bound_y=1.0,
        p_shape1=9.0, p_shape2=1.0,
        v_shape=3.0, v_scale=50.0,
        mu_prior=MuPrior.uniform(-3.0, 1.0),
    )
    base.update(overrides)
    return PriorConfig(**base)


def random_state_in_support(rng: np.random.Generator, n_units: int,
                            n_replicates: int, prior: PriorConfig) -> ModelState:
    """Moderate random state strictly inside the prior support."""
    lo, hi = prior.mu_prior.low, prior.mu_prior.high
    span = hi - lo
    gamma = (rng.random(n_units) < 0.5).astype(np.int64)
    return ModelState(
        gamma=gamma,
        beta=np.where(gamma == 1, rng.normal(0, 1, n_units), 0.0),
        mu=rng.uniform(lo + 0.1 * span, hi - 0.1 * span, n_units),
        alpha0=rng.normal(0, 2), alpha1=rng.normal(0, 2),
        sigma2_x=rng.uniform(0.05, 1.5, n_units),
        sigma2_y=rng.uniform(0.05, 1.5, n_units),
        omega_x=rng.uniform(0.2, 3.0, (n_units, n_replicates)),
        omega_y=rng.uniform(0.2, 3.0, (n_units, n_replicates)),
        dof_x=int(rng.integers(*prior.dof_support)),
        dof_y=int(rng.integers(*prior.dof_support)),
        p=float(rng.uniform(0.2, 0.8)),
        v=float(rng.uniform(0.5, 5.0)),
        ig_mean_x=float(rng.uniform(0.2, 0.8) * prior.ig_mean_bound_x),
        ig_var_x=float(rng.uniform(0.2, 0.8) * prior.ig_var_bound_x),
        ig_mean_y=float(rng.uniform(0.2, 0.8) * prior.ig_mean_bound_y),
        ig_var_y=float(rng.uniform(0.2, 0.8) * prior.ig_var_bound_y),
    )


def random_screen(rng: np.random.Generator, n_units: int,
                  n_replicates: int) -> ScreenData:
    return ScreenData(
        x=rng.normal(-1.0, 0.6, (n_units, n_replicates)),
        y=rng.normal(10.0, 1.5, (n_units, n_replicates)),
        units=[UnitInfo(f"u{i:04d}") for i in range(n_units)],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
