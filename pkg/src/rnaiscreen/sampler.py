"""Hybrid Metropolis-within-Gibbs sampler for the screen model.

One sweep updates, in a fixed order, the precision multipliers, the per-unit
variances, the viability levels, the (indicator, effect) pairs with the slab
coefficient integrated out, the regression intercept and slope, the slab
variance, the no-change probability, the degrees of freedom, and finally the
variance-prior hyperparameters by random-walk Metropolis on the log scale.
A per-unit basin-swap move follows the indicator block: it flips the
indicator jointly with matched redraws of the unit's level and scales, which
is what lets units cross between the competing explanations of a large
activity shift.  Every conjugate block is exposed as a pure function
returning the conditional parameters so it can be verified against the joint
density, and the swap move exposes its exact acceptance pieces the same way.

Chains are reproducible: all randomness flows from one counter-based
generator per chain, and units are processed in a canonical order sorted by
unit id, so relabeling or permuting units permutes the output summaries and
nothing else.  Within a sweep the per-unit blocks are exact joint draws of
conditionally independent coordinates, so the vectorized update equals the
sequential one.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, ndtr, ndtri

from .errors import (ConfigError, ContractError, DiagnosticError,
                     EstimationError, InitializationError)
from .model import (ModelState, PriorConfig, ScreenData, UnitInfo,
                    ig_shape_scale, log_joint_density)

_TINY = 1e-300


# ---------------------------------------------------------------------------
# Configuration and outputs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    """Chain length, proposal scales, and fixed-parameter overrides.

    The ``fixed_*`` overrides freeze parts of the model (used by the
    constant-variance Gaussian comparator): blocks whose parameters are fixed
    are skipped entirely.
    """

    total_iterations: int = 40_000
    burn_in: int = 20_000
    thinning: int = 1
    chain_count: int = 1
    proposal_scale_x: float = 0.25
    proposal_scale_y: float = 0.25
    adapt_proposals: bool = False
    alpha_joint: bool = True
    dof_mode: str = "gibbs"  # "gibbs" | "fixed"
    fixed_dof: tuple[int, int] | None = None
    fixed_omega: float | None = None
    fixed_sigma2: tuple[float, float] | None = None
    fixed_v: float | None = None
    init_jitter: float = 0.0
    swap_repeats: int = 1
    line_move_repeats: int = 3
    track_units: tuple[int, ...] = ()
    snapshot_stride: int | None = None

    def validate(self) -> None:
        if self.burn_in >= self.total_iterations:
            raise ConfigError("burn_in must be smaller than total_iterations")
        if self.burn_in < 0 or self.thinning < 1 or self.chain_count < 1:
            raise ConfigError("invalid chain-length configuration")
        if self.swap_repeats < 0 or self.line_move_repeats < 0:
            raise ConfigError("kernel repeat counts must be nonnegative")
        if self.proposal_scale_x <= 0 or self.proposal_scale_y <= 0:
            raise ConfigError("proposal scales must be positive")
        if self.dof_mode not in ("gibbs", "fixed"):
            raise ConfigError(f"unknown dof mode {self.dof_mode!r}")
        if self.snapshot_stride is not None and self.snapshot_stride < 1:
            raise ConfigError("snapshot stride must be >= 1")

    @property
    def n_kept(self) -> int:
        span = self.total_iterations - self.burn_in
        return (span + self.thinning - 1) // self.thinning


@dataclass
class StateSnapshot:
    """Slimmed state retained for posterior predictive checking."""

    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma2_x: np.ndarray
    sigma2_y: np.ndarray
    alpha0: float
    alpha1: float
    dof_x: int
    dof_y: int


TRACE_KEYS = ("alpha0", "alpha1", "p", "v", "dof_x", "dof_y",
              "ig_mean_x", "ig_var_x", "ig_mean_y", "ig_var_y")


@dataclass
class PosteriorDraws:
    """Streamed summaries plus scalar traces of one chain's retained draws."""

    unit_ids: list[str]
    n_kept: int
    count_change: np.ndarray        # retained draws with gamma_i = 1
    prob_change_sum: np.ndarray     # running conditional activity probability
    beta_sum: np.ndarray            # sum of beta_i (zero while inactive)
    beta_sumsq: np.ndarray
    mu_sum: np.ndarray
    mu_sumsq: np.ndarray
    traces: dict[str, np.ndarray]
    tracked: dict[int, dict[str, np.ndarray]]
    snapshots: list[StateSnapshot]
    accept_rate_x: float
    accept_rate_y: float
    seed: str
    config: SamplerConfig

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)


def merge_draws(chains: list[PosteriorDraws]) -> PosteriorDraws:
    """Pool retained draws from several chains of the same fit."""
    first = chains[0]
    for other in chains[1:]:
        if other.unit_ids != first.unit_ids:
            raise ContractError("chains cover different unit sets")
    return PosteriorDraws(
        unit_ids=first.unit_ids,
        n_kept=sum(c.n_kept for c in chains),
        count_change=sum(c.count_change for c in chains),
        prob_change_sum=sum(c.prob_change_sum for c in chains),
        beta_sum=sum(c.beta_sum for c in chains),
        beta_sumsq=sum(c.beta_sumsq for c in chains),
        mu_sum=sum(c.mu_sum for c in chains),
        mu_sumsq=sum(c.mu_sumsq for c in chains),
        traces={k: np.concatenate([c.traces[k] for c in chains])
                for k in first.traces},
        tracked={},
        snapshots=[s for c in chains for s in c.snapshots],
        accept_rate_x=float(np.mean([c.accept_rate_x for c in chains])),
        accept_rate_y=float(np.mean([c.accept_rate_y for c in chains])),
        seed=",".join(c.seed for c in chains),
        config=first.config,
    )


# ---------------------------------------------------------------------------
# Conditional-parameter functions (one per Gibbs block)
# ---------------------------------------------------------------------------

def omega_conditional(residuals: np.ndarray, sigma2: np.ndarray,
                      dof: int) -> tuple[float, np.ndarray]:
    """Gamma (shape, rate) of the precision multipliers given the rest."""
    shape = 0.5 * (dof + 1.0)
    rate = 0.5 * (dof + residuals * residuals / sigma2[:, None])
    return shape, rate


def sigma2_conditional(residuals: np.ndarray, omega: np.ndarray,
                       ig_mean: float, ig_var: float) -> tuple[float, np.ndarray]:
    """Inverse-gamma (shape, scale) of the per-unit variances given the rest."""
    shape0, scale0 = ig_shape_scale(ig_mean, ig_var)
    shape = shape0 + 0.5 * residuals.shape[1]
    scale = scale0 + 0.5 * (omega * residuals * residuals).sum(axis=1)
    return shape, scale


def mu_conditional(data: ScreenData, state: ModelState) -> tuple[np.ndarray, np.ndarray]:
    """Normal (mean, variance) of the viability levels before truncation."""
    px = state.omega_x / state.sigma2_x[:, None]
    py = state.omega_y / state.sigma2_y[:, None]
    prec = px.sum(axis=1) + state.alpha1 ** 2 * py.sum(axis=1)
    shift = data.y - state.alpha0 - (state.gamma * state.beta)[:, None]
    rhs = (px * data.x).sum(axis=1) + state.alpha1 * (py * shift).sum(axis=1)
    return rhs / prec, 1.0 / prec


def gamma_beta_conditional(e: np.ndarray, q: np.ndarray, p: float,
                           v: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Marginal log odds of activity change and the slab conditional.

    ``e`` holds the activity residuals with the change term removed and ``q``
    the matching precisions.  The slab coefficient is integrated out against
    its normal prior, so the returned log odds compare the two indicator
    states directly; the (mean, variance) pair is the normal conditional of
    the effect size when the indicator is one.
    """
    q_total = q.sum(axis=1)
    weighted = (q * e).sum(axis=1)
    post_prec = q_total + 1.0 / v
    post_mean = weighted / post_prec
    with np.errstate(divide="ignore"):
        log_odds = (np.log1p(-p) - np.log(p)
                    - 0.5 * np.log1p(q_total * v)
                    + 0.5 * weighted * weighted / post_prec)
    return log_odds, post_mean, 1.0 / post_prec


def update_gamma_beta(i: int, state: ModelState, data: ScreenData,
                      prior: PriorConfig,
                      rng: np.random.Generator) -> tuple[int, float]:
    """Draw one unit's indicator and effect from their joint conditional.

    The effect is integrated out against its slab for the indicator draw;
    an inactive draw pins the effect to exactly zero.
    """
    e = data.y[i] - state.alpha0 - state.alpha1 * state.mu[i]
    q = state.omega_y[i] / state.sigma2_y[i]
    log_odds, post_mean, post_var = gamma_beta_conditional(
        e[None, :], q[None, :], state.p, state.v)
    with np.errstate(over="ignore"):
        prob_change = float(1.0 / (1.0 + np.exp(-log_odds[0])))
    if rng.random() < prob_change:
        return 1, float(post_mean[0] + np.sqrt(post_var[0]) * rng.standard_normal())
    return 0, 0.0


def alpha_conditional(data: ScreenData, state: ModelState) -> tuple[np.ndarray, np.ndarray]:
    """Bivariate normal (mean, precision matrix) of (alpha0, alpha1)."""
    q = state.omega_y / state.sigma2_y[:, None]
    resid = data.y - (state.gamma * state.beta)[:, None]
    mu_col = state.mu[:, None]
    s_q = q.sum()
    s_qm = (q * mu_col).sum()
    s_qmm = (q * mu_col * mu_col).sum()
    prec = np.array([[s_q + 1.0 / state.v, s_qm],
                     [s_qm, s_qmm + 1.0 / state.v]])
    rhs = np.array([(q * resid).sum(), (q * resid * mu_col).sum()])
    return np.linalg.solve(prec, rhs), prec


def v_conditional(state: ModelState, v_shape: float,
                  v_scale: float) -> tuple[float, float]:
    """Inverse-gamma (shape, scale) of the slab variance given the rest."""
    n_active = int(state.gamma.sum())
    shape = v_shape + 0.5 * (n_active + 2)
    scale = v_scale + 0.5 * (float((state.gamma * state.beta ** 2).sum())
                             + state.alpha0 ** 2 + state.alpha1 ** 2)
    return shape, scale


def p_conditional(n_units: int, n_active: int, p_shape1: float,
                  p_shape2: float) -> tuple[float, float]:
    """Beta parameters of the no-change probability given the indicators."""
    return n_units - n_active + p_shape1, n_active + p_shape2


_DOF_TABLE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _dof_table(support: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    cached = _DOF_TABLE.get(support)
    if cached is None:
        half = 0.5 * np.arange(support[0], support[1] + 1, dtype=float)
        cached = (half, half * np.log(half) - gammaln(half))
        _DOF_TABLE[support] = cached
    return cached


def dof_log_weights(omega: np.ndarray, support: tuple[int, int]) -> np.ndarray:
    """Unnormalized log conditional over the degrees-of-freedom support."""
    half, normalizer = _dof_table(support)
    return (omega.size * normalizer
            + (half - 1.0) * float(np.log(omega).sum())
            - half * float(omega.sum()))


def _log_normal_pdf(z, mean, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (z - mean) ** 2 / var)


def _log_gamma_pdf(z, shape, rate):
    return (shape * np.log(rate) - gammaln(shape)
            + (shape - 1.0) * np.log(z) - rate * z)


def _log_invgamma_pdf(z, shape, scale):
    return (shape * np.log(scale) - gammaln(shape)
            - (shape + 1.0) * np.log(z) - scale / z)


def _truncnorm_logpdf(value, mean, sd, low: float, high: float):
    a = (low - mean) / sd
    b = (high - mean) / sd
    flip = a + b > 0
    mass = ndtr(np.where(flip, -a, b)) - ndtr(np.where(flip, -b, a))
    z = (value - mean) / sd
    return (-0.5 * (np.log(2.0 * np.pi) + z * z) - np.log(sd)
            - np.log(np.maximum(mass, _TINY)))


@dataclass
class SwapProposal:
    """Per-unit joint proposal of the basin-swap move plus its MH pieces."""

    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma2_x: np.ndarray
    sigma2_y: np.ndarray
    omega_x: np.ndarray
    omega_y: np.ndarray
    log_target: np.ndarray   # per-unit joint log-density difference
    log_q_fwd: np.ndarray
    log_q_rev: np.ndarray

    def log_accept(self) -> np.ndarray:
        return self.log_target + self.log_q_rev - self.log_q_fwd


def basin_swap_proposal(data: ScreenData, state: ModelState,
                        prior: PriorConfig,
                        rng: np.random.Generator) -> SwapProposal:
    """Joint flip of each indicator with matched per-unit redraws.

    A large activity shift admits three explanations: a real effect, an
    inflated activity variance with downweighted observations, or a shifted
    viability level whose own channel is downweighted.  Single-block updates
    cross between these basins astronomically slowly.  This move proposes,
    per unit, flipping the indicator together with fresh draws of the
    viability level, both variances, and both multiplier rows, along a fixed
    path of full conditionals (the level proposal uses its own channel only),
    and accepts with the exact Metropolis-Hastings ratio.  Units are
    conditionally independent given the globals, so acceptance is per unit.
    """
    x, y = data.x, data.y
    s = state
    n_units, n_rep = x.shape
    lo, hi = prior.mu_prior.low, prior.mu_prior.high
    shape0_x, scale0_x = ig_shape_scale(s.ig_mean_x, s.ig_var_x)
    shape0_y, scale0_y = ig_shape_scale(s.ig_mean_y, s.ig_var_y)
    sig_shape_x = shape0_x + 0.5 * n_rep
    sig_shape_y = shape0_y + 0.5 * n_rep
    om_shape_x = 0.5 * (s.dof_x + 1.0)
    om_shape_y = 0.5 * (s.dof_y + 1.0)
    gamma_new = 1 - s.gamma

    def mu_from_x(sigma2_x, omega_x):
        prec = (omega_x / sigma2_x[:, None]).sum(axis=1)
        mean = (omega_x * x / sigma2_x[:, None]).sum(axis=1) / prec
        return mean, np.sqrt(1.0 / prec)

    # own-channel proposal at the bulk scale: aims at the plain-level basin
    # even when the unit's current scales are inflated
    mean_mu0 = x.mean(axis=1)
    sd_mu0 = np.full(n_units, np.sqrt(s.ig_mean_x / n_rep))

    def mu_mixture_logpdf(value, mean, sd):
        # three components: current-scale conditional, bulk-scale
        # conditional, and a flat floor.  Without the floor the reverse
        # density of a level far from its own channel underflows and every
        # cross-basin move is rejected; without the bulk-scale component
        # proposals out of an inflated-scale state rarely aim well.
        return np.logaddexp.reduce([
            np.log(0.45) + _truncnorm_logpdf(value, mean, sd, lo, hi),
            np.log(0.45) + _truncnorm_logpdf(value, mean_mu0, sd_mu0, lo, hi),
            np.full(n_units, np.log(0.10) - np.log(hi - lo)),
        ])

    def beta_conditional(mu, sigma2_y, omega_y):
        e = y - s.alpha0 - s.alpha1 * mu[:, None]
        _, pm, pv = gamma_beta_conditional(e, omega_y / sigma2_y[:, None],
                                           s.p, s.v)
        return pm, pv

    # forward path: level, effect, then scales, each given what came before
    mean_mu, sd_mu = mu_from_x(s.sigma2_x, s.omega_x)
    mu_cur_scale = sample_truncated_normal(rng, mean_mu, sd_mu, lo, hi)
    mu_bulk_scale = sample_truncated_normal(rng, mean_mu0, sd_mu0, lo, hi)
    mu_flat = rng.uniform(lo, hi, n_units)
    pick = rng.random(n_units)
    mu_new = np.where(pick < 0.45, mu_cur_scale,
                      np.where(pick < 0.90, mu_bulk_scale, mu_flat))
    log_q_fwd = mu_mixture_logpdf(mu_new, mean_mu, sd_mu)

    pm, pv = beta_conditional(mu_new, s.sigma2_y, s.omega_y)
    beta_draw = pm + np.sqrt(pv) * rng.standard_normal(n_units)
    beta_new = np.where(gamma_new == 1, beta_draw, 0.0)
    log_q_fwd += np.where(gamma_new == 1, _log_normal_pdf(beta_new, pm, pv), 0.0)

    rx_new = x - mu_new[:, None]
    scale_fx = scale0_x + 0.5 * (s.omega_x * rx_new ** 2).sum(axis=1)
    sigma2_x_new = _sample_inverse_gamma(rng, sig_shape_x, scale_fx)
    log_q_fwd += _log_invgamma_pdf(sigma2_x_new, sig_shape_x, scale_fx)
    rate_fx = 0.5 * (s.dof_x + rx_new ** 2 / sigma2_x_new[:, None])
    omega_x_new = rng.gamma(om_shape_x, 1.0 / rate_fx)
    log_q_fwd += _log_gamma_pdf(omega_x_new, om_shape_x, rate_fx).sum(axis=1)

    ry_new = y - s.alpha0 - (gamma_new * beta_new)[:, None] - s.alpha1 * mu_new[:, None]
    scale_fy = scale0_y + 0.5 * (s.omega_y * ry_new ** 2).sum(axis=1)
    sigma2_y_new = _sample_inverse_gamma(rng, sig_shape_y, scale_fy)
    log_q_fwd += _log_invgamma_pdf(sigma2_y_new, sig_shape_y, scale_fy)
    rate_fy = 0.5 * (s.dof_y + ry_new ** 2 / sigma2_y_new[:, None])
    omega_y_new = rng.gamma(om_shape_y, 1.0 / rate_fy)
    log_q_fwd += _log_gamma_pdf(omega_y_new, om_shape_y, rate_fy).sum(axis=1)

    # reverse path: the same template evaluated at the current values
    mean_mu_r, sd_mu_r = mu_from_x(sigma2_x_new, omega_x_new)
    log_q_rev = mu_mixture_logpdf(s.mu, mean_mu_r, sd_mu_r)
    pm_r, pv_r = beta_conditional(s.mu, sigma2_y_new, omega_y_new)
    log_q_rev += np.where(s.gamma == 1, _log_normal_pdf(s.beta, pm_r, pv_r), 0.0)
    rx_cur = x - s.mu[:, None]
    scale_rx = scale0_x + 0.5 * (omega_x_new * rx_cur ** 2).sum(axis=1)
    log_q_rev += _log_invgamma_pdf(s.sigma2_x, sig_shape_x, scale_rx)
    rate_rx = 0.5 * (s.dof_x + rx_cur ** 2 / s.sigma2_x[:, None])
    log_q_rev += _log_gamma_pdf(s.omega_x, om_shape_x, rate_rx).sum(axis=1)
    ry_cur = y - s.alpha0 - (s.gamma * s.beta)[:, None] - s.alpha1 * s.mu[:, None]
    scale_ry = scale0_y + 0.5 * (omega_y_new * ry_cur ** 2).sum(axis=1)
    log_q_rev += _log_invgamma_pdf(s.sigma2_y, sig_shape_y, scale_ry)
    rate_ry = 0.5 * (s.dof_y + ry_cur ** 2 / s.sigma2_y[:, None])
    log_q_rev += _log_gamma_pdf(s.omega_y, om_shape_y, rate_ry).sum(axis=1)

    # exact per-unit difference of the joint log density
    with np.errstate(divide="ignore"):
        prior_flip = np.where(gamma_new == 1,
                              np.log1p(-s.p) - np.log(s.p),
                              np.log(s.p) - np.log1p(-s.p))
    log_target = (
        (_log_normal_pdf(rx_new, 0.0, sigma2_x_new[:, None] / omega_x_new)
         - _log_normal_pdf(rx_cur, 0.0, s.sigma2_x[:, None] / s.omega_x)).sum(axis=1)
        + (_log_normal_pdf(ry_new, 0.0, sigma2_y_new[:, None] / omega_y_new)
           - _log_normal_pdf(ry_cur, 0.0, s.sigma2_y[:, None] / s.omega_y)).sum(axis=1)
        + np.where(gamma_new == 1, _log_normal_pdf(beta_new, 0.0, s.v), 0.0)
        - np.where(s.gamma == 1, _log_normal_pdf(s.beta, 0.0, s.v), 0.0)
        + prior_flip
        + prior.mu_prior.log_pdf(mu_new) - prior.mu_prior.log_pdf(s.mu)
        + _log_invgamma_pdf(sigma2_x_new, shape0_x, scale0_x)
        - _log_invgamma_pdf(s.sigma2_x, shape0_x, scale0_x)
        + _log_invgamma_pdf(sigma2_y_new, shape0_y, scale0_y)
        - _log_invgamma_pdf(s.sigma2_y, shape0_y, scale0_y)
        + (_log_gamma_pdf(omega_x_new, 0.5 * s.dof_x, 0.5 * s.dof_x)
           - _log_gamma_pdf(s.omega_x, 0.5 * s.dof_x, 0.5 * s.dof_x)).sum(axis=1)
        + (_log_gamma_pdf(omega_y_new, 0.5 * s.dof_y, 0.5 * s.dof_y)
           - _log_gamma_pdf(s.omega_y, 0.5 * s.dof_y, 0.5 * s.dof_y)).sum(axis=1)
    )
    return SwapProposal(gamma=gamma_new, beta=beta_new, mu=mu_new,
                        sigma2_x=sigma2_x_new, sigma2_y=sigma2_y_new,
                        omega_x=omega_x_new, omega_y=omega_y_new,
                        log_target=log_target, log_q_fwd=log_q_fwd,
                        log_q_rev=log_q_rev)


def ab_log_target(sigma2: np.ndarray, ig_mean: float, ig_var: float,
                  mean_bound: float, var_bound: float) -> float:
    """Metropolis target for one channel's (mean, variance) hyperpair.

    Expressed in the (log mean, log variance) proposal coordinates of the
    uniform-hyperprior model, so the change-of-variables chain from the
    (shape, scale) form of the joint density collapses to log(mean * var).
    """
    if not (0.0 < ig_mean < mean_bound and 0.0 < ig_var < var_bound):
        return -np.inf
    return _ab_target_from_sums(sigma2.size, float(np.log(sigma2).sum()),
                                float((1.0 / sigma2).sum()),
                                ig_mean, ig_var, mean_bound, var_bound)


def _ab_target_from_sums(n: int, sum_log_s2: float, sum_inv_s2: float,
                         ig_mean: float, ig_var: float,
                         mean_bound: float, var_bound: float) -> float:
    if not (0.0 < ig_mean < mean_bound and 0.0 < ig_var < var_bound):
        return -np.inf
    shape, scale = ig_shape_scale(ig_mean, ig_var)
    return (n * (shape * np.log(scale) - gammaln(shape))
            - (shape + 1.0) * sum_log_s2 - scale * sum_inv_s2
            + np.log(ig_mean) + np.log(ig_var))


# ---------------------------------------------------------------------------
# Sampling helpers
# ---------------------------------------------------------------------------

def _sample_inverse_gamma(rng: np.random.Generator, shape, scale) -> np.ndarray:
    return 1.0 / rng.gamma(shape, 1.0 / np.asarray(scale, dtype=float))


def sample_truncated_normal(rng: np.random.Generator, mean, sd, low: float,
                            high: float) -> np.ndarray:
    """Inverse-CDF draw from N(mean, sd^2) restricted to (low, high).

    Intervals deep in a tail are reflected onto the lower tail before the
    inverse CDF is applied, which keeps the transform well conditioned.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    a = (low - mean) / sd
    b = (high - mean) / sd
    flip = a + b > 0
    a_std = np.where(flip, -b, a)
    b_std = np.where(flip, -a, b)
    pa = ndtr(a_std)
    pb = ndtr(b_std)
    u = rng.random(size=np.broadcast(mean, sd).shape)
    t = np.clip(pa + u * (pb - pa), _TINY, 1.0 - 1e-16)
    z = ndtri(t)
    z = np.where(flip, -z, z)
    out = mean + sd * z
    return np.clip(out, np.nextafter(low, high), np.nextafter(high, low))


def _sample_dof(rng: np.random.Generator, omega: np.ndarray,
                support: tuple[int, int]) -> int:
    logw = dof_log_weights(omega, support)
    logw = logw - logw.max()
    probs = np.exp(logw)
    probs /= probs.sum()
    idx = int(np.searchsorted(np.cumsum(probs), rng.random()))
    return support[0] + min(idx, probs.size - 1)


def _line_moves(s: ModelState, data: ScreenData, prior: PriorConfig,
                rng: np.random.Generator) -> None:
    """Group moves along the line/level trade-off, mutating the state.

    The activity fits are invariant under shifting every level with a
    compensating intercept change, and under scaling the level spread with a
    compensating slope change.  Those are the slowest directions of the
    single-site scan, so each sweep proposes both transformations with exact
    Metropolis corrections (only the viability likelihood, the level prior,
    and the slab factors change; the scale map carries a Jacobian).
    """
    x = data.x
    lo, hi = prior.mu_prior.low, prior.mu_prior.high
    n_units = s.mu.size
    precision = s.omega_x / s.sigma2_x[:, None]
    center = 0.5 * (lo + hi)

    # proposal scales from data-only curvature proxies, so the proposals
    # stay symmetric while matching the ridge width at any screen size
    row_var = np.maximum(x.var(axis=1, ddof=1), 1e-8)
    prec0 = 1.0 / float(row_var.mean())
    xbar = x.mean(axis=1)
    shift_scale = 1.0 / np.sqrt(x.size * prec0)
    spread = float(((xbar - center) ** 2).sum()) * x.shape[1] * prec0
    scale_scale = 1.0 / np.sqrt(max(spread, 1.0))

    def x_fit(mu):
        resid = x - mu[:, None]
        return -0.5 * float((precision * resid * resid).sum())

    def extra(mu, alpha0, alpha1):
        prior_term = float(prior.mu_prior.log_pdf(mu).sum())
        slab = -0.5 * (alpha0 * alpha0 + alpha1 * alpha1) / s.v
        return prior_term + slab

    # shift: mu + c against alpha0 - alpha1 * c
    shift = shift_scale * rng.standard_normal()
    mu_new = s.mu + shift
    alpha0_new = s.alpha0 - s.alpha1 * shift
    delta = (x_fit(mu_new) - x_fit(s.mu)
             + extra(mu_new, alpha0_new, s.alpha1)
             - extra(s.mu, s.alpha0, s.alpha1))
    if np.log(rng.random()) < delta:
        s.mu = mu_new
        s.alpha0 = alpha0_new

    # scale: spread the levels around a fixed center against the slope
    log_scale = scale_scale * rng.standard_normal()
    scale = float(np.exp(log_scale))
    mu_new = center + scale * (s.mu - center)
    alpha1_new = s.alpha1 / scale
    alpha0_new = s.alpha0 + (s.alpha1 - alpha1_new) * center
    delta = (x_fit(mu_new) - x_fit(s.mu)
             + extra(mu_new, alpha0_new, alpha1_new)
             - extra(s.mu, s.alpha0, s.alpha1)
             + (n_units - 1) * log_scale)
    if np.log(rng.random()) < delta:
        s.mu = mu_new
        s.alpha0 = alpha0_new
        s.alpha1 = alpha1_new


def _metropolis_ab(rng: np.random.Generator, sigma2: np.ndarray,
                   ig_mean: float, ig_var: float, mean_bound: float,
                   var_bound: float, scale: float) -> tuple[float, float, bool]:
    n = sigma2.size
    sum_log = float(np.log(sigma2).sum())
    sum_inv = float((1.0 / sigma2).sum())
    step = rng.standard_normal(2) * scale
    cand_mean = ig_mean * np.exp(step[0])
    cand_var = ig_var * np.exp(step[1])
    delta = (_ab_target_from_sums(n, sum_log, sum_inv, cand_mean, cand_var,
                                  mean_bound, var_bound)
             - _ab_target_from_sums(n, sum_log, sum_inv, ig_mean, ig_var,
                                    mean_bound, var_bound))
    if np.isfinite(delta) and np.log(rng.random()) < delta:
        return float(cand_mean), float(cand_var), True
    return ig_mean, ig_var, False


# ---------------------------------------------------------------------------
# One Gibbs sweep
# ---------------------------------------------------------------------------

def _sweep(state: ModelState, data: ScreenData, prior: PriorConfig,
           rng: np.random.Generator, config: SamplerConfig,
           scale_x: float, scale_y: float) -> tuple[ModelState, bool, bool]:
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        return _sweep_impl(state, data, prior, rng, config, scale_x, scale_y)


def _sweep_impl(state: ModelState, data: ScreenData, prior: PriorConfig,
                rng: np.random.Generator, config: SamplerConfig,
                scale_x: float, scale_y: float) -> tuple[ModelState, bool, bool]:
    s = state.copy()
    x, y = data.x, data.y
    n_units, n_rep = data.x.shape

    # Precision multipliers.
    if config.fixed_omega is None:
        shape, rate = omega_conditional(x - s.mu[:, None], s.sigma2_x, s.dof_x)
        s.omega_x = rng.gamma(shape, 1.0 / rate)
        shape, rate = omega_conditional(y - s.nu()[:, None], s.sigma2_y, s.dof_y)
        s.omega_y = rng.gamma(shape, 1.0 / rate)

    # Per-unit variances.
    if config.fixed_sigma2 is None:
        shape, scale = sigma2_conditional(x - s.mu[:, None], s.omega_x,
                                          s.ig_mean_x, s.ig_var_x)
        s.sigma2_x = _sample_inverse_gamma(rng, shape, scale)
        shape, scale = sigma2_conditional(y - s.nu()[:, None], s.omega_y,
                                          s.ig_mean_y, s.ig_var_y)
        s.sigma2_y = _sample_inverse_gamma(rng, shape, scale)

    # Viability levels, truncated to the prior support.  Under a non-flat
    # prior the truncated proposal is corrected by an exact prior-ratio
    # Metropolis step.
    mean, var = mu_conditional(data, s)
    sd = np.sqrt(var)
    lo, hi = prior.mu_prior.low, prior.mu_prior.high
    proposal = sample_truncated_normal(rng, mean, sd, lo, hi)
    if prior.mu_prior.kind == "uniform":
        s.mu = proposal
    else:
        log_ratio = (prior.mu_prior.log_pdf(proposal)
                     - prior.mu_prior.log_pdf(s.mu))
        accept = np.log(rng.random(n_units)) < log_ratio
        s.mu = np.where(accept, proposal, s.mu)

    # Indicators and effects, slab integrated out.
    e = y - s.alpha0 - s.alpha1 * s.mu[:, None]
    q = s.omega_y / s.sigma2_y[:, None]
    log_odds, post_mean, post_var = gamma_beta_conditional(e, q, s.p, s.v)
    prob_change = 1.0 / (1.0 + np.exp(-log_odds))
    s.gamma = (rng.random(n_units) < prob_change).astype(np.int64)
    slab_draw = post_mean + np.sqrt(post_var) * rng.standard_normal(n_units)
    s.beta = np.where(s.gamma == 1, slab_draw, 0.0)

    # Basin swap: lets units cross between the real-effect, the
    # inflated-variance, and the shifted-level explanations, which
    # single-site blocks cannot do.
    if config.fixed_omega is None and config.fixed_sigma2 is None:
        for _ in range(config.swap_repeats):
            proposal = basin_swap_proposal(data, s, prior, rng)
            accept = np.log(rng.random(n_units)) < proposal.log_accept()
            s.gamma = np.where(accept, proposal.gamma, s.gamma)
            s.beta = np.where(accept, proposal.beta, s.beta)
            s.mu = np.where(accept, proposal.mu, s.mu)
            s.sigma2_x = np.where(accept, proposal.sigma2_x, s.sigma2_x)
            s.sigma2_y = np.where(accept, proposal.sigma2_y, s.sigma2_y)
            s.omega_x = np.where(accept[:, None], proposal.omega_x, s.omega_x)
            s.omega_y = np.where(accept[:, None], proposal.omega_y, s.omega_y)

    # Intercept and slope.
    if config.alpha_joint:
        mean2, prec = alpha_conditional(data, s)
        chol11 = np.sqrt(prec[0, 0])
        chol21 = prec[1, 0] / chol11
        chol22 = np.sqrt(prec[1, 1] - chol21 * chol21)
        z = rng.standard_normal(2)
        a1 = z[1] / chol22
        a0 = (z[0] - chol21 * a1) / chol11
        s.alpha0 = float(mean2[0] + a0)
        s.alpha1 = float(mean2[1] + a1)
    else:
        q = s.omega_y / s.sigma2_y[:, None]
        base = s.alpha1 * s.mu[:, None] + (s.gamma * s.beta)[:, None]
        prec0 = q.sum() + 1.0 / s.v
        s.alpha0 = float((q * (y - base)).sum() / prec0
                         + rng.standard_normal() / np.sqrt(prec0))
        mu_col = s.mu[:, None]
        resid = y - s.alpha0 - (s.gamma * s.beta)[:, None]
        prec1 = (q * mu_col * mu_col).sum() + 1.0 / s.v
        s.alpha1 = float((q * mu_col * resid).sum() / prec1
                         + rng.standard_normal() / np.sqrt(prec1))

    # Group moves along the line/level trade-off.  Several repeats per
    # sweep: the line must be mobile for assignment lumps to exchange.
    for _ in range(config.line_move_repeats):
        _line_moves(s, data, prior, rng)

    # Slab variance.
    if config.fixed_v is None:
        shape, scale = v_conditional(s, prior.v_shape, prior.v_scale)
        s.v = float(_sample_inverse_gamma(rng, shape, scale))

    # No-change probability.
    b1, b2 = p_conditional(n_units, int(s.gamma.sum()),
                           prior.p_shape1, prior.p_shape2)
    s.p = float(rng.beta(b1, b2))

    # Degrees of freedom.
    if config.dof_mode == "gibbs" and config.fixed_omega is None:
        s.dof_x = _sample_dof(rng, s.omega_x, prior.dof_support)
        s.dof_y = _sample_dof(rng, s.omega_y, prior.dof_support)

    # Variance-prior hyperparameters.
    acc_x = acc_y = False
    if config.fixed_sigma2 is None:
        s.ig_mean_x, s.ig_var_x, acc_x = _metropolis_ab(
            rng, s.sigma2_x, s.ig_mean_x, s.ig_var_x,
            prior.ig_mean_bound_x, prior.ig_var_bound_x, scale_x)
        s.ig_mean_y, s.ig_var_y, acc_y = _metropolis_ab(
            rng, s.sigma2_y, s.ig_mean_y, s.ig_var_y,
            prior.ig_mean_bound_y, prior.ig_var_bound_y, scale_y)
    return s, acc_x, acc_y


def gibbs_sweep(state: ModelState, data: ScreenData, prior: PriorConfig,
                rng: np.random.Generator,
                config: SamplerConfig | None = None) -> ModelState:
    """One full systematic scan over every unknown; returns the new state."""
    cfg = config if config is not None else SamplerConfig()
    new_state, _, _ = _sweep(state, data, prior, rng, cfg,
                             cfg.proposal_scale_x, cfg.proposal_scale_y)
    return new_state


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _floored_row_variance(values: np.ndarray) -> np.ndarray:
    var = values.var(axis=1, ddof=1)
    positive = var[var > 0]
    floor = 1e-3 * float(np.median(positive)) if positive.size else 1e-6
    return np.maximum(var, max(floor, 1e-12))


def initial_state(data: ScreenData, prior: PriorConfig, config: SamplerConfig,
                  rng: np.random.Generator) -> ModelState:
    """Cheap in-support start: row means, least-squares line, screened slab.

    Units whose robust standardized residual from the least-squares line is
    extreme start with an active indicator.  Starting everything inactive
    leaves the chain in a self-reinforcing no-detection state: with nothing
    active the no-change probability runs to one and the slab variance to
    its prior scale, pricing every single activation out, while the
    heavy-tail machinery absorbs real effects as outliers.
    """
    x, y = data.x, data.y
    n_units, n_rep = x.shape
    lo, hi = prior.mu_prior.low, prior.mu_prior.high
    span = hi - lo
    mu0 = np.clip(x.mean(axis=1), lo + 1e-9 * span, hi - 1e-9 * span)
    xbar, ybar = x.mean(axis=1), y.mean(axis=1)
    var_xbar = float(xbar.var())
    if var_xbar > 0:
        alpha1 = float(np.cov(xbar, ybar, bias=True)[0, 1] / var_xbar)
    else:
        alpha1 = 0.0
    alpha0 = float(ybar.mean() - alpha1 * xbar.mean())

    resid = ybar - alpha0 - alpha1 * xbar
    mad = float(np.median(np.abs(resid - np.median(resid))))
    scale = 1.4826 * mad if mad > 0 else float(resid.std()) or 1.0
    gamma0 = (np.abs(resid) > 3.0 * scale).astype(np.int64)
    beta0 = np.where(gamma0 == 1, resid, 0.0)

    sigma2_x = _floored_row_variance(x)
    sigma2_y = _floored_row_variance(y)
    dof0 = int(np.clip(30, prior.dof_support[0], prior.dof_support[1]))
    p0 = float(np.clip(prior.p_shape1 / (prior.p_shape1 + prior.p_shape2),
                       1e-6, 1.0 - 1e-6))
    v0 = prior.v_scale / (prior.v_shape - 1.0) if prior.v_shape > 1 else prior.v_scale

    def clamp(value: float, bound: float) -> float:
        return float(np.clip(value, 1e-6 * bound, (1.0 - 1e-6) * bound))

    ig_mean_x = clamp(float(sigma2_x.mean()), prior.ig_mean_bound_x)
    ig_var_x = clamp(float(sigma2_x.var(ddof=1)) if n_units > 1 else ig_mean_x ** 2,
                     prior.ig_var_bound_x)
    ig_mean_y = clamp(float(sigma2_y.mean()), prior.ig_mean_bound_y)
    ig_var_y = clamp(float(sigma2_y.var(ddof=1)) if n_units > 1 else ig_mean_y ** 2,
                     prior.ig_var_bound_y)

    if config.init_jitter > 0:
        jit = config.init_jitter
        alpha0 += 0.15 * jit * rng.standard_normal() * (abs(alpha0) + 1.0)
        alpha1 += 0.15 * jit * rng.standard_normal() * (abs(alpha1) + 1.0)
        mu0 = np.clip(mu0 + 0.1 * jit * span * rng.standard_normal(n_units),
                      lo + 1e-9 * span, hi - 1e-9 * span)
        p0 = float(rng.uniform(0.2, 0.98))
        v0 *= float(np.exp(jit * rng.standard_normal()))
        sigma2_x = sigma2_x * np.exp(0.5 * jit * rng.standard_normal(n_units))
        sigma2_y = sigma2_y * np.exp(0.5 * jit * rng.standard_normal(n_units))
        # hyper jitters stay within a factor of ~2: a variance hierarchy
        # started an order of magnitude too tight freezes into a
        # self-consistent corner instead of burning in
        ig_mean_x = clamp(ig_mean_x * np.exp(0.3 * jit * rng.standard_normal()),
                          prior.ig_mean_bound_x)
        ig_var_x = clamp(ig_var_x * np.exp(0.3 * jit * rng.standard_normal()),
                         prior.ig_var_bound_x)
        ig_mean_y = clamp(ig_mean_y * np.exp(0.3 * jit * rng.standard_normal()),
                          prior.ig_mean_bound_y)
        ig_var_y = clamp(ig_var_y * np.exp(0.3 * jit * rng.standard_normal()),
                         prior.ig_var_bound_y)

    state = ModelState(
        gamma=gamma0,
        beta=beta0,
        mu=mu0,
        alpha0=alpha0, alpha1=alpha1,
        sigma2_x=sigma2_x, sigma2_y=sigma2_y,
        omega_x=np.ones((n_units, n_rep)),
        omega_y=np.ones((n_units, n_rep)),
        dof_x=dof0, dof_y=dof0,
        p=p0, v=float(v0),
        ig_mean_x=ig_mean_x, ig_var_x=ig_var_x,
        ig_mean_y=ig_mean_y, ig_var_y=ig_var_y,
    )
    if config.fixed_omega is not None:
        state.omega_x = np.full((n_units, n_rep), float(config.fixed_omega))
        state.omega_y = np.full((n_units, n_rep), float(config.fixed_omega))
    if config.fixed_sigma2 is not None:
        state.sigma2_x = np.full(n_units, float(config.fixed_sigma2[0]))
        state.sigma2_y = np.full(n_units, float(config.fixed_sigma2[1]))
    if config.fixed_v is not None:
        state.v = float(config.fixed_v)
    if config.fixed_dof is not None:
        state.dof_x, state.dof_y = (int(config.fixed_dof[0]),
                                    int(config.fixed_dof[1]))
    return state


# ---------------------------------------------------------------------------
# Chain driver
# ---------------------------------------------------------------------------

def _permuted_data(data: ScreenData, order: np.ndarray) -> ScreenData:
    return ScreenData(x=data.x[order], y=data.y[order],
                      units=[data.units[i] for i in order])


def run_chain(data: ScreenData, prior: PriorConfig, config: SamplerConfig,
              seed) -> PosteriorDraws:
    """Run one chain and stream the retained draws into summaries.

    Fully reproducible from (data, prior, config, seed).  Internally the
    units are processed in sorted unit-id order and all per-unit outputs are
    mapped back, so a fit on row-permuted data returns the identically
    permuted summaries.
    """
    data.validate()
    prior.validate()
    config.validate()

    ids = data.unit_ids
    order = np.array(sorted(range(len(ids)), key=lambda i: ids[i]), dtype=np.int64)
    inverse = np.argsort(order)
    canon = _permuted_data(data, order)
    canon_track = sorted(int(inverse[t]) for t in config.track_units)

    seed_seq = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(int(seed))
    rng = np.random.Generator(np.random.Philox(seed_seq))

    state = initial_state(canon, prior, config, rng)
    if not np.isfinite(log_joint_density(canon, state, prior)):
        raise InitializationError("initial state has non-finite joint density")

    n_units = canon.n_units
    n_kept = config.n_kept
    count_change = np.zeros(n_units, dtype=np.int64)
    prob_change_sum = np.zeros(n_units)
    beta_sum = np.zeros(n_units)
    beta_sumsq = np.zeros(n_units)
    mu_sum = np.zeros(n_units)
    mu_sumsq = np.zeros(n_units)
    traces = {k: np.empty(n_kept) for k in TRACE_KEYS}
    tracked = {u: {"gamma": np.empty(n_kept, dtype=np.int64),
                   "beta": np.empty(n_kept), "mu": np.empty(n_kept)}
               for u in canon_track}
    snapshots: list[StateSnapshot] = []

    scale_x, scale_y = config.proposal_scale_x, config.proposal_scale_y
    acc_x_total = acc_y_total = 0
    window_x = window_y = 0
    kept = 0
    for t in range(config.total_iterations):
        state, acc_x, acc_y = _sweep(state, canon, prior, rng, config,
                                     scale_x, scale_y)
        acc_x_total += acc_x
        acc_y_total += acc_y
        if config.adapt_proposals and t < config.burn_in:
            window_x += acc_x
            window_y += acc_y
            if (t + 1) % 100 == 0:
                scale_x = _tune(scale_x, window_x / 100.0)
                scale_y = _tune(scale_y, window_y / 100.0)
                window_x = window_y = 0
        if t < config.burn_in or (t - config.burn_in) % config.thinning:
            continue
        count_change += state.gamma
        # Rao-Blackwellized activity probability: the conditional indicator
        # probability at the retained state has the same mean as the raw
        # indicator fraction with far less noise at small probabilities.
        e_kept = canon.y - state.alpha0 - state.alpha1 * state.mu[:, None]
        q_kept = state.omega_y / state.sigma2_y[:, None]
        log_odds_kept, _, _ = gamma_beta_conditional(e_kept, q_kept,
                                                     state.p, state.v)
        with np.errstate(over="ignore"):
            prob_change_sum += 1.0 / (1.0 + np.exp(-log_odds_kept))
        beta_sum += state.beta
        beta_sumsq += state.beta ** 2
        mu_sum += state.mu
        mu_sumsq += state.mu ** 2
        for key in TRACE_KEYS:
            traces[key][kept] = float(getattr(state, key))
        for u in canon_track:
            tracked[u]["gamma"][kept] = state.gamma[u]
            tracked[u]["beta"][kept] = state.beta[u]
            tracked[u]["mu"][kept] = state.mu[u]
        if config.snapshot_stride and kept % config.snapshot_stride == 0:
            snapshots.append(StateSnapshot(
                gamma=state.gamma[inverse].copy(), beta=state.beta[inverse].copy(),
                mu=state.mu[inverse].copy(),
                sigma2_x=state.sigma2_x[inverse].copy(),
                sigma2_y=state.sigma2_y[inverse].copy(),
                alpha0=state.alpha0, alpha1=state.alpha1,
                dof_x=state.dof_x, dof_y=state.dof_y))
        kept += 1

    n_updates = config.total_iterations
    return PosteriorDraws(
        unit_ids=ids,
        n_kept=kept,
        count_change=count_change[inverse],
        prob_change_sum=prob_change_sum[inverse],
        beta_sum=beta_sum[inverse],
        beta_sumsq=beta_sumsq[inverse],
        mu_sum=mu_sum[inverse],
        mu_sumsq=mu_sumsq[inverse],
        traces=traces,
        tracked={int(order[u]): tr for u, tr in tracked.items()},
        snapshots=snapshots,
        accept_rate_x=acc_x_total / n_updates,
        accept_rate_y=acc_y_total / n_updates,
        seed=str(seed_seq.entropy),
        config=config,
    )


def _tune(scale: float, rate: float) -> float:
    if rate < 0.20:
        return scale * 0.8
    if rate > 0.50:
        return scale * 1.25
    return scale


def run_chains(data: ScreenData, prior: PriorConfig, config: SamplerConfig,
               seed: int) -> list[PosteriorDraws]:
    """Run ``config.chain_count`` chains with independent substreams."""
    children = np.random.SeedSequence(int(seed)).spawn(config.chain_count)
    return [run_chain(data, prior, config, child) for child in children]


# ---------------------------------------------------------------------------
# Gaussian comparator
# ---------------------------------------------------------------------------

def plug_in_variances(data: ScreenData) -> tuple[float, float]:
    """Pooled within-unit replicate variances, one per channel.

    With two replicates this is the mean over units of half the squared
    replicate difference.
    """
    if data.n_replicates < 2:
        raise EstimationError("plug-in variances need at least two replicates")
    return (float(data.x.var(axis=1, ddof=1).mean()),
            float(data.y.var(axis=1, ddof=1).mean()))


def gaussian_method_chain(data: ScreenData, prior: PriorConfig,
                          config: SamplerConfig, v_constant: float,
                          seed) -> PosteriorDraws:
    """Constant-variance Gaussian comparator.

    Precision multipliers are pinned to one, both channels share a single
    variance fixed at the replicate-based plug-in estimate, and the slab
    variance is fixed at ``v_constant``; only the indicators, effects,
    viability levels, regression line, and no-change probability are sampled.
    """
    s2x, s2y = plug_in_variances(data)
    cfg = dataclasses.replace(
        config, fixed_omega=1.0, fixed_sigma2=(s2x, s2y),
        fixed_v=float(v_constant), dof_mode="fixed", fixed_dof=(30, 30))
    return run_chain(data, prior, cfg, seed)


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------

def gelman_rubin(traces) -> float:
    """Potential scale reduction factor from two or more chains."""
    arrays = [np.asarray(t, dtype=float) for t in traces]
    if len(arrays) < 2:
        raise ContractError("the diagnostic needs at least two chains")
    length = arrays[0].size
    if any(a.size != length for a in arrays) or length < 10:
        raise ContractError("chains must share one retained length >= 10")
    means = np.array([a.mean() for a in arrays])
    variances = np.array([a.var(ddof=1) for a in arrays])
    return gelman_rubin_from_moments(means, variances, length)


def gelman_rubin_from_moments(means, variances, n_draws: int) -> float:
    """Same statistic from per-chain means and variances."""
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    within = float(variances.mean())
    between_over_n = float(means.var(ddof=1))
    if within == 0.0 and between_over_n == 0.0:
        raise DiagnosticError("all chains are constant and identical")
    pooled = (n_draws - 1.0) / n_draws * within + between_over_n
    with np.errstate(divide="ignore"):
        return float(np.sqrt(pooled / within))


def median_effect_unit(chains: list[PosteriorDraws]) -> int:
    """Index of the unit whose pooled |effect size| is the median."""
    count = sum(c.count_change for c in chains)
    total = sum(c.beta_sum for c in chains)
    defined = np.nonzero(count > 0)[0]
    if defined.size == 0:
        raise DiagnosticError("no unit ever drew an active indicator")
    magnitude = np.abs(total[defined] / count[defined])
    return int(defined[np.argsort(magnitude, kind="stable")[defined.size // 2]])


def rhat_table(chains: list[PosteriorDraws]) -> dict[str, float]:
    """Potential scale reduction for the main estimands across chains."""
    if len(chains) < 2:
        raise ContractError("the diagnostic needs at least two chains")
    table: dict[str, float] = {}
    for key in ("alpha0", "alpha1", "p", "v"):
        table[key] = gelman_rubin([c.traces[key] for c in chains])
    unit = median_effect_unit(chains)
    n = chains[0].n_kept
    means = np.array([c.beta_sum[unit] / n for c in chains])
    variances = np.array(
        [max((c.beta_sumsq[unit] - n * m * m) / (n - 1), 0.0)
         for c, m in zip(chains, means)])
    table[f"beta[{chains[0].unit_ids[unit]}]"] = gelman_rubin_from_moments(
        means, variances, n)
    return table


# ---------------------------------------------------------------------------
# Prior simulation and rank-based calibration of the sampler
# ---------------------------------------------------------------------------

def draw_state_from_prior(prior: PriorConfig, n_units: int, n_replicates: int,
                          rng: np.random.Generator) -> ModelState:
    """One exact draw of every unknown from the hierarchical prior."""
    p = float(rng.beta(prior.p_shape1, prior.p_shape2))
    v = float(_sample_inverse_gamma(rng, prior.v_shape, prior.v_scale))
    alpha0 = float(rng.standard_normal() * np.sqrt(v))
    alpha1 = float(rng.standard_normal() * np.sqrt(v))
    gamma = (rng.random(n_units) < 1.0 - p).astype(np.int64)
    beta = np.where(gamma == 1, rng.standard_normal(n_units) * np.sqrt(v), 0.0)
    mu = prior.mu_prior.sample(rng, n_units)
    lo, hi = prior.dof_support
    dof_x = int(rng.integers(lo, hi + 1))
    dof_y = int(rng.integers(lo, hi + 1))
    ig_mean_x = float(rng.uniform(0.0, prior.ig_mean_bound_x))
    ig_var_x = float(rng.uniform(0.0, prior.ig_var_bound_x))
    ig_mean_y = float(rng.uniform(0.0, prior.ig_mean_bound_y))
    ig_var_y = float(rng.uniform(0.0, prior.ig_var_bound_y))
    shape, scale = ig_shape_scale(ig_mean_x, ig_var_x)
    sigma2_x = _sample_inverse_gamma(rng, shape, np.full(n_units, scale))
    shape, scale = ig_shape_scale(ig_mean_y, ig_var_y)
    sigma2_y = _sample_inverse_gamma(rng, shape, np.full(n_units, scale))
    omega_x = rng.gamma(0.5 * dof_x, 2.0 / dof_x, (n_units, n_replicates))
    omega_y = rng.gamma(0.5 * dof_y, 2.0 / dof_y, (n_units, n_replicates))
    return ModelState(gamma=gamma, beta=beta, mu=mu, alpha0=alpha0,
                      alpha1=alpha1, sigma2_x=sigma2_x, sigma2_y=sigma2_y,
                      omega_x=omega_x, omega_y=omega_y, dof_x=dof_x,
                      dof_y=dof_y, p=p, v=v, ig_mean_x=ig_mean_x,
                      ig_var_x=ig_var_x, ig_mean_y=ig_mean_y, ig_var_y=ig_var_y)


def simulate_measurements(state: ModelState,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw one dataset from the measurement model at an exact state."""
    noise_x = rng.standard_normal(state.omega_x.shape)
    noise_y = rng.standard_normal(state.omega_y.shape)
    x = state.mu[:, None] + np.sqrt(state.sigma2_x)[:, None] * noise_x / np.sqrt(state.omega_x)
    y = state.nu()[:, None] + np.sqrt(state.sigma2_y)[:, None] * noise_y / np.sqrt(state.omega_y)
    return x, y


def calibration_ranks(prior: PriorConfig, config: SamplerConfig, n_units: int,
                      n_replicates: int, n_runs: int, seed: int,
                      n_mu_tracked: int = 3,
                      rank_thin: int = 40) -> tuple[dict[str, np.ndarray], int]:
    """Rank statistics of prior draws within their own posterior fits.

    For each run, a full parameter vector is drawn from the prior, a dataset
    is simulated at it, the sampler is run, and the rank of each true value
    within the thinned retained draws is recorded.  A correct sampler makes
    every rank uniform on {0, ..., L}, L being the thinned draw count.
    Returns the per-estimand rank arrays and the number of rank levels L + 1.
    """
    root = np.random.SeedSequence(int(seed))
    pick = np.random.Generator(np.random.Philox(root.spawn(1)[0]))
    mu_idx = sorted(pick.choice(n_units, size=n_mu_tracked, replace=False).tolist())
    cfg = dataclasses.replace(config, track_units=tuple(mu_idx))
    names = ["alpha0", "alpha1", "p", "v"] + [f"mu[{i}]" for i in mu_idx]
    ranks: dict[str, list[int]] = {name: [] for name in names}
    n_levels = 0
    units = [UnitInfo(f"u{i:05d}") for i in range(n_units)]
    for child in root.spawn(n_runs):
        sim_seed, fit_seed = child.spawn(2)
        rng = np.random.Generator(np.random.Philox(sim_seed))
        truth = draw_state_from_prior(prior, n_units, n_replicates, rng)
        x, y = simulate_measurements(truth, rng)
        draws = run_chain(ScreenData(x, y, units), prior, cfg, fit_seed)
        for name in ("alpha0", "alpha1", "p", "v"):
            thin = draws.traces[name][::rank_thin]
            ranks[name].append(int((thin < getattr(truth, name)).sum()))
            n_levels = thin.size + 1
        for i in mu_idx:
            thin = draws.tracked[i]["mu"][::rank_thin]
            ranks[f"mu[{i}]"].append(int((thin < truth.mu[i]).sum()))
    return {k: np.array(v) for k, v in ranks.items()}, n_levels
