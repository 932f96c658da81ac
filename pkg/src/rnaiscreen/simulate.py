"""Synthetic screen generation and method comparison harness.

Three scenario families are bundled: heavy-tailed errors with two replicates
("t2"), constant-variance Gaussian errors ("gauss2"), and the heavy-tailed
family with ten replicates ("t10").  Unit and active counts can be overridden
for desk-scale runs.  Methods are scored by ROC curves and by how well their
posterior FDR tracks the desired FDR.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .inference import pfdr_list, summarize, zscore_baseline
from .model import PriorConfig, ScreenData, UnitInfo, ig_shape_scale
from .sampler import SamplerConfig, gaussian_method_chain, run_chain

DEFAULT_FDR_GRID = tuple(np.round(np.arange(0.01, 0.301, 0.01), 4))

GENES_PER_UNIT_GROUP = 5  # synthetic gene ids group this many constructs


@dataclass(frozen=True)
class Scenario:
    """Generating law for one synthetic screen."""

    name: str
    n_units: int
    n_active: int
    n_replicates: int
    alpha0: float = 12.557
    alpha1: float = 2.538
    beta_low: float = -5.0
    beta_high: float = 3.0
    mu_shape1: float = 6.0
    mu_shape2: float = 2.0
    mu_low: float = -2.77
    mu_high: float = 0.248
    errors: str = "t"  # "t" | "gaussian"
    dof_x: int = 3
    dof_y: int = 3
    sigma2_x_mean: float = 0.1   # IG mean for t errors, fixed value otherwise
    sigma2_x_var: float = 0.01
    sigma2_y_mean: float = 0.5
    sigma2_y_var: float = 0.25

    def validate(self) -> None:
        if not 0 <= self.n_active <= self.n_units:
            raise ConfigError("active count must not exceed the unit count")
        if self.n_replicates < 2:
            raise ConfigError("scenarios need at least two replicates")
        if self.errors not in ("t", "gaussian"):
            raise ConfigError(f"unknown error regime {self.errors!r}")
        for name in ("sigma2_x_mean", "sigma2_x_var",
                     "sigma2_y_mean", "sigma2_y_var"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


_PRESETS = {
    "t2": Scenario("t2", n_units=6130, n_active=100, n_replicates=2),
    "gauss2": Scenario("gauss2", n_units=6130, n_active=100, n_replicates=2,
                       errors="gaussian"),
    "t10": Scenario("t10", n_units=6130, n_active=100, n_replicates=10),
}
_ALIASES = {"s1": "t2", "s2": "gauss2", "s3": "t10"}


def scenario(name: str, n_units: int | None = None, n_active: int | None = None,
             n_replicates: int | None = None) -> Scenario:
    """Look up a preset by name, optionally resized for desk-scale runs."""
    key = _ALIASES.get(name.lower(), name.lower())
    if key not in _PRESETS:
        raise ConfigError(f"unknown scenario {name!r}; "
                          f"choose one of {sorted(_PRESETS)}")
    preset = _PRESETS[key]
    overrides = {}
    if n_units is not None:
        overrides["n_units"] = int(n_units)
    if n_active is not None:
        overrides["n_active"] = int(n_active)
    if n_replicates is not None:
        overrides["n_replicates"] = int(n_replicates)
    return dataclasses.replace(preset, **overrides) if overrides else preset


@dataclass
class SimTruth:
    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray


def generate(scn: Scenario, seed: int) -> tuple[ScreenData, SimTruth]:
    """Draw one screen from the scenario law, returning data and truth."""
    scn.validate()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    n, m = scn.n_units, scn.n_replicates
    gamma = np.zeros(n, dtype=np.int64)
    gamma[:scn.n_active] = 1
    beta = np.where(gamma == 1, rng.uniform(scn.beta_low, scn.beta_high, n), 0.0)
    mu = scn.mu_low + (scn.mu_high - scn.mu_low) * rng.beta(scn.mu_shape1,
                                                            scn.mu_shape2, n)
    nu = scn.alpha0 + gamma * beta + scn.alpha1 * mu
    if scn.errors == "t":
        shape, scale = ig_shape_scale(scn.sigma2_x_mean, scn.sigma2_x_var)
        sigma2_x = 1.0 / rng.gamma(shape, 1.0 / scale, n)
        shape, scale = ig_shape_scale(scn.sigma2_y_mean, scn.sigma2_y_var)
        sigma2_y = 1.0 / rng.gamma(shape, 1.0 / scale, n)
        x = mu[:, None] + np.sqrt(sigma2_x)[:, None] * rng.standard_t(scn.dof_x, (n, m))
        y = nu[:, None] + np.sqrt(sigma2_y)[:, None] * rng.standard_t(scn.dof_y, (n, m))
    else:
        x = mu[:, None] + np.sqrt(scn.sigma2_x_mean) * rng.standard_normal((n, m))
        y = nu[:, None] + np.sqrt(scn.sigma2_y_mean) * rng.standard_normal((n, m))
    width = len(str(n - 1))
    units = [UnitInfo(unit_id=f"unit{i:0{width}d}",
                      gene=f"gene{i // GENES_PER_UNIT_GROUP:0{width}d}")
             for i in range(n)]
    return ScreenData(x, y, units), SimTruth(gamma=gamma, beta=beta, mu=mu)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

@dataclass
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc(truth, scores) -> RocResult:
    """ROC curve and trapezoid AUC over a score-threshold sweep.

    Tied scores move along the curve together, which averages their
    contribution.
    """
    truth = np.asarray(truth).astype(bool)
    scores = np.asarray(scores, dtype=float)
    if truth.shape != scores.shape:
        raise ContractError("truth and scores must be aligned")
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    hits = truth[order].astype(float)
    boundaries = np.nonzero(np.diff(sorted_scores))[0]
    last = np.append(boundaries, truth.size - 1)
    tpr = np.concatenate(([0.0], np.cumsum(hits)[last] / n_pos))
    fpr = np.concatenate(([0.0], np.cumsum(1.0 - hits)[last] / n_neg))
    auc = float(np.trapezoid(tpr, fpr))
    return RocResult(fpr=fpr, tpr=tpr, thresholds=sorted_scores[last], auc=auc)


def fdr_calibration(truth, scores, desired_grid=DEFAULT_FDR_GRID) -> np.ndarray:
    """(desired, actual) FDR pairs when selecting at each desired rate.

    Selection uses the strict-prefix PFDR rule on the no-change probabilities
    implied by the scores; an empty selection counts as actual FDR zero.
    """
    truth = np.asarray(truth).astype(bool)
    scores = np.asarray(scores, dtype=float)
    if truth.shape != scores.shape:
        raise ContractError("truth and scores must be aligned")
    p = np.clip(1.0 - scores, 0.0, 1.0)
    pairs = []
    for desired in desired_grid:
        selection = pfdr_list(p, rate=float(desired))
        if selection.size == 0:
            actual = 0.0
        else:
            actual = float((~truth[selection.indices]).mean())
        pairs.append((float(desired), actual))
    return np.array(pairs)


def fdr_mean_abs_deviation(pairs: np.ndarray) -> float:
    """Mean |actual - desired| over a calibration curve."""
    pairs = np.asarray(pairs, dtype=float)
    return float(np.abs(pairs[:, 1] - pairs[:, 0]).mean())


# ---------------------------------------------------------------------------
# Method shootout
# ---------------------------------------------------------------------------

@dataclass
class MethodResult:
    method: str
    auc: float
    roc_curve: RocResult
    fdr_curve: np.ndarray | None  # None for methods without posteriors
    fdr_mad: float | None
    runtime_seconds: float
    scores: np.ndarray


@dataclass
class ShootoutResult:
    scenario: Scenario
    seed: int
    results: dict[str, MethodResult]

    def to_text(self) -> str:
        lines = [f"scenario={self.scenario.name} units={self.scenario.n_units} "
                 f"active={self.scenario.n_active} "
                 f"replicates={self.scenario.n_replicates} seed={self.seed}",
                 "empty selections count as actual FDR 0",
                 f"{'method':<10} {'auc':>8} {'fdr_mad':>9} {'seconds':>9}"]
        for name, res in self.results.items():
            mad = f"{res.fdr_mad:.4f}" if res.fdr_mad is not None else "n/a"
            lines.append(f"{name:<10} {res.auc:>8.4f} {mad:>9} "
                         f"{res.runtime_seconds:>9.2f}")
        return "\n".join(lines) + "\n"


def _timed(func):
    start = time.perf_counter()
    value = func()
    return value, time.perf_counter() - start


def method_shootout(scn: Scenario, prior: PriorConfig, config: SamplerConfig,
                    seed: int, methods=("t", "gaussian", "zscore"),
                    fdr_grid=DEFAULT_FDR_GRID) -> ShootoutResult:
    """Generate one dataset and score each requested method on it.

    The Gaussian comparator reuses the posterior mean slab variance from the
    heavy-tailed fit when both run; without a preceding heavy-tailed fit it
    requires ``config.fixed_v``.  The Z-score baseline is scored by absolute
    mean Z and has no FDR-calibration curve because it carries no posterior
    probabilities.
    """
    data, truth = generate(scn, seed)
    fit_seeds = np.random.SeedSequence(int(seed)).spawn(2)
    results: dict[str, MethodResult] = {}
    v_from_t: float | None = None

    def record(name: str, scores: np.ndarray, runtime: float,
               with_fdr: bool) -> None:
        curve = roc(truth.gamma, scores)
        fdr = fdr_calibration(truth.gamma, scores, fdr_grid) if with_fdr else None
        results[name] = MethodResult(
            method=name, auc=curve.auc, roc_curve=curve, fdr_curve=fdr,
            fdr_mad=fdr_mean_abs_deviation(fdr) if fdr is not None else None,
            runtime_seconds=runtime, scores=scores)

    for method in methods:
        if method == "t":
            draws, runtime = _timed(
                lambda: run_chain(data, prior, config, fit_seeds[0]))
            v_from_t = float(draws.traces["v"].mean())
            record("t", summarize(draws).p_change, runtime, with_fdr=True)
        elif method == "gaussian":
            v_const = v_from_t if v_from_t is not None else config.fixed_v
            if v_const is None:
                raise ConfigError("the Gaussian method needs a slab variance: "
                                  "run the t method first or set fixed_v")
            draws, runtime = _timed(
                lambda: gaussian_method_chain(data, prior, config, v_const,
                                              fit_seeds[1]))
            record("gaussian", summarize(draws).p_change, runtime,
                   with_fdr=True)
        elif method == "zscore":
            (_, z_mean), runtime = _timed(lambda: zscore_baseline(data))
            record("zscore", np.abs(z_mean), runtime, with_fdr=False)
        else:
            raise ConfigError(f"unknown method {method!r}")
    return ShootoutResult(scenario=scn, seed=int(seed), results=results)
