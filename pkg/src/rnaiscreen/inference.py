"""Posterior summaries, hit classification, PFDR lists, and checks.

Everything here is pure post-processing over retained draws: per-unit
posterior summaries, control-derived viability ranges and thresholds, ranked
hit lists with posterior false detection rates, an omnibus posterior
predictive check, an experiment-wise Z-score baseline, and cross-run
correlation for prior sensitivity analysis.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataQualityError, DiagnosticError
from .model import ScreenData, UnitInfo
from .sampler import PosteriorDraws, StateSnapshot

ACTIVITY_NONE = "none"
ACTIVITY_DECREASE = "decrease"
ACTIVITY_INCREASE = "increase"
ACTIVITY_INDETERMINATE = "indeterminate"

VIABILITY_BELOW = "below"
VIABILITY_NORMAL = "normal"
VIABILITY_ABOVE = "above"


# ---------------------------------------------------------------------------
# Per-unit summaries
# ---------------------------------------------------------------------------

@dataclass
class UnitSummaries:
    """Posterior quantities per unit.

    ``p_no_change`` is the plain fraction of retained draws with an inactive
    indicator; ``p_no_change_rb`` is the Rao-Blackwellized estimate of the
    same probability (mean conditional indicator probability over retained
    states), which resolves ties among units far below the detection
    threshold.  ``e_beta_given_change`` is NaN wherever no retained draw
    activated the unit; ``beta_defined`` carries that flag explicitly.
    """

    unit_ids: list[str]
    p_no_change: np.ndarray
    e_beta_given_change: np.ndarray
    beta_defined: np.ndarray
    e_mu: np.ndarray
    p_no_change_rb: np.ndarray | None = None

    @property
    def p_change(self) -> np.ndarray:
        return 1.0 - self.p_no_change

    @property
    def p_change_rb(self) -> np.ndarray:
        if self.p_no_change_rb is None:
            return self.p_change
        return 1.0 - self.p_no_change_rb


def summarize(draws: PosteriorDraws) -> UnitSummaries:
    """Reduce a chain's streamed counters to per-unit summaries."""
    if draws.n_kept < 1:
        raise ContractError("no retained draws to summarize")
    n = draws.n_kept
    defined = draws.count_change > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        e_beta = np.where(defined, draws.beta_sum / draws.count_change, np.nan)
    return UnitSummaries(
        unit_ids=list(draws.unit_ids),
        p_no_change=(n - draws.count_change) / n,
        e_beta_given_change=e_beta,
        beta_defined=defined,
        e_mu=draws.mu_sum / n,
        p_no_change_rb=1.0 - draws.prob_change_sum / n,
    )


# ---------------------------------------------------------------------------
# Viability range and hit classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ViabilityRange:
    """Log-scale interval of normal cell viability."""

    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ContractError("viability range must have low < high")


def viability_range(control_mu_means) -> ViabilityRange:
    """Minimal interval containing the supplied control viability means."""
    values = np.asarray(control_mu_means, dtype=float)
    if values.size < 2:
        raise ContractError("viability range needs at least two controls")
    return ViabilityRange(float(values.min()), float(values.max()))


@dataclass(frozen=True)
class HitThresholds:
    """Two-clause activity rule: flag if ``p_no_change`` is small or the
    effect size leaves the interval.

    The shipped defaults were derived from one study's evaluation controls
    and are dataset specific; prefer ``thresholds_from_controls`` whenever
    evaluation controls exist.
    """

    p_threshold: float = 0.7468
    beta_low: float = -0.806
    beta_high: float = 0.392


def thresholds_from_controls(summaries: UnitSummaries,
                             control_mask: np.ndarray) -> HitThresholds:
    """Thresholds at the extremes of the evaluation-control distributions."""
    mask = np.asarray(control_mask, dtype=bool)
    if mask.sum() < 2:
        raise DataQualityError("need at least two evaluation controls")
    p_threshold = 1.0 - float(summaries.p_change[mask].max())
    defined = mask & summaries.beta_defined
    if defined.sum() < 2:
        raise DataQualityError(
            "need at least two controls with a defined effect size")
    betas = summaries.e_beta_given_change[defined]
    return HitThresholds(p_threshold, float(betas.min()), float(betas.max()))


def classify_hits(summaries: UnitSummaries, viability: ViabilityRange,
                  thresholds: HitThresholds) -> tuple[list[str], list[str]]:
    """Activity and viability flag per unit.

    A unit shows activity change when its no-change probability is below the
    threshold or its effect size leaves the interval; the direction comes
    from the sign of the effect size.  Units flagged by the probability
    clause alone with an undefined effect size are marked indeterminate, not
    dropped.
    """
    activity: list[str] = []
    for p, e_beta, defined in zip(summaries.p_no_change,
                                  summaries.e_beta_given_change,
                                  summaries.beta_defined):
        outside = bool(defined) and (e_beta < thresholds.beta_low
                                     or e_beta > thresholds.beta_high)
        if p < thresholds.p_threshold or outside:
            if not defined or e_beta == 0.0:
                activity.append(ACTIVITY_INDETERMINATE)
            else:
                activity.append(ACTIVITY_DECREASE if e_beta < 0
                                else ACTIVITY_INCREASE)
        else:
            activity.append(ACTIVITY_NONE)
    viability_flags = [
        VIABILITY_BELOW if m < viability.low
        else VIABILITY_ABOVE if m > viability.high
        else VIABILITY_NORMAL
        for m in summaries.e_mu
    ]
    return activity, viability_flags


# ---------------------------------------------------------------------------
# PFDR lists
# ---------------------------------------------------------------------------

@dataclass
class PfdrSelection:
    """A ranked selection with its total loss and posterior FDR."""

    indices: np.ndarray   # selected unit indices in rank order
    c_kappa: float        # sum of p over the selection
    pfdr: float           # c_kappa / size, 0 for an empty selection

    @property
    def size(self) -> int:
        return int(self.indices.size)


def _rank_order(p: np.ndarray, tie_break: np.ndarray | None) -> np.ndarray:
    if tie_break is None:
        secondary = np.zeros_like(p)
    else:
        tb = np.asarray(tie_break, dtype=float)
        secondary = np.where(np.isnan(tb), np.inf, -np.abs(tb))
    return np.lexsort((np.arange(p.size), secondary, p))


def pfdr_list(p_values, *, size: int | None = None, rate: float | None = None,
              kappa: float | None = None,
              tie_break=None) -> PfdrSelection:
    """Rank units by their no-change probability and select a list.

    Exactly one selection mode applies: ``size`` keeps the top-k, ``rate``
    keeps the largest prefix whose PFDR stays strictly below the rate, and
    ``kappa`` keeps every unit with probability strictly below the cutoff.
    Ties in p are broken by descending |tie_break|, then by unit order.
    """
    p = np.asarray(p_values, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ContractError("p values must lie in [0, 1]")
    if sum(arg is not None for arg in (size, rate, kappa)) != 1:
        raise ContractError("choose exactly one of size, rate, kappa")
    order = _rank_order(p, tie_break)
    prefix_pfdr = np.cumsum(p[order]) / np.arange(1, p.size + 1)
    if size is not None:
        if size < 0:
            raise ContractError("list size must be nonnegative")
        if size > p.size:
            warnings.warn(f"requested list size {size} clamped to {p.size}")
            size = p.size
        n_sel = size
    elif rate is not None:
        n_sel = int((prefix_pfdr < rate).sum())
    else:
        n_sel = int((p < kappa).sum())
    selected = order[:n_sel]
    c_kappa = float(p[selected].sum())
    return PfdrSelection(indices=selected, c_kappa=c_kappa,
                         pfdr=c_kappa / n_sel if n_sel else 0.0)


# ---------------------------------------------------------------------------
# Hit report
# ---------------------------------------------------------------------------

@dataclass
class HitRow:
    rank: int
    unit_id: str
    gene: str
    kind: str
    role: str
    p_no_change: float
    p_change: float
    e_beta_given_change: float
    e_mu: float
    activity: str
    viability: str
    cumulative_pfdr: float


@dataclass
class HitReport:
    """Every unit ranked by no-change probability, with flags and PFDR."""

    rows: list[HitRow]
    thresholds: HitThresholds
    viability: ViabilityRange

    def fixed_size(self, size: int) -> list[HitRow]:
        return self.rows[:min(size, len(self.rows))]

    def fixed_rate(self, rate: float) -> list[HitRow]:
        keep = 0
        for i, row in enumerate(self.rows):
            if row.cumulative_pfdr < rate:
                keep = i + 1
        # cumulative PFDR is nondecreasing, so the last prefix that
        # satisfies the rate is the maximal one
        return self.rows[:keep]


def gene_rollup(rows: list[HitRow]) -> tuple[dict[str, int], dict[int, int]]:
    """Per-gene unit counts and the multiplicity histogram for a list."""
    per_gene: dict[str, int] = {}
    for row in rows:
        per_gene[row.gene] = per_gene.get(row.gene, 0) + 1
    histogram: dict[int, int] = {}
    for count in per_gene.values():
        histogram[count] = histogram.get(count, 0) + 1
    return per_gene, histogram


def build_hit_report(summaries: UnitSummaries, units: list[UnitInfo],
                     viability: ViabilityRange,
                     thresholds: HitThresholds) -> HitReport:
    activity, viability_flags = classify_hits(summaries, viability, thresholds)
    selection = pfdr_list(summaries.p_no_change, size=len(units),
                          tie_break=summaries.e_beta_given_change)
    prefix = np.cumsum(summaries.p_no_change[selection.indices])
    prefix /= np.arange(1, selection.size + 1)
    rows = []
    for rank, idx in enumerate(selection.indices):
        unit = units[idx]
        rows.append(HitRow(
            rank=rank + 1, unit_id=unit.unit_id, gene=unit.gene,
            kind=unit.kind, role=unit.role,
            p_no_change=float(summaries.p_no_change[idx]),
            p_change=float(summaries.p_change[idx]),
            e_beta_given_change=float(summaries.e_beta_given_change[idx]),
            e_mu=float(summaries.e_mu[idx]),
            activity=activity[idx], viability=viability_flags[idx],
            cumulative_pfdr=float(prefix[rank])))
    return HitReport(rows=rows, thresholds=thresholds, viability=viability)


# ---------------------------------------------------------------------------
# Posterior predictive check
# ---------------------------------------------------------------------------

@dataclass
class PpcResult:
    realized: np.ndarray
    predictive: np.ndarray
    p_value: float
    n_skipped: int


def ppc_discrepancy(x: np.ndarray, y: np.ndarray,
                    snap: StateSnapshot) -> float | None:
    """Omnibus chi-square discrepancy of the data against one draw.

    Returns None when either degrees-of-freedom draw is 2 or less, where the
    marginal error variance in the denominator is undefined.
    """
    if snap.dof_x <= 2 or snap.dof_y <= 2:
        return None
    fitted = snap.alpha0 + (snap.gamma * snap.beta)[:, None] + snap.alpha1 * x
    denom = (snap.alpha1 ** 2 * snap.sigma2_x * snap.dof_x / (snap.dof_x - 2.0)
             + snap.sigma2_y * snap.dof_y / (snap.dof_y - 2.0))
    return float(((y - fitted) ** 2 / denom[:, None]).sum())


def simulate_replicate(snap: StateSnapshot, n_replicates: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Replicate dataset drawn from the measurement model at one draw."""
    shape = (snap.mu.size, n_replicates)
    x = snap.mu[:, None] + np.sqrt(snap.sigma2_x)[:, None] * rng.standard_t(snap.dof_x, shape)
    nu = snap.alpha0 + snap.gamma * snap.beta + snap.alpha1 * snap.mu
    y = nu[:, None] + np.sqrt(snap.sigma2_y)[:, None] * rng.standard_t(snap.dof_y, shape)
    return x, y


def ppc_p_value(realized, predictive) -> float:
    """Fraction of pairs where the predictive discrepancy is at least the
    realized one."""
    realized = np.asarray(realized, dtype=float)
    predictive = np.asarray(predictive, dtype=float)
    if realized.size == 0:
        raise DiagnosticError("no discrepancy pairs to summarize")
    return float((predictive >= realized).mean())


def posterior_predictive_check(draws: PosteriorDraws, data: ScreenData,
                               seed: int = 0,
                               subsample: int | None = None) -> PpcResult:
    """Realized-versus-predictive discrepancy pairs over retained snapshots."""
    if not draws.snapshots:
        raise ContractError(
            "the fit kept no state snapshots; set snapshot_stride")
    snapshots = draws.snapshots
    if subsample is not None:
        snapshots = snapshots[:subsample]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    realized, predictive = [], []
    skipped = 0
    for snap in snapshots:
        observed = ppc_discrepancy(data.x, data.y, snap)
        if observed is None:
            skipped += 1
            continue
        x_rep, y_rep = simulate_replicate(snap, data.n_replicates, rng)
        realized.append(observed)
        predictive.append(ppc_discrepancy(x_rep, y_rep, snap))
    if not realized:
        raise DiagnosticError("every snapshot was skipped (dof <= 2)")
    realized_arr = np.array(realized)
    predictive_arr = np.array(predictive)
    return PpcResult(realized=realized_arr, predictive=predictive_arr,
                     p_value=ppc_p_value(realized_arr, predictive_arr),
                     n_skipped=skipped)


# ---------------------------------------------------------------------------
# Z-score baseline
# ---------------------------------------------------------------------------

def zscore_baseline(data: ScreenData, ddof: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Experiment-wise Z-scores of the activity channel.

    Each replicate column is centered at its median and scaled by its
    standard deviation (sample convention by default); the per-unit score is
    the mean over replicates.
    """
    y = data.y
    medians = np.median(y, axis=0)
    scales = y.std(axis=0, ddof=ddof)
    if np.any(scales == 0):
        raise DataQualityError("a replicate column is constant")
    z = (y - medians) / scales
    return z, z.mean(axis=1)


# ---------------------------------------------------------------------------
# Cross-run comparison
# ---------------------------------------------------------------------------

@dataclass
class RunComparison:
    p_change_correlation: float
    e_beta_correlation: float
    n_beta_common: int


def compare_runs(run_a: UnitSummaries, run_b: UnitSummaries) -> RunComparison:
    """Pearson correlations of the activity summaries from two fits."""
    if run_a.unit_ids != run_b.unit_ids:
        raise ContractError("runs cover different unit sets")
    both = run_a.beta_defined & run_b.beta_defined
    if both.sum() < 3:
        raise ContractError(
            "need at least three units with defined effect sizes in both runs")
    p_corr = float(np.corrcoef(run_a.p_change, run_b.p_change)[0, 1])
    beta_corr = float(np.corrcoef(run_a.e_beta_given_change[both],
                                  run_b.e_beta_given_change[both])[0, 1])
    return RunComparison(p_corr, beta_corr, int(both.sum()))
