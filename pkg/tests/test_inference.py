"""Posterior summaries, hit classification, PFDR lists, PPC, baselines."""

import numpy as np
import pytest

from rnaiscreen.errors import ContractError, DataQualityError, DiagnosticError
from rnaiscreen.inference import (HitThresholds, PpcResult, UnitSummaries,
                                  ViabilityRange, build_hit_report,
                                  classify_hits, compare_runs, gene_rollup,
                                  pfdr_list, posterior_predictive_check,
                                  ppc_discrepancy, ppc_p_value, summarize,
                                  thresholds_from_controls, viability_range,
                                  zscore_baseline)
from rnaiscreen.model import ScreenData, UnitInfo
from rnaiscreen.sampler import SamplerConfig, StateSnapshot, run_chain

from conftest import random_screen, toy_prior


def make_summaries(p, e_beta=None, e_mu=None):
    p = np.asarray(p, dtype=float)
    n = p.size
    e_beta = np.full(n, np.nan) if e_beta is None else np.asarray(e_beta, float)
    defined = ~np.isnan(e_beta)
    e_mu = np.zeros(n) if e_mu is None else np.asarray(e_mu, float)
    return UnitSummaries(unit_ids=[f"u{i:03d}" for i in range(n)],
                         p_no_change=p, e_beta_given_change=e_beta,
                         beta_defined=defined, e_mu=e_mu)


class TestSummarize:
    def test_all_inactive(self, rng):
        data = random_screen(rng, 4, 2)
        config = SamplerConfig(total_iterations=30, burn_in=15)
        draws = run_chain(data, toy_prior(), config, 3)
        draws.count_change[:] = 0
        draws.beta_sum[:] = 0.0
        s = summarize(draws)
        assert s.p_no_change[0] == 1.0
        assert not s.beta_defined[0]
        assert np.isnan(s.e_beta_given_change[0])

    def test_direct_averages(self, rng):
        data = random_screen(rng, 1, 2)
        config = SamplerConfig(total_iterations=8, burn_in=4)
        draws = run_chain(data, toy_prior(), config, 3)
        draws.n_kept = 4
        draws.count_change = np.array([2])
        draws.beta_sum = np.array([6.0])  # draws 2 and 4 active
        draws.mu_sum = np.array([2.0])
        s = summarize(draws)
        assert s.p_no_change[0] == 0.5
        assert s.e_beta_given_change[0] == 3.0
        assert s.e_mu[0] == 0.5

    def test_streaming_matches_batch_recomputation(self, rng):
        data = random_screen(rng, 5, 2)
        config = SamplerConfig(total_iterations=240, burn_in=40,
                               track_units=tuple(range(5)))
        draws = run_chain(data, toy_prior(), config, 17)
        s = summarize(draws)
        for unit in range(5):
            gamma = draws.tracked[unit]["gamma"]
            beta = draws.tracked[unit]["beta"]
            mu = draws.tracked[unit]["mu"]
            assert s.p_no_change[unit] == (gamma == 0).sum() / draws.n_kept
            # identical left-to-right accumulation gives bitwise equality
            acc_beta = 0.0
            acc_mu = 0.0
            for b, m in zip(beta, mu):
                acc_beta += b
                acc_mu += m
            if gamma.sum() > 0:
                assert s.e_beta_given_change[unit] == acc_beta / gamma.sum()
            assert s.e_mu[unit] == acc_mu / draws.n_kept


class TestViabilityRange:
    def test_min_max(self):
        interval = viability_range([-0.5, -0.2, -0.3])
        assert (interval.low, interval.high) == (-0.5, -0.2)

    def test_singleton_rejected(self):
        with pytest.raises(ContractError):
            viability_range([-0.5])

    def test_degenerate_interval_rejected(self):
        with pytest.raises(ContractError):
            ViabilityRange(1.0, 1.0)


class TestClassifyHits:
    viability = ViabilityRange(-0.635, -0.007)
    thresholds = HitThresholds()  # p < 0.7468 or effect outside [-0.806, 0.392]

    def test_strong_knockdown_row(self):
        s = make_summaries([1 - 0.993], [-2.323], [-0.657])
        activity, viability = classify_hits(s, self.viability, self.thresholds)
        assert activity == ["decrease"]
        assert viability == ["below"]

    def test_no_change_row(self):
        s = make_summaries([1 - 0.005], [-0.088], [-0.3])
        activity, viability = classify_hits(s, self.viability, self.thresholds)
        assert activity == ["none"]
        assert viability == ["normal"]

    def test_certain_null_with_undefined_effect(self):
        s = make_summaries([1.0], [np.nan], [-0.3])
        activity, _ = classify_hits(s, self.viability, self.thresholds)
        assert activity == ["none"]

    def test_undefined_effect_below_threshold_is_indeterminate(self):
        s = make_summaries([0.1], [np.nan], [-0.3])
        activity, _ = classify_hits(s, self.viability, self.thresholds)
        assert activity == ["indeterminate"]

    def test_effect_clause_alone_fires(self):
        s = make_summaries([0.99], [0.5], [-0.3])
        activity, _ = classify_hits(s, self.viability, self.thresholds)
        assert activity == ["increase"]

    def test_monotone_in_probability_threshold(self, rng):
        n = 60
        s = make_summaries(rng.uniform(0, 1, n), rng.normal(0, 1, n),
                           rng.uniform(-1, 0, n))
        tight, _ = classify_hits(s, self.viability, HitThresholds(0.3, -9, 9))
        loose, _ = classify_hits(s, self.viability, HitThresholds(0.6, -9, 9))
        for a, b in zip(tight, loose):
            if a != "none":
                assert b != "none"

    def test_thresholds_from_controls(self):
        p = np.array([0.9, 0.8, 0.95, 0.2])
        e_beta = np.array([-0.4, 0.25, -0.1, -3.0])
        s = make_summaries(p, e_beta)
        controls = np.array([True, True, True, False])
        thresholds = thresholds_from_controls(s, controls)
        assert thresholds.p_threshold == pytest.approx(1 - 0.2)
        assert thresholds.beta_low == -0.4
        assert thresholds.beta_high == 0.25
        with pytest.raises(DataQualityError):
            thresholds_from_controls(s, np.array([True, False, False, False]))


class TestPfdrList:
    def test_fix_kappa_example(self):
        sel = pfdr_list([0.1, 0.2, 0.3], kappa=0.25)
        assert sel.size == 2
        assert sel.c_kappa == pytest.approx(0.3)
        assert sel.pfdr == pytest.approx(0.15)

    def test_all_zero_probabilities(self):
        sel = pfdr_list([0.0, 0.0, 0.0], size=2)
        assert sel.pfdr == 0.0

    def test_strict_rate_boundary(self):
        sel = pfdr_list([0.04, 0.06], rate=0.05)
        assert sel.size == 1  # prefix of two reaches exactly 0.05

    def test_oversized_request_clamps_with_warning(self):
        with pytest.warns(UserWarning):
            sel = pfdr_list([0.1, 0.2], size=5)
        assert sel.size == 2

    def test_rate_selection_is_maximal(self, rng):
        for _ in range(50):
            p = np.sort(rng.uniform(0, 1, 30))
            rate = float(rng.uniform(0.05, 0.9))
            sel = pfdr_list(p, rate=rate)
            if sel.size < 30:
                bigger = pfdr_list(p, size=sel.size + 1)
                assert bigger.pfdr >= rate
            if sel.size:
                assert sel.pfdr < rate

    def test_prefix_pfdr_monotone(self, rng):
        for _ in range(1000):
            p = rng.uniform(0, 1, int(rng.integers(2, 40)))
            sel = pfdr_list(p, size=p.size)
            prefix = np.cumsum(p[sel.indices]) / np.arange(1, p.size + 1)
            assert np.all(np.diff(prefix) >= -1e-15)

    def test_tie_break_by_effect_size_then_order(self):
        p = np.array([0.2, 0.2, 0.2])
        tie = np.array([0.5, -2.0, np.nan])
        sel = pfdr_list(p, size=3, tie_break=tie)
        assert sel.indices.tolist() == [1, 0, 2]

    def test_every_unit_listed_once(self, rng):
        p = rng.uniform(0, 1, 25)
        sel = pfdr_list(p, size=25)
        assert sorted(sel.indices.tolist()) == list(range(25))


class TestHitReport:
    def test_report_ranks_and_rollup(self):
        p = np.array([0.5, 0.01, 0.2, 0.9])
        e_beta = np.array([-1.2, -2.0, -1.0, 0.1])
        e_mu = np.array([-0.3, -0.3, -0.9, -0.3])
        s = make_summaries(p, e_beta, e_mu)
        units = [UnitInfo("u0", gene="gA"), UnitInfo("u1", gene="gA"),
                 UnitInfo("u2", gene="gB"), UnitInfo("u3", gene="gC")]
        report = build_hit_report(s, units, ViabilityRange(-0.635, -0.007),
                                  HitThresholds())
        assert [r.unit_id for r in report.rows] == ["u1", "u2", "u0", "u3"]
        pfdrs = [r.cumulative_pfdr for r in report.rows]
        assert pfdrs == sorted(pfdrs)
        top = report.fixed_rate(0.2)
        assert [r.unit_id for r in top] == ["u1", "u2"]
        genes, histogram = gene_rollup(report.fixed_size(3))
        assert genes == {"gA": 2, "gB": 1}
        assert histogram == {2: 1, 1: 1}


class TestPpc:
    def _snapshot(self, n=3, dof=5):
        return StateSnapshot(
            gamma=np.zeros(n, dtype=np.int64), beta=np.zeros(n),
            mu=np.linspace(-1, 0, n), sigma2_x=np.full(n, 0.1),
            sigma2_y=np.full(n, 0.5), alpha0=1.0, alpha1=2.0,
            dof_x=dof, dof_y=dof)

    def test_identical_pairs_give_p_value_one(self):
        pairs = np.array([1.0, 2.0, 3.0])
        assert ppc_p_value(pairs, pairs) == 1.0

    def test_low_dof_draw_skipped(self, rng):
        data = random_screen(rng, 3, 2)
        assert ppc_discrepancy(data.x, data.y, self._snapshot(dof=2)) is None

    def test_discrepancy_hand_value(self):
        snap = self._snapshot(n=1, dof=4)
        x = np.array([[0.5, 0.7]])
        y = np.array([[2.2, 2.0]])
        denominator = (snap.alpha1 ** 2 * 0.1 * 4 / 2 + 0.5 * 4 / 2)
        expected = (((2.2 - 1 - 2 * 0.5) ** 2 + (2.0 - 1 - 2 * 0.7) ** 2)
                    / denominator)
        assert ppc_discrepancy(x, y, snap) == pytest.approx(expected)

    def test_requires_snapshots(self, rng):
        data = random_screen(rng, 4, 2)
        config = SamplerConfig(total_iterations=30, burn_in=15)
        draws = run_chain(data, toy_prior(), config, 3)
        with pytest.raises(ContractError):
            posterior_predictive_check(draws, data)

    def test_all_skipped_is_diagnostic_error(self, rng):
        data = random_screen(rng, 4, 2)
        config = SamplerConfig(total_iterations=30, burn_in=15,
                               snapshot_stride=5)
        draws = run_chain(data, toy_prior(), config, 3)
        for snap in draws.snapshots:
            snap.dof_x = 2
        with pytest.raises(DiagnosticError):
            posterior_predictive_check(draws, data)

    def test_pairs_and_p_value_range(self, rng):
        data = random_screen(rng, 10, 2)
        config = SamplerConfig(total_iterations=100, burn_in=40,
                               snapshot_stride=4)
        draws = run_chain(data, toy_prior(), config, 3)
        result = posterior_predictive_check(draws, data, seed=1)
        assert 0.0 <= result.p_value <= 1.0
        assert result.realized.shape == result.predictive.shape
        # invariant under reordering of the pairs
        order = rng.permutation(result.realized.size)
        assert ppc_p_value(result.realized[order],
                           result.predictive[order]) == result.p_value


class TestZscoreBaseline:
    def test_median_rows_score_zero(self):
        y = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0],
                      [4.0, 40.0], [5.0, 50.0]])
        data = ScreenData(np.zeros_like(y), y,
                          [UnitInfo(f"u{i}") for i in range(5)])
        z, z_mean = zscore_baseline(data)
        assert z[2, 0] == 0.0 and z[2, 1] == 0.0
        assert np.median(z[:, 0]) == 0.0

    def test_hand_value_with_sample_std(self):
        y = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0],
                      [4.0, 4.0], [5.0, 5.0]])
        data = ScreenData(np.zeros_like(y), y,
                          [UnitInfo(f"u{i}") for i in range(5)])
        z, z_mean = zscore_baseline(data)
        expected = (5.0 - 3.0) / np.std([1, 2, 3, 4, 5], ddof=1)
        assert z[4, 0] == pytest.approx(expected)
        assert z_mean[4] == pytest.approx(expected)

    def test_constant_column_rejected(self):
        y = np.ones((4, 2))
        data = ScreenData(np.zeros_like(y), y,
                          [UnitInfo(f"u{i}") for i in range(4)])
        with pytest.raises(DataQualityError):
            zscore_baseline(data)


class TestCompareRuns:
    def test_identical_runs_correlate_one(self, rng):
        p = rng.uniform(0, 1, 20)
        e_beta = rng.normal(0, 1, 20)
        a = make_summaries(p, e_beta)
        b = make_summaries(p.copy(), e_beta.copy())
        result = compare_runs(a, b)
        assert result.p_change_correlation == pytest.approx(1.0)
        assert result.e_beta_correlation == pytest.approx(1.0)

    def test_affine_transform_correlates_one(self, rng):
        p = rng.uniform(0, 1, 20)
        e_beta = rng.normal(0, 1, 20)
        a = make_summaries(p, e_beta)
        b = make_summaries(0.5 * p + 0.2, 2.0 * e_beta - 1.0)
        result = compare_runs(a, b)
        assert result.p_change_correlation == pytest.approx(1.0)
        assert result.e_beta_correlation == pytest.approx(1.0)

    def test_too_few_common_defined_units(self, rng):
        p = rng.uniform(0, 1, 5)
        a = make_summaries(p, [1.0, 2.0, np.nan, np.nan, np.nan])
        b = make_summaries(p, [1.0, np.nan, 2.0, np.nan, np.nan])
        with pytest.raises(ContractError):
            compare_runs(a, b)
