"""Command-line pipeline and file-format round trips."""

import csv

import numpy as np
import pytest

from rnaiscreen import io
from rnaiscreen.cli import dispatch
from rnaiscreen.errors import PlateFileError
from rnaiscreen.inference import summarize
from rnaiscreen.model import PriorConfig
from rnaiscreen.sampler import SamplerConfig, run_chain
from rnaiscreen.simulate import SimTruth, generate, scenario

from test_preprocess import make_plate_set


@pytest.fixture
def plate_csv(tmp_path):
    plates = make_plate_set(n_plates=2, noise=1.0, seed=4)
    path = tmp_path / "plates.csv"
    io.write_plate_file(path, plates)
    return path


class TestPlateFile:
    def test_round_trip(self, plate_csv):
        loaded = io.load_plate_file(plate_csv)
        original = make_plate_set(n_plates=2, noise=1.0, seed=4)
        assert len(loaded.wells) == len(original.wells)
        assert loaded.n_rows == original.n_rows
        by_key = {(w.plate, w.row, w.col, w.channel, w.replicate): w
                  for w in loaded.wells}
        for w in original.wells:
            other = by_key[(w.plate, w.row, w.col, w.channel, w.replicate)]
            assert other.value == w.value
            assert other.unit == w.unit

    def test_negative_value_reports_line(self, tmp_path, plate_csv):
        rows = plate_csv.read_text().splitlines()
        parts = rows[5].split(",")
        parts[-1] = "-3.0"
        rows[5] = ",".join(parts)
        bad = tmp_path / "bad.csv"
        bad.write_text("\n".join(rows) + "\n")
        with pytest.raises(PlateFileError, match=":6:"):
            io.load_plate_file(bad)

    def test_malformed_number_reports_line(self, tmp_path, plate_csv):
        rows = plate_csv.read_text().splitlines()
        rows[3] = rows[3].rsplit(",", 1)[0] + ",not-a-number"
        bad = tmp_path / "bad.csv"
        bad.write_text("\n".join(rows) + "\n")
        with pytest.raises(PlateFileError, match=":4:"):
            io.load_plate_file(bad)

    def test_layout_conflict_names_position(self, tmp_path, plate_csv):
        rows = plate_csv.read_text().splitlines()
        header = rows[0].split(",")
        shrna_col = header.index("shrna_id")
        # point one shRNA well at another unit's id
        first = rows[1].split(",")
        second = None
        for i, row in enumerate(rows[2:], start=2):
            parts = row.split(",")
            if parts[shrna_col] and parts[:3] != first[:3]:
                second = i
                break
        parts = rows[second].split(",")
        parts[shrna_col] = first[shrna_col]
        rows[second] = ",".join(parts)
        bad = tmp_path / "bad.csv"
        bad.write_text("\n".join(rows) + "\n")
        with pytest.raises(PlateFileError):
            io.load_plate_file(bad)


class TestScreenRoundTrip:
    def test_simulated_data_round_trips(self, tmp_path):
        data, truth = generate(scenario("t2", n_units=30, n_active=3), seed=9)
        path = tmp_path / "screen.csv"
        io.write_screen_file(path, data)
        loaded = io.load_screen_file(path)
        assert loaded.unit_ids == data.unit_ids
        np.testing.assert_array_equal(loaded.x, data.x)
        np.testing.assert_array_equal(loaded.y, data.y)
        truth_path = tmp_path / "truth.csv"
        io.write_truth_file(truth_path, truth, data.unit_ids)
        ids, loaded_truth = io.load_truth_file(truth_path)
        assert ids == data.unit_ids
        np.testing.assert_array_equal(loaded_truth.gamma, truth.gamma)
        np.testing.assert_array_equal(loaded_truth.beta, truth.beta)

    def test_summaries_round_trip(self, tmp_path, rng):
        data, _ = generate(scenario("t2", n_units=12, n_active=2), seed=9)
        config = SamplerConfig(total_iterations=60, burn_in=30)
        draws = run_chain(data, PriorConfig.reference(12), config, 3)
        summaries = summarize(draws)
        path = tmp_path / "summaries.csv"
        io.write_summaries_file(path, summaries, data.units)
        loaded, units = io.load_summaries_file(path)
        np.testing.assert_array_equal(loaded.p_no_change,
                                      summaries.p_no_change)
        np.testing.assert_array_equal(loaded.beta_defined,
                                      summaries.beta_defined)
        defined = summaries.beta_defined
        np.testing.assert_array_equal(loaded.e_beta_given_change[defined],
                                      summaries.e_beta_given_change[defined])


class TestCommands:
    def test_simulate_deterministic(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            code = dispatch(["simulate", "--scenario", "s1", "--units", "60",
                             "--active", "6", "--seed", "7", "--out",
                             str(out)])
            assert code == 0
        assert (out_a / "screen.csv").read_bytes() == \
            (out_b / "screen.csv").read_bytes()
        assert (out_a / "truth.csv").read_bytes() == \
            (out_b / "truth.csv").read_bytes()

    def test_manifest_rerun_reproduces_bitwise(self, tmp_path):
        out_a = tmp_path / "a"
        assert dispatch(["simulate", "--units", "40", "--active", "4",
                         "--seed", "3", "--out", str(out_a)]) == 0
        out_b = tmp_path / "b"
        assert dispatch(["simulate", "--config",
                         str(out_a / "manifest.txt"), "--out",
                         str(out_b)]) == 0
        assert (out_a / "screen.csv").read_bytes() == \
            (out_b / "screen.csv").read_bytes()

    def test_fit_manifest_rerun_reproduces_bitwise(self, tmp_path):
        sim = tmp_path / "sim"
        assert dispatch(["simulate", "--units", "25", "--active", "3",
                         "--seed", "9", "--out", str(sim)]) == 0
        fit_a, fit_b = tmp_path / "fa", tmp_path / "fb"
        assert dispatch(["fit", "--input", str(sim / "screen.csv"),
                         "--out", str(fit_a), "--iterations", "90",
                         "--burn-in", "45", "--seed", "12"]) == 0
        assert dispatch(["fit", "--config", str(fit_a / "manifest.txt"),
                         "--input", str(sim / "screen.csv"),
                         "--out", str(fit_b)]) == 0
        assert (fit_a / "summaries.csv").read_bytes() == \
            (fit_b / "summaries.csv").read_bytes()
        assert (fit_a / "traces.csv").read_bytes() == \
            (fit_b / "traces.csv").read_bytes()

    def test_preprocess_fit_report_chain(self, tmp_path, plate_csv):
        pre = tmp_path / "pre"
        assert dispatch(["preprocess", "--input", str(plate_csv),
                         "--out", str(pre)]) == 0
        assert (pre / "provenance.txt").exists()
        fit = tmp_path / "fit"
        assert dispatch(["fit", "--input", str(pre / "screen.csv"),
                         "--out", str(fit), "--iterations", "120",
                         "--burn-in", "60", "--seed", "5",
                         "--snapshot-stride", "10",
                         "--mu-prior", "uniform:-1:8"]) == 0
        assert (fit / "summaries.csv").exists()
        assert (fit / "traces.csv").exists()
        assert (fit / "ppc.csv").exists()
        report = tmp_path / "report"
        assert dispatch(["report", "--summaries",
                         str(fit / "summaries.csv"), "--out", str(report),
                         "--fix-rate", "0.05"]) == 0
        hits = list(csv.DictReader(open(report / "hits.csv")))
        assert len(hits) > 0
        pfdr = [float(r["cumulative_pfdr"]) for r in hits]
        assert pfdr == sorted(pfdr)
        manifest = io.load_config(report / "manifest.txt")
        if int(manifest.get("fix_rate_size", 0)) > 0:
            assert float(manifest["fix_rate_pfdr"]) < 0.05

    def test_fit_multichain_writes_rhat(self, tmp_path):
        sim = tmp_path / "sim"
        assert dispatch(["simulate", "--units", "30", "--active", "3",
                         "--seed", "2", "--out", str(sim)]) == 0
        fit = tmp_path / "fit"
        assert dispatch(["fit", "--input", str(sim / "screen.csv"),
                         "--out", str(fit), "--iterations", "80",
                         "--burn-in", "40", "--chains", "3",
                         "--seed", "4"]) == 0
        rows = list(csv.DictReader(open(fit / "rhat.csv")))
        estimands = {r["estimand"] for r in rows}
        assert {"alpha0", "alpha1", "p", "v"} <= estimands
        assert all(np.isfinite(float(r["rhat"])) for r in rows)

    def test_evaluate_outputs_metrics(self, tmp_path):
        sim = tmp_path / "sim"
        assert dispatch(["simulate", "--units", "40", "--active", "8",
                         "--seed", "6", "--out", str(sim)]) == 0
        fit = tmp_path / "fit"
        assert dispatch(["fit", "--input", str(sim / "screen.csv"),
                         "--out", str(fit), "--iterations", "100",
                         "--burn-in", "50", "--seed", "1"]) == 0
        ev = tmp_path / "eval"
        assert dispatch(["evaluate", "--truth", str(sim / "truth.csv"),
                         "--summaries", str(fit / "summaries.csv"),
                         "--out", str(ev)]) == 0
        text = (ev / "metrics.txt").read_text()
        assert "auc" in text
        rows = list(csv.DictReader(open(ev / "fdr.csv")))
        assert all(0 <= float(r["actual"]) <= 1 for r in rows)

    def test_shootout_command(self, tmp_path):
        out = tmp_path / "shoot"
        assert dispatch(["shootout", "--scenario", "t2", "--units", "80",
                         "--active", "8", "--seed", "3", "--iterations",
                         "200", "--burn-in", "100", "--out", str(out),
                         "--methods", "t,zscore"]) == 0
        assert (out / "roc_t.csv").exists()
        assert (out / "roc_zscore.csv").exists()
        assert (out / "shootout.txt").exists()

    def test_sensitivity_command(self, tmp_path):
        sim = tmp_path / "sim"
        assert dispatch(["simulate", "--units", "50", "--active", "8",
                         "--seed", "8", "--out", str(sim)]) == 0
        (tmp_path / "a.cfg").write_text("p_shape1 = 9\np_shape2 = 1\n")
        (tmp_path / "b.cfg").write_text(
            "p_shape1 = 1\np_shape2 = 1\nmu_prior = beta:6:2:-2.77:0.248\n")
        out = tmp_path / "sens"
        assert dispatch(["sensitivity", "--input", str(sim / "screen.csv"),
                         "--prior-a", str(tmp_path / "a.cfg"),
                         "--prior-b", str(tmp_path / "b.cfg"),
                         "--iterations", "300", "--burn-in", "150",
                         "--seed", "2", "--out", str(out)]) == 0
        text = (out / "sensitivity.txt").read_text()
        assert "correlation" in text

    def test_usage_errors_exit_two(self, capsys):
        assert dispatch(["no-such-command"]) == 2
        assert dispatch([]) == 2

    def test_runtime_failure_exit_one(self, tmp_path, capsys):
        assert dispatch(["fit", "--input", str(tmp_path / "missing.csv"),
                         "--out", str(tmp_path)]) == 1
        assert "error" in capsys.readouterr().err
