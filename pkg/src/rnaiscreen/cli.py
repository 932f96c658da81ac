"""Command-line pipeline: simulate, preprocess, fit, report, evaluate.

Every run writes a manifest of its resolved configuration; a manifest can be
fed back through ``--config`` to reproduce the run bitwise.  Flags beat
config-file values, which beat built-in defaults.  Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import inference, io, preprocess, sampler, simulate
from .errors import ConfigError, ScreenError
from .model import MuPrior, PriorConfig

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


# ---------------------------------------------------------------------------
# Option resolution (flag > config file > default)
# ---------------------------------------------------------------------------

class _Options:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file_values = io.load_config(args.config) if getattr(
            args, "config", None) else {}
        self.resolved: dict[str, object] = {}

    def get(self, name: str, default, cast=str):
        value = getattr(self.args, name, None)
        if value is None and name in self.file_values:
            raw = self.file_values[name]
            value = cast(raw) if cast is not bool else raw.lower() in ("1", "true", "yes")
        if value is None:
            value = default
        self.resolved[name] = value
        return value

    def manifest(self, command: str, extra: dict | None = None) -> dict:
        entries = {"command": command}
        entries.update({k: v for k, v in self.resolved.items() if v is not None})
        if extra:
            entries.update(extra)
        return entries


def _parse_mu_prior(text: str) -> MuPrior:
    parts = text.split(":")
    try:
        if parts[0] == "uniform" and len(parts) == 3:
            return MuPrior.uniform(float(parts[1]), float(parts[2]))
        if parts[0] == "beta" and len(parts) == 5:
            return MuPrior.scaled_beta(float(parts[1]), float(parts[2]),
                                       float(parts[3]), float(parts[4]))
    except ValueError:
        pass
    raise ConfigError(
        f"cannot parse mu prior {text!r}; use uniform:LOW:HIGH or "
        "beta:SHAPE1:SHAPE2:LOW:HIGH")


def _prior_from_options(opts: _Options, prefix: str = "",
                        default_mu: str = "uniform:-3:1") -> PriorConfig:
    ref = PriorConfig.reference()
    def name(field: str) -> str:
        return f"{prefix}{field}"
    return PriorConfig(
        ig_mean_bound_x=opts.get(name("ig_mean_bound_x"), ref.ig_mean_bound_x, float),
        ig_var_bound_x=opts.get(name("ig_var_bound_x"), ref.ig_var_bound_x, float),
        ig_mean_bound_y=opts.get(name("ig_mean_bound_y"), ref.ig_mean_bound_y, float),
        ig_var_bound_y=opts.get(name("ig_var_bound_y"), ref.ig_var_bound_y, float),
        p_shape1=opts.get(name("p_shape1"), ref.p_shape1, float),
        p_shape2=opts.get(name("p_shape2"), ref.p_shape2, float),
        v_shape=opts.get(name("v_shape"), ref.v_shape, float),
        v_scale=opts.get(name("v_scale"), ref.v_scale, float),
        mu_prior=_parse_mu_prior(opts.get(name("mu_prior"), default_mu)),
        dof_support=(1, opts.get(name("dof_max"), 100, int)),
    )


def _sampler_config_from_options(opts: _Options) -> sampler.SamplerConfig:
    snapshot = opts.get("snapshot_stride", 0, int)
    return sampler.SamplerConfig(
        total_iterations=opts.get("iterations", 40_000, int),
        burn_in=opts.get("burn_in", 20_000, int),
        thinning=opts.get("thin", 1, int),
        chain_count=opts.get("chains", 1, int),
        proposal_scale_x=opts.get("proposal_scale_x", 0.25, float),
        proposal_scale_y=opts.get("proposal_scale_y", 0.25, float),
        adapt_proposals=opts.get("adapt", False, bool),
        alpha_joint=not opts.get("alpha_scalar", False, bool),
        init_jitter=opts.get("init_jitter", 0.0, float),
        snapshot_stride=snapshot if snapshot > 0 else None,
    )


def _prior_flags(parser: argparse.ArgumentParser, prefix: str = "") -> None:
    for field in ("ig-mean-bound-x", "ig-var-bound-x", "ig-mean-bound-y",
                  "ig-var-bound-y", "p-shape1", "p-shape2", "v-shape",
                  "v-scale"):
        parser.add_argument(f"--{prefix}{field}", type=float,
                            dest=f"{prefix}{field}".replace("-", "_"))
    parser.add_argument(f"--{prefix}mu-prior",
                        dest=f"{prefix}mu_prior".replace("-", "_"),
                        help="uniform:LOW:HIGH or beta:S1:S2:LOW:HIGH")
    parser.add_argument(f"--{prefix}dof-max", type=int,
                        dest=f"{prefix}dof_max".replace("-", "_"))


def _sampler_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--burn-in", type=int, dest="burn_in")
    parser.add_argument("--thin", type=int)
    parser.add_argument("--chains", type=int)
    parser.add_argument("--proposal-scale-x", type=float, dest="proposal_scale_x")
    parser.add_argument("--proposal-scale-y", type=float, dest="proposal_scale_y")
    parser.add_argument("--adapt", action="store_const", const=True)
    parser.add_argument("--alpha-scalar", action="store_const", const=True,
                        dest="alpha_scalar")
    parser.add_argument("--init-jitter", type=float, dest="init_jitter")
    parser.add_argument("--snapshot-stride", type=int, dest="snapshot_stride")


def _out_dir(opts: _Options) -> Path:
    out = Path(opts.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    opts = _Options(args)
    out = _out_dir(opts)
    scn = simulate.scenario(
        opts.get("scenario", "t2"),
        n_units=opts.get("units", 1000, int),
        n_active=opts.get("active", 50, int),
        n_replicates=opts.get("replicates", None, int))
    seed = opts.get("seed", 0, int)
    data, truth = simulate.generate(scn, seed)
    io.write_screen_file(out / "screen.csv", data)
    io.write_truth_file(out / "truth.csv", truth, data.unit_ids)
    io.write_manifest(out / "manifest.txt", opts.manifest(
        "simulate", {"n_units_out": data.n_units,
                     "replicates": data.n_replicates}))
    print(f"simulated {data.n_units} units x {data.n_replicates} replicates "
          f"({scn.name}, seed {seed}) -> {out}")
    return EXIT_OK


def _cmd_preprocess(args) -> int:
    opts = _Options(args)
    out = _out_dir(opts)
    plates = io.load_plate_file(opts.get("input", None))
    cfg = preprocess.PreprocessConfig(
        control_ratio_threshold=opts.get("control_ratio_threshold", 0.5, float),
        unit_outlier_fraction=opts.get("outlier_fraction", 0.02, float),
        edge_adjust=not opts.get("no_edge_adjust", False, bool),
        edge_per_plate=opts.get("edge_per_plate", False, bool),
        norm_fraction=opts.get("norm_fraction", 0.5, float))
    data, report = preprocess.run_pipeline(plates, cfg)
    io.write_screen_file(out / "screen.csv", data)
    (out / "provenance.txt").write_text(report.to_text())
    io.write_manifest(out / "manifest.txt", opts.manifest(
        "preprocess", {"n_units_out": data.n_units,
                       "n_controls_out": report.n_controls_out}))
    print(f"preprocessed {report.wells_in} wells -> {data.n_units} units "
          f"({report.n_controls_out} controls) -> {out}")
    return EXIT_OK


def _cmd_fit(args) -> int:
    opts = _Options(args)
    out = _out_dir(opts)
    data = io.load_screen_file(opts.get("input", None))
    prior = _prior_from_options(opts)
    config = _sampler_config_from_options(opts)
    method = opts.get("method", "t")
    seed = opts.get("seed", 0, int)
    extra: dict = {}

    if method == "gaussian":
        v_const = opts.get("v_const", None, float)
        if v_const is None:
            raise ConfigError("--v-const is required for the gaussian method")
        chains = [sampler.gaussian_method_chain(data, prior, config, v_const,
                                                child)
                  for child in np.random.SeedSequence(seed).spawn(
                      config.chain_count)]
    elif method == "t":
        chains = sampler.run_chains(data, prior, config, seed)
    else:
        raise ConfigError(f"unknown method {method!r}")

    merged = sampler.merge_draws(chains) if len(chains) > 1 else chains[0]
    summaries = inference.summarize(merged)
    io.write_summaries_file(out / "summaries.csv", summaries, data.units)
    io.write_traces_file(out / "traces.csv", chains)
    if len(chains) > 1:
        table = sampler.rhat_table(chains)
        io.write_rhat_file(out / "rhat.csv", table)
        extra["rhat_max"] = repr(max(table.values()))
    if config.snapshot_stride:
        ppc = inference.posterior_predictive_check(merged, data, seed=seed)
        io.write_ppc_file(out / "ppc.csv", ppc)
        extra["ppc_p_value"] = repr(ppc.p_value)
        extra["ppc_skipped"] = ppc.n_skipped
    extra["accept_rate_x"] = repr(merged.accept_rate_x)
    extra["accept_rate_y"] = repr(merged.accept_rate_y)
    io.write_manifest(out / "manifest.txt", opts.manifest("fit", extra))
    print(f"fit {method} method: {data.n_units} units, "
          f"{config.chain_count} chain(s) x {config.total_iterations} "
          f"iterations -> {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    opts = _Options(args)
    out = _out_dir(opts)
    summaries, units = io.load_summaries_file(opts.get("summaries", None))
    is_control = np.array([u.is_control for u in units])
    norm_mask = is_control & np.array([u.role == "normalization" for u in units])
    eval_mask = is_control & np.array([u.role == "evaluation" for u in units])

    low = opts.get("viability_low", None, float)
    high = opts.get("viability_high", None, float)
    if low is not None and high is not None:
        viability = inference.ViabilityRange(low, high)
    elif norm_mask.sum() >= 2:
        viability = inference.viability_range(summaries.e_mu[norm_mask])
    else:
        raise ConfigError("no normalization controls in the summaries; pass "
                          "--viability-low and --viability-high")

    if opts.get("thresholds_from_controls", False, bool):
        thresholds = inference.thresholds_from_controls(summaries, eval_mask)
    else:
        defaults = inference.HitThresholds()
        thresholds = inference.HitThresholds(
            p_threshold=opts.get("p_threshold", defaults.p_threshold, float),
            beta_low=opts.get("beta_low", defaults.beta_low, float),
            beta_high=opts.get("beta_high", defaults.beta_high, float))

    report = inference.build_hit_report(summaries, units, viability, thresholds)
    io.write_hits_file(out / "hits.csv", report)
    io.write_volcano_file(out / "volcano.csv", summaries)

    lines = [f"viability range: ({viability.low:.4g}, {viability.high:.4g})",
             f"thresholds: p<{thresholds.p_threshold:.4g} or effect outside "
             f"[{thresholds.beta_low:.4g}, {thresholds.beta_high:.4g}] "
             "(threshold defaults are dataset specific; prefer "
             "--thresholds-from-controls)"]
    candidates = [r for r in report.rows
                  if r.viability == inference.VIABILITY_NORMAL
                  and r.activity == opts.get("direction", "decrease")]
    lines.append(f"candidate pool (normal viability, "
                 f"{opts.resolved['direction']}): {len(candidates)}")
    sizes = [int(s) for s in str(opts.get("fix_sizes", "50,100,200,300,400")).split(",")]
    rates = [float(r) for r in str(opts.get("fix_rates", "0.01,0.05,0.1,0.2,0.3")).split(",")]
    lines.append(f"{'mode':<12} {'value':>8} {'shrnas':>7} {'genes':>6} "
                 f"{'pfdr':>8}  multiplicity")
    pool_p = np.array([r.p_no_change for r in candidates])
    pool_beta = np.array([r.e_beta_given_change for r in candidates])
    for size in sizes:
        sel = inference.pfdr_list(pool_p, size=size, tie_break=pool_beta) \
            if candidates else None
        _report_line(lines, "fix_size", size, sel, candidates)
    for rate in rates:
        sel = inference.pfdr_list(pool_p, rate=rate, tie_break=pool_beta) \
            if candidates else None
        _report_line(lines, "fix_rate", rate, sel, candidates)
    (out / "lists.txt").write_text("\n".join(lines) + "\n")

    fix_rate = opts.get("fix_rate", None, float)
    extra = {}
    if fix_rate is not None:
        rows = report.fixed_rate(fix_rate)
        extra["fix_rate_size"] = len(rows)
        extra["fix_rate_pfdr"] = repr(rows[-1].cumulative_pfdr) if rows else "0.0"
    io.write_manifest(out / "manifest.txt", opts.manifest("report", extra))
    print(f"report: {len(report.rows)} units ranked -> {out}")
    return EXIT_OK


def _report_line(lines, mode, value, selection, candidates) -> None:
    if selection is None or selection.size == 0:
        lines.append(f"{mode:<12} {value:>8} {0:>7} {0:>6} {'0.0000':>8}")
        return
    chosen = [candidates[i] for i in selection.indices]
    genes, histogram = inference.gene_rollup(chosen)
    mult = " ".join(f"{k}x{v}" for k, v in sorted(histogram.items(), reverse=True))
    lines.append(f"{mode:<12} {value:>8} {selection.size:>7} {len(genes):>6} "
                 f"{selection.pfdr:>8.4f}  {mult}")


def _cmd_evaluate(args) -> int:
    opts = _Options(args)
    out = _out_dir(opts)
    truth_ids, truth = io.load_truth_file(opts.get("truth", None))
    summaries, _ = io.load_summaries_file(opts.get("summaries", None))
    if truth_ids != summaries.unit_ids:
        raise ConfigError("truth and summaries cover different unit sets")
    scores = summaries.p_change
    curve = simulate.roc(truth.gamma, scores)
    grid_max = opts.get("grid_max", 0.30, float)
    grid_step = opts.get("grid_step", 0.01, float)
    grid = np.round(np.arange(grid_step, grid_max + grid_step / 2, grid_step), 6)
    pairs = simulate.fdr_calibration(truth.gamma, scores, grid)
    io.write_roc_file(out / "roc.csv", curve)
    io.write_fdr_file(out / "fdr.csv", pairs)
    mad = simulate.fdr_mean_abs_deviation(pairs)
    (out / "metrics.txt").write_text(
        f"auc = {curve.auc:.6f}\nfdr_mean_abs_deviation = {mad:.6f}\n")
    io.write_manifest(out / "manifest.txt", opts.manifest(
        "evaluate", {"auc": repr(curve.auc), "fdr_mad": repr(mad)}))
    print(f"auc = {curve.auc:.4f}, fdr deviation = {mad:.4f} -> {out}")
    return EXIT_OK


def _cmd_shootout(args) -> int:
    opts = _Options(args)
    out = _out_dir(opts)
    scn = simulate.scenario(
        opts.get("scenario", "t2"),
        n_units=opts.get("units", 1000, int),
        n_active=opts.get("active", 50, int),
        n_replicates=opts.get("replicates", None, int))
    # simulation fits default to the scenarios' generating level law
    prior = _prior_from_options(opts, default_mu="beta:6:2:-2.77:0.248")
    config = _sampler_config_from_options(opts)
    methods = tuple(opts.get("methods", "t,gaussian,zscore").split(","))
    seed = opts.get("seed", 0, int)
    result = simulate.method_shootout(scn, prior, config, seed, methods)
    for name, res in result.results.items():
        io.write_roc_file(out / f"roc_{name}.csv", res.roc_curve)
        if res.fdr_curve is not None:
            io.write_fdr_file(out / f"fdr_{name}.csv", res.fdr_curve)
    (out / "shootout.txt").write_text(result.to_text())
    io.write_manifest(out / "manifest.txt", opts.manifest(
        "shootout", {f"auc_{n}": repr(r.auc)
                     for n, r in result.results.items()}))
    print(result.to_text(), end="")
    return EXIT_OK


def _cmd_sensitivity(args) -> int:
    opts = _Options(args)
    out = _out_dir(opts)
    data = io.load_screen_file(opts.get("input", None))
    config = _sampler_config_from_options(opts)
    seed = opts.get("seed", 0, int)
    prior_files = [opts.get("prior_a", None), opts.get("prior_b", None)]
    if any(p is None for p in prior_files):
        raise ConfigError("sensitivity needs --prior-a and --prior-b files")
    runs = []
    for child, path in zip(np.random.SeedSequence(seed).spawn(2), prior_files):
        file_opts = _Options(argparse.Namespace(config=path))
        prior = _prior_from_options(file_opts)
        runs.append(inference.summarize(
            sampler.run_chain(data, prior, config, child)))
    comparison = inference.compare_runs(runs[0], runs[1])
    text = (f"p_change correlation = {comparison.p_change_correlation:.6f}\n"
            f"effect size correlation = {comparison.e_beta_correlation:.6f}\n"
            f"units with defined effects in both runs = "
            f"{comparison.n_beta_common}\n")
    (out / "sensitivity.txt").write_text(text)
    io.write_manifest(out / "manifest.txt", opts.manifest(
        "sensitivity",
        {"p_change_correlation": repr(comparison.p_change_correlation),
         "e_beta_correlation": repr(comparison.e_beta_correlation)}))
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rnaiscreen",
        description="Bayesian hit selection for two-channel replicated screens")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="key = value file; flags win")
        p.add_argument("--out", help="output directory (default .)")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="draw a synthetic screen")
    common(p)
    p.add_argument("--scenario", help="t2 | gauss2 | t10 (aliases s1 s2 s3)")
    p.add_argument("--units", type=int)
    p.add_argument("--active", type=int)
    p.add_argument("--replicates", type=int)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("preprocess", help="raw plates to screen data")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--control-ratio-threshold", type=float,
                   dest="control_ratio_threshold")
    p.add_argument("--outlier-fraction", type=float, dest="outlier_fraction")
    p.add_argument("--no-edge-adjust", action="store_const", const=True,
                   dest="no_edge_adjust")
    p.add_argument("--edge-per-plate", action="store_const", const=True,
                   dest="edge_per_plate")
    p.add_argument("--norm-fraction", type=float, dest="norm_fraction")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("fit", help="sample the posterior")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--method", choices=("t", "gaussian"))
    p.add_argument("--v-const", type=float, dest="v_const",
                   help="fixed slab variance for the gaussian method")
    _prior_flags(p)
    _sampler_flags(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("report", help="hit lists with PFDR")
    common(p)
    p.add_argument("--summaries", required=True)
    p.add_argument("--p-threshold", type=float, dest="p_threshold")
    p.add_argument("--beta-low", type=float, dest="beta_low")
    p.add_argument("--beta-high", type=float, dest="beta_high")
    p.add_argument("--thresholds-from-controls", action="store_const",
                   const=True, dest="thresholds_from_controls")
    p.add_argument("--viability-low", type=float, dest="viability_low")
    p.add_argument("--viability-high", type=float, dest="viability_high")
    p.add_argument("--direction", choices=("decrease", "increase"))
    p.add_argument("--fix-rate", type=float, dest="fix_rate")
    p.add_argument("--fix-sizes", dest="fix_sizes")
    p.add_argument("--fix-rates", dest="fix_rates")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("evaluate", help="ROC and FDR calibration vs truth")
    common(p)
    p.add_argument("--truth", required=True)
    p.add_argument("--summaries", required=True)
    p.add_argument("--grid-max", type=float, dest="grid_max")
    p.add_argument("--grid-step", type=float, dest="grid_step")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("shootout", help="compare methods on one scenario")
    common(p)
    p.add_argument("--scenario")
    p.add_argument("--units", type=int)
    p.add_argument("--active", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--methods")
    _prior_flags(p)
    _sampler_flags(p)
    p.set_defaults(func=_cmd_shootout)

    p = sub.add_parser("sensitivity", help="compare two prior choices")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--prior-a", dest="prior_a")
    p.add_argument("--prior-b", dest="prior_b")
    _sampler_flags(p)
    p.set_defaults(func=_cmd_sensitivity)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ScreenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(dispatch())
