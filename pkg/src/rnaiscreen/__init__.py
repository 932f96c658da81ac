"""Bayesian hit selection for two-channel replicated cell-based screens."""

from .model import (ModelState, MuPrior, PriorConfig, ScreenData, UnitInfo,
                    ig_shape_scale, log_conditional_density, log_joint_density)
from .preprocess import PlateSet, PreprocessConfig, Well, run_pipeline
from .sampler import (PosteriorDraws, SamplerConfig, gaussian_method_chain,
                      gelman_rubin, gibbs_sweep, run_chain, run_chains)
from .inference import (HitThresholds, UnitSummaries, ViabilityRange,
                        classify_hits, compare_runs, pfdr_list,
                        posterior_predictive_check, summarize,
                        viability_range, zscore_baseline)
from .simulate import Scenario, fdr_calibration, generate, method_shootout, roc, scenario

__version__ = "0.1.0"
