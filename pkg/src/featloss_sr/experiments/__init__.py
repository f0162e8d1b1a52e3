"""Experiment orchestration: plans, runs, evaluation, spectra, statistics and the CLI."""
from .plans import ABLATION, BASELINE, ISOLATION, DataConfig, ExperimentPlan, config_hash, tap_label
from .spectrum import artifact_spectrum, band_fraction, gradient_probe
from .stats import PairedTestResult, bonferroni, stat_tests, wilcoxon

__all__ = ["ABLATION", "BASELINE", "ISOLATION", "DataConfig", "ExperimentPlan", "config_hash", "tap_label",
           "artifact_spectrum", "band_fraction", "gradient_probe", "PairedTestResult", "bonferroni",
           "stat_tests", "wilcoxon"]
