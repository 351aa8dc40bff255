"""Estimator-style facades over the functional pipeline.

These follow the scikit-learn convention (constructor holds hyperparameters,
``fit`` learns from data and returns ``self``, learned state lands in
trailing-underscore attributes) so the components compose with generic
tooling via ``get_params`` / ``set_params``.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .calibration import (
    BootstrapTable,
    DisagreementSamples,
    bootstrap_calibration,
    estimate_tau_star,
    rank_metrics,
    sample_expected,
    sample_observed,
)
from .dataset import Dataset, validate_dataset
from .noise.extraction import extract_errors
from .noise.model import fit_noise_model
from .pipeline import PipelineConfig, build_matrices, score_dataset


def check_dataset(d: Dataset) -> Dataset:
    """Input-validation helper shared by every estimator's fit."""
    if not isinstance(d, Dataset):
        raise TypeError(f"expected a Dataset, got {type(d).__name__}")
    report = validate_dataset(d)
    if not report.ok:
        raise ValueError("invalid dataset: " + "; ".join(report.violations[:5]))
    return d


class Calibrator(BaseEstimator):
    """Fits the data-driven configuration (metric ranking, tau*, KS) to a
    dataset; optionally bootstraps confidence intervals."""

    def __init__(self, metrics=("box_iou",), pairing="all_pairs", n_images_per_anchor=1,
                 grid_size=1001, bootstrap=0, stratify=None, seed=0):
        self.metrics = metrics
        self.pairing = pairing
        self.n_images_per_anchor = n_images_per_anchor
        self.grid_size = grid_size
        self.bootstrap = bootstrap
        self.stratify = stratify
        self.seed = seed

    def fit(self, dataset: Dataset, y=None):
        check_dataset(dataset)
        metrics = list(self.metrics)
        self.ranking_ = rank_metrics(dataset, metrics, mode=self.pairing,
                                     n_images_per_anchor=self.n_images_per_anchor,
                                     seed=self.seed, grid_size=self.grid_size)
        self.results_ = {}
        for metric in metrics:
            obs = sample_observed(dataset, metric, self.pairing)
            exp = sample_expected(dataset, metric, self.pairing,
                                  self.n_images_per_anchor, self.seed)
            self.results_[metric] = estimate_tau_star(
                DisagreementSamples(observed=obs, expected=exp, metric=metric,
                                    pairing_mode=self.pairing, sample_seed=self.seed),
                grid_size=self.grid_size)
        best = self.ranking_[0]
        self.best_metric_ = best.metric
        self.tau_star_ = best.tau_star
        self.ks_ = best.ks
        self.bootstrap_: dict[str, BootstrapTable] = {}
        if self.bootstrap:
            for metric in metrics:
                self.bootstrap_[metric] = bootstrap_calibration(
                    dataset, metric, iterations=self.bootstrap, seed=self.seed,
                    stratify=self.stratify, mode=self.pairing,
                    n_images_per_anchor=self.n_images_per_anchor,
                    grid_size=self.grid_size)
        return self


class AgreementScorer(BaseEstimator):
    """Runs the full correspondence -> reliability -> alpha pipeline.

    ``fit`` computes and stores matrices and scores; ``transform`` returns
    the per-image reliability matrices; ``score`` returns the mean alpha.
    """

    def __init__(self, metric="box_iou", tau=0.5, solver="greedy", cost="soft",
                 aggregation="both"):
        self.metric = metric
        self.tau = tau
        self.solver = solver
        self.cost = cost
        self.aggregation = aggregation

    def _config(self) -> PipelineConfig:
        return PipelineConfig(metric=self.metric, tau=self.tau, solver=self.solver,
                              cost=self.cost, aggregation=self.aggregation)

    def fit(self, dataset: Dataset, y=None):
        check_dataset(dataset)
        result = score_dataset(dataset, self._config())
        self.result_ = result
        self.matrices_ = result.matrices
        self.mean_alpha_ = result.mean.mean
        self.global_alpha_ = result.global_value
        self.per_image_ = result.mean.per_image
        return self

    def transform(self, dataset: Dataset):
        check_dataset(dataset)
        return build_matrices(dataset, self._config())

    def score(self, dataset: Dataset, y=None) -> float:
        check_dataset(dataset)
        value = score_dataset(dataset, self._config()).mean.mean
        if value is None:
            raise ValueError("mean alpha is undefined for every image")
        return value


class NoiseModelFitter(BaseEstimator):
    """Extracts the error corpus from a multi-rater dataset and fits the
    dual-layer noise model."""

    def __init__(self, similarity=None, proposals=None, merge_quantile=0.99,
                 sweep_thresholds=(0.5,)):
        self.similarity = similarity
        self.proposals = proposals
        self.merge_quantile = merge_quantile
        self.sweep_thresholds = sweep_thresholds

    def fit(self, dataset: Dataset, y=None):
        check_dataset(dataset)
        corpus, sweep = extract_errors(dataset, tuple(self.sweep_thresholds))
        self.corpus_ = corpus
        self.sweep_ = sweep
        self.model_ = fit_noise_model(corpus, similarity=self.similarity,
                                      proposals=self.proposals,
                                      merge_quantile=self.merge_quantile,
                                      categories=[c.id for c in dataset.categories])
        return self
