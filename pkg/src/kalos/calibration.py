"""Data-driven configuration: disagreement sampling, KS separation, the
crossover anchor tau*, metric ranking and bootstrap confidence intervals.

Observed disagreement pools distances between raters on the same image
(signal); expected disagreement pairs raters across different images
(chance). A valid metric separates the two, and the anchor tau* sits where
their densities cross.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Annotation, Dataset, size_class
from .distances import distance
from .stats import kde

PAIRING_MODES = ("all_pairs", "best_match")
STRATA = ("all", "small", "medium", "large")


class CalibrationError(ValueError):
    """Raised when a dataset cannot support the requested sampling."""


@dataclass
class DisagreementSamples:
    observed: np.ndarray
    expected: np.ndarray
    metric: str
    pairing_mode: str = "all_pairs"
    sample_seed: int = 0


@dataclass
class CalibrationResult:
    ks: float
    tau_star: float
    no_crossover: bool
    crossover_candidates: list[float]
    grid: np.ndarray = field(repr=False)
    f_do: np.ndarray = field(repr=False)
    f_de: np.ndarray = field(repr=False)
    n_observed: int = 0
    n_expected: int = 0

    def to_dict(self, include_grid: bool = True) -> dict:
        out = {
            "ks": self.ks,
            "tau_star": self.tau_star,
            "no_crossover": self.no_crossover,
            "crossover_candidates": list(self.crossover_candidates),
            "n_observed": self.n_observed,
            "n_expected": self.n_expected,
        }
        if include_grid:
            out["density_grid"] = {
                "grid": self.grid.tolist(),
                "f_do": self.f_do.tolist(),
                "f_de": self.f_de.tolist(),
            }
        return out


@dataclass
class StratumBootstrap:
    stratum: str
    tau_mean: float | None
    tau_ci: tuple[float, float] | None
    ks_mean: float | None
    ks_ci: tuple[float, float] | None
    iterations: int
    skipped: int

    def to_dict(self) -> dict:
        return {
            "stratum": self.stratum,
            "tau_star_mean": self.tau_mean,
            "tau_star_ci": list(self.tau_ci) if self.tau_ci else None,
            "ks_mean": self.ks_mean,
            "ks_ci": list(self.ks_ci) if self.ks_ci else None,
            "iterations": self.iterations,
            "skipped": self.skipped,
        }


@dataclass
class BootstrapTable:
    strata: list[StratumBootstrap]
    iterations: int
    seed: int

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "seed": self.seed,
                "strata": [s.to_dict() for s in self.strata]}


def _anns_by_rater(anns: tuple[Annotation, ...]) -> dict[str, list[Annotation]]:
    by_rater: dict[str, list[Annotation]] = {}
    for ann in sorted(anns, key=lambda a: a.id):
        by_rater.setdefault(ann.rater_id, []).append(ann)
    return by_rater


def _image_observed(anns: tuple[Annotation, ...], metric: str, mode: str,
                    anchor_filter=None) -> list[float]:
    by_rater = _anns_by_rater(anns)
    raters = sorted(by_rater)
    out: list[float] = []
    if anchor_filter is None and mode == "all_pairs":
        for i, r1 in enumerate(raters):
            for r2 in raters[i + 1:]:
                for a in by_rater[r1]:
                    for b in by_rater[r2]:
                        out.append(distance(a.geometry, b.geometry, metric))
        return out
    # Directed anchor form, used by best-match pairing and size strata.
    for r1 in raters:
        for a in by_rater[r1]:
            if anchor_filter is not None and not anchor_filter(a):
                continue
            for r2 in raters:
                if r2 == r1:
                    continue
                ds = [distance(a.geometry, b.geometry, metric) for b in by_rater[r2]]
                if not ds:
                    continue
                if mode == "best_match":
                    out.append(min(ds))
                else:
                    out.extend(ds)
    return out


def _cross_image(anchor_anns, partner_anns, metric: str, mode: str, anchor_filter=None) -> list[float]:
    partner_by_rater = _anns_by_rater(partner_anns)
    out: list[float] = []
    for a in sorted(anchor_anns, key=lambda x: x.id):
        if anchor_filter is not None and not anchor_filter(a):
            continue
        for r2 in sorted(partner_by_rater):
            if r2 == a.rater_id:
                continue
            ds = [distance(a.geometry, b.geometry, metric) for b in partner_by_rater[r2]]
            if not ds:
                continue
            if mode == "best_match":
                out.append(min(ds))
            else:
                out.extend(ds)
    return out


def sample_observed(d: Dataset, metric: str, mode: str = "all_pairs") -> np.ndarray:
    """Within-image cross-rater distances (the signal distribution)."""
    _check_mode(mode)
    values: list[float] = []
    for image in sorted(d.images, key=lambda im: im.id):
        values.extend(_image_observed(d.annotations_by_image.get(image.id, ()), metric, mode))
    if not values:
        raise CalibrationError("no multi-rater image with comparable annotations (empty signal)")
    return np.asarray(values, dtype=float)


def sample_expected(d: Dataset, metric: str, mode: str = "all_pairs",
                    n_images_per_anchor: int = 1, seed: int = 0) -> np.ndarray:
    """Cross-image cross-rater distances (the chance distribution)."""
    _check_mode(mode)
    images = sorted(d.images, key=lambda im: im.id)
    if len(images) < 2:
        raise CalibrationError("chance model needs at least 2 images")
    rng = np.random.default_rng(seed)
    values: list[float] = []
    ids = [im.id for im in images]
    for i, image in enumerate(images):
        anchor_anns = d.annotations_by_image.get(image.id, ())
        if not anchor_anns:
            continue
        others = ids[:i] + ids[i + 1:]
        take = min(n_images_per_anchor, len(others))
        picks = rng.choice(len(others), size=take, replace=False)
        for pick in picks:
            partner = d.annotations_by_image.get(others[int(pick)], ())
            values.extend(_cross_image(anchor_anns, partner, metric, mode))
    if not values:
        raise CalibrationError("no cross-image cross-rater pairs available (empty chance model)")
    return np.asarray(values, dtype=float)


def _check_mode(mode: str) -> None:
    if mode not in PAIRING_MODES:
        raise CalibrationError(f"unknown pairing mode {mode!r}; expected one of {PAIRING_MODES}")


def ks_statistic(a, b) -> float:
    """Exact two-sample sup-difference of empirical CDFs."""
    xa = np.sort(np.asarray(a, dtype=float))
    xb = np.sort(np.asarray(b, dtype=float))
    if xa.size == 0 or xb.size == 0:
        raise CalibrationError("KS statistic needs two non-empty samples")
    pooled = np.concatenate([xa, xb])
    fa = np.searchsorted(xa, pooled, side="right") / xa.size
    fb = np.searchsorted(xb, pooled, side="right") / xb.size
    return float(np.max(np.abs(fa - fb)))


def _ks_argmax_location(a: np.ndarray, b: np.ndarray) -> float:
    xa, xb = np.sort(a), np.sort(b)
    pooled = np.concatenate([xa, xb])
    fa = np.searchsorted(xa, pooled, side="right") / xa.size
    fb = np.searchsorted(xb, pooled, side="right") / xb.size
    return float(pooled[int(np.argmax(np.abs(fa - fb)))])


def estimate_tau_star(samples: DisagreementSamples, grid_size: int = 1001) -> CalibrationResult:
    """Locate the crossover anchor where the observed density meets the
    expected density; resolved toward the maximum-separation region when
    several crossings exist."""
    obs = np.asarray(samples.observed, dtype=float)
    exp = np.asarray(samples.expected, dtype=float)
    if obs.size < 10 or exp.size < 10:
        raise CalibrationError("need at least 10 observed and 10 expected samples")
    grid = np.linspace(0.0, 1.0, grid_size)
    f_do = kde(obs).evaluate(grid)
    f_de = kde(exp).evaluate(grid)
    diff = f_do - f_de
    # Numerically identical densities must not produce phantom crossings.
    eps = 1e-9 * max(float(np.max(f_do)), float(np.max(f_de)), 1.0)
    diff = np.where(np.abs(diff) < eps, 0.0, diff)
    crossings: list[float] = []
    # Only strict sign changes count; a flat zero difference (identical
    # densities) means there is no crossover to anchor on.
    nonzero = np.flatnonzero(diff)
    for a_idx, b_idx in zip(nonzero[:-1], nonzero[1:]):
        d0, d1 = diff[a_idx], diff[b_idx]
        if d0 * d1 < 0.0:
            if b_idx == a_idx + 1:
                t = d0 / (d0 - d1)
                crossings.append(float(grid[a_idx] + t * (grid[b_idx] - grid[a_idx])))
            else:
                mid = (a_idx + b_idx) // 2
                crossings.append(float(grid[mid]))
    ks = ks_statistic(obs, exp)
    if crossings:
        anchor_loc = _ks_argmax_location(obs, exp)
        tau = min(crossings, key=lambda c: (abs(c - anchor_loc), c))
        no_crossover = False
    else:
        tau = float((np.mean(obs) + np.mean(exp)) / 2.0)
        no_crossover = True
    return CalibrationResult(ks=ks, tau_star=tau, no_crossover=no_crossover,
                             crossover_candidates=crossings, grid=grid, f_do=f_do, f_de=f_de,
                             n_observed=int(obs.size), n_expected=int(exp.size))


@dataclass
class MetricRank:
    metric: str
    ks: float
    tau_star: float
    no_crossover: bool

    def to_dict(self) -> dict:
        return {"metric": self.metric, "ks": self.ks, "tau_star": self.tau_star,
                "no_crossover": self.no_crossover}


def rank_metrics(d: Dataset, metrics: list[str], mode: str = "all_pairs",
                 n_images_per_anchor: int = 1, seed: int = 0,
                 grid_size: int = 1001) -> list[MetricRank]:
    """Per-metric (KS, tau*), sorted by KS separation descending."""
    rows = []
    for metric in metrics:
        obs = sample_observed(d, metric, mode)
        exp = sample_expected(d, metric, mode, n_images_per_anchor, seed)
        result = estimate_tau_star(
            DisagreementSamples(observed=obs, expected=exp, metric=metric,
                                pairing_mode=mode, sample_seed=seed),
            grid_size=grid_size,
        )
        rows.append(MetricRank(metric=metric, ks=result.ks, tau_star=result.tau_star,
                               no_crossover=result.no_crossover))
    rows.sort(key=lambda r: (-r.ks, r.metric))
    return rows


def _percentile_ci(values: np.ndarray) -> tuple[float, float]:
    lo, hi = np.percentile(values, [2.5, 97.5])
    return float(lo), float(hi)


def _bootstrap_groups(groups_obs: list[list[float]], groups_exp: list[list[float]],
                      iterations: int, seed: int, grid_size: int,
                      jobs: int = 1) -> tuple[list[float], list[float], int]:
    from ._parallel import parallel_map

    n = len(groups_obs)

    def one(it: int):
        rng = np.random.default_rng(np.random.SeedSequence([seed, it]))
        idx = rng.integers(0, n, size=n)
        obs = [v for i in idx for v in groups_obs[int(i)]]
        exp = [v for i in idx for v in groups_exp[int(i)]]
        if len(obs) < 10 or len(exp) < 10:
            return None
        res = estimate_tau_star(
            DisagreementSamples(observed=np.asarray(obs), expected=np.asarray(exp), metric=""),
            grid_size=grid_size,
        )
        return res.tau_star, res.ks

    results = parallel_map(one, range(iterations), jobs=jobs)
    taus = [r[0] for r in results if r is not None]
    kss = [r[1] for r in results if r is not None]
    return taus, kss, sum(1 for r in results if r is None)


def _stratum_groups(d: Dataset, metric: str, mode: str, n_images_per_anchor: int,
                    seed: int, stratum: str | None) -> tuple[list[list[float]], list[list[float]]]:
    if stratum is None:
        anchor_filter = None
        directed = None
    else:
        anchor_filter = lambda a: size_class(a, d.images_by_id[a.image_id]) == stratum  # noqa: E731
        directed = anchor_filter
    images = sorted(d.images, key=lambda im: im.id)
    ids = [im.id for im in images]
    rng = np.random.default_rng(seed)
    groups_obs: list[list[float]] = []
    groups_exp: list[list[float]] = []
    for i, image in enumerate(images):
        anns = d.annotations_by_image.get(image.id, ())
        obs = _image_observed(anns, metric, mode, anchor_filter=directed)
        exp: list[float] = []
        if anns and len(ids) > 1:
            others = ids[:i] + ids[i + 1:]
            take = min(n_images_per_anchor, len(others))
            picks = rng.choice(len(others), size=take, replace=False)
            for pick in picks:
                partner = d.annotations_by_image.get(others[int(pick)], ())
                exp.extend(_cross_image(anns, partner, metric, mode, anchor_filter=directed))
        groups_obs.append(obs)
        groups_exp.append(exp)
    return groups_obs, groups_exp


def bootstrap_calibration(source: Dataset | DisagreementSamples, metric: str | None = None,
                          iterations: int = 100, seed: int = 0, stratify: str | None = None,
                          mode: str = "all_pairs", n_images_per_anchor: int = 1,
                          grid_size: int = 1001, jobs: int = 1) -> BootstrapTable:
    """Non-parametric percentile bootstrap of (tau*, KS).

    A ``Dataset`` source resamples images with replacement; raw
    ``DisagreementSamples`` resample the observed/expected values directly
    (each sample its own unit), which is what synthetic sample-level
    fixtures exercise. Iterations are independent given per-iteration
    derived seeds, so ``jobs`` never changes the table.
    """
    strata: list[StratumBootstrap] = []
    if isinstance(source, DisagreementSamples):
        groups_obs = [[float(v)] for v in source.observed]
        groups_exp = [[float(v)] for v in source.expected]
        taus, kss, skipped = _bootstrap_groups(groups_obs, groups_exp, iterations, seed,
                                               grid_size, jobs)
        strata.append(_summarize("all", taus, kss, iterations, skipped))
        return BootstrapTable(strata=strata, iterations=iterations, seed=seed)

    if metric is None:
        raise CalibrationError("a metric is required when bootstrapping a dataset")
    if len(source.images) < 2:
        raise CalibrationError("bootstrap needs at least 2 images")
    wanted = ["all"] if stratify is None else list(STRATA)
    for stratum in wanted:
        key = None if stratum == "all" else stratum
        groups_obs, groups_exp = _stratum_groups(source, metric, mode, n_images_per_anchor, seed, key)
        taus, kss, skipped = _bootstrap_groups(groups_obs, groups_exp, iterations, seed,
                                               grid_size, jobs)
        strata.append(_summarize(stratum, taus, kss, iterations, skipped))
    return BootstrapTable(strata=strata, iterations=iterations, seed=seed)


def _summarize(name: str, taus: list[float], kss: list[float], iterations: int,
               skipped: int) -> StratumBootstrap:
    if not taus:
        return StratumBootstrap(stratum=name, tau_mean=None, tau_ci=None, ks_mean=None,
                                ks_ci=None, iterations=iterations, skipped=skipped)
    taus_arr = np.asarray(taus)
    kss_arr = np.asarray(kss)
    return StratumBootstrap(
        stratum=name,
        tau_mean=float(np.mean(taus_arr)),
        tau_ci=_percentile_ci(taus_arr),
        ks_mean=float(np.mean(kss_arr)),
        ks_ci=_percentile_ci(kss_arr),
        iterations=iterations,
        skipped=skipped,
    )
