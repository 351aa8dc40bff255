import numpy as np
import pytest
from scipy import stats as sps

from kalos.calibration import (
    CalibrationError,
    DisagreementSamples,
    bootstrap_calibration,
    estimate_tau_star,
    ks_statistic,
    rank_metrics,
    sample_expected,
    sample_observed,
)
from kalos.geometry import Box2D

from fixtures import make_dataset


def two_rater_image(boxes_a, boxes_b, image="im1", cats=None):
    anns = []
    for i, b in enumerate(boxes_a):
        cat = cats[0] if cats else "cat_a"
        anns.append((f"{image}:a{i}", image, "r1", cat, b))
    for i, b in enumerate(boxes_b):
        cat = cats[1] if cats else "cat_a"
        anns.append((f"{image}:b{i}", image, "r2", cat, b))
    return anns


class TestSampleObserved:
    def test_identical_single_boxes(self):
        box = Box2D(0.2, 0.2, 0.3, 0.3)
        d = make_dataset(["im1"], ["r1", "r2"], two_rater_image([box], [box]))
        assert sample_observed(d, "box_iou").tolist() == [0.0]

    def test_all_pairs_counts(self):
        d = make_dataset(["im1"], ["r1", "r2"], two_rater_image(
            [Box2D(0.1, 0.1, 0.2, 0.2), Box2D(0.6, 0.6, 0.2, 0.2)],
            [Box2D(0.1, 0.1, 0.2, 0.2)]))
        assert len(sample_observed(d, "box_iou", "all_pairs")) == 2

    def test_best_match_takes_minimum(self):
        target = Box2D(0.1, 0.1, 0.2, 0.2)
        d = make_dataset(["im1"], ["r1", "r2"], two_rater_image(
            [Box2D(0.1, 0.1, 0.2, 0.2), Box2D(0.12, 0.1, 0.2, 0.2)], [target]))
        samples = sample_observed(d, "box_iou", "best_match")
        # r2's single box contributes its best partner (d = 0).
        assert 0.0 in samples.tolist()

    def test_single_rater_errors(self):
        d = make_dataset(["im1"], ["r1"], [("a", "im1", "r1", "cat_a", Box2D(0.1, 0.1, 0.2, 0.2))])
        with pytest.raises(CalibrationError, match="signal"):
            sample_observed(d, "box_iou")


class TestSampleExpected:
    def test_disjoint_cross_image(self):
        anns = [("a", "im1", "r1", "cat_a", Box2D(0.0, 0.0, 0.2, 0.2)),
                ("b", "im2", "r2", "cat_a", Box2D(0.7, 0.7, 0.2, 0.2))]
        d = make_dataset(["im1", "im2"], ["r1", "r2"], anns)
        assert sample_expected(d, "box_iou", seed=0).tolist() == [1.0, 1.0]

    def test_identical_cross_image(self):
        box = Box2D(0.3, 0.3, 0.2, 0.2)
        anns = [("a", "im1", "r1", "cat_a", box), ("b", "im2", "r2", "cat_a", box)]
        d = make_dataset(["im1", "im2"], ["r1", "r2"], anns)
        assert sample_expected(d, "box_iou", seed=0).tolist() == [0.0, 0.0]

    def test_deterministic_for_seed(self):
        rng = np.random.default_rng(0)
        anns = []
        for i in range(6):
            for r in ("r1", "r2"):
                x, y = rng.uniform(0, 0.7, 2)
                anns.append((f"{r}:{i}", f"im{i}", r, "cat_a", Box2D(float(x), float(y), 0.2, 0.2)))
        d = make_dataset([f"im{i}" for i in range(6)], ["r1", "r2"], anns)
        a = sample_expected(d, "box_iou", seed=11, n_images_per_anchor=2)
        b = sample_expected(d, "box_iou", seed=11, n_images_per_anchor=2)
        assert a.tolist() == b.tolist()

    def test_single_image_errors(self):
        d = make_dataset(["im1"], ["r1", "r2"],
                         two_rater_image([Box2D(0.1, 0.1, 0.2, 0.2)], [Box2D(0.1, 0.1, 0.2, 0.2)]))
        with pytest.raises(CalibrationError, match="2 images"):
            sample_expected(d, "box_iou")


class TestKs:
    def test_identical_multisets(self):
        assert ks_statistic([0.1, 0.5, 0.5], [0.5, 0.1, 0.5]) == 0.0

    def test_disjoint_supports(self):
        assert ks_statistic([0.1, 0.2], [0.8, 0.9]) == 1.0

    def test_pooled_cdf_value(self):
        assert ks_statistic([0.1, 0.2, 0.3], [0.2, 0.3, 0.4]) == pytest.approx(1 / 3)

    def test_matches_scipy(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=200)
        b = rng.uniform(size=300) ** 1.5
        assert ks_statistic(a, b) == pytest.approx(sps.ks_2samp(a, b).statistic, abs=1e-12)

    def test_order_and_monotone_rebin_invariance(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=100)
        b = rng.uniform(size=80)
        base = ks_statistic(a, b)
        assert ks_statistic(rng.permutation(a), rng.permutation(b)) == base
        assert ks_statistic(np.sqrt(a), np.sqrt(b)) == pytest.approx(base, abs=1e-12)

    def test_shift_never_decreases_ks(self):
        rng = np.random.default_rng(3)
        a = np.clip(rng.normal(0.3, 0.1, 400), 0, 1)
        b = np.clip(rng.normal(0.4, 0.1, 400), 0, 1)
        base = ks_statistic(a, b)
        for delta in (0.05, 0.1, 0.2, 0.3):
            assert ks_statistic(a, np.clip(b + delta, 0, 1)) >= base - 1e-12


class TestTauStar:
    def samples(self, seed=0, n=1000):
        rng = np.random.default_rng(seed)
        obs = np.clip(rng.normal(0.3, 0.1, n), 0, 1)
        exp = np.clip(rng.normal(0.7, 0.1, n), 0, 1)
        return DisagreementSamples(observed=obs, expected=exp, metric="box_iou")

    def test_symmetric_crossover(self):
        result = estimate_tau_star(self.samples())
        assert result.tau_star == pytest.approx(0.5, abs=0.03)
        assert result.ks > 0.9
        assert not result.no_crossover

    def test_identical_samples_flag_no_crossover(self):
        rng = np.random.default_rng(4)
        obs = rng.uniform(size=200)
        result = estimate_tau_star(DisagreementSamples(observed=obs, expected=obs.copy(),
                                                       metric="box_iou"))
        assert result.no_crossover
        assert result.ks == 0.0

    def test_tau_between_means_when_unique(self):
        for seed in range(5):
            s = self.samples(seed)
            result = estimate_tau_star(s)
            lo = min(s.observed.mean(), s.expected.mean())
            hi = max(s.observed.mean(), s.expected.mean())
            if len(result.crossover_candidates) == 1:
                assert lo <= result.tau_star <= hi

    def test_insufficient_samples(self):
        with pytest.raises(CalibrationError):
            estimate_tau_star(DisagreementSamples(observed=np.array([0.1]),
                                                  expected=np.array([0.9]), metric="box_iou"))


class TestRankMetrics:
    def build(self, seed=5, translate_only=True):
        rng = np.random.default_rng(seed)
        anns = []
        images = [f"im{i}" for i in range(8)]
        for i, im in enumerate(images):
            for k in range(3):
                x, y = rng.uniform(0.1, 0.6, 2)
                box = Box2D(float(x), float(y), 0.2, 0.2)
                anns.append((f"{im}:r1:{k}", im, "r1", "cat_a", box))
                dx, dy = rng.uniform(-0.02, 0.02, 2)
                anns.append((f"{im}:r2:{k}", im, "r2", "cat_a",
                             Box2D(float(x + dx), float(y + dy), 0.2, 0.2)))
        return make_dataset(images, ["r1", "r2"], anns)

    def test_translation_dataset_orders_by_ks(self):
        d = self.build()
        ranked = rank_metrics(d, ["box_iou", "l2_centroid"], seed=0)
        assert {r.metric for r in ranked} == {"box_iou", "l2_centroid"}
        assert ranked[0].ks >= ranked[1].ks > 0.0

    def test_degenerate_metric_ranks_last(self):
        # One shared box everywhere: within-image and cross-image distances
        # coincide, so every metric has KS ~ 0 and ties break by name.
        box = Box2D(0.4, 0.4, 0.2, 0.2)
        images = [f"im{i}" for i in range(12)]
        anns = []
        for im in images:
            anns.append((f"{im}:1", im, "r1", "cat_a", box))
            anns.append((f"{im}:2", im, "r2", "cat_a", box))
        d = make_dataset(images, ["r1", "r2"], anns)
        ranked = rank_metrics(d, ["l2_centroid", "box_iou"], seed=0)
        assert ranked[0].ks == ranked[1].ks == 0.0
        assert [r.metric for r in ranked] == ["box_iou", "l2_centroid"]


class TestBootstrap:
    def test_sample_level_two_gaussian(self):
        rng = np.random.default_rng(6)
        samples = DisagreementSamples(
            observed=np.clip(rng.normal(0.3, 0.1, 1000), 0, 1),
            expected=np.clip(rng.normal(0.7, 0.1, 1000), 0, 1),
            metric="box_iou")
        table = bootstrap_calibration(samples, iterations=100, seed=9)
        row = table.strata[0]
        assert row.tau_ci[0] <= 0.5 <= row.tau_ci[1]
        again = bootstrap_calibration(samples, iterations=100, seed=9)
        assert table.to_dict() == again.to_dict()

    def test_degenerate_dataset_no_crossover_everywhere(self):
        box = Box2D(0.4, 0.4, 0.2, 0.2)
        images = [f"im{i}" for i in range(12)]
        anns = []
        for im in images:
            anns.append((f"{im}:1", im, "r1", "cat_a", box))
            anns.append((f"{im}:2", im, "r2", "cat_a", box))
        d = make_dataset(images, ["r1", "r2"], anns)
        # Identical annotations everywhere: D_o = D_e = {0}, every iteration
        # falls back to the midpoint anchor, so the CI collapses to a point.
        table = bootstrap_calibration(d, "box_iou", iterations=20, seed=0)
        row = table.strata[0]
        assert row.tau_ci[0] == row.tau_ci[1] == row.tau_mean == 0.0

    def test_size_stratified_rows(self):
        rng = np.random.default_rng(7)
        anns = []
        images = [f"im{i}" for i in range(6)]
        for im in images:
            for k, w in enumerate((0.04, 0.1, 0.4)):  # small / medium / large
                x, y = rng.uniform(0.05, 0.5, 2)
                anns.append((f"{im}:r1:{k}", im, "r1", "cat_a", Box2D(float(x), float(y), w, w)))
                anns.append((f"{im}:r2:{k}", im, "r2", "cat_a",
                             Box2D(float(x) + 0.01, float(y), w, w)))
        d = make_dataset(images, ["r1", "r2"], anns)
        table = bootstrap_calibration(d, "box_iou", iterations=10, seed=1, stratify="size")
        assert [s.stratum for s in table.strata] == ["all", "small", "medium", "large"]
        for row in table.strata:
            if row.tau_mean is not None:
                assert row.tau_ci[0] <= row.tau_mean <= row.tau_ci[1]
