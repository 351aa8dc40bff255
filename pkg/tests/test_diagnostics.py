import numpy as np
import pytest

from kalos.dataset import Annotation, Dataset
from kalos.diagnostics import (
    DiagnosticsError,
    annotator_vitality,
    class_difficulty,
    collaboration_matrix,
    intra_annotator,
    localization_sensitivity,
    per_image_distribution,
)
from kalos.geometry import Box2D
from kalos.noise.generation import generate
from kalos.pipeline import PipelineConfig, build_matrices, score_dataset

from fixtures import make_dataset, reference_dataset, testbed_model

CFG = PipelineConfig()


def identical_three_raters(n_images=3):
    images = [f"im{i}" for i in range(n_images)]
    anns = []
    rng = np.random.default_rng(0)
    for im in images:
        for k in range(3):
            x, y = rng.uniform(0.05, 0.6, 2)
            box = Box2D(float(x), float(y), 0.25, 0.25)
            for r in ("r1", "r2", "r3"):
                anns.append((f"{im}:{r}:{k}", im, r, "cat_a", box))
    return make_dataset(images, ["r1", "r2", "r3"], anns)


class TestLsa:
    def test_flat_curve_on_identical_annotations(self):
        d = identical_three_raters()
        curve = localization_sensitivity(d, CFG, [0.1, 0.5, 0.9])
        assert [a for _, a in curve.points] == [1.0, 1.0, 1.0]
        assert curve.delta == 0.0

    def test_jitter_collapses_at_strict_thresholds(self):
        ref = reference_dataset(n_images=25)
        synth = generate(ref, testbed_model(), 0.5, 3, seed=3)
        curve = localization_sensitivity(synth.dataset, CFG, [0.1, 0.3, 0.5, 0.7, 0.9])
        values = [a for _, a in curve.points]
        # Non-increasing within solver-tie tolerance, and strict matching
        # must sit well below loose matching.
        for left, right in zip(values, values[1:]):
            assert right <= left + 0.02
        assert values[-1] < values[0] - 0.1
        assert curve.delta > 0

    def test_bad_tau_s(self):
        with pytest.raises(DiagnosticsError):
            localization_sensitivity(identical_three_raters(), CFG, [1.0])


class TestClassDifficulty:
    def test_unanimous_category_is_one(self):
        d = identical_three_raters()
        matrices = build_matrices(d, CFG)
        score, support = class_difficulty(matrices, "cat_a")
        assert score.value == 1.0
        assert support > 0

    def test_single_rater_category_negative(self):
        # Only r1 ever marks cat_b; the recoded matrix pits Category vs
        # NO_OBJECT with systematic disagreement.
        images = ["im1", "im2"]
        anns = []
        box = Box2D(0.1, 0.1, 0.2, 0.2)
        other = Box2D(0.6, 0.6, 0.2, 0.2)
        for im in images:
            anns.append((f"{im}:r1", im, "r1", "cat_b", box))
            anns.append((f"{im}:r1o", im, "r1", "cat_a", other))
            anns.append((f"{im}:r2o", im, "r2", "cat_a", other))
        d = make_dataset(images, ["r1", "r2"], anns)
        score, support = class_difficulty(build_matrices(d, CFG), "cat_b")
        assert support == 2
        assert score.value is not None and score.value <= 0

    def test_absent_category_undefined(self):
        d = identical_three_raters()
        score, support = class_difficulty(build_matrices(d, CFG), "cat_d")
        assert support == 0
        assert score.value is None


class TestVitality:
    def three_raters_one_deviant(self):
        images = [f"im{i}" for i in range(4)]
        anns = []
        rng = np.random.default_rng(1)
        for im in images:
            for k in range(3):
                x, y = rng.uniform(0.05, 0.5, 2)
                box = Box2D(float(x), float(y), 0.25, 0.25)
                anns.append((f"{im}:rA:{k}", im, "rA", "cat_a", box))
                anns.append((f"{im}:rB:{k}", im, "rB", "cat_a", box))
                if k > 0:  # rC misses some instances and shifts others
                    anns.append((f"{im}:rC:{k}", im, "rC", "cat_a",
                                 Box2D(float(x) + 0.05, float(y), 0.25, 0.25)))
        return make_dataset(images, ["rA", "rB", "rC"], anns)

    def test_duplicate_rater_has_positive_vitality(self):
        d = self.three_raters_one_deviant()
        assert annotator_vitality(d, CFG, "rB") > 0

    def test_identical_raters_zero_vitality(self):
        d = identical_three_raters()
        for rater in ("r1", "r2", "r3"):
            assert annotator_vitality(d, CFG, rater) == 0.0

    def test_mask_mode_differs_from_resolve(self):
        d = self.three_raters_one_deviant()
        resolve = annotator_vitality(d, CFG, "rC", mode="resolve")
        mask = annotator_vitality(d, CFG, "rC", mode="mask")
        assert isinstance(resolve, float) and isinstance(mask, float)

    def test_two_raters_rejected(self):
        d = make_dataset(["im1"], ["r1", "r2"],
                         [("a", "im1", "r1", "cat_a", Box2D(0.1, 0.1, 0.2, 0.2)),
                          ("b", "im1", "r2", "cat_a", Box2D(0.1, 0.1, 0.2, 0.2))])
        with pytest.raises(DiagnosticsError):
            annotator_vitality(d, CFG, "r1")


class TestCollaboration:
    def test_identical_raters_score_one(self):
        d = identical_three_raters()
        table = collaboration_matrix(d, CFG)
        assert set(table.values()) == {1.0}

    def test_never_coassigned_pair_absent(self):
        anns = [("a", "im1", "r1", "cat_a", Box2D(0.1, 0.1, 0.2, 0.2)),
                ("b", "im2", "r2", "cat_a", Box2D(0.1, 0.1, 0.2, 0.2))]
        d = make_dataset(["im1", "im2"], ["r1", "r2"], anns,
                         assignments=[("im1", "r1", None), ("im2", "r2", None)])
        table = collaboration_matrix(d, CFG)
        assert table[("r1", "r2")] is None

    def test_matches_two_rater_mean_alpha(self):
        d = self_build = identical_three_raters()
        table = collaboration_matrix(d, CFG)
        keep = {"r1", "r2"}
        sub = Dataset(
            images=d.images,
            raters=tuple(r for r in d.raters if r.id in keep),
            assignments=tuple(a for a in d.assignments if a.rater_id in keep),
            categories=d.categories,
            annotations=tuple(a for a in d.annotations if a.rater_id in keep),
        )
        assert table[("r1", "r2")] == pytest.approx(score_dataset(sub, CFG).mean.mean)

    def test_schools_of_thought_split(self):
        from kalos.noise.generation import generate_collaboration
        from fixtures import two_style_reference
        synth = generate_collaboration(two_style_reference(n_images=15), (2, 2),
                                       testbed_model(), 0.5, seed=9)
        table = collaboration_matrix(synth.dataset, CFG)
        groups = {r.id: r.id.split("_")[0] for r in synth.dataset.raters}
        within, across = [], []
        for (r1, r2), value in table.items():
            (within if groups[r1] == groups[r2] else across).append(value)
        assert np.mean(within) > np.mean(across)


class TestIntraAnnotator:
    def sessions(self, jitter):
        images = [f"im{i}" for i in range(4)]
        rng = np.random.default_rng(2)
        anns0, anns1 = [], []
        for im in images:
            for k in range(3):
                x, y = rng.uniform(0.05, 0.5, 2)
                box = Box2D(float(x), float(y), 0.25, 0.25)
                anns0.append((f"{im}:t0:{k}", im, "r1", "cat_a", box))
                dx = float(rng.uniform(-jitter, jitter))
                anns1.append((f"{im}:t1:{k}", im, "r1", "cat_a",
                              Box2D(float(x) + dx, float(y), 0.25, 0.25)))
        d0 = make_dataset(images, ["r1"], anns0)
        d1 = make_dataset(images, ["r1"], anns1)
        return d0, d1

    def test_identical_sessions_score_one(self):
        d0, d1 = self.sessions(jitter=0.0)
        assert intra_annotator(d0, d1, "r1", CFG) == 1.0

    def test_empty_second_session_below_one(self):
        d0, _ = self.sessions(jitter=0.0)
        d1 = make_dataset([im.id for im in d0.images], ["r1"], [])
        assert intra_annotator(d0, d1, "r1", CFG) < 1.0

    def test_jittered_session_below_identical(self):
        d0, d1 = self.sessions(jitter=0.12)
        assert intra_annotator(d0, d1, "r1", CFG) < 1.0

    def test_no_overlap_rejected(self):
        d0, d1 = self.sessions(jitter=0.0)
        other = make_dataset(["zz1"], ["r1"], [])
        with pytest.raises(DiagnosticsError):
            intra_annotator(d0, other, "r1", CFG)


class TestDistribution:
    def test_order_statistics(self):
        from test_reliability import matrix_from_rows

        m1 = matrix_from_rows({"r1": ["a", "a"], "r2": ["a", "a"]}, "im1")
        m2 = matrix_from_rows({"r1": ["a", "a"], "r2": ["a", "a"]}, "im2")
        m3 = matrix_from_rows({"r1": ["a", "b"], "r2": ["b", "a"]}, "im3")
        summary = per_image_distribution([m1, m2, m3])
        assert summary.values == [-0.5, 1.0, 1.0]
        assert summary.median == 1.0
        assert summary.mean == pytest.approx(0.5)
        assert summary.undefined == 0

    def test_single_image(self):
        from test_reliability import matrix_from_rows

        m = matrix_from_rows({"r1": ["a", "a", "b", "b"], "r2": ["a", "b", "b", "b"]})
        summary = per_image_distribution([m])
        assert summary.mean == summary.median == pytest.approx(16 / 30)

    def test_all_undefined(self):
        from kalos.reliability import ReliabilityMatrix

        solos = [ReliabilityMatrix(image_id=f"im{i}", rater_ids=("r1",), columns=(), rows={})
                 for i in range(3)]
        summary = per_image_distribution(solos)
        assert summary.values == []
        assert summary.undefined == 3
