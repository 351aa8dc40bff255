"""Reliability matrix and alpha tests, including the brute-force oracle."""

import numpy as np
import pytest

from kalos.correspondence import UnitSet
from kalos.dataset import NO_OBJECT
from kalos.geometry import Box2D
from kalos.reliability import (
    AlphaScore,
    CoincidenceCounts,
    ReliabilityMatrix,
    UnitColumn,
    alpha_for_matrix,
    build_reliability_matrix,
    coincidence_counts,
    consensus_category,
    global_alpha,
    interpretation_band,
    krippendorff_alpha,
    mean_alpha,
)

from fixtures import make_dataset


def matrix_from_rows(rows: dict[str, list], image_id="im1") -> ReliabilityMatrix:
    """rows: rater -> list of cells (None = missing)."""
    raters = tuple(sorted(rows))
    n_cols = len(next(iter(rows.values())))
    columns = tuple(
        UnitColumn(unit_id=f"{image_id}#{i:04d}", consensus_category="", members=frozenset())
        for i in range(n_cols)
    )
    return ReliabilityMatrix(image_id=image_id, rater_ids=raters, columns=columns,
                             rows={r: tuple(v) for r, v in rows.items()})


def brute_force_alpha(rows: dict[str, list]) -> float | None:
    """Independent oracle: enumerate all within-unit pairs directly and
    compute 1 - D_o/D_e from raw pair frequencies."""
    raters = sorted(rows)
    n_cols = len(next(iter(rows.values())))
    units = []
    for col in range(n_cols):
        values = [rows[r][col] for r in raters if rows[r][col] is not None]
        if len(values) >= 2:
            units.append(values)
    n = sum(len(u) for u in units)
    if n < 2:
        return None
    d_o = 0.0
    for unit in units:
        m = len(unit)
        mismatches = sum(1 for i in range(m) for j in range(m)
                         if i != j and unit[i] != unit[j])
        d_o += mismatches / (m - 1)
    d_o /= n
    pooled = [v for unit in units for v in unit]
    d_e = sum(1 for i in range(n) for j in range(n) if i != j and pooled[i] != pooled[j])
    d_e /= n * (n - 1)
    if d_e == 0.0:
        return 1.0
    return 1.0 - d_o / d_e


def alpha_of(rows: dict[str, list]) -> AlphaScore:
    return krippendorff_alpha(coincidence_counts(matrix_from_rows(rows)))


class TestCoincidence:
    def test_pair_column(self):
        counts = coincidence_counts(matrix_from_rows({"r1": ["a"], "r2": ["a"]}))
        assert counts.o[("a", "a")] == 2.0
        assert counts.n == 2.0

    def test_mixed_column(self):
        counts = coincidence_counts(matrix_from_rows({"r1": ["a"], "r2": ["b"]}))
        assert counts.o[("a", "b")] == 1.0
        assert counts.o[("b", "a")] == 1.0

    def test_missing_contributes_nothing(self):
        counts = coincidence_counts(matrix_from_rows({"r1": ["a"], "r2": [None]}))
        assert counts.n == 0.0
        assert counts.o == {}

    def test_three_value_column_weighting(self):
        counts = coincidence_counts(matrix_from_rows({"r1": ["a"], "r2": ["a"], "r3": ["b"]}))
        assert counts.o[("a", "a")] == pytest.approx(1.0)
        assert counts.o[("a", "b")] == pytest.approx(1.0)
        assert counts.o[("b", "a")] == pytest.approx(1.0)
        assert counts.n == 3.0

    def test_symmetry_and_totals(self):
        rows = {"r1": ["a", "b", "a", None], "r2": ["a", "a", None, "b"], "r3": ["b", "a", "a", "b"]}
        counts = coincidence_counts(matrix_from_rows(rows))
        for (v1, v2), value in counts.o.items():
            assert counts.o[(v2, v1)] == pytest.approx(value)
        assert counts.n == pytest.approx(sum(counts.n_c.values()))


class TestAlpha:
    def test_anchor_16_30(self):
        score = alpha_of({"r1": ["a", "a", "b", "b"], "r2": ["a", "b", "b", "b"]})
        assert score.value == pytest.approx(16 / 30, abs=1e-15)

    def test_anchor_minus_half(self):
        score = alpha_of({"r1": ["a", "b"], "r2": ["b", "a"]})
        assert score.value == pytest.approx(-0.5, abs=1e-15)

    def test_unanimous_is_one(self):
        score = alpha_of({"r1": ["a", "a"], "r2": ["a", "a"]})
        assert score.value == 1.0

    def test_undefined_below_two_pairable(self):
        score = alpha_of({"r1": ["a"], "r2": [None]})
        assert score.value is None

    def test_bands(self):
        assert interpretation_band(0.85) == "near_perfect"
        assert interpretation_band(0.65) == "substantial"
        assert interpretation_band(0.45) == "moderate"
        assert interpretation_band(0.1) == "weak"
        assert interpretation_band(-0.2) == "systematic_disagreement"

    def test_row_and_column_permutation_invariance(self):
        rng = np.random.default_rng(0)
        rows = {f"r{i}": [rng.choice(["a", "b", "c"]) for _ in range(6)] for i in range(4)}
        base = alpha_of(rows).value
        perm = rng.permutation(6)
        permuted = {r: [v[i] for i in perm] for r, v in rows.items()}
        assert alpha_of(permuted).value == pytest.approx(base, abs=1e-12)
        renamed = {f"x{i}": rows[f"r{i}"] for i in range(4)}
        assert alpha_of(renamed).value == pytest.approx(base, abs=1e-12)

    def test_oracle_equivalence_random_matrices(self):
        rng = np.random.default_rng(1234)
        categories = ["a", "b", "c", "d"]
        for _ in range(300):
            n_raters = int(rng.integers(2, 6))
            n_units = int(rng.integers(1, 11))
            n_cats = int(rng.integers(1, 5))
            rows = {}
            for r in range(n_raters):
                cells = []
                for _ in range(n_units):
                    if rng.random() < 0.2:
                        cells.append(None)
                    elif rng.random() < 0.2:
                        cells.append(NO_OBJECT)
                    else:
                        cells.append(categories[int(rng.integers(0, n_cats))])
                rows[f"r{r}"] = cells
            expected = brute_force_alpha(rows)
            actual = alpha_of(rows).value
            if expected is None:
                assert actual is None
            else:
                assert actual == pytest.approx(expected, abs=1e-12)

    def test_duplicating_rows_is_small_sample_correction_only(self):
        # Repeating every rater's cells (doubling the units on a fixed
        # pattern) moves alpha only through the n-dependent correction, so
        # the shift vanishes as the pattern grows and the band never changes.
        rows = {"r1": ["a", "a", "b", "b"], "r2": ["a", "b", "b", "b"]}
        deltas = []
        for k in (1, 4, 16):
            wide = {r: v * k for r, v in rows.items()}
            doubled = {r: v * (2 * k) for r, v in rows.items()}
            assert alpha_of(doubled).band == alpha_of(wide).band
            deltas.append(abs(alpha_of(doubled).value - alpha_of(wide).value))
        assert deltas[2] < deltas[1] < deltas[0]
        assert deltas[2] < 0.01


class TestBuildMatrix:
    def box(self):
        return Box2D(0.2, 0.2, 0.3, 0.3)

    def test_shared_unit_both_categories(self):
        d = make_dataset(["im1"], ["r1", "r2"],
                         [("a", "im1", "r1", "cat_a", self.box()),
                          ("b", "im1", "r2", "cat_a", self.box())])
        m = build_reliability_matrix(UnitSet("im1", (frozenset({"a", "b"}),)), d)
        assert m.rows["r1"] == ("cat_a",)
        assert m.rows["r2"] == ("cat_a",)

    def test_assigned_absent_is_no_object(self):
        d = make_dataset(["im1"], ["r1", "r2"],
                         [("a", "im1", "r1", "cat_a", self.box())])
        m = build_reliability_matrix(UnitSet("im1", (frozenset({"a"}),)), d)
        assert m.rows["r2"] == (NO_OBJECT,)

    def test_unassigned_is_missing(self):
        d = make_dataset(["im1"], ["r1", "r2"],
                         [("a", "im1", "r1", "cat_a", self.box())],
                         assignments=[("im1", "r1", None)])
        m = build_reliability_matrix(UnitSet("im1", (frozenset({"a"}),)), d)
        assert m.rater_ids == ("r1",)
        assert "r2" not in m.rows

    def test_out_of_scope_consensus_is_missing(self):
        d = make_dataset(["im1"], ["r1", "r2"],
                         [("a", "im1", "r1", "cat_a", self.box())],
                         assignments=[("im1", "r1", None), ("im1", "r2", ("cat_b",))])
        m = build_reliability_matrix(UnitSet("im1", (frozenset({"a"}),)), d)
        assert m.rows["r2"] == (None,)

    def test_consensus_modal_with_lexicographic_tie(self):
        assert consensus_category(["b", "a"]) == "a"
        assert consensus_category(["b", "b", "a"]) == "b"


class TestAggregation:
    def test_mean_alpha_simple(self):
        m1 = matrix_from_rows({"r1": ["a", "a"], "r2": ["a", "a"]}, image_id="im1")
        m2 = matrix_from_rows({"r1": ["a", "a", "b", "b"], "r2": ["a", "b", "b", "b"]}, "im2")
        result = mean_alpha([m1, m2])
        assert result.mean == pytest.approx((1.0 + 16 / 30) / 2)

    def test_empty_image_counts_as_consensus(self):
        annotated = matrix_from_rows({"r1": ["a", "a", "b", "b"], "r2": ["a", "b", "b", "b"]}, "im1")
        empty = ReliabilityMatrix(image_id="im2", rater_ids=("r1", "r2"), columns=(), rows={})
        result = mean_alpha([annotated, empty])
        assert result.mean == pytest.approx((16 / 30 + 1.0) / 2)

    def test_undefined_images_skipped_and_counted(self):
        solo = ReliabilityMatrix(image_id="im2", rater_ids=("r1",), columns=(), rows={})
        annotated = matrix_from_rows({"r1": ["a"], "r2": ["a"]}, "im1")
        result = mean_alpha([annotated, solo])
        assert result.mean == 1.0
        assert result.skipped == 1

    def test_global_equals_per_image_for_single_image(self):
        m = matrix_from_rows({"r1": ["a", "a", "b", "b"], "r2": ["a", "b", "b", "b"]})
        assert global_alpha([m]).value == pytest.approx(alpha_for_matrix(m).value)

    def test_global_weights_dense_images(self):
        # Ten agreeing balanced columns against one disagreeing column: the
        # dense image dominates the global score while the mean treats the
        # two images equally.
        dense = matrix_from_rows({"r1": ["a", "b"] * 5, "r2": ["a", "b"] * 5}, "im1")
        sparse = matrix_from_rows({"r1": ["a"], "r2": ["b"]}, "im2")
        g = global_alpha([dense, sparse]).value
        m = mean_alpha([dense, sparse]).mean
        assert g == pytest.approx(200 / 242)
        assert m == pytest.approx(0.5)
        assert g > m

    def test_all_empty_dataset_scores_one(self):
        empties = [ReliabilityMatrix(image_id=f"im{i}", rater_ids=("r1", "r2"), columns=(),
                                     rows={}) for i in range(3)]
        assert global_alpha(empties).value == 1.0

    def test_global_alpha_aligns_raters_across_images(self):
        m1 = matrix_from_rows({"r1": ["a"], "r2": ["a"]}, "im1")
        m2 = matrix_from_rows({"r2": ["b"], "r3": ["b"]}, "im2")
        assert global_alpha([m1, m2]).value == 1.0
