"""Reliability matrices and Krippendorff's alpha (nominal form).

Per-image unit sets become raters x units matrices under the completeness
assumption: a rater assigned to the image who did not annotate a discovered
unit holds an explicit NO_OBJECT cell (active disagreement); a rater who was
never asked (unassigned, or category out of scope) holds a missing cell that
generates no pairs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .dataset import NO_OBJECT, Dataset
from .correspondence import UnitSet

# Missing ("never asked") cells are represented as None.
Cell = str | None


@dataclass(frozen=True)
class UnitColumn:
    unit_id: str
    consensus_category: str
    members: frozenset[str]


@dataclass(frozen=True)
class ReliabilityMatrix:
    image_id: str
    rater_ids: tuple[str, ...]
    columns: tuple[UnitColumn, ...]
    # rows[rater_id] is a tuple of cells aligned with columns.
    rows: dict = field(compare=False)

    def cell(self, rater_id: str, col: int) -> Cell:
        return self.rows[rater_id][col]


@dataclass
class CoincidenceCounts:
    o: dict[tuple[str, str], float]
    n_c: dict[str, float]
    n: float

    @classmethod
    def empty(cls) -> "CoincidenceCounts":
        return cls(o={}, n_c={}, n=0.0)

    def merge(self, other: "CoincidenceCounts") -> None:
        for key, value in other.o.items():
            self.o[key] = self.o.get(key, 0.0) + value
        for key, value in other.n_c.items():
            self.n_c[key] = self.n_c.get(key, 0.0) + value
        self.n += other.n


BANDS = (
    (0.8, "near_perfect"),
    (0.6, "substantial"),
    (0.4, "moderate"),
    (0.0, "weak"),
)


def interpretation_band(value: float | None) -> str | None:
    if value is None:
        return None
    for threshold, name in BANDS:
        if value >= threshold:
            return name
    return "systematic_disagreement"


@dataclass(frozen=True)
class AlphaScore:
    value: float | None
    n_pairable: float
    band: str | None

    @property
    def defined(self) -> bool:
        return self.value is not None


def consensus_category(member_categories: list[str]) -> str:
    """Modal category of a unit's members, ties broken lexicographically."""
    counts = Counter(member_categories)
    top = max(counts.values())
    return min(c for c, k in counts.items() if k == top)


def build_reliability_matrix(units: UnitSet, d: Dataset) -> ReliabilityMatrix:
    image_id = units.image_id
    rater_ids = d.raters_for_image(image_id)
    ann_index = d.annotations_by_id
    columns: list[UnitColumn] = []
    cells: dict[str, list[Cell]] = {r: [] for r in rater_ids}
    for idx, unit in enumerate(units.units):
        members = sorted(unit)
        cats = [ann_index[m].category_id for m in members]
        consensus = consensus_category(cats)
        column = UnitColumn(unit_id=f"{image_id}#{idx:04d}", consensus_category=consensus,
                            members=frozenset(members))
        by_rater = {}
        for m in members:
            ann = ann_index[m]
            if ann.rater_id not in cells:
                raise ValueError(
                    f"unit in image {image_id!r} references annotation {m!r} from "
                    f"unassigned rater {ann.rater_id!r}"
                )
            by_rater[ann.rater_id] = ann.category_id
        for rater in rater_ids:
            if rater in by_rater:
                cells[rater].append(by_rater[rater])
            elif d.in_scope(image_id, rater, consensus):
                cells[rater].append(NO_OBJECT)
            else:
                # The unit's consensus lies outside this rater's category
                # scope: they were never asked, so the cell stays missing.
                cells[rater].append(None)
        columns.append(column)
    return ReliabilityMatrix(
        image_id=image_id,
        rater_ids=rater_ids,
        columns=tuple(columns),
        rows={r: tuple(v) for r, v in cells.items()},
    )


def _column_values(matrix: ReliabilityMatrix, col: int) -> list[str]:
    return [matrix.rows[r][col] for r in matrix.rater_ids if matrix.rows[r][col] is not None]


def coincidence_counts(matrices) -> CoincidenceCounts:
    """Tally within-unit value pairs, each ordered pair weighted 1/(m_u - 1)."""
    if isinstance(matrices, ReliabilityMatrix):
        matrices = [matrices]
    counts = CoincidenceCounts.empty()
    for matrix in matrices:
        for col in range(len(matrix.columns)):
            values = _column_values(matrix, col)
            m_u = len(values)
            if m_u < 2:
                continue
            weight = 1.0 / (m_u - 1)
            for i, v1 in enumerate(values):
                for j, v2 in enumerate(values):
                    if i == j:
                        continue
                    counts.o[(v1, v2)] = counts.o.get((v1, v2), 0.0) + weight
                    counts.n_c[v1] = counts.n_c.get(v1, 0.0) + weight
            counts.n += float(m_u)
    return counts


def krippendorff_alpha(counts: CoincidenceCounts) -> AlphaScore:
    """alpha = [(n-1) sum_c o_cc - sum_c n_c(n_c-1)] / [n(n-1) - sum_c n_c(n_c-1)].

    Undefined below two pairable values; a zero denominator with all values
    identical scores 1.0 by convention.
    """
    n = counts.n
    if n < 2:
        return AlphaScore(value=None, n_pairable=n, band=None)
    if len(counts.n_c) <= 1:
        # Single distinct value: zero numerator over zero denominator.
        return AlphaScore(value=1.0, n_pairable=n, band=interpretation_band(1.0))
    sum_occ = sum(counts.o.get((c, c), 0.0) for c in counts.n_c)
    sum_ncc = sum(nc * (nc - 1.0) for nc in counts.n_c.values())
    denom = n * (n - 1.0) - sum_ncc
    if abs(denom) < 1e-9 * n * n:
        return AlphaScore(value=1.0, n_pairable=n, band=interpretation_band(1.0))
    value = ((n - 1.0) * sum_occ - sum_ncc) / denom
    return AlphaScore(value=value, n_pairable=n, band=interpretation_band(value))


def alpha_for_matrix(matrix: ReliabilityMatrix) -> AlphaScore:
    """Per-image alpha with the empty-image consensus convention."""
    if not matrix.columns:
        if len(matrix.rater_ids) >= 2:
            # All assigned raters agree the image holds nothing.
            return AlphaScore(value=1.0, n_pairable=0.0, band=interpretation_band(1.0))
        return AlphaScore(value=None, n_pairable=0.0, band=None)
    return krippendorff_alpha(coincidence_counts(matrix))


@dataclass
class MeanAlphaResult:
    mean: float | None
    per_image: list[tuple[str, float | None]]
    skipped: int
    band: str | None

    def defined_values(self) -> list[float]:
        return [v for _, v in self.per_image if v is not None]


def mean_alpha(matrices: list[ReliabilityMatrix]) -> MeanAlphaResult:
    """Dataset score: mean over defined per-image alphas; undefined images
    (fewer than two pairable values) are excluded and counted."""
    if not matrices:
        raise ValueError("mean_alpha needs at least one reliability matrix")
    per_image: list[tuple[str, float | None]] = []
    for matrix in matrices:
        per_image.append((matrix.image_id, alpha_for_matrix(matrix).value))
    defined = [v for _, v in per_image if v is not None]
    mean = sum(defined) / len(defined) if defined else None
    return MeanAlphaResult(mean=mean, per_image=per_image,
                           skipped=len(per_image) - len(defined),
                           band=interpretation_band(mean))


def global_alpha(matrices: list[ReliabilityMatrix]) -> AlphaScore:
    """Single alpha over the column-concatenated matrices.

    Raters unassigned to an image hold missing cells in its columns, and an
    empty image is injected as one virtual column where every assigned rater
    votes NO_OBJECT, so consensus on absence still counts.
    """
    if not matrices:
        raise ValueError("global_alpha needs at least one reliability matrix")
    counts = CoincidenceCounts.empty()
    for matrix in matrices:
        if matrix.columns:
            counts.merge(coincidence_counts(matrix))
        elif matrix.rater_ids:
            m_u = len(matrix.rater_ids)
            if m_u >= 2:
                weight = 1.0 / (m_u - 1)
                pairs = m_u * (m_u - 1)
                counts.o[(NO_OBJECT, NO_OBJECT)] = counts.o.get((NO_OBJECT, NO_OBJECT), 0.0) + pairs * weight
                counts.n_c[NO_OBJECT] = counts.n_c.get(NO_OBJECT, 0.0) + pairs * weight
                counts.n += float(m_u)
    return krippendorff_alpha(counts)
