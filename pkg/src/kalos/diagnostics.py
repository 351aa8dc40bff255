"""Downstream diagnostics computed by re-running the pipeline on filtered or
permuted views of the data: localization sensitivity, class difficulty,
annotator vitality, collaboration clusters, intra-annotator consistency and
the per-image score distribution.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass

from .dataset import NO_OBJECT, Annotation, Assignment, Dataset, RaterRecord
from .pipeline import PipelineConfig, build_matrices, score_dataset
from .reliability import (
    AlphaScore,
    CoincidenceCounts,
    ReliabilityMatrix,
    coincidence_counts,
    krippendorff_alpha,
    mean_alpha,
)


class DiagnosticsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Localization sensitivity


@dataclass
class LsaCurve:
    points: list[tuple[float, float | None]]  # (tau_s, mean alpha)
    anchor_tau_s: float
    delta: float | None

    def to_dict(self) -> dict:
        return {
            "points": [{"tau_s": t, "mean_alpha": a} for t, a in self.points],
            "anchor_tau_s": self.anchor_tau_s,
            "delta": self.delta,
        }


def localization_sensitivity(d: Dataset, cfg: PipelineConfig, tau_s_list) -> LsaCurve:
    """Mean alpha as a function of the similarity threshold tau_s.

    Correspondence is re-solved per threshold (tau = 1 - tau_s); the delta
    between the anchor entry and the strictest entry is the agreement lost
    to boundary imprecision.
    """
    tau_s_values = sorted(float(t) for t in tau_s_list)
    if not tau_s_values:
        raise DiagnosticsError("need at least one tau_s value")
    if any(not 0.0 <= t < 1.0 for t in tau_s_values):
        raise DiagnosticsError("tau_s values must lie in [0, 1)")
    points: list[tuple[float, float | None]] = []
    for tau_s in tau_s_values:
        result = score_dataset(d, cfg.with_tau(1.0 - tau_s))
        points.append((tau_s, result.mean.mean))
    anchor_tau_s = 1.0 - cfg.tau
    anchor_idx = min(range(len(points)), key=lambda i: abs(points[i][0] - anchor_tau_s))
    a_anchor, a_strict = points[anchor_idx][1], points[-1][1]
    delta = (a_anchor - a_strict) if (a_anchor is not None and a_strict is not None) else None
    return LsaCurve(points=points, anchor_tau_s=points[anchor_idx][0], delta=delta)


# ---------------------------------------------------------------------------
# Class difficulty


def class_difficulty(matrices: list[ReliabilityMatrix], category: str) -> tuple[AlphaScore, int]:
    """Alpha over columns whose consensus is the target category, with every
    other value recoded as NO_OBJECT; returns (score, column support)."""
    counts = CoincidenceCounts.empty()
    support = 0
    for matrix in matrices:
        for col, column in enumerate(matrix.columns):
            if column.consensus_category != category:
                continue
            support += 1
            values = [matrix.rows[r][col] for r in matrix.rater_ids]
            recoded = [v if v == category else NO_OBJECT for v in values if v is not None]
            m_u = len(recoded)
            if m_u < 2:
                continue
            weight = 1.0 / (m_u - 1)
            for i, v1 in enumerate(recoded):
                for j, v2 in enumerate(recoded):
                    if i != j:
                        counts.o[(v1, v2)] = counts.o.get((v1, v2), 0.0) + weight
                        counts.n_c[v1] = counts.n_c.get(v1, 0.0) + weight
            counts.n += float(m_u)
    return krippendorff_alpha(counts), support


def class_table(matrices: list[ReliabilityMatrix], categories) -> list[dict]:
    rows = []
    for category in sorted(categories):
        score, support = class_difficulty(matrices, category)
        rows.append({"category": category, "alpha": score.value, "support": support})
    return rows


# ---------------------------------------------------------------------------
# Annotator vitality


def _without_rater(d: Dataset, rater_id: str) -> Dataset:
    return Dataset(
        images=d.images,
        raters=tuple(r for r in d.raters if r.id != rater_id),
        assignments=tuple(a for a in d.assignments if a.rater_id != rater_id),
        categories=d.categories,
        annotations=tuple(a for a in d.annotations if a.rater_id != rater_id),
    )


def annotator_vitality(d: Dataset, cfg: PipelineConfig, rater_id: str,
                       mode: str = "resolve") -> float:
    """V_r: change in mean alpha when the rater is removed (positive means
    the rater builds consensus).

    ``resolve`` re-runs correspondence without the rater's annotations (they
    shape unit formation, so plain row masking would leak their effect);
    ``mask`` drops the rater's rows from the existing matrices for a cheap
    comparison.
    """
    if rater_id not in d.raters_by_id:
        raise DiagnosticsError(f"unknown rater {rater_id!r}")
    if len(d.raters) < 3:
        raise DiagnosticsError("vitality needs at least 3 raters so removal leaves a pair")
    full = score_dataset(d, cfg).mean.mean
    if mode == "resolve":
        reduced = score_dataset(_without_rater(d, rater_id), cfg).mean.mean
    elif mode == "mask":
        masked = []
        for matrix in build_matrices(d, cfg):
            raters = tuple(r for r in matrix.rater_ids if r != rater_id)
            masked.append(ReliabilityMatrix(
                image_id=matrix.image_id, rater_ids=raters, columns=matrix.columns,
                rows={r: matrix.rows[r] for r in raters}))
        reduced = mean_alpha(masked).mean
    else:
        raise DiagnosticsError(f"unknown vitality mode {mode!r}")
    if full is None or reduced is None:
        raise DiagnosticsError("vitality undefined: alpha undefined before or after removal")
    return full - reduced


def vitality_table(d: Dataset, cfg: PipelineConfig, mode: str = "resolve") -> list[dict]:
    rows = []
    for rater in sorted(r.id for r in d.raters):
        try:
            value = annotator_vitality(d, cfg, rater, mode=mode)
        except DiagnosticsError:
            value = None
        rows.append({"rater_id": rater, "vitality": value})
    return rows


# ---------------------------------------------------------------------------
# Collaboration clusters


def _pair_subset(d: Dataset, r1: str, r2: str) -> Dataset | None:
    shared = sorted(
        im.id for im in d.images
        if d.is_assigned(im.id, r1) and d.is_assigned(im.id, r2)
    )
    if not shared:
        return None
    shared_set = set(shared)
    keep = {r1, r2}
    return Dataset(
        images=tuple(im for im in d.images if im.id in shared_set),
        raters=tuple(r for r in d.raters if r.id in keep),
        assignments=tuple(a for a in d.assignments if a.image_id in shared_set and a.rater_id in keep),
        categories=d.categories,
        annotations=tuple(a for a in d.annotations if a.image_id in shared_set and a.rater_id in keep),
    )


def collaboration_matrix(d: Dataset, cfg: PipelineConfig) -> dict[tuple[str, str], float | None]:
    """Pairwise mean alpha for every rater pair sharing at least one image;
    pairs that never co-occur are absent (None)."""
    raters = sorted(r.id for r in d.raters)
    if len(raters) < 2:
        raise DiagnosticsError("collaboration needs at least 2 raters")
    table: dict[tuple[str, str], float | None] = {}
    for i, r1 in enumerate(raters):
        for r2 in raters[i + 1:]:
            subset = _pair_subset(d, r1, r2)
            table[(r1, r2)] = score_dataset(subset, cfg).mean.mean if subset else None
    return table


# ---------------------------------------------------------------------------
# Intra-annotator consistency


def intra_annotator(d0: Dataset, d1: Dataset, rater_id: str, cfg: PipelineConfig) -> float | None:
    """Self-consistency: the rater's two sessions become two pseudo-raters."""
    shared = sorted(
        im.id for im in d0.images
        if im.id in d1.images_by_id and d0.is_assigned(im.id, rater_id) and d1.is_assigned(im.id, rater_id)
    )
    if not shared:
        raise DiagnosticsError(f"rater {rater_id!r} has no overlapping assigned images across sessions")
    shared_set = set(shared)
    pseudo = (f"{rater_id}@t0", f"{rater_id}@t1")
    images = tuple(im for im in d0.images if im.id in shared_set)
    categories = {c.id: c for c in d0.categories}
    for c in d1.categories:
        categories.setdefault(c.id, c)
    assignments = []
    annotations = []
    for session, source in enumerate((d0, d1)):
        rid = pseudo[session]
        for image_id in shared:
            assignments.append(Assignment(image_id=image_id, rater_id=rid,
                                          categories=source.scope(image_id, rater_id)))
        for ann in source.annotations:
            if ann.rater_id == rater_id and ann.image_id in shared_set:
                annotations.append(Annotation(
                    id=f"t{session}:{ann.id}", image_id=ann.image_id, rater_id=rid,
                    category_id=ann.category_id, geometry=ann.geometry))
    merged = Dataset(
        images=images,
        raters=(RaterRecord(id=pseudo[0]), RaterRecord(id=pseudo[1])),
        assignments=tuple(assignments),
        categories=tuple(categories.values()),
        annotations=tuple(annotations),
    )
    return score_dataset(merged, cfg).mean.mean


# ---------------------------------------------------------------------------
# Per-image distribution


@dataclass
class DistributionSummary:
    values: list[float]
    mean: float | None
    median: float | None
    q1: float | None
    q3: float | None
    undefined: int

    def to_dict(self) -> dict:
        return {"values": self.values, "mean": self.mean, "median": self.median,
                "q1": self.q1, "q3": self.q3, "undefined_count": self.undefined}


def per_image_distribution(matrices: list[ReliabilityMatrix]) -> DistributionSummary:
    result = mean_alpha(matrices)
    values = sorted(result.defined_values())
    if not values:
        return DistributionSummary(values=[], mean=None, median=None, q1=None, q3=None,
                                   undefined=result.skipped)
    qs = statistics.quantiles(values, n=4, method="inclusive") if len(values) > 1 else [values[0]] * 3
    return DistributionSummary(
        values=values,
        mean=sum(values) / len(values),
        median=statistics.median(values),
        q1=qs[0],
        q3=qs[2],
        undefined=result.skipped,
    )
