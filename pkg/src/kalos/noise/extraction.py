"""Error extraction: pairwise annotator matching that isolates localization
residuals, category confusions, unmatched instances and split/merge events
from a multi-rater dataset.

Matching runs per image for every rater pair, greedily on IoU descending at
a fixed 0.5 threshold so the definition of "error" stays standardized;
other thresholds are only swept for the sensitivity table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..dataset import Annotation, Dataset
from ..distances import distance
from ..geometry import Box2D

MATCH_IOU = 0.5


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class MatchedPair:
    ann_a: str
    ann_b: str
    d_loc: float
    area_avg: float
    translation: tuple[float, float]
    log_scale_w: float
    log_scale_h: float
    direction: float
    same_category: bool
    category_a: str
    category_b: str


@dataclass(frozen=True)
class UnmatchedRecord:
    ann_id: str
    rater_count: int  # annotations by the same rater in the image
    area: float


@dataclass(frozen=True)
class TopologyRecord:
    parent: str
    children: tuple[str, ...]
    parent_area: float
    child_log_scale_w: tuple[float, ...]
    child_log_scale_h: tuple[float, ...]
    child_angles: tuple[float, ...]  # child-centroid direction from the parent centroid
    child_magnitudes: tuple[float, ...]  # child-centroid offset from the parent centroid
    child_area_ratios: tuple[float, ...]


@dataclass
class ErrorCorpus:
    matched_pairs: list[MatchedPair] = field(default_factory=list)
    unmatched: list[UnmatchedRecord] = field(default_factory=list)
    matched_areas: list[float] = field(default_factory=list)
    topology: list[TopologyRecord] = field(default_factory=list)
    parent_labels: list[tuple[float, int]] = field(default_factory=list)  # (area, is_parent)
    rate_records: list[tuple[int, int]] = field(default_factory=list)  # (rater count, unmatched count)
    confusion: dict[tuple[str, str], int] = field(default_factory=dict)
    boxes: dict[str, Box2D] = field(default_factory=dict)

    @property
    def n_pairs(self) -> int:
        return len(self.matched_pairs)

    def mismatch_rate(self) -> float:
        if not self.matched_pairs:
            return 0.0
        return sum(1 for p in self.matched_pairs if not p.same_category) / len(self.matched_pairs)


@dataclass
class ThresholdSweepRow:
    threshold: float
    matched: int
    unmatched: int
    topology: int
    category_mismatch: int

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "matched": self.matched,
                "unmatched": self.unmatched, "topology": self.topology,
                "category_mismatch": self.category_mismatch}


def _box(ann: Annotation) -> Box2D:
    if not isinstance(ann.geometry, Box2D):
        raise ExtractionError(
            f"noise extraction works on bbox geometry, annotation {ann.id!r} "
            f"has {type(ann.geometry).__name__}"
        )
    return ann.geometry


def _iou(a: Box2D, b: Box2D) -> float:
    return 1.0 - distance(a, b, "box_iou")


def _union_box(boxes: list[Box2D]) -> Box2D:
    x0 = min(b.x for b in boxes)
    y0 = min(b.y for b in boxes)
    x1 = max(b.x + b.w for b in boxes)
    y1 = max(b.y + b.h for b in boxes)
    return Box2D(x0, y0, x1 - x0, y1 - y0)


def _merged_region_iou(parent: Box2D, children: list[Box2D]) -> float:
    """IoU between the parent and the exact union region of the children."""
    from shapely.geometry import box as shapely_box
    from shapely.ops import unary_union

    region = unary_union([shapely_box(c.x, c.y, c.x + c.w, c.y + c.h) for c in children])
    pbox = shapely_box(parent.x, parent.y, parent.x + parent.w, parent.y + parent.h)
    union = pbox.union(region).area
    if union <= 0:
        return 0.0
    return float(pbox.intersection(region).area / union)


def _greedy_match(a_anns: list[Annotation], b_anns: list[Annotation],
                  threshold: float) -> list[tuple[Annotation, Annotation, float]]:
    scored = []
    for a in a_anns:
        for b in b_anns:
            iou = _iou(_box(a), _box(b))
            if iou >= threshold:
                scored.append((iou, a, b))
    scored.sort(key=lambda t: (-t[0], t[1].id, t[2].id))
    used_a: set[str] = set()
    used_b: set[str] = set()
    matches = []
    for iou, a, b in scored:
        if a.id in used_a or b.id in used_b:
            continue
        used_a.add(a.id)
        used_b.add(b.id)
        matches.append((a, b, iou))
    return matches


def _pair_stats(a: Annotation, b: Annotation) -> MatchedPair:
    ba, bb = _box(a), _box(b)
    ca, cb = ba.centroid(), bb.centroid()
    dx, dy = cb[0] - ca[0], cb[1] - ca[1]
    return MatchedPair(
        ann_a=a.id,
        ann_b=b.id,
        d_loc=distance(ba, bb, "box_iou"),
        area_avg=(ba.area() + bb.area()) / 2.0,
        translation=(dx, dy),
        log_scale_w=math.log(bb.w / ba.w),
        log_scale_h=math.log(bb.h / ba.h),
        direction=math.atan2(dy, dx) % (2.0 * math.pi),
        same_category=a.category_id == b.category_id,
        category_a=a.category_id,
        category_b=b.category_id,
    )


def _topology_from_side(parents: list[Annotation], fragments: list[Annotation],
                        threshold: float) -> tuple[list[TopologyRecord], set[str]]:
    records: list[TopologyRecord] = []
    consumed: set[str] = set()
    for parent in parents:
        pbox = _box(parent)
        children = [f for f in fragments
                    if f.id not in consumed and _iou_positive(pbox, _box(f))]
        if len(children) < 2:
            continue
        children.sort(key=lambda f: f.id)
        if _merged_region_iou(pbox, [_box(c) for c in children]) < threshold:
            continue
        pcx, pcy = pbox.centroid()
        angles, magnitudes, lsw, lsh, ratios = [], [], [], [], []
        for child in children:
            cbox = _box(child)
            ccx, ccy = cbox.centroid()
            angles.append(math.atan2(ccy - pcy, ccx - pcx) % (2.0 * math.pi))
            magnitudes.append(math.hypot(ccx - pcx, ccy - pcy))
            lsw.append(math.log(cbox.w / pbox.w))
            lsh.append(math.log(cbox.h / pbox.h))
            ratios.append(cbox.area() / pbox.area())
        records.append(TopologyRecord(
            parent=parent.id,
            children=tuple(c.id for c in children),
            parent_area=pbox.area(),
            child_log_scale_w=tuple(lsw),
            child_log_scale_h=tuple(lsh),
            child_angles=tuple(angles),
            child_magnitudes=tuple(magnitudes),
            child_area_ratios=tuple(ratios),
        ))
        consumed.add(parent.id)
        consumed.update(c.id for c in children)
    return records, consumed


def _iou_positive(a: Box2D, b: Box2D) -> bool:
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    return ix > 0 and iy > 0


def extract_errors(d: Dataset, iou_thresholds=(MATCH_IOU,)) -> tuple[ErrorCorpus, list[ThresholdSweepRow]]:
    """Build the error corpus (always matched at IoU 0.5) plus a sensitivity
    sweep over the requested thresholds."""
    corpus = ErrorCorpus()
    sweep_counts = {t: [0, 0, 0, 0] for t in iou_thresholds}
    shared = False
    for image in sorted(d.images, key=lambda im: im.id):
        anns = d.annotations_by_image.get(image.id, ())
        by_rater: dict[str, list[Annotation]] = {}
        for ann in sorted(anns, key=lambda a: a.id):
            by_rater.setdefault(ann.rater_id, []).append(ann)
        raters = sorted(by_rater)
        if len(raters) >= 2:
            shared = True
        for i, r1 in enumerate(raters):
            for r2 in raters[i + 1:]:
                a_anns, b_anns = by_rater[r1], by_rater[r2]
                _collect_pair(corpus, a_anns, b_anns)
                for t in iou_thresholds:
                    _sweep_pair(sweep_counts[t], a_anns, b_anns, t)
    if not shared:
        raise ExtractionError("no image is shared by at least two raters")
    sweep = [ThresholdSweepRow(threshold=t, matched=c[0], unmatched=c[1], topology=c[2],
                               category_mismatch=c[3])
             for t, c in sorted(sweep_counts.items())]
    return corpus, sweep


def _collect_pair(corpus: ErrorCorpus, a_anns: list[Annotation], b_anns: list[Annotation]) -> None:
    matches = _greedy_match(a_anns, b_anns, MATCH_IOU)
    matched_a = {a.id for a, _, _ in matches}
    matched_b = {b.id for _, b, _ in matches}
    for a, b, _ in matches:
        pair = _pair_stats(a, b)
        corpus.matched_pairs.append(pair)
        corpus.matched_areas.extend([_box(a).area(), _box(b).area()])
        corpus.boxes[a.id] = _box(a)
        corpus.boxes[b.id] = _box(b)
        key = tuple(sorted((a.category_id, b.category_id)))
        corpus.confusion[key] = corpus.confusion.get(key, 0) + 1

    left_a = [a for a in a_anns if a.id not in matched_a]
    left_b = [b for b in b_anns if b.id not in matched_b]
    topo_a, consumed_a = _topology_from_side(left_a, left_b, MATCH_IOU)
    topo_b, consumed_b = _topology_from_side(
        [b for b in left_b if b.id not in consumed_a],
        [a for a in left_a if a.id not in consumed_a],
        MATCH_IOU,
    )
    corpus.topology.extend(topo_a + topo_b)
    consumed = consumed_a | consumed_b

    parent_ids = {r.parent for r in topo_a + topo_b}
    for ann in a_anns + b_anns:
        corpus.parent_labels.append((_box(ann).area(), 1 if ann.id in parent_ids else 0))

    rest_a = [a for a in left_a if a.id not in consumed]
    rest_b = [b for b in left_b if b.id not in consumed]
    for ann in rest_a:
        corpus.unmatched.append(UnmatchedRecord(ann_id=ann.id, rater_count=len(a_anns),
                                                area=_box(ann).area()))
    for ann in rest_b:
        corpus.unmatched.append(UnmatchedRecord(ann_id=ann.id, rater_count=len(b_anns),
                                                area=_box(ann).area()))
    corpus.rate_records.append((len(a_anns), len(rest_a)))
    corpus.rate_records.append((len(b_anns), len(rest_b)))


def _sweep_pair(counts: list[int], a_anns: list[Annotation], b_anns: list[Annotation],
                threshold: float) -> None:
    matches = _greedy_match(a_anns, b_anns, threshold)
    counts[0] += len(matches)
    counts[3] += sum(1 for a, b, _ in matches if a.category_id != b.category_id)
    matched_a = {a.id for a, _, _ in matches}
    matched_b = {b.id for _, b, _ in matches}
    left_a = [a for a in a_anns if a.id not in matched_a]
    left_b = [b for b in b_anns if b.id not in matched_b]
    topo_a, consumed_a = _topology_from_side(left_a, left_b, threshold)
    topo_b, consumed_b = _topology_from_side(
        [b for b in left_b if b.id not in consumed_a],
        [a for a in left_a if a.id not in consumed_a],
        threshold,
    )
    counts[2] += len(topo_a) + len(topo_b)
    consumed = consumed_a | consumed_b
    counts[1] += sum(1 for x in left_a + left_b if x.id not in consumed)
