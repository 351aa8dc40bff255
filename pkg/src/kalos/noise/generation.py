"""Synthesis of noisy annotation sets from reference annotations.

Stages run in a strict hierarchy per synthetic rater and image —
unmatched (existence), topology (split/merge), category, localization —
over a dynamic candidate registry. Lower-priority stages still sample
against the original pool, so an attempt that lands on an already consumed
candidate is counted as cannibalization; the ratio of such attempts to all
sampled events is the signal loss.

The magnitude lambda scales discrete event probabilities as
min(1, p * lambda) and multiplies the stochastic residuals of the
continuous drivers; lambda = 0 reproduces the reference exactly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from ..dataset import Annotation, Assignment, CategoryRecord, Dataset, RaterRecord
from ..geometry import Box2D
from .model import NoiseModel, Proposal, merge_score


class GenerationError(ValueError):
    pass


@dataclass
class SynthesisResult:
    dataset: Dataset
    # synthetic annotation id -> reference annotation ids (empty for FP inserts)
    correspondence: dict[str, tuple[str, ...]]
    events: list[dict] = field(default_factory=list)
    theoretical_events: int = 0
    cannibalized: int = 0
    fp_skipped: int = 0

    @property
    def signal_loss(self) -> float:
        if self.theoretical_events == 0:
            return 0.0
        return self.cannibalized / self.theoretical_events

    def merge_with(self, other: "SynthesisResult") -> "SynthesisResult":
        categories = {c.id: c for c in self.dataset.categories}
        for c in other.dataset.categories:
            categories.setdefault(c.id, c)
        dataset = Dataset(
            images=self.dataset.images,
            raters=self.dataset.raters + other.dataset.raters,
            assignments=self.dataset.assignments + other.dataset.assignments,
            categories=tuple(sorted(categories.values(), key=lambda c: c.id)),
            annotations=self.dataset.annotations + other.dataset.annotations,
        )
        return SynthesisResult(
            dataset=dataset,
            correspondence={**self.correspondence, **other.correspondence},
            events=self.events + other.events,
            theoretical_events=self.theoretical_events + other.theoretical_events,
            cannibalized=self.cannibalized + other.cannibalized,
            fp_skipped=self.fp_skipped + other.fp_skipped,
        )


def _stream(seed: int, rater_index: int, image_id: str) -> np.random.Generator:
    """Independent, order-free RNG stream per (rater, image)."""
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    image_key = int.from_bytes(digest[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([seed, rater_index, image_key]))


def _clamp_centroid(box: Box2D) -> Box2D:
    """Keep the centroid inside the image: clamp the shift at the edge."""
    cx, cy = box.centroid()
    dx = min(max(cx, 0.0), 1.0) - cx
    dy = min(max(cy, 0.0), 1.0) - cy
    if dx == 0.0 and dy == 0.0:
        return box
    return Box2D(box.x + dx, box.y + dy, box.w, box.h)


def _box_iou(a: Box2D, b: Box2D) -> float:
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def _select_weights(model: NoiseModel, areas: np.ndarray) -> np.ndarray:
    w = np.asarray(model.unmatched.select.prob(np.log(np.maximum(areas, 1e-9))), dtype=float)
    w = np.maximum(w, 1e-9)
    return w / w.sum()


def _localize(box: Box2D, model: NoiseModel, lam: float, rng: np.random.Generator,
              misclassified: bool = False) -> Box2D:
    cat = model.category
    translation = cat.translation if (misclassified and cat.translation) else model.translation
    direction = cat.direction if (misclassified and cat.direction) else model.direction
    scale_w = cat.scale_w if (misclassified and cat.scale_w) else model.scale_w
    scale_h = cat.scale_h if (misclassified and cat.scale_h) else model.scale_h

    area = box.area()
    magnitude = abs(float(translation.predict(area)) + float(translation.sample_residual(rng, 1, lam)[0]))
    theta = float(direction.sample(rng, 1)[0])
    dx, dy = magnitude * math.cos(theta), magnitude * math.sin(theta)

    new_w, new_h = box.w, box.h
    for axis, scale_model in (("w", scale_w), ("h", scale_h)):
        log_s = float(scale_model.predict(area)) + float(scale_model.sample_residual(rng, 1, lam)[0])
        if rng.random() < 0.5:
            log_s = -log_s
        factor = math.exp(log_s)
        if axis == "w":
            new_w = box.w * factor
        else:
            new_h = box.h * factor
    cx, cy = box.centroid()
    shifted = Box2D(cx + dx - new_w / 2.0, cy + dy - new_h / 2.0, new_w, new_h)
    return _clamp_centroid(shifted)


def _make_children(parent: Box2D, model: NoiseModel, rng: np.random.Generator) -> list[Box2D]:
    topo = model.topology
    area = parent.area()
    pcx, pcy = parent.centroid()
    theta1 = float(model.direction.sample(rng, 1)[0])
    beta_draw = float(topo.child_angle.sample(rng, 1)[0]) if topo.child_angle else 1.0
    side = 1.0 if rng.random() < 0.5 else -1.0
    theta2 = theta1 + side * beta_draw * math.pi
    placement = topo.child_translation or model.translation
    children = []
    for theta in (theta1, theta2):
        lsw = float(topo.child_scale_w.predict(area)) + float(topo.child_scale_w.sample_residual(rng, 1)[0])
        lsh = float(topo.child_scale_h.predict(area)) + float(topo.child_scale_h.sample_residual(rng, 1)[0])
        lsw = min(lsw + topo.kappa_offset, -1e-3)
        lsh = min(lsh + topo.kappa_offset, -1e-3)
        w, h = parent.w * math.exp(lsw), parent.h * math.exp(lsh)
        magnitude = abs(float(placement.predict(area)) + float(placement.sample_residual(rng, 1)[0]))
        cx = pcx + magnitude * math.cos(theta)
        cy = pcy + magnitude * math.sin(theta)
        children.append(_clamp_centroid(Box2D(cx - w / 2.0, cy - h / 2.0, w, h)))
    return children


def _sample_fp(model: NoiseModel, image_id: str, active_boxes: list[Box2D],
               categories: list[str], rng: np.random.Generator) -> tuple[Box2D, str] | None:
    pool = model.proposals_for(image_id)
    admissible = [p for p in pool
                  if all(_box_iou(p.box, b) < model.unmatched.fp_iou_max for b in active_boxes)]
    if admissible:
        areas = np.asarray([p.box.area() for p in admissible])
        idx = int(rng.choice(len(admissible), p=_select_weights(model, areas)))
        pick = admissible[idx]
        category = model.category.transition.sample(rng, pick.category_id)
        return pick.box, category
    if model.unmatched.fp_fallback == "random_box":
        for _ in range(25):
            w = float(rng.uniform(0.02, 0.25))
            h = float(rng.uniform(0.02, 0.25))
            x = float(rng.uniform(0.0, 1.0 - w))
            y = float(rng.uniform(0.0, 1.0 - h))
            box = Box2D(x, y, w, h)
            if all(_box_iou(box, b) < model.unmatched.fp_iou_max for b in active_boxes):
                source = categories[int(rng.integers(0, len(categories)))]
                return box, model.category.transition.sample(rng, source)
    return None


def generate(reference: Dataset, model: NoiseModel, lam: float, n_raters: int, seed: int = 0,
             source_rater: str | None = None, rater_prefix: str = "synth",
             rater_index_offset: int = 0) -> SynthesisResult:
    """Synthesize noisy raters from reference annotations.

    Each synthetic rater re-annotates every image starting from the
    reference annotation set (optionally a single source rater's view).
    Deterministic for a fixed seed; parallel-safe because streams are keyed
    by (seed, rater index, image id), not call order.
    """
    if lam < 0:
        raise GenerationError(f"lambda must be non-negative, got {lam}")
    if n_raters < 1:
        raise GenerationError("need at least 1 synthetic rater")

    rater_ids = [f"{rater_prefix}_{i:02d}" for i in range(rater_index_offset,
                                                          rater_index_offset + n_raters)]
    categories = sorted(c.id for c in reference.categories)
    annotations: list[Annotation] = []
    correspondence: dict[str, tuple[str, ...]] = {}
    events: list[dict] = []
    theoretical = 0
    cannibalized = 0
    fp_skipped = 0

    images = sorted(reference.images, key=lambda im: im.id)
    for local_index, rater_id in enumerate(rater_ids):
        for image in images:
            source = [a for a in reference.annotations_by_image.get(image.id, ())
                      if source_rater is None or a.rater_id == source_rater]
            source.sort(key=lambda a: a.id)
            rng = _stream(seed, rater_index_offset + local_index, image.id)
            out, corr, evts, stats = _generate_image(source, model, lam, rng, rater_id,
                                                     image.id, categories)
            annotations.extend(out)
            correspondence.update(corr)
            events.extend(evts)
            theoretical += stats[0]
            cannibalized += stats[1]
            fp_skipped += stats[2]

    by_id = {c.id: c for c in reference.categories}
    for cat in sorted(_proposal_categories(model)):
        by_id.setdefault(cat, CategoryRecord(id=cat, name=cat))
    dataset = Dataset(
        images=reference.images,
        raters=tuple(RaterRecord(id=r) for r in rater_ids),
        assignments=tuple(Assignment(image_id=im.id, rater_id=r)
                          for r in rater_ids for im in reference.images),
        categories=tuple(sorted(by_id.values(), key=lambda c: c.id)),
        annotations=tuple(annotations),
    )
    return SynthesisResult(dataset=dataset, correspondence=correspondence, events=events,
                           theoretical_events=theoretical, cannibalized=cannibalized,
                           fp_skipped=fp_skipped)


def _proposal_categories(model: NoiseModel) -> set[str]:
    cats = {p.category_id for p in model.proposals}
    cats.update(model.category.transition.categories)
    return cats


def _generate_image(source: list[Annotation], model: NoiseModel, lam: float,
                    rng: np.random.Generator, rater_id: str, image_id: str,
                    categories: list[str]):
    annotations: list[Annotation] = []
    correspondence: dict[str, tuple[str, ...]] = {}
    events: list[dict] = []
    counter = 0

    def new_id() -> str:
        nonlocal counter
        counter += 1
        return f"{rater_id}:{image_id}:{counter:04d}"

    def emit(box: Box2D, category: str, refs: tuple[str, ...], stage: str) -> None:
        ann_id = new_id()
        annotations.append(Annotation(id=ann_id, image_id=image_id, rater_id=rater_id,
                                      category_id=category, geometry=box))
        correspondence[ann_id] = refs
        events.append({"rater_id": rater_id, "image_id": image_id, "stage": stage,
                       "refs": list(refs), "annotation_id": ann_id})

    if lam == 0.0 or not source:
        for ann in source:
            emit(ann.geometry, ann.category_id, (ann.id,), "identity")
        return annotations, correspondence, events, (0, 0, 0)

    consumed: set[str] = set()
    theoretical = 0
    cannibalized = 0
    fp_skipped = 0
    boxes = {a.id: a.geometry for a in source}
    areas = np.asarray([a.geometry.area() for a in source])

    # Stage 1 - unmatched instances (existence).
    rate = float(model.unmatched.rate.rate(len(source))) * lam
    k = int(rng.poisson(rate))
    theoretical += k
    for _ in range(k):
        if rng.random() < model.unmatched.fp_split:
            # Deletion (FN), weighted toward small instances.
            idx = int(rng.choice(len(source), p=_select_weights(model, areas)))
            target = source[idx]
            if target.id in consumed:
                cannibalized += 1
                continue
            consumed.add(target.id)
            events.append({"rater_id": rater_id, "image_id": image_id, "stage": "deleted",
                           "refs": [target.id], "annotation_id": None})
        else:
            active = [boxes[a.id] for a in source if a.id not in consumed]
            active += [a.geometry for a in annotations]
            pick = _sample_fp(model, image_id, active, categories, rng)
            if pick is None:
                fp_skipped += 1
                events.append({"rater_id": rater_id, "image_id": image_id, "stage": "fp_skipped",
                               "refs": [], "annotation_id": None})
                continue
            emit(pick[0], pick[1], (), "fp")

    # Stage 2 - topology (fragmentation, then combination).
    if model.topology.enabled:
        for ann in source:
            p = min(1.0, float(model.topology.parent.prob(math.log(max(ann.geometry.area(), 1e-9)))) * lam)
            if rng.random() >= p:
                continue
            theoretical += 1
            if ann.id in consumed:
                cannibalized += 1
                continue
            consumed.add(ann.id)
            for child in _make_children(ann.geometry, model, rng):
                emit(child, ann.category_id, (ann.id,), "fragmented")
        if math.isfinite(model.topology.merge_threshold):
            scored = []
            for i, a in enumerate(source):
                for b in source[i + 1:]:
                    if a.category_id != b.category_id:
                        continue
                    s = merge_score(model, a.geometry, b.geometry)
                    if s > model.topology.merge_threshold:
                        scored.append((-s, a.id, b.id))
            scored.sort()
            for neg_s, id_a, id_b in scored:
                if rng.random() >= min(1.0, lam):
                    continue
                theoretical += 1
                if id_a in consumed or id_b in consumed:
                    cannibalized += 1
                    continue
                consumed.update((id_a, id_b))
                ba, bb = boxes[id_a], boxes[id_b]
                x0, y0 = min(ba.x, bb.x), min(ba.y, bb.y)
                x1 = max(ba.x + ba.w, bb.x + bb.w)
                y1 = max(ba.y + ba.h, bb.y + bb.h)
                category = next(a.category_id for a in source if a.id == id_a)
                emit(Box2D(x0, y0, x1 - x0, y1 - y0), category, (id_a, id_b), "merged")

    # Stage 3 - category mistakes (with their own localization profile).
    p_cat = min(1.0, model.category.p_global * lam)
    if p_cat > 0:
        for ann in source:
            if rng.random() >= p_cat:
                continue
            theoretical += 1
            if ann.id in consumed:
                cannibalized += 1
                continue
            consumed.add(ann.id)
            new_cat = model.category.transition.sample(rng, ann.category_id)
            box = _localize(ann.geometry, model, lam, rng, misclassified=True)
            emit(box, new_cat, (ann.id,), "category")

    # Stage 4 - localization shift for every untouched survivor.
    for ann in source:
        if ann.id in consumed:
            continue
        box = _localize(ann.geometry, model, lam, rng)
        emit(box, ann.category_id, (ann.id,), "localization")

    return annotations, correspondence, events, (theoretical, cannibalized, fp_skipped)


def generate_collaboration(reference: Dataset, group_sizes: tuple[int, int], model: NoiseModel,
                           lam: float, seed: int = 0,
                           style_raters: tuple[str, str] | None = None) -> SynthesisResult:
    """Two "schools of thought": group A raters synthesize from one reference
    style (rater), group B from another."""
    ref_raters = sorted(r.id for r in reference.raters)
    if style_raters is None:
        if len(ref_raters) < 2:
            raise GenerationError("collaboration needs two reference styles (raters)")
        style_raters = (ref_raters[0], ref_raters[1])
    size_a, size_b = group_sizes
    if size_a < 1 or size_b < 1:
        raise GenerationError("both collaboration groups need at least one rater")
    part_a = generate(reference, model, lam, size_a, seed=seed, source_rater=style_raters[0],
                      rater_prefix="groupA", rater_index_offset=0)
    part_b = generate(reference, model, lam, size_b, seed=seed, source_rater=style_raters[1],
                      rater_prefix="groupB", rater_index_offset=size_a)
    return part_a.merge_with(part_b)
