"""Shared fixture builders: programmatic datasets and a reference noise
model with known parameters for the property testbed."""

from __future__ import annotations

import math

import numpy as np

from kalos.dataset import (
    Annotation,
    Assignment,
    CategoryRecord,
    Dataset,
    ImageRecord,
    RaterRecord,
)
from kalos.geometry import Box2D
from kalos.noise.model import (
    CategoryModel,
    NoiseModel,
    TopologyModel,
    TransitionTable,
    UnmatchedModel,
)
from kalos.stats import (
    BetaFit,
    LogisticModel,
    PoissonModel,
    linear_t_from_params,
    vonmises_mixture_from_params,
)

CATEGORIES = ("cat_a", "cat_b", "cat_c", "cat_d")


def make_dataset(images, raters, annotations, categories=CATEGORIES, assignments=None):
    """Compact dataset builder.

    ``annotations`` rows are (id, image_id, rater_id, category_id, Box2D or
    geometry). Assignments default to every rater on every image.
    """
    image_records = tuple(
        im if isinstance(im, ImageRecord) else ImageRecord(id=im, width=100, height=100)
        for im in images
    )
    rater_records = tuple(
        r if isinstance(r, RaterRecord) else RaterRecord(id=r) for r in raters
    )
    if assignments is None:
        assignment_records = tuple(
            Assignment(image_id=im.id, rater_id=r.id)
            for im in image_records for r in rater_records
        )
    else:
        assignment_records = tuple(
            a if isinstance(a, Assignment) else Assignment(image_id=a[0], rater_id=a[1],
                                                           categories=frozenset(a[2]) if len(a) > 2 and a[2] else None)
            for a in assignments
        )
    category_records = tuple(
        c if isinstance(c, CategoryRecord) else CategoryRecord(id=c, name=c)
        for c in categories
    )
    annotation_records = tuple(
        a if isinstance(a, Annotation) else Annotation(id=a[0], image_id=a[1], rater_id=a[2],
                                                       category_id=a[3], geometry=a[4])
        for a in annotations
    )
    return Dataset(images=image_records, raters=rater_records, assignments=assignment_records,
                   categories=category_records, annotations=annotation_records)


def grid_boxes(rng: np.random.Generator, n: int, crowded: float = 0.35) -> list[Box2D]:
    """n boxes on a jittered 3x3-ish grid with varied sizes.

    A ``crowded`` fraction of boxes gets a close neighbor in the same cell
    (partially overlapping), the cross-cluster ambiguity that real scenes
    show and that separates the correspondence solvers.
    """
    cells = [(cx, cy) for cy in (0.18, 0.5, 0.82) for cx in (0.18, 0.5, 0.82)]
    boxes: list[Box2D] = []
    cell_idx = 0
    while len(boxes) < n:
        cx, cy = cells[cell_idx % len(cells)]
        cell_idx += 1
        cx += float(rng.uniform(-0.03, 0.03))
        cy += float(rng.uniform(-0.03, 0.03))
        w = float(rng.uniform(0.05, 0.22))
        h = float(rng.uniform(0.05, 0.22))
        boxes.append(Box2D(cx - w / 2, cy - h / 2, w, h))
        if len(boxes) < n and rng.random() < crowded:
            # Overlapping neighbor near the matching threshold: competing
            # partners stay distinguishable but enter the candidate graph.
            dx = float(rng.uniform(0.20, 0.40)) * w * (1 if rng.random() < 0.5 else -1)
            dy = float(rng.uniform(0.10, 0.20)) * h * (1 if rng.random() < 0.5 else -1)
            boxes.append(Box2D(cx - w / 2 + dx, cy - h / 2 + dy, w, h))
    return boxes


def reference_dataset(n_images: int = 50, mean_anns: int = 6, seed: int = 7,
                      rater: str = "ref") -> Dataset:
    """Single-rater synthetic reference: ~n_images * mean_anns box annotations."""
    rng = np.random.default_rng(seed)
    images = [ImageRecord(id=f"img{i:03d}", width=640, height=480) for i in range(n_images)]
    annotations = []
    for im in images:
        n = int(rng.integers(mean_anns - 2, mean_anns + 3))
        boxes = grid_boxes(rng, n)
        prev_box = None
        prev_cat = None
        for k, box in enumerate(boxes):
            category = CATEGORIES[int(rng.integers(0, len(CATEGORIES)))]
            # Crowded neighbors usually share the category (the ambiguous case).
            if prev_box is not None and _overlaps(prev_box, box) and rng.random() < 0.8:
                category = prev_cat
            annotations.append(Annotation(id=f"{im.id}:a{k:02d}", image_id=im.id,
                                          rater_id=rater, category_id=category, geometry=box))
            prev_box, prev_cat = box, category
    return make_dataset(images, [rater], annotations)


def _overlaps(a: Box2D, b: Box2D) -> bool:
    return (min(a.x + a.w, b.x + b.w) > max(a.x, b.x)
            and min(a.y + a.h, b.y + b.h) > max(a.y, b.y))


def two_style_reference(n_images: int = 30, seed: int = 11) -> Dataset:
    """Two reference raters with systematically diverging conventions:
    style B shifts every box, drops some and re-labels others."""
    rng = np.random.default_rng(seed)
    images = [ImageRecord(id=f"img{i:03d}", width=640, height=480) for i in range(n_images)]
    annotations = []
    for im in images:
        n = int(rng.integers(4, 8))
        for k, box in enumerate(grid_boxes(rng, n)):
            category = CATEGORIES[int(rng.integers(0, len(CATEGORIES)))]
            annotations.append(Annotation(id=f"{im.id}:s1:{k:02d}", image_id=im.id,
                                          rater_id="style1", category_id=category, geometry=box))
            if rng.random() < 0.25:
                continue  # style2 misses this instance entirely
            cat2 = category
            if rng.random() < 0.3:
                cat2 = CATEGORIES[int(rng.integers(0, len(CATEGORIES)))]
            shift = float(rng.uniform(0.01, 0.035))
            angle = float(rng.uniform(0, 2 * math.pi))
            box2 = Box2D(box.x + shift * math.cos(angle), box.y + shift * math.sin(angle),
                         box.w * float(rng.uniform(0.85, 1.15)),
                         box.h * float(rng.uniform(0.85, 1.15)))
            annotations.append(Annotation(id=f"{im.id}:s2:{k:02d}", image_id=im.id,
                                          rater_id="style2", category_id=cat2, geometry=box2))
    return make_dataset(images, ["style1", "style2"], annotations)


def closed_loop_model() -> NoiseModel:
    """Model for fit-recovery round trips: translation trend well above the
    residual scale so the folded magnitude keeps the trend identifiable,
    and existence/topology rates low enough not to bias the matched pairs."""
    translation = linear_t_from_params(intercept=0.008, slope=0.30, nu=5.0, sigma=0.004)
    direction = vonmises_mixture_from_params(
        "axis_centered", means=(0.0, math.pi / 2, math.pi, 3 * math.pi / 2),
        kappas=(8.0, 8.0, 8.0, 8.0), weights=(0.40, 0.15, 0.30, 0.15))
    scale = linear_t_from_params(intercept=0.030, slope=-0.10, nu=5.0, sigma=0.015)
    category = CategoryModel(
        p_global=0.026,
        transition=TransitionTable(categories=CATEGORIES, probs=None, uniform=True),
        direction=vonmises_mixture_from_params("unimodal_doubled", means=(1.0,),
                                               kappas=(4.0,), weights=(1.0,)),
        translation=linear_t_from_params(intercept=0.008, slope=0.30, nu=5.0, sigma=0.005),
        scale_w=scale, scale_h=scale,
    )
    unmatched = UnmatchedModel(
        rate=PoissonModel(intercept=math.log(0.08), slope=0.0),
        select=LogisticModel(intercept=-4.0, slope=-0.5),
        fp_fallback=None,
    )
    topology = TopologyModel(
        enabled=True,
        parent=LogisticModel(intercept=-6.0, slope=0.1),
        child_translation=linear_t_from_params(intercept=0.03, slope=0.30, nu=5.0, sigma=0.02),
        child_scale_w=linear_t_from_params(intercept=-0.9, slope=0.0, nu=6.0, sigma=0.20),
        child_scale_h=linear_t_from_params(intercept=-0.9, slope=0.0, nu=6.0, sigma=0.20),
        kappa_offset=0.20,
        child_angle=BetaFit(alpha=4.53, beta=0.53, loglik=0.0),
        merge_threshold=math.inf,
    )
    return NoiseModel(translation=translation, direction=direction, scale_w=scale,
                      scale_h=scale, category=category, unmatched=unmatched,
                      topology=topology)


def testbed_model(fp_fallback: str | None = "random_box") -> NoiseModel:
    """Noise model with known, paper-scale parameters for property tests."""
    translation = linear_t_from_params(intercept=0.002, slope=0.05, nu=4.0, sigma=0.010)
    direction = vonmises_mixture_from_params(
        "axis_centered", means=(0.0, math.pi / 2, math.pi, 3 * math.pi / 2),
        kappas=(8.0, 8.0, 8.0, 8.0), weights=(0.40, 0.15, 0.30, 0.15))
    scale = linear_t_from_params(intercept=0.030, slope=-0.10, nu=5.0, sigma=0.020)
    mis_direction = vonmises_mixture_from_params("unimodal_doubled", means=(1.0,),
                                                 kappas=(4.0,), weights=(1.0,))
    category = CategoryModel(
        p_global=0.026,
        transition=TransitionTable(categories=CATEGORIES, probs=None, uniform=True),
        direction=mis_direction,
        translation=linear_t_from_params(intercept=0.003, slope=0.05, nu=4.0, sigma=0.015),
        scale_w=scale, scale_h=scale,
    )
    unmatched = UnmatchedModel(
        rate=PoissonModel(intercept=math.log(0.25), slope=0.03),
        select=LogisticModel(intercept=-4.0, slope=-0.5),
        fp_fallback=fp_fallback,
    )
    topology = TopologyModel(
        enabled=True,
        parent=LogisticModel(intercept=-2.5, slope=0.35),
        child_translation=linear_t_from_params(intercept=0.03, slope=0.30, nu=5.0, sigma=0.02),
        child_scale_w=linear_t_from_params(intercept=-0.9, slope=0.0, nu=6.0, sigma=0.20),
        child_scale_h=linear_t_from_params(intercept=-0.9, slope=0.0, nu=6.0, sigma=0.20),
        kappa_offset=0.20,
        child_angle=BetaFit(alpha=4.53, beta=0.53, loglik=0.0),
        merge_threshold=math.inf,
    )
    return NoiseModel(translation=translation, direction=direction, scale_w=scale,
                      scale_h=scale, category=category, unmatched=unmatched,
                      topology=topology)
