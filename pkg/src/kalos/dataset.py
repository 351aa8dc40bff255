"""Canonical multi-rater dataset model: records, ingestion, validation.

The on-disk format is a single JSON document (see ``parse_dataset``).
Datasets are immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import (
    Geometry,
    geometry_from_payload,
    geometry_issues,
    geometry_kind,
    geometry_to_payload,
    scale_absolute,
)

# Reserved label used in reliability matrices for an explicit absence.
NO_OBJECT = "NO_OBJECT"

SIZE_SMALL_MAX = 32.0**2 / (640.0 * 480.0)
SIZE_MEDIUM_MAX = 96.0**2 / (640.0 * 480.0)


class DatasetError(ValueError):
    """Raised when a dataset file or object violates the format contract."""


@dataclass(frozen=True)
class ImageRecord:
    id: str
    width: int
    height: int
    depth: int | None = None
    tag: str | None = None


@dataclass(frozen=True)
class RaterRecord:
    id: str
    name: str | None = None


@dataclass(frozen=True)
class Assignment:
    image_id: str
    rater_id: str
    # None means the rater covers every category on this image.
    categories: frozenset[str] | None = None


@dataclass(frozen=True)
class CategoryRecord:
    id: str
    name: str


@dataclass(frozen=True)
class Annotation:
    id: str
    image_id: str
    rater_id: str
    category_id: str
    geometry: Geometry


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...]
    raters: tuple[RaterRecord, ...]
    assignments: tuple[Assignment, ...]
    categories: tuple[CategoryRecord, ...]
    annotations: tuple[Annotation, ...]
    images_by_id: dict = field(default_factory=dict, compare=False, repr=False)
    raters_by_id: dict = field(default_factory=dict, compare=False, repr=False)
    categories_by_id: dict = field(default_factory=dict, compare=False, repr=False)
    assignment_scope: dict = field(default_factory=dict, compare=False, repr=False)
    annotations_by_image: dict = field(default_factory=dict, compare=False, repr=False)
    annotations_by_id: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "images_by_id", {im.id: im for im in self.images})
        object.__setattr__(self, "raters_by_id", {r.id: r for r in self.raters})
        object.__setattr__(self, "categories_by_id", {c.id: c for c in self.categories})
        object.__setattr__(
            self, "assignment_scope", {(a.image_id, a.rater_id): a.categories for a in self.assignments}
        )
        by_image: dict[str, list[Annotation]] = {im.id: [] for im in self.images}
        for ann in self.annotations:
            by_image.setdefault(ann.image_id, []).append(ann)
        object.__setattr__(
            self, "annotations_by_image", {k: tuple(v) for k, v in by_image.items()}
        )
        object.__setattr__(self, "annotations_by_id", {a.id: a for a in self.annotations})

    def geometry_kind(self) -> str | None:
        if not self.annotations:
            return None
        return geometry_kind(self.annotations[0].geometry)

    def raters_for_image(self, image_id: str) -> tuple[str, ...]:
        return tuple(sorted(r for (i, r) in self.assignment_scope if i == image_id))

    def is_assigned(self, image_id: str, rater_id: str) -> bool:
        return (image_id, rater_id) in self.assignment_scope

    def scope(self, image_id: str, rater_id: str) -> frozenset[str] | None:
        return self.assignment_scope.get((image_id, rater_id))

    def in_scope(self, image_id: str, rater_id: str, category_id: str) -> bool:
        if not self.is_assigned(image_id, rater_id):
            return False
        scope = self.assignment_scope[(image_id, rater_id)]
        return scope is None or category_id in scope


@dataclass
class ValidationReport:
    checks: dict[str, int]
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


def _skeleton_size(annotations: tuple[Annotation, ...]) -> int | None:
    for ann in annotations:
        g = ann.geometry
        if geometry_kind(g) == "keypoints":
            return len(g.points)  # type: ignore[union-attr]
    return None


def validate_dataset(d: Dataset) -> ValidationReport:
    """Check every dataset invariant; the report lists all violations."""
    checks = {
        "unique_ids": 0,
        "image_dimensions": 0,
        "assignment_integrity": 0,
        "referential_integrity": 0,
        "geometry": 0,
        "geometry_uniform": 0,
        "annotation_scope": 0,
    }
    violations: list[str] = []

    def fail(check: str, message: str) -> None:
        checks[check] += 1
        violations.append(message)

    for name, records in (("image", d.images), ("rater", d.raters), ("category", d.categories)):
        seen: set[str] = set()
        for rec in records:
            if rec.id in seen:
                fail("unique_ids", f"duplicate {name} id {rec.id!r}")
            seen.add(rec.id)
    seen_ann: set[str] = set()
    for ann in d.annotations:
        if ann.id in seen_ann:
            fail("unique_ids", f"duplicate annotation id {ann.id!r}")
        seen_ann.add(ann.id)

    for im in d.images:
        if im.width <= 0 or im.height <= 0 or (im.depth is not None and im.depth <= 0):
            fail("image_dimensions", f"image {im.id!r} has non-positive dimensions")

    for cat in d.categories:
        if cat.id == NO_OBJECT:
            fail("unique_ids", f"category id {NO_OBJECT!r} is reserved")

    seen_pairs: set[tuple[str, str]] = set()
    for a in d.assignments:
        key = (a.image_id, a.rater_id)
        if key in seen_pairs:
            fail("assignment_integrity", f"duplicate assignment {key!r}")
        seen_pairs.add(key)
        if a.image_id not in d.images_by_id:
            fail("assignment_integrity", f"assignment references unknown image {a.image_id!r}")
        if a.rater_id not in d.raters_by_id:
            fail("assignment_integrity", f"assignment references unknown rater {a.rater_id!r}")
        if a.categories is not None:
            for c in a.categories:
                if c not in d.categories_by_id:
                    fail("assignment_integrity", f"assignment {key!r} references unknown category {c!r}")

    skeleton = _skeleton_size(d.annotations)
    kinds = {geometry_kind(a.geometry) for a in d.annotations}
    if len(kinds) > 1:
        fail("geometry_uniform", f"mixed geometry variants in one dataset: {sorted(kinds)}")

    for ann in d.annotations:
        if ann.image_id not in d.images_by_id:
            fail("referential_integrity", f"annotation {ann.id!r} references unknown image {ann.image_id!r}")
        if ann.rater_id not in d.raters_by_id:
            fail("referential_integrity", f"annotation {ann.id!r} references unknown rater {ann.rater_id!r}")
        if ann.category_id not in d.categories_by_id:
            fail("referential_integrity", f"annotation {ann.id!r} references unknown category {ann.category_id!r}")
        if not d.is_assigned(ann.image_id, ann.rater_id):
            fail(
                "annotation_scope",
                f"annotation {ann.id!r}: rater {ann.rater_id!r} is not assigned to image {ann.image_id!r}",
            )
        elif not d.in_scope(ann.image_id, ann.rater_id, ann.category_id):
            fail(
                "annotation_scope",
                f"annotation {ann.id!r}: category {ann.category_id!r} outside the rater's scope",
            )
        for issue in geometry_issues(ann.geometry, skeleton_size=skeleton):
            fail("geometry", f"annotation {ann.id!r}: {issue}")

    return ValidationReport(checks=checks, violations=violations)


def _require(obj: dict, key: str, context: str):
    if key not in obj:
        raise DatasetError(f"{context}: missing field {key!r}")
    return obj[key]


def dataset_from_dict(doc: dict) -> Dataset:
    if not isinstance(doc, dict):
        raise DatasetError("dataset document must be a JSON object")
    version = _require(doc, "format_version", "dataset")
    if str(version) != "1":
        raise DatasetError(f"unsupported format_version {version!r}")
    mode = _require(doc, "coordinate_mode", "dataset")
    if mode not in ("relative", "absolute"):
        raise DatasetError(f"coordinate_mode must be 'relative' or 'absolute', got {mode!r}")

    images = []
    for rec in _require(doc, "images", "dataset"):
        images.append(
            ImageRecord(
                id=str(_require(rec, "id", "image")),
                width=int(_require(rec, "width", f"image {rec.get('id')!r}")),
                height=int(_require(rec, "height", f"image {rec.get('id')!r}")),
                depth=int(rec["depth"]) if rec.get("depth") is not None else None,
                tag=rec.get("tag"),
            )
        )
    raters = [
        RaterRecord(id=str(_require(rec, "id", "rater")), name=rec.get("name"))
        for rec in _require(doc, "raters", "dataset")
    ]
    assignments = []
    for rec in _require(doc, "assignments", "dataset"):
        cats = rec.get("categories")
        assignments.append(
            Assignment(
                image_id=str(_require(rec, "image_id", "assignment")),
                rater_id=str(_require(rec, "rater_id", "assignment")),
                categories=frozenset(str(c) for c in cats) if cats is not None else None,
            )
        )
    categories = [
        CategoryRecord(id=str(_require(rec, "id", "category")), name=str(_require(rec, "name", "category")))
        for rec in _require(doc, "categories", "dataset")
    ]
    image_index = {im.id: im for im in images}
    annotations = []
    for rec in _require(doc, "annotations", "dataset"):
        ann_id = str(_require(rec, "id", "annotation"))
        context = f"annotation {ann_id!r}"
        try:
            geom = geometry_from_payload(_require(rec, "geometry", context))
        except (ValueError, TypeError) as exc:
            raise DatasetError(f"{context}: {exc}") from exc
        image_id = str(_require(rec, "image_id", context))
        if mode == "absolute":
            image = image_index.get(image_id)
            if image is None:
                raise DatasetError(f"{context}: references unknown image {image_id!r}")
            try:
                geom = scale_absolute(geom, float(image.width), float(image.height),
                                      float(image.depth) if image.depth else None)
            except ValueError as exc:
                raise DatasetError(f"{context}: {exc}") from exc
        annotations.append(
            Annotation(
                id=ann_id,
                image_id=image_id,
                rater_id=str(_require(rec, "rater_id", context)),
                category_id=str(_require(rec, "category_id", context)),
                geometry=geom,
            )
        )

    dataset = Dataset(
        images=tuple(images),
        raters=tuple(raters),
        assignments=tuple(assignments),
        categories=tuple(categories),
        annotations=tuple(annotations),
    )
    report = validate_dataset(dataset)
    if not report.ok:
        raise DatasetError("; ".join(report.violations))
    return dataset


def parse_dataset(path: str | Path) -> Dataset:
    """Load and fully validate a dataset file, normalizing to relative coordinates."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"dataset file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc
    return dataset_from_dict(doc)


def dataset_to_dict(d: Dataset) -> dict:
    return {
        "format_version": "1",
        "coordinate_mode": "relative",
        "images": [
            {
                "id": im.id,
                "width": im.width,
                "height": im.height,
                **({"depth": im.depth} if im.depth is not None else {}),
                **({"tag": im.tag} if im.tag is not None else {}),
            }
            for im in d.images
        ],
        "raters": [
            {"id": r.id, **({"name": r.name} if r.name is not None else {})} for r in d.raters
        ],
        "assignments": [
            {
                "image_id": a.image_id,
                "rater_id": a.rater_id,
                **({"categories": sorted(a.categories)} if a.categories is not None else {}),
            }
            for a in d.assignments
        ],
        "categories": [{"id": c.id, "name": c.name} for c in d.categories],
        "annotations": [
            {
                "id": ann.id,
                "image_id": ann.image_id,
                "rater_id": ann.rater_id,
                "category_id": ann.category_id,
                "geometry": geometry_to_payload(ann.geometry),
            }
            for ann in d.annotations
        ],
    }


def serialize_dataset(d: Dataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dataset_to_dict(d), indent=1) + "\n", encoding="utf-8")


def relative_area(a: Annotation, img: ImageRecord) -> float:
    """Fraction of the image area (or volume) covered by the annotation.

    Geometry is already stored relative, so the image record only pins the
    annotation to its frame; boxes use w*h, polygons the shoelace area,
    voxel boxes w*h*d and keypoint sets the visible-point bounding box.
    """
    del img
    return a.geometry.area()


def size_class(a: Annotation, img: ImageRecord) -> str:
    """COCO-proportional size bucket on relative area: small/medium/large."""
    area = relative_area(a, img)
    if area < SIZE_SMALL_MAX:
        return "small"
    if area < SIZE_MEDIUM_MAX:
        return "medium"
    return "large"
