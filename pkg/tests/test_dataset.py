import json
import math

import pytest

from kalos.dataset import (
    Annotation,
    DatasetError,
    ImageRecord,
    dataset_from_dict,
    dataset_to_dict,
    parse_dataset,
    relative_area,
    size_class,
    validate_dataset,
)
from kalos.geometry import Box2D, KeypointSet, Polygon, VoxelBox

from fixtures import make_dataset

MINIMAL = {
    "format_version": "1",
    "coordinate_mode": "absolute",
    "images": [{"id": "im1", "width": 10, "height": 10}],
    "raters": [{"id": "r1"}, {"id": "r2"}],
    "assignments": [
        {"image_id": "im1", "rater_id": "r1"},
        {"image_id": "im1", "rater_id": "r2"},
    ],
    "categories": [{"id": "c1", "name": "thing"}],
    "annotations": [
        {"id": "a1", "image_id": "im1", "rater_id": "r1", "category_id": "c1",
         "geometry": {"type": "bbox", "coordinates": [1, 1, 5, 5]}},
        {"id": "a2", "image_id": "im1", "rater_id": "r2", "category_id": "c1",
         "geometry": {"type": "bbox", "coordinates": [1, 1, 5, 5]}},
    ],
}


def write(tmp_path, doc, name="d.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def test_parse_minimal_converts_absolute_to_relative(tmp_path):
    d = parse_dataset(write(tmp_path, MINIMAL))
    assert len(d.annotations) == 2
    for ann in d.annotations:
        g = ann.geometry
        assert (g.x, g.y, g.w, g.h) == (0.1, 0.1, 0.5, 0.5)


def test_parse_unknown_rater_names_annotation(tmp_path):
    doc = json.loads(json.dumps(MINIMAL))
    doc["annotations"][1]["rater_id"] = "ghost"
    with pytest.raises(DatasetError, match="a2"):
        parse_dataset(write(tmp_path, doc))


def test_parse_mixed_geometry_rejected(tmp_path):
    doc = json.loads(json.dumps(MINIMAL))
    doc["annotations"][1]["geometry"] = {"type": "polygon",
                                         "coordinates": [[0, 0], [5, 0], [0, 5]]}
    with pytest.raises(DatasetError, match="mixed geometry"):
        parse_dataset(write(tmp_path, doc))


def test_parse_missing_field(tmp_path):
    doc = json.loads(json.dumps(MINIMAL))
    del doc["annotations"][0]["category_id"]
    with pytest.raises(DatasetError, match="category_id"):
        parse_dataset(write(tmp_path, doc))


def test_parse_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(DatasetError, match="malformed"):
        parse_dataset(path)


def test_roundtrip_identical(tmp_path):
    d = parse_dataset(write(tmp_path, MINIMAL))
    doc = dataset_to_dict(d)
    again = dataset_from_dict(json.loads(json.dumps(doc)))
    assert again == d


def test_relative_area_invariant_under_rescaling(tmp_path):
    doc_small = json.loads(json.dumps(MINIMAL))
    doc_big = json.loads(json.dumps(MINIMAL))
    doc_big["images"][0].update(width=20, height=20)
    for ann in doc_big["annotations"]:
        ann["geometry"]["coordinates"] = [2 * v for v in ann["geometry"]["coordinates"]]
    d_small = parse_dataset(write(tmp_path, doc_small, "s.json"))
    d_big = parse_dataset(write(tmp_path, doc_big, "b.json"))
    for a, b in zip(d_small.annotations, d_big.annotations):
        img_a = d_small.images_by_id[a.image_id]
        img_b = d_big.images_by_id[b.image_id]
        assert relative_area(a, img_a) == pytest.approx(relative_area(b, img_b), abs=1e-12)


def test_every_annotation_is_assigned_after_parse(tmp_path):
    d = parse_dataset(write(tmp_path, MINIMAL))
    for ann in d.annotations:
        assert d.is_assigned(ann.image_id, ann.rater_id)


def test_validate_collects_all_violations():
    bad = make_dataset(
        ["im1"], ["r1", "r2"],
        [
            ("a1", "im1", "r1", "cat_a", Box2D(0.1, 0.1, 0.0, 0.2)),  # zero width
            ("a2", "im1", "r3", "cat_a", Box2D(0.1, 0.1, 0.2, 0.2)),  # unknown rater
        ],
    )
    report = validate_dataset(bad)
    assert not report.ok
    assert report.checks["geometry"] == 1
    assert report.checks["referential_integrity"] >= 1


def test_valid_dataset_reports_clean():
    good = make_dataset(["im1"], ["r1"], [("a1", "im1", "r1", "cat_a", Box2D(0.1, 0.1, 0.2, 0.2))])
    assert validate_dataset(good).ok


def test_annotation_outside_assignment_is_violation():
    d = make_dataset(
        ["im1"], ["r1", "r2"],
        [("a1", "im1", "r2", "cat_a", Box2D(0.1, 0.1, 0.2, 0.2))],
        assignments=[("im1", "r1", None)],
    )
    report = validate_dataset(d)
    assert report.checks["annotation_scope"] == 1


def test_category_scope_enforced():
    d = make_dataset(
        ["im1"], ["r1"],
        [("a1", "im1", "r1", "cat_b", Box2D(0.1, 0.1, 0.2, 0.2))],
        assignments=[("im1", "r1", ("cat_a",))],
    )
    report = validate_dataset(d)
    assert report.checks["annotation_scope"] == 1


IMG = ImageRecord(id="im", width=100, height=100)


def ann(geometry):
    return Annotation(id="a", image_id="im", rater_id="r", category_id="c", geometry=geometry)


@pytest.mark.parametrize(
    "geometry,expected",
    [
        (Box2D(0, 0, 0.5, 0.5), 0.25),
        (Polygon(((0, 0), (1, 0), (1, 1), (0, 1))), 1.0),
        (Polygon(((0, 0), (0.4, 0), (0, 0.3))), 0.06),
        (VoxelBox(0, 0, 0, 0.5, 0.5, 0.2), 0.05),
        (KeypointSet(((0.1, 0.1, 1), (0.3, 0.5, 1), (0.9, 0.9, 0))), 0.2 * 0.4),
    ],
)
def test_relative_area(geometry, expected):
    assert relative_area(ann(geometry), IMG) == pytest.approx(expected, abs=1e-12)


def test_size_class_thresholds():
    small_max = 32**2 / (640 * 480)
    assert math.isclose(small_max, 0.0033333333, rel_tol=1e-6)
    assert size_class(ann(Box2D(0, 0, 0.1, 0.01)), IMG) == "small"  # area 0.001
    assert size_class(ann(Box2D(0, 0, 0.1, 0.1)), IMG) == "medium"  # area 0.01
    # Half-open boundary: area exactly 96^2/(640*480) = 0.03 is large.
    assert size_class(ann(Box2D(0, 0, 0.3, 0.1)), IMG) == "large"
    assert size_class(ann(Box2D(0, 0, 1.0, 0.5)), IMG) == "large"
