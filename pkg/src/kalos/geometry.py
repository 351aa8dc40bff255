"""Geometry primitives used by annotations.

All coordinates are relative to the image extent, i.e. live in the unit
square (or unit cube for volumes). Shapes may extend past the unit square
as long as they still intersect it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned rectangle given by top-left corner and extent."""

    x: float
    y: float
    w: float
    h: float

    def area(self) -> float:
        return self.w * self.h

    def centroid(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def corners(self) -> tuple[tuple[float, float], ...]:
        x, y, w, h = self.x, self.y, self.w, self.h
        return ((x, y), (x + w, y), (x + w, y + h), (x, y + h))


@dataclass(frozen=True)
class Polygon:
    """Simple polygon as an ordered vertex ring (not closed explicitly)."""

    vertices: tuple[tuple[float, float], ...]

    def area(self) -> float:
        return abs(self.signed_area())

    def signed_area(self) -> float:
        verts = self.vertices
        n = len(verts)
        acc = 0.0
        for i in range(n):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % n]
            acc += x0 * y1 - x1 * y0
        return acc / 2.0

    def centroid(self) -> tuple[float, float]:
        verts = self.vertices
        n = len(verts)
        a = self.signed_area()
        if abs(a) < 1e-15:
            # Degenerate ring: fall back to the vertex mean.
            xs = sum(v[0] for v in verts) / n
            ys = sum(v[1] for v in verts) / n
            return (xs, ys)
        cx = cy = 0.0
        for i in range(n):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % n]
            cross = x0 * y1 - x1 * y0
            cx += (x0 + x1) * cross
            cy += (y0 + y1) * cross
        return (cx / (6.0 * a), cy / (6.0 * a))


@dataclass(frozen=True)
class VoxelBox:
    """Axis-aligned 3D box for volumetric annotations."""

    x: float
    y: float
    z: float
    w: float
    h: float
    d: float

    def area(self) -> float:
        """Volume fraction; named area for uniformity with 2D shapes."""
        return self.w * self.h * self.d

    def centroid(self) -> tuple[float, float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0, self.z + self.d / 2.0)


@dataclass(frozen=True)
class KeypointSet:
    """Ordered keypoints (x, y, visibility) with a fixed skeleton length."""

    points: tuple[tuple[float, float, int], ...]

    def visible(self) -> tuple[int, ...]:
        return tuple(i for i, p in enumerate(self.points) if p[2] == 1)

    def area(self) -> float:
        """Area of the bounding box around the visible points."""
        vis = [(p[0], p[1]) for p in self.points if p[2] == 1]
        if not vis:
            return 0.0
        xs = [p[0] for p in vis]
        ys = [p[1] for p in vis]
        return (max(xs) - min(xs)) * (max(ys) - min(ys))

    def centroid(self) -> tuple[float, float]:
        vis = [(p[0], p[1]) for p in self.points if p[2] == 1]
        if not vis:
            return (0.0, 0.0)
        return (sum(p[0] for p in vis) / len(vis), sum(p[1] for p in vis) / len(vis))


Geometry = Box2D | Polygon | VoxelBox | KeypointSet

GEOMETRY_KIND = {Box2D: "bbox", Polygon: "polygon", VoxelBox: "voxel_box", KeypointSet: "keypoints"}


def geometry_kind(g: Geometry) -> str:
    return GEOMETRY_KIND[type(g)]


def canonical_key(g: Geometry) -> str:
    """Stable content string, used for order-independent tie breaking."""
    if isinstance(g, Box2D):
        return f"b:{g.x!r},{g.y!r},{g.w!r},{g.h!r}"
    if isinstance(g, Polygon):
        return "p:" + ";".join(f"{x!r},{y!r}" for x, y in g.vertices)
    if isinstance(g, VoxelBox):
        return f"v:{g.x!r},{g.y!r},{g.z!r},{g.w!r},{g.h!r},{g.d!r}"
    return "k:" + ";".join(f"{x!r},{y!r},{v}" for x, y, v in g.points)


def _intersects_unit_interval(lo: float, extent: float) -> bool:
    return lo < 1.0 and lo + extent > 0.0


def geometry_issues(g: Geometry, skeleton_size: int | None = None) -> list[str]:
    """Return human-readable invariant violations, empty when valid."""
    issues: list[str] = []
    if isinstance(g, Box2D):
        if g.w <= 0 or g.h <= 0:
            issues.append("box extent must be positive")
        elif not (_intersects_unit_interval(g.x, g.w) and _intersects_unit_interval(g.y, g.h)):
            issues.append("box does not intersect the unit square")
    elif isinstance(g, VoxelBox):
        if g.w <= 0 or g.h <= 0 or g.d <= 0:
            issues.append("voxel box extent must be positive")
        elif not (
            _intersects_unit_interval(g.x, g.w)
            and _intersects_unit_interval(g.y, g.h)
            and _intersects_unit_interval(g.z, g.d)
        ):
            issues.append("voxel box does not intersect the unit cube")
    elif isinstance(g, Polygon):
        if len(g.vertices) < 3:
            issues.append("polygon needs at least 3 vertices")
        elif repaired_polygon_area(g) <= 1e-12:
            issues.append("polygon has zero area after repair")
    elif isinstance(g, KeypointSet):
        if skeleton_size is not None and len(g.points) != skeleton_size:
            issues.append(f"keypoint set length {len(g.points)} != skeleton size {skeleton_size}")
        if not any(p[2] == 1 for p in g.points):
            issues.append("keypoint set has no visible point")
        if any(p[2] not in (0, 1) for p in g.points):
            issues.append("keypoint visibility must be 0 or 1")
    return issues


def repaired_polygon_area(p: Polygon) -> float:
    """Polygon area after self-intersection repair (shapely make_valid)."""
    from shapely import make_valid
    from shapely.geometry import Polygon as ShapelyPolygon

    try:
        sp = ShapelyPolygon(p.vertices)
        if not sp.is_valid:
            sp = make_valid(sp)
        return float(sp.area)
    except Exception:
        return p.area()


def scale_absolute(g: Geometry, width: float, height: float, depth: float | None) -> Geometry:
    """Convert absolute pixel/voxel coordinates into relative ones."""
    if isinstance(g, Box2D):
        return Box2D(g.x / width, g.y / height, g.w / width, g.h / height)
    if isinstance(g, Polygon):
        return Polygon(tuple((x / width, y / height) for x, y in g.vertices))
    if isinstance(g, VoxelBox):
        if depth is None:
            raise ValueError("voxel geometry requires an image depth")
        return VoxelBox(g.x / width, g.y / height, g.z / depth, g.w / width, g.h / height, g.d / depth)
    return KeypointSet(tuple((x / width, y / height, v) for x, y, v in g.points))


def geometry_to_payload(g: Geometry) -> dict:
    if isinstance(g, Box2D):
        return {"type": "bbox", "coordinates": [g.x, g.y, g.w, g.h]}
    if isinstance(g, Polygon):
        return {"type": "polygon", "coordinates": [[x, y] for x, y in g.vertices]}
    if isinstance(g, VoxelBox):
        return {"type": "voxel_box", "coordinates": [g.x, g.y, g.z, g.w, g.h, g.d]}
    return {"type": "keypoints", "coordinates": [[x, y, v] for x, y, v in g.points]}


def geometry_from_payload(payload: dict) -> Geometry:
    kind = payload.get("type")
    coords = payload.get("coordinates")
    if coords is None:
        raise ValueError("geometry payload is missing 'coordinates'")
    if kind == "bbox":
        x, y, w, h = (float(c) for c in coords)
        return Box2D(x, y, w, h)
    if kind == "polygon":
        return Polygon(tuple((float(x), float(y)) for x, y in coords))
    if kind == "voxel_box":
        x, y, z, w, h, d = (float(c) for c in coords)
        return VoxelBox(x, y, z, w, h, d)
    if kind == "keypoints":
        return KeypointSet(tuple((float(x), float(y), int(v)) for x, y, v in coords))
    raise ValueError(f"unknown geometry type {kind!r}")


def translate(g: Geometry, dx: float, dy: float) -> Geometry:
    if isinstance(g, Box2D):
        return Box2D(g.x + dx, g.y + dy, g.w, g.h)
    if isinstance(g, Polygon):
        return Polygon(tuple((x + dx, y + dy) for x, y in g.vertices))
    if isinstance(g, KeypointSet):
        return KeypointSet(tuple((x + dx, y + dy, v) for x, y, v in g.points))
    raise TypeError(f"translate not supported for {type(g).__name__}")


def euclid(a: tuple[float, ...], b: tuple[float, ...]) -> float:
    return math.sqrt(sum((ai - bi) ** 2 for ai, bi in zip(a, b)))
