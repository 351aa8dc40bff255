"""Localization distance functions, all normalized to d in [0, 1].

Every metric is symmetric, zero on identical input and pairs with a
similarity s = 1 - d. Degenerate input with an empty union is defined as
maximal disagreement (d = 1) instead of an error, so solvers never crash
mid-image.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import Box2D, Geometry, KeypointSet, Polygon, VoxelBox

SQRT2 = math.sqrt(2.0)

METRIC_NAMES = ("box_iou", "polygon_iou", "mask_giou", "l2_centroid", "voxel_iou", "pose_nmpjpe")

_METRIC_COMPAT = {
    "box_iou": (Box2D,),
    "polygon_iou": (Polygon, Box2D),
    "mask_giou": (Polygon, Box2D),
    "l2_centroid": (Box2D, Polygon, KeypointSet),
    "voxel_iou": (VoxelBox,),
    "pose_nmpjpe": (KeypointSet,),
}


class MetricError(ValueError):
    """Incompatible metric/geometry combination or unknown metric name."""


def metrics_for_kind(kind: str) -> list[str]:
    """Metric names applicable to a dataset's geometry kind."""
    by_kind = {
        "bbox": ["box_iou", "polygon_iou", "mask_giou", "l2_centroid"],
        "polygon": ["polygon_iou", "mask_giou", "l2_centroid"],
        "voxel_box": ["voxel_iou"],
        "keypoints": ["pose_nmpjpe", "l2_centroid"],
    }
    return by_kind.get(kind, [])


def _check(metric: str, *geoms: Geometry) -> None:
    try:
        allowed = _METRIC_COMPAT[metric]
    except KeyError:
        raise MetricError(f"unknown metric {metric!r}; expected one of {METRIC_NAMES}") from None
    for g in geoms:
        if not isinstance(g, allowed):
            raise MetricError(f"metric {metric!r} does not accept {type(g).__name__} geometry")


def _box_iou(a: Box2D, b: Box2D) -> float:
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _voxel_iou(a: VoxelBox, b: VoxelBox) -> float:
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    iz = min(a.z + a.d, b.z + b.d) - max(a.z, b.z)
    inter = max(ix, 0.0) * max(iy, 0.0) * max(iz, 0.0)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _shapely(g: Box2D | Polygon):
    from shapely import make_valid
    from shapely.geometry import Polygon as ShapelyPolygon, box

    if isinstance(g, Box2D):
        return box(g.x, g.y, g.x + g.w, g.y + g.h)
    sp = ShapelyPolygon(g.vertices)
    if not sp.is_valid:
        sp = make_valid(sp)
    return sp


def _raster_mask(verts: np.ndarray, lo: np.ndarray, span: np.ndarray, res: int) -> np.ndarray:
    """Even-odd point-in-polygon test on a res x res grid (fallback path)."""
    cell = span / res
    xs = lo[0] + (np.arange(res) + 0.5) * cell[0]
    ys = lo[1] + (np.arange(res) + 0.5) * cell[1]
    gx, gy = np.meshgrid(xs, ys)
    inside = np.zeros(gx.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        crosses = (y0 <= gy) != (y1 <= gy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (gy - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (gx < xint)
    return inside


def _raster_inter_union(a: Polygon | Box2D, b: Polygon | Box2D, res: int = 1024) -> tuple[float, float]:
    va = np.asarray(a.corners() if isinstance(a, Box2D) else a.vertices, dtype=float)
    vb = np.asarray(b.corners() if isinstance(b, Box2D) else b.vertices, dtype=float)
    lo = np.minimum(va.min(axis=0), vb.min(axis=0))
    hi = np.maximum(va.max(axis=0), vb.max(axis=0))
    span = np.maximum(hi - lo, 1e-12)
    cell_area = (span[0] / res) * (span[1] / res)
    ma = _raster_mask(va, lo, span, res)
    mb = _raster_mask(vb, lo, span, res)
    return float((ma & mb).sum() * cell_area), float((ma | mb).sum() * cell_area)


def _poly_inter_union(a: Polygon | Box2D, b: Polygon | Box2D) -> tuple[float, float]:
    try:
        sa, sb = _shapely(a), _shapely(b)
        return float(sa.intersection(sb).area), float(sa.union(sb).area)
    except Exception:
        return _raster_inter_union(a, b)


def _polygon_iou(a: Polygon | Box2D, b: Polygon | Box2D) -> float:
    inter, union = _poly_inter_union(a, b)
    if union <= 0.0:
        return 0.0
    return inter / union


def _mask_giou_distance(a: Polygon | Box2D, b: Polygon | Box2D) -> float:
    try:
        sa, sb = _shapely(a), _shapely(b)
        inter = float(sa.intersection(sb).area)
        merged = sa.union(sb)
        union = float(merged.area)
        hull_area = float(merged.convex_hull.area)
    except Exception:
        inter, union = _raster_inter_union(a, b)
        pts = list(a.corners() if isinstance(a, Box2D) else a.vertices)
        pts += list(b.corners() if isinstance(b, Box2D) else b.vertices)
        hull_area = _convex_hull_area(pts)
    if union <= 0.0:
        return 1.0
    giou = inter / union
    if hull_area > 0.0:
        giou -= (hull_area - union) / hull_area
    return 1.0 - (1.0 + giou) / 2.0


def _convex_hull_area(points: list[tuple[float, float]]) -> float:
    pts = sorted(set(points))
    if len(pts) < 3:
        return 0.0

    def cross(o, p, q):
        return (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0])

    lower: list[tuple[float, float]] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[float, float]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    area = 0.0
    for i in range(len(hull)):
        x0, y0 = hull[i]
        x1, y1 = hull[(i + 1) % len(hull)]
        area += x0 * y1 - x1 * y0
    return abs(area) / 2.0


def _pose_distance(a: KeypointSet, b: KeypointSet) -> float:
    if len(a.points) != len(b.points):
        raise MetricError("keypoint sets have different skeleton lengths")
    joints = sorted(set(a.visible()) | set(b.visible()))
    if not joints:
        return 0.0
    total = 0.0
    for j in joints:
        xa, ya, va = a.points[j]
        xb, yb, vb = b.points[j]
        if va == 1 and vb == 1:
            total += math.hypot(xa - xb, ya - yb) / SQRT2
        else:
            # Visibility disputed between the raters: fixed unit penalty.
            total += 1.0
    return total / len(joints)


def centroid(g: Geometry) -> tuple[float, ...]:
    """Relative-coordinate centroid: box/voxel center, area-weighted polygon
    centroid, or the mean of visible keypoints."""
    return g.centroid()


def distance(a: Geometry, b: Geometry, metric: str) -> float:
    """Normalized localization distance between two geometries."""
    _check(metric, a, b)
    if a == b:
        return 0.0
    if metric == "box_iou":
        d = 1.0 - _box_iou(a, b)
    elif metric == "polygon_iou":
        d = 1.0 - _polygon_iou(a, b)
    elif metric == "mask_giou":
        d = _mask_giou_distance(a, b)
    elif metric == "voxel_iou":
        d = 1.0 - _voxel_iou(a, b)
    elif metric == "l2_centroid":
        ca, cb = a.centroid(), b.centroid()
        d = math.hypot(ca[0] - cb[0], ca[1] - cb[1]) / SQRT2
    else:
        d = _pose_distance(a, b)
    return min(max(d, 0.0), 1.0)


def similarity(a: Geometry, b: Geometry, metric: str) -> float:
    return 1.0 - distance(a, b, metric)
