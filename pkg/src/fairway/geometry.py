"""Planar geometry: polygons, convex polytopes, footprints, corridors, maps.

All coordinates are meters in a local frame (x east, y north); headings are
radians counterclockwise from +x.  Body frames put +x forward and +y to port.
Geometry values are immutable after construction and all operations are pure.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CorridorInfeasibleError, ValidationError


def _as_points(verts) -> np.ndarray:
    v = np.asarray(verts, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 2:
        raise ValidationError("expected an (N, 2) array of points")
    return v


def polygon_area(verts) -> float:
    """Signed area; positive for counterclockwise rings."""
    v = _as_points(verts)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _is_simple(verts) -> bool:
    """Check that no two non-adjacent edges intersect."""
    from .kernels import _purepy

    v = verts
    n = len(v)
    for i in range(n):
        a1, a2 = v[i], v[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _purepy.segments_intersect(a1, a2, v[j], v[(j + 1) % n]):
                return False
    return True


@dataclass(frozen=True)
class Polygon:
    """Simple polygon, normalized to counterclockwise orientation."""

    vertices: np.ndarray

    def __post_init__(self):
        v = _as_points(self.vertices)
        if v.shape[0] >= 2 and np.allclose(v[0], v[-1]):
            v = v[:-1]
        if v.shape[0] < 3:
            raise ValidationError("polygon needs at least 3 distinct vertices")
        area = polygon_area(v)
        if abs(area) < 1e-12:
            raise ValidationError("degenerate polygon (zero area)")
        if area < 0:
            v = v[::-1].copy()
        if not _is_simple(v):
            raise ValidationError("polygon is self-intersecting")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def bbox(self):
        v = self.vertices
        return v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max()

    def is_convex(self, tol: float = 1e-9) -> bool:
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        return bool(np.all(cross >= -tol))


def as_vertices(poly) -> np.ndarray:
    """Accept Polygon or raw (N, 2) arrays; return the vertex array."""
    if isinstance(poly, Polygon):
        return poly.vertices
    return _as_points(poly)


@dataclass(frozen=True)
class ConvexPolytope:
    """Intersection of half-spaces {p : A p <= b} with unit row normals."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if A.ndim != 2 or A.shape[1] != 2 or A.shape[0] != b.shape[0] or A.shape[0] < 3:
            raise ValidationError("polytope needs K >= 3 rows of (A, b)")
        norms = np.linalg.norm(A, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValidationError("polytope rows must be unit normals")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    def contains(self, pts, tol: float = 0.0):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return np.all(pts @ self.A.T <= self.b + tol, axis=1)

    def margin(self, point) -> float:
        """Smallest slack b - A p over rows; positive inside."""
        point = np.asarray(point, dtype=np.float64)
        return float(np.min(self.b - self.A @ point))


# ---------------------------------------------------------------------------
# core queries


def rel_pos(region, point) -> np.ndarray:
    """Vector from `point` to the nearest point of the region (interior counts).

    Zero vector when the point lies inside the region.
    """
    verts = as_vertices(region)
    if verts.shape[0] < 3:
        raise ValidationError("degenerate polygon")
    p = np.asarray(point, dtype=np.float64)
    _, closest, _ = kernels.poly_point_info(verts, p[None, :])
    return closest[0] - p


def polygon_contains(region, point) -> bool:
    """Boundary-inclusive point-in-polygon test."""
    verts = as_vertices(region)
    _, _, inside = kernels.poly_point_info(verts, np.asarray(point, dtype=np.float64)[None, :])
    return bool(inside[0])


def footprint(pose, hull) -> np.ndarray:
    """Hull vertices placed at a world pose (x, y, psi)."""
    hull = as_vertices(hull)
    x, y, psi = float(pose[0]), float(pose[1]), float(pose[2])
    c, s = np.cos(psi), np.sin(psi)
    R = np.array([[c, -s], [s, c]])
    return hull @ R.T + np.array([x, y])


def validate_hull(hull) -> np.ndarray:
    """Check the body polygon is convex, CCW and contains the origin."""
    poly = Polygon(as_vertices(hull))
    if not poly.is_convex():
        raise ValidationError("hull must be convex")
    if not polygon_contains(poly, (0.0, 0.0)):
        raise ValidationError("hull must contain the body origin")
    return poly.vertices


def inflate_convex(poly, margin: float) -> np.ndarray:
    """Offset a convex CCW polygon outward by `margin` (miter joints)."""
    v = as_vertices(poly)
    n = len(v)
    edges = np.roll(v, -1, axis=0) - v
    lengths = np.linalg.norm(edges, axis=1)
    if np.any(lengths < 1e-12):
        raise ValidationError("degenerate edge in polygon")
    # CCW ring: outward normal is the edge direction rotated -90 degrees
    normals = np.column_stack([edges[:, 1], -edges[:, 0]]) / lengths[:, None]
    offsets = (normals * v).sum(axis=1) + margin
    out = np.empty_like(v)
    for i in range(n):
        n1, o1 = normals[i - 1], offsets[i - 1]
        n2, o2 = normals[i], offsets[i]
        M = np.array([n1, n2])
        det = np.linalg.det(M)
        if abs(det) < 1e-12:
            out[i] = v[i] + n2 * margin
        else:
            out[i] = np.linalg.solve(M, np.array([o1, o2]))
    return out


# ---------------------------------------------------------------------------
# corridors


@dataclass(frozen=True)
class CorridorParams:
    """Tuning for convex corridor construction."""

    box_radius: float = 100.0
    max_halfspaces: int = 12
    min_margin: float = 5.0


def _segment_near_box(a, b, lo, hi) -> bool:
    """Conservative test: does segment ab come near the axis box [lo, hi]?"""
    if max(a[0], b[0]) < lo[0] or min(a[0], b[0]) > hi[0]:
        return False
    if max(a[1], b[1]) < lo[1] or min(a[1], b[1]) > hi[1]:
        return False
    return True


def _nearest_on_segment(a, b, p):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom < 1e-300 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return a + t * ab


def _edge_samples(verts, spacing: float) -> np.ndarray:
    """Vertices plus intermediate samples every `spacing` meters along edges."""
    pts = [verts]
    nxt = np.roll(verts, -1, axis=0)
    for a, b in zip(verts, nxt):
        length = float(np.hypot(*(b - a)))
        k = int(length // spacing)
        if k >= 1:
            ts = np.linspace(0.0, 1.0, k + 2)[1:-1]
            pts.append(a + ts[:, None] * (b - a))
    return np.vstack(pts)


def build_corridor(ref_points, static_obstacles, dynamic_regions, times, params: CorridorParams):
    """Convex free-space polytope around each reference node.

    ref_points : sequence of (x, y, psi) poses at the shooting nodes
    static_obstacles : polygons fixed in time
    dynamic_regions : per-obstacle sequences of polygons indexed like `times`
        (entries may be None when an obstacle is inactive at that node)
    times : node timestamps, same length as ref_points

    Each polytope starts from an axis-aligned box of radius ``box_radius``
    around the node and gains one separating half-space per nearby obstacle
    edge, placed through the edge point nearest the reference and backed off
    by a standoff.  Rows are capped at ``max_halfspaces`` keeping the nearest
    first; the capped polytope is then verified to exclude every in-box
    obstacle sample, otherwise the node is reported infeasible.
    """
    ref_points = np.atleast_2d(np.asarray(ref_points, dtype=np.float64))
    if len(times) != len(ref_points):
        raise ValidationError("times and ref_points must align")
    statics = [as_vertices(p) for p in static_obstacles]
    out = []
    R = params.box_radius
    m = params.min_margin
    for j, pose in enumerate(ref_points):
        p = pose[:2]
        polys = list(statics)
        for track in dynamic_regions:
            poly = track[j]
            if poly is not None:
                polys.append(as_vertices(poly))
        rows_a = [
            np.array([1.0, 0.0]),
            np.array([-1.0, 0.0]),
            np.array([0.0, 1.0]),
            np.array([0.0, -1.0]),
        ]
        rows_b = [p[0] + R, -(p[0] - R), p[1] + R, -(p[1] - R)]
        lo = p - R
        hi = p + R

        candidates = []
        for verts in polys:
            if polygon_contains(verts, p):
                raise CorridorInfeasibleError(j, f"reference point inside an obstacle at node {j}")
            nxt = np.roll(verts, -1, axis=0)
            for a, b in zip(verts, nxt):
                if not _segment_near_box(a, b, lo, hi):
                    continue
                q = _nearest_on_segment(a, b, p)
                d = float(np.hypot(*(q - p)))
                if d <= 1e-9:
                    raise CorridorInfeasibleError(j, f"reference point touches an obstacle at node {j}")
                if d < m:
                    raise CorridorInfeasibleError(
                        j, f"obstacle within min_margin of reference at node {j}"
                    )
                nu = (q - p) / d
                standoff = m if d >= 2.0 * m else d - m
                candidates.append((d, nu, float(nu @ q) - standoff, verts))
        candidates.sort(key=lambda c: c[0])

        kept_polys = []
        budget = params.max_halfspaces - 4
        for d, nu, off, verts in candidates:
            dup = False
            for i in range(4, len(rows_a)):
                if float(nu @ rows_a[i]) > 1.0 - 1e-9:
                    dup = True
                    if off < rows_b[i]:
                        rows_b[i] = off
                    break
            if dup:
                continue
            if len(rows_a) - 4 >= budget:
                continue
            rows_a.append(nu)
            rows_b.append(off)
            kept_polys.append(verts)

        A = np.vstack(rows_a)
        b = np.asarray(rows_b)
        # soundness check: all in-box obstacle samples must violate some row
        for verts in polys:
            samples = _edge_samples(verts, spacing=max(2.0, m))
            near = np.all((samples >= lo - 1e-9) & (samples <= hi + 1e-9), axis=1)
            if not near.any():
                continue
            ok = np.any(samples[near] @ A.T > b + 1e-12, axis=1)
            if not ok.all():
                raise CorridorInfeasibleError(
                    j, f"half-space budget too small to exclude an obstacle at node {j}"
                )
        poly = ConvexPolytope(A, b)
        if poly.margin(p) < m - 1e-9:
            raise CorridorInfeasibleError(j, f"reference margin below min_margin at node {j}")
        out.append(poly)
    return out


# ---------------------------------------------------------------------------
# maps


def load_map(path):
    """Read land polygons from a GeoJSON FeatureCollection in a metric CRS."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"map file is not valid JSON: {exc}") from exc
    if data.get("type") != "FeatureCollection":
        raise ValidationError("map file must be a GeoJSON FeatureCollection")
    polys = []
    for feat in data.get("features", []):
        props = feat.get("properties") or {}
        if props.get("kind") != "land":
            continue
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise ValidationError("land features must have Polygon geometry")
        rings = geom.get("coordinates") or []
        if not rings:
            raise ValidationError("land polygon without coordinates")
        polys.append(Polygon(np.asarray(rings[0], dtype=np.float64)))
    return polys


def map_feature_collection(polygons, extras=()):
    """Assemble land polygons (plus extra features) into a FeatureCollection."""
    feats = []
    for poly in polygons:
        ring = as_vertices(poly)
        coords = np.vstack([ring, ring[:1]]).tolist()
        feats.append(
            {
                "type": "Feature",
                "properties": {"kind": "land"},
                "geometry": {"type": "Polygon", "coordinates": [coords]},
            }
        )
    feats.extend(extras)
    return {"type": "FeatureCollection", "features": feats}
