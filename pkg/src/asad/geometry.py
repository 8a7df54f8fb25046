"""Electrode projection and triangulation.

Electrodes on the unit head-sphere are flattened with an azimuthal
equidistant projection tangent at the vertex (+z pole): great-circle
distance from the pole becomes the radius, azimuth is preserved. The
projected points are Delaunay-triangulated (incremental Bowyer-Watson;
orientation/in-circle predicates fall back to exact rational arithmetic
near degeneracy).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .data import Montage

# conservative relative error bounds for the float predicate filters
_ORIENT_EPS = 1e-12
_INCIRCLE_EPS = 1e-10


def azimuthal_equidistant(positions: np.ndarray) -> np.ndarray:
    """Project unit 3-vectors to the plane: radius arccos(z), azimuth atan2(y, x)."""
    pos = np.asarray(positions, dtype=float)
    z = np.clip(pos[:, 2], -1.0, 1.0)
    rho = np.arccos(z)
    phi = np.arctan2(pos[:, 1], pos[:, 0])
    return np.column_stack([rho * np.cos(phi), rho * np.sin(phi)])


def _orient2d(pa, pb, pc) -> int:
    """Sign of twice the signed area of (pa, pb, pc); exact fallback."""
    detleft = (pa[0] - pc[0]) * (pb[1] - pc[1])
    detright = (pa[1] - pc[1]) * (pb[0] - pc[0])
    det = detleft - detright
    bound = _ORIENT_EPS * (abs(detleft) + abs(detright))
    if abs(det) > bound:
        return 1 if det > 0 else -1
    ax, ay = Fraction(float(pa[0])), Fraction(float(pa[1]))
    bx, by = Fraction(float(pb[0])), Fraction(float(pb[1]))
    cx, cy = Fraction(float(pc[0])), Fraction(float(pc[1]))
    d = (ax - cx) * (by - cy) - (ay - cy) * (bx - cx)
    return (d > 0) - (d < 0)


def _incircle(pa, pb, pc, pd) -> int:
    """Positive if pd lies strictly inside the circumcircle of ccw (pa, pb, pc)."""
    adx, ady = pa[0] - pd[0], pa[1] - pd[1]
    bdx, bdy = pb[0] - pd[0], pb[1] - pd[1]
    cdx, cdy = pc[0] - pd[0], pc[1] - pd[1]
    ad2, bd2, cd2 = adx * adx + ady * ady, bdx * bdx + bdy * bdy, cdx * cdx + cdy * cdy
    t1 = ad2 * (bdx * cdy - bdy * cdx)
    t2 = bd2 * (cdx * ady - cdy * adx)
    t3 = cd2 * (adx * bdy - ady * bdx)
    det = t1 + t2 + t3
    bound = _INCIRCLE_EPS * (abs(t1) + abs(t2) + abs(t3))
    if abs(det) > bound:
        return 1 if det > 0 else -1
    fa = [Fraction(float(v)) for v in pa]
    fb = [Fraction(float(v)) for v in pb]
    fc = [Fraction(float(v)) for v in pc]
    fd = [Fraction(float(v)) for v in pd]
    adx, ady = fa[0] - fd[0], fa[1] - fd[1]
    bdx, bdy = fb[0] - fd[0], fb[1] - fd[1]
    cdx, cdy = fc[0] - fd[0], fc[1] - fd[1]
    d = (
        (adx * adx + ady * ady) * (bdx * cdy - bdy * cdx)
        + (bdx * bdx + bdy * bdy) * (cdx * ady - cdy * adx)
        + (cdx * cdx + cdy * cdy) * (adx * bdy - ady * bdx)
    )
    return (d > 0) - (d < 0)


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns ccw vertex indices (collinear
    boundary points are skipped)."""
    pts = np.asarray(points, dtype=float)
    order = np.lexsort((pts[:, 1], pts[:, 0]))

    def build(idx_iter):
        chain: list[int] = []
        for i in idx_iter:
            while len(chain) >= 2 and _orient2d(pts[chain[-2]], pts[chain[-1]], pts[i]) <= 0:
                chain.pop()
            chain.append(int(i))
        return chain

    lower = build(order)
    upper = build(order[::-1])
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise ValueError("fewer than 3 non-collinear points; cannot build a hull")
    return np.array(hull, dtype=int)


def polygon_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def delaunay_triangulation(points: np.ndarray) -> np.ndarray:
    """Incremental Bowyer-Watson. Returns (m, 3) ccw vertex index rows."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n < 3:
        raise ValueError("need at least 3 points to triangulate")

    span = float(max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-9))
    cx, cy = pts.mean(axis=0)
    big = 1e6 * span
    supers = np.array(
        [[cx - 3 * big, cy - big], [cx + 3 * big, cy - big], [cx, cy + 3 * big]]
    )
    allp = np.vstack([pts, supers])
    s0, s1, s2 = n, n + 1, n + 2

    def ccw(tri):
        a, b, c = tri
        return tri if _orient2d(allp[a], allp[b], allp[c]) > 0 else (a, c, b)

    triangles: set[tuple[int, int, int]] = {ccw((s0, s1, s2))}

    for p in range(n):
        pt = allp[p]
        bad = [t for t in triangles if _incircle(allp[t[0]], allp[t[1]], allp[t[2]], pt) > 0]
        if not bad:
            raise ValueError(f"triangulation failed inserting point {p} (duplicate point?)")
        edge_count: dict[tuple[int, int], int] = {}
        for t in bad:
            for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                key = (min(e), max(e))
                edge_count[key] = edge_count.get(key, 0) + 1
            triangles.discard(t)
        for t in bad:
            for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                if edge_count[(min(a, b), max(a, b))] == 1:
                    # (a, b) is ccw on the cavity boundary; p is inside it
                    triangles.add((a, b, p))

    out = sorted(
        tuple(t) for t in triangles if s0 not in t and s1 not in t and s2 not in t
    )
    if not out:
        raise ValueError("triangulation produced no interior triangles")
    return np.array(out, dtype=int)


@dataclass
class ProjectedLayout:
    """Fixed 2-D electrode geometry shared by every map built from a montage."""

    names: list[str]
    points: np.ndarray  # (n, 2)
    hull: np.ndarray  # ccw hull vertex indices
    triangles: np.ndarray  # (m, 3)
    extent: tuple[float, float, float, float]  # (u_min, u_max, v_min, v_max)
    _caches: dict = field(default_factory=dict, repr=False, compare=False)

    def validate(self) -> "ProjectedLayout":
        tri_pts = self.points[self.triangles]
        areas = 0.5 * np.abs(
            (tri_pts[:, 1, 0] - tri_pts[:, 0, 0]) * (tri_pts[:, 2, 1] - tri_pts[:, 0, 1])
            - (tri_pts[:, 1, 1] - tri_pts[:, 0, 1]) * (tri_pts[:, 2, 0] - tri_pts[:, 0, 0])
        )
        if np.any(areas <= 0):
            raise ValueError("degenerate (zero-area) triangle in layout")
        hull_area = abs(polygon_area(self.points[self.hull]))
        if abs(areas.sum() - hull_area) > 1e-9 * max(1.0, hull_area):
            raise ValueError(
                f"triangulation area {areas.sum():.12g} does not cover hull area "
                f"{hull_area:.12g}"
            )
        used = np.unique(self.triangles)
        if used.size != len(self.points):
            missing = sorted(set(range(len(self.points))) - set(used.tolist()))
            raise ValueError(f"points absent from triangulation: {missing}")
        return self


def project_electrodes(montage: Montage, extent_pad: float = 0.05) -> ProjectedLayout:
    """Project a montage and triangulate it; the grid extent is the hull
    bounding box padded by `extent_pad` per side."""
    montage.validate()
    pts = azimuthal_equidistant(montage.positions)
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    i, j = np.unravel_index(int(np.argmin(d2)), d2.shape)
    if d2[i, j] < 1e-18:
        raise ValueError(
            f"electrodes {montage.names[i]!r} and {montage.names[j]!r} project to the "
            f"same point"
        )
    hull = convex_hull(pts)
    triangles = delaunay_triangulation(pts)
    hp = pts[hull]
    umin, vmin = hp.min(axis=0)
    umax, vmax = hp.max(axis=0)
    du, dv = (umax - umin) * extent_pad, (vmax - vmin) * extent_pad
    layout = ProjectedLayout(
        names=list(montage.names),
        points=pts,
        hull=hull,
        triangles=triangles,
        extent=(float(umin - du), float(umax + du), float(vmin - dv), float(vmax + dv)),
    )
    return layout.validate()
