"""Closed-polygon helpers. Contours are ``(N, 2)`` arrays of ``(x, y)`` = (column, row)."""

import numpy as np

from .errors import DegenerateContour


def as_contour(points, min_points=3):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DegenerateContour(f"contour must be (N, 2), got {pts.shape}")
    if pts.shape[0] < min_points:
        raise DegenerateContour(f"closed contour needs >= {min_points} points, got {pts.shape[0]}")
    return pts


def signed_area(points):
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_area(points):
    return abs(signed_area(as_contour(points)))


def polygon_centroid(points):
    """Area-weighted centroid via the shoelace formula."""
    pts = as_contour(points)
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * cross.sum()
    if abs(a) < 1e-12:
        raise DegenerateContour("contour encloses zero area")
    cx = np.sum((x + xn) * cross) / (6 * a)
    cy = np.sum((y + yn) * cross) / (6 * a)
    return float(cx), float(cy)


def perimeter(points):
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.hypot(*(np.roll(pts, -1, axis=0) - pts).T)))


def resample_closed(points, n):
    """Resample a closed polyline to ``n`` points evenly spaced in arc length."""
    pts = as_contour(points)
    seg = np.roll(pts, -1, axis=0) - pts
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    total = lengths.sum()
    if total <= 0:
        raise DegenerateContour("contour has zero length")
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = np.arange(n) * (total / n)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(pts) - 1)
    frac = np.where(lengths[idx] > 0, (s - cum[idx]) / np.where(lengths[idx] > 0, lengths[idx], 1), 0)
    return pts[idx] + frac[:, None] * seg[idx]


def point_to_polyline_distance(points, polyline, chunk=2048):
    """Distance from each point to the closest point on a closed polyline's segments."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] > chunk:
        return np.concatenate([point_to_polyline_distance(points[i:i + chunk], polyline, chunk)
                               for i in range(0, points.shape[0], chunk)])
    p = points[:, None, :]
    a = np.asarray(polyline, dtype=np.float64)
    b = np.roll(a, -1, axis=0)
    ab = (b - a)[None]
    denom = np.sum(ab * ab, axis=2)
    t = np.sum((p - a[None]) * ab, axis=2) / np.where(denom > 0, denom, 1.0)
    t = np.clip(np.where(denom > 0, t, 0.0), 0.0, 1.0)
    proj = a[None] + t[..., None] * ab
    return np.sqrt(np.min(np.sum((p - proj) ** 2, axis=2), axis=1))


def ellipse_points(cx, cy, rx, ry, angle=0.0, n=128):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    ca, sa = np.cos(angle), np.sin(angle)
    ex, ey = rx * np.cos(t), ry * np.sin(t)
    return np.column_stack([cx + ca * ex - sa * ey, cy + sa * ex + ca * ey])
