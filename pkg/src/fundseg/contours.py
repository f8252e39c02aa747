"""Polar resampling and per-angle median fusion of expert contours."""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ContractError, GeometryError, StarShapeError

_ON_SEGMENT_TOL = 1e-9


def as_contour(points):
    """Validate and return an (M, 2) float array of polygon vertices."""
    pts = np.array(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GeometryError(f"contour must be an (M, 2) array of points, got shape {pts.shape}")
    if len(pts) > 1 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    if len(np.unique(pts, axis=0)) < 3:
        raise GeometryError("contour needs at least 3 distinct points")
    return pts


def signed_area(pts):
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def perimeter(pts):
    return float(np.sum(np.hypot(*(np.roll(pts, -1, axis=0) - pts).T)))


def centroid(points):
    """Area centroid of a simple polygon (shoelace)."""
    pts = as_contour(points)
    a = signed_area(pts)
    if abs(a) < 1e-12:
        raise GeometryError("degenerate contour: zero enclosed area")
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cr = x * yn - xn * y
    return np.array([np.dot(x + xn, cr) / (6 * a), np.dot(y + yn, cr) / (6 * a)])


def common_origin(contours):
    """Mean of the per-contour centroids, summed exactly so expert order is irrelevant."""
    if len(contours) == 0:
        raise ContractError("common_origin needs at least one contour")
    cs = [centroid(c) for c in contours]
    n = len(cs)
    return np.array([math.fsum(c[0] for c in cs) / n, math.fsum(c[1] for c in cs) / n])


def polygon_contains(points, px, py):
    """Even-odd test for a single point (boundary counts as inside)."""
    pts = as_contour(points)
    x, y = pts[:, 0], pts[:, 1]
    x2, y2 = np.roll(x, -1), np.roll(y, -1)
    crosses = (y > py) != (y2 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x + (py - y) * (x2 - x) / (y2 - y)
    inside = np.count_nonzero(crosses & (px < xint)) % 2 == 1
    ex, ey = x2 - x, y2 - y
    seg = np.hypot(ex, ey)
    cross = (px - x) * ey - (py - y) * ex
    dot = (px - x) * ex + (py - y) * ey
    on_edge = (np.abs(cross) <= _ON_SEGMENT_TOL * seg) & (dot >= 0) & (dot <= seg * seg)
    return bool(inside or on_edge.any())


@dataclass
class PolarContour:
    origin: np.ndarray
    n_angles: int
    x_of_theta: np.ndarray
    y_of_theta: np.ndarray

    @property
    def thetas(self):
        return angles(self.n_angles)

    @property
    def radii(self):
        return np.hypot(self.x_of_theta - self.origin[0], self.y_of_theta - self.origin[1])

    def points(self):
        return np.column_stack([self.x_of_theta, self.y_of_theta])


def angles(n_angles):
    return 2.0 * np.pi * np.arange(n_angles) / n_angles


def _ray_hits(pts, origin, n_angles):
    """Distances t >= 0 along each ray theta_k to every boundary crossing.

    Returns an (n_angles, M) array with NaN where segment k is missed.
    """
    th = angles(n_angles)
    dx, dy = np.cos(th)[:, None], np.sin(th)[:, None]
    p = pts - origin
    q = np.roll(p, -1, axis=0)
    ex, ey = (q - p)[:, 0][None, :], (q - p)[:, 1][None, :]
    px, py = p[:, 0][None, :], p[:, 1][None, :]
    # solve t*d = p + s*e for (t, s)
    den = dx * ey - dy * ex
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (px * ey - py * ex) / den
        s = (px * dy - py * dx) / den
    ok = (np.abs(den) > 1e-15) & (s >= -1e-12) & (s <= 1 + 1e-12) & (t > 0)
    return np.where(ok, t, np.nan)


def to_polar(contour, origin, n_angles=360, fallback=False):
    """Sample the boundary at rays theta_k = 2*pi*k/n_angles from ``origin``.

    A ray crossing the boundary more than once raises StarShapeError unless
    ``fallback`` is set, in which case the farthest crossing is used and a
    warning is emitted.
    """
    pts = as_contour(contour)
    origin = np.asarray(origin, dtype=np.float64)
    if n_angles < 1:
        raise ContractError(f"n_angles must be positive, got {n_angles}")
    if not polygon_contains(pts, float(origin[0]), float(origin[1])):
        raise GeometryError(f"origin {tuple(origin)} is outside the contour")
    hits = _ray_hits(pts, origin, n_angles)
    radius = np.empty(n_angles)
    scale = max(1.0, float(np.max(np.abs(pts - origin))))
    violations = []
    for k in range(n_angles):
        ts = np.sort(hits[k][~np.isnan(hits[k])])
        if ts.size == 0:
            raise GeometryError(f"ray at theta index {k} misses the contour")
        # a ray through a vertex hits both adjacent segments at the same t
        distinct = ts[np.concatenate([[True], np.diff(ts) > 1e-9 * scale])]
        if distinct.size > 1:
            if not fallback:
                raise StarShapeError(
                    f"contour is not star-shaped about the origin: ray at theta index {k} "
                    f"crosses the boundary {distinct.size} times", angle_index=k)
            violations.append(k)
        radius[k] = distinct[-1]
    if violations:
        warnings.warn(f"star-shape violated at {len(violations)} angle(s); "
                      f"using the farthest crossing", RuntimeWarning, stacklevel=2)
    th = angles(n_angles)
    return PolarContour(origin, n_angles, origin[0] + radius * np.cos(th),
                        origin[1] + radius * np.sin(th))


@dataclass
class FusedAnnotation:
    contour: np.ndarray
    dispersion: np.ndarray
    origin: np.ndarray
    n_angles: int


def _mad(values, axis=0):
    med = np.median(values, axis=axis)
    return np.median(np.abs(values - med), axis=axis)


def median_fuse(contours, n_angles=360, fallback=True):
    """Per-angle median of the expert x(theta) and y(theta) coordinate functions.

    Dispersion is the median absolute deviation of the expert radii at each
    angle.
    """
    if len(contours) == 0:
        raise ContractError("median_fuse needs at least one contour")
    origin = common_origin(contours)
    polars = []
    for i, c in enumerate(contours):
        try:
            polars.append(to_polar(c, origin, n_angles, fallback=fallback))
        except StarShapeError as exc:
            raise StarShapeError(f"expert {i}: {exc}", exc.angle_index) from None
        except GeometryError as exc:
            raise GeometryError(f"expert {i}: {exc}") from None
    xs = np.stack([p.x_of_theta for p in polars])
    ys = np.stack([p.y_of_theta for p in polars])
    radii = np.stack([p.radii for p in polars])
    # np.median sorts, so the result does not depend on expert order;
    # even counts average the two middle order statistics
    fused = np.column_stack([np.median(xs, axis=0), np.median(ys, axis=0)])
    return FusedAnnotation(fused, _mad(radii), origin, n_angles)


def mean_fuse(contours, n_angles=360):
    """Per-angle mean, kept for comparison with the median."""
    origin = common_origin(contours)
    polars = [to_polar(c, origin, n_angles, fallback=True) for c in contours]
    return np.column_stack([np.mean([p.x_of_theta for p in polars], axis=0),
                            np.mean([p.y_of_theta for p in polars], axis=0)])


def rasterize(contour, width, height):
    """0/255 mask of pixels whose centers (x=j, y=i) lie inside the polygon."""
    pts = as_contour(contour)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if lo[0] < -0.5 or lo[1] < -0.5 or hi[0] > width - 0.5 or hi[1] > height - 0.5:
        raise GeometryError(
            f"contour bounding box x[{lo[0]:.3f}, {hi[0]:.3f}] y[{lo[1]:.3f}, {hi[1]:.3f}] "
            f"exceeds raster {width}x{height}")
    inside = _kernels.rasterize_kernel(np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1]),
                                       int(width), int(height), _ON_SEGMENT_TOL)
    return np.where(inside, 255, 0).astype(np.uint8)


def circle(center, radius, n=360):
    th = angles(n)
    return np.column_stack([center[0] + radius * np.cos(th), center[1] + radius * np.sin(th)])


def ellipse(center, a, b, n=360):
    """Axis-aligned ellipse, horizontal semi-axis ``a`` and vertical ``b``."""
    th = angles(n)
    return np.column_stack([center[0] + a * np.cos(th), center[1] + b * np.sin(th)])
