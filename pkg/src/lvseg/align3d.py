"""Inter-slice alignment: quadratic fit of contour centres along the slice axis.

Observed centres are modelled as a smooth curve plus independent Gaussian
jitter per slice. ``x(i)`` and ``y(i)`` are each fit by a least-squares
quadratic in the slice index; each contour is then translated so that its
centroid lands on the fitted curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, MalformedFile, SingularSystem
from .geometry import as_contour, polygon_centroid


def centroid(contour):
    """Area-weighted centroid ``(x, y)`` of a closed contour."""
    return polygon_centroid(contour)


@dataclass(frozen=True)
class StackSlice:
    index: int
    contour: np.ndarray
    center: tuple = None

    def with_center(self):
        return self if self.center is not None else replace(self, center=centroid(self.contour))


@dataclass
class SliceStack:
    slices: list = field(default_factory=list)
    axis_spacing: float = 1.0

    def __post_init__(self):
        self.slices = [s.with_center() for s in self.slices]
        idx = [s.index for s in self.slices]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise DimensionMismatch("slice indices must be strictly increasing")

    @classmethod
    def from_contours(cls, indices, contours, axis_spacing=1.0):
        return cls([StackSlice(int(i), as_contour(c)) for i, c in zip(indices, contours)],
                   axis_spacing)

    @property
    def indices(self):
        return np.array([s.index for s in self.slices], dtype=np.float64)

    @property
    def centers(self):
        return np.array([s.center for s in self.slices], dtype=np.float64)


@dataclass(frozen=True)
class QuadFit:
    ax: float
    bx: float
    cx: float
    ay: float
    by: float
    cy: float
    residual_x: float = 0.0
    residual_y: float = 0.0

    def __call__(self, i):
        i = np.asarray(i, dtype=np.float64)
        return (self.ax * i * i + self.bx * i + self.cx,
                self.ay * i * i + self.by * i + self.cy)

    @property
    def coefficients(self):
        return np.array([self.ax, self.bx, self.cx, self.ay, self.by, self.cy])


def fit_quadratic_1d(i, v):
    """Least-squares ``(a, b, c)`` for ``v ~ a i^2 + b i + c`` and the residual RMS."""
    i = np.asarray(i, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if len(np.unique(i)) < 3:
        raise SingularSystem("a quadratic fit needs at least 3 distinct slice indices")
    # centre and scale the abscissa for conditioning, then map coefficients back
    mu = i.mean()
    s = max(np.abs(i - mu).max(), 1.0)
    t = (i - mu) / s
    design = np.column_stack([t * t, t, np.ones_like(t)])
    (p, q, r), *_ = np.linalg.lstsq(design, v, rcond=None)
    a = p / (s * s)
    b = q / s - 2 * a * mu
    c = r - q * mu / s + a * mu * mu
    resid = v - (a * i * i + b * i + c)
    return a, b, c, float(np.sqrt(np.mean(resid ** 2)))


def fit_quadratic(stack: SliceStack) -> QuadFit:
    i = stack.indices
    centers = stack.centers
    ax, bx, cx, rx = fit_quadratic_1d(i, centers[:, 0])
    ay, by, cy, ry = fit_quadratic_1d(i, centers[:, 1])
    return QuadFit(ax, bx, cx, ay, by, cy, rx, ry)


def align_stack(stack: SliceStack, fit: QuadFit) -> SliceStack:
    """Translate every contour so its centroid sits on the fitted curve."""
    out = []
    for s in stack.slices:
        fx, fy = fit(s.index)
        shift = np.array([float(fx) - s.center[0], float(fy) - s.center[1]])
        out.append(StackSlice(s.index, s.contour + shift, (float(fx), float(fy))))
    return SliceStack(out, stack.axis_spacing)


def translate_mask(mask, shift_xy):
    """Shift a raster by ``(dx, dy)`` pixels with bilinear interpolation (returns floats)."""
    dx, dy = shift_xy
    return ndimage.shift(np.asarray(mask, dtype=np.float64), (dy, dx), order=1, mode="constant")


def center_rms(centers, reference):
    d = np.asarray(centers, dtype=np.float64) - np.asarray(reference, dtype=np.float64)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


# ---------------------------------------------------------------------------
# Stack manifest: "<slice index>\t<contour path>" per line, '#' comments
# ---------------------------------------------------------------------------

def read_stack_manifest(path):
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split("\t")
        if len(parts) != 2:
            raise MalformedFile(f"line {lineno}: expected '<index>\\t<contour path>'")
        try:
            rows.append((int(parts[0]), path.parent / parts[1]))
        except ValueError:
            raise MalformedFile(f"line {lineno}: bad slice index {parts[0]!r}") from None
    return rows
