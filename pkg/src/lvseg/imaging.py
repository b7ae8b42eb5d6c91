"""Resampling helpers shared by the stages."""

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch


def block_downsample(image, factor):
    """Average non-overlapping ``factor x factor`` blocks (e.g. 256 -> 64 with factor 4)."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if h % factor or w % factor:
        raise DimensionMismatch(f"{image.shape} is not divisible by {factor}")
    return image.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def resize_bilinear(image, shape):
    """Bilinear resize with pixel-centre alignment and edge clamping.

    Output pixel ``i`` samples source coordinate ``(i + 0.5) * in / out - 0.5``,
    so 100 -> 64 and 64 -> 100 are consistent inverses in geometry.
    """
    image = np.asarray(image, dtype=np.float64)
    oh, ow = shape
    ih, iw = image.shape
    rows = (np.arange(oh) + 0.5) * ih / oh - 0.5
    cols = (np.arange(ow) + 0.5) * iw / ow - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(image, [rr, cc], order=1, mode="nearest")


def scale_points(points, src, dst):
    """Map ``(x, y)`` points between grids of side ``src`` and ``dst`` (pixel-centre convention)."""
    pts = np.asarray(points, dtype=np.float64)
    return (pts + 0.5) * (dst / src) - 0.5


def gray_to_rgb(image):
    """``[0, 1]`` grayscale to an ``(H, W, 3)`` uint8 canvas."""
    g = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=2)


def draw_contour(rgb, contour, color):
    """Draw a closed ``(x, y)`` polyline in place, sampling each edge at 0.25 px."""
    pts = np.asarray(contour, dtype=np.float64)
    h, w = rgb.shape[:2]
    nxt = np.roll(pts, -1, axis=0)
    for a, b in zip(pts, nxt):
        steps = max(int(np.ceil(np.hypot(*(b - a)) * 4)), 1)
        t = np.linspace(0.0, 1.0, steps + 1)[:, None]
        seg = np.rint(a + t * (b - a)).astype(int)
        ok = (seg[:, 0] >= 0) & (seg[:, 0] < w) & (seg[:, 1] >= 0) & (seg[:, 1] < h)
        rgb[seg[ok, 1], seg[ok, 0]] = color
    return rgb
