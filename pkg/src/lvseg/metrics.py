"""Segmentation metrics (Dice, conformity, APD) and mask <-> contour conversion."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, EmptyMask, MalformedFile, OutOfBounds, Undefined
from .geometry import as_contour, point_to_polyline_distance


def dice(auto, manual):
    """Dice overlap ``2|A & M| / (|A| + |M|)``; ``None`` when both masks are empty."""
    a = np.asarray(auto, dtype=bool)
    m = np.asarray(manual, dtype=bool)
    if a.shape != m.shape:
        raise DimensionMismatch(f"mask extents differ: {a.shape} vs {m.shape}")
    denom = int(a.sum()) + int(m.sum())
    if denom == 0:
        return None
    return 2.0 * int(np.logical_and(a, m).sum()) / denom


def conformity(dm):
    """Conformity coefficient ``(3 DM - 2) / DM``."""
    if dm is None or dm <= 0:
        raise Undefined("conformity is undefined for DM = 0")
    if dm > 1:
        raise ValueError(f"Dice value {dm} outside (0, 1]")
    return (3.0 * dm - 2.0) / dm


def apd(auto, manual):
    """Mean distance from each ``auto`` point to its projection on the ``manual`` polyline."""
    a = as_contour(auto)
    m = as_contour(manual)
    return float(np.mean(point_to_polyline_distance(a, m)))


def symmetric_apd(a, b):
    return 0.5 * (apd(a, b) + apd(b, a))


def rasterize(contour, extents):
    """Binary mask of pixels whose centres fall inside the polygon (even-odd rule).

    Pixel ``(r, c)`` has its centre at ``(x, y) = (c, r)``. Crossings use the
    half-open rule on ``y`` so every centre is classified exactly once.
    """
    pts = as_contour(contour)
    h, w = extents
    lo = -0.5 - 1e-9
    if (pts[:, 0].min() < lo or pts[:, 1].min() < lo
            or pts[:, 0].max() > w - 0.5 + 1e-9 or pts[:, 1].max() > h - 0.5 + 1e-9):
        raise OutOfBounds(f"contour leaves the {h}x{w} frame")
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    mask = np.zeros((h, w), dtype=bool)
    cols = np.arange(w, dtype=np.float64)
    r_lo = max(int(math.floor(pts[:, 1].min())), 0)
    r_hi = min(int(math.ceil(pts[:, 1].max())), h - 1)
    for r in range(r_lo, r_hi + 1):
        y = float(r)
        hit = (y0 <= y) != (y1 <= y)
        if not hit.any():
            continue
        xa, ya, xb, yb = x0[hit], y0[hit], x1[hit], y1[hit]
        xs = np.sort(xa + (y - ya) * (xb - xa) / (yb - ya))
        mask[r] = np.searchsorted(xs, cols, side="right") % 2 == 1
    return mask


def _largest_component(mask):
    labels, count = ndimage.label(mask)
    if count == 0:
        raise EmptyMask("mask has no foreground pixels")
    sizes = np.bincount(labels.ravel())[1:]
    best = sizes.max()
    # label ids follow raster order of each component's first pixel, so the
    # smallest id among the largest is the one with the smaller top-left pixel
    winner = int(np.flatnonzero(sizes == best)[0]) + 1
    return labels == winner, count - 1


def trace_boundary(mask, with_count=False):
    """Outer boundary of the largest 4-connected component along pixel edges.

    Vertices sit on pixel corners, so a lone pixel at ``(r, c)`` yields the
    unit square with corners ``(c +- 0.5, r +- 0.5)``. Collinear vertices are
    merged. With ``with_count`` returns ``(contour, ignored_components)``.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMask("cannot trace an empty mask")
    comp, ignored = _largest_component(m)
    comp = ndimage.binary_fill_holes(comp)
    p = np.pad(comp, 1)
    inner = p[1:-1, 1:-1]
    # directed edges with the interior on the right (screen coordinates, y down);
    # vertex (i, j) is the corner at x = j - 0.5, y = i - 0.5
    edges = {}
    rr, cc = np.nonzero(inner & ~p[:-2, 1:-1])
    for r, c in zip(rr, cc):
        edges.setdefault((r, c), []).append((r, c + 1))
    rr, cc = np.nonzero(inner & ~p[1:-1, 2:])
    for r, c in zip(rr, cc):
        edges.setdefault((r, c + 1), []).append((r + 1, c + 1))
    rr, cc = np.nonzero(inner & ~p[2:, 1:-1])
    for r, c in zip(rr, cc):
        edges.setdefault((r + 1, c + 1), []).append((r + 1, c))
    rr, cc = np.nonzero(inner & ~p[1:-1, :-2])
    for r, c in zip(rr, cc):
        edges.setdefault((r + 1, c), []).append((r, c))

    start = min(edges)
    loop = [start]
    prev = start
    cur = edges[start][0]
    used = {(start, cur)}
    while cur != start:
        loop.append(cur)
        outs = [v for v in edges[cur] if (cur, v) not in used]
        if len(outs) > 1:
            d_in = (cur[0] - prev[0], cur[1] - prev[1])
            right = (d_in[1], -d_in[0])  # (drow, dcol) rotated toward the interior
            outs.sort(key=lambda v: (v[0] - cur[0], v[1] - cur[1]) != right)
        nxt = outs[0]
        used.add((cur, nxt))
        prev, cur = cur, nxt
    verts = np.array(loop, dtype=np.float64)
    # drop vertices where the direction does not change
    d_prev = verts - np.roll(verts, 1, axis=0)
    d_next = np.roll(verts, -1, axis=0) - verts
    keep = np.abs(d_prev[:, 0] * d_next[:, 1] - d_prev[:, 1] * d_next[:, 0]) > 0
    verts = verts[keep]
    contour = np.column_stack([verts[:, 1] - 0.5, verts[:, 0] - 0.5])
    return (contour, ignored) if with_count else contour


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

NA = "NA"
HEADER = ("slice_id", "dice", "conformity", "apd_px", "apd_sym_px")


@dataclass
class SliceScore:
    slice_id: str
    dice: float | None
    conformity: float | None
    apd: float | None
    apd_sym: float | None = None
    missing: bool = False


@dataclass
class EvalReport:
    per_slice: list = field(default_factory=list)
    mm_per_pixel: float | None = None

    def _mean(self, attr):
        vals = [getattr(s, attr) for s in self.per_slice
                if not s.missing and getattr(s, attr) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def dice(self):
        return self._mean("dice")

    @property
    def conformity(self):
        return self._mean("conformity")

    @property
    def apd(self):
        return self._mean("apd")

    @property
    def apd_sym(self):
        return self._mean("apd_sym")


def score_slice(slice_id, auto_contour, manual_contour, extents):
    """Score one slice; an empty/absent prediction is flagged as missing."""
    manual_mask = rasterize(manual_contour, extents)
    if auto_contour is None:
        return SliceScore(slice_id, None, None, None, None, missing=True)
    auto_mask = rasterize(auto_contour, extents)
    dm = dice(auto_mask, manual_mask)
    cc = conformity(dm) if dm else None
    return SliceScore(slice_id, dm, cc, apd(auto_contour, manual_contour),
                      symmetric_apd(auto_contour, manual_contour))


def _fmt(v):
    return NA if v is None else f"{v:.6f}"


def format_report(report: EvalReport) -> str:
    """Tab-separated table: header, one row per slice, then a ``mean`` row.

    Undefined values are written as ``NA``; missing predictions carry ``NA``
    in every metric column. An optional ``# mm_per_pixel`` line precedes the
    header.
    """
    out = io.StringIO()
    if report.mm_per_pixel is not None:
        out.write(f"# mm_per_pixel\t{report.mm_per_pixel:.6f}\n")
    out.write("\t".join(HEADER) + "\n")
    for s in report.per_slice:
        out.write("\t".join([s.slice_id, _fmt(s.dice), _fmt(s.conformity),
                             _fmt(s.apd), _fmt(s.apd_sym)]) + "\n")
    out.write("\t".join(["mean", _fmt(report.dice), _fmt(report.conformity),
                         _fmt(report.apd), _fmt(report.apd_sym)]) + "\n")
    return out.getvalue()


def parse_report(text: str) -> EvalReport:
    report = EvalReport()
    lines = text.splitlines()
    i = 0
    if lines and lines[0].startswith("# mm_per_pixel"):
        report.mm_per_pixel = float(lines[0].split("\t")[1])
        i = 1
    if i >= len(lines) or tuple(lines[i].split("\t")) != HEADER:
        raise MalformedFile(f"line {i + 1}: expected report header")
    body = lines[i + 1:]
    if not body or not body[-1].startswith("mean\t"):
        raise MalformedFile("report lacks the summary row")

    def val(tok, lineno):
        if tok == NA:
            return None
        try:
            return float(tok)
        except ValueError:
            raise MalformedFile(f"line {lineno}: bad number {tok!r}") from None

    for k, line in enumerate(body[:-1], start=i + 2):
        parts = line.split("\t")
        if len(parts) != len(HEADER):
            raise MalformedFile(f"line {k}: expected {len(HEADER)} columns")
        vals = [val(t, k) for t in parts[1:]]
        report.per_slice.append(SliceScore(parts[0], *vals, missing=all(v is None for v in vals)))
    return report
