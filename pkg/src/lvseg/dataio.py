"""Image/contour/manifest I/O, training targets, splits and the synthetic phantom generator.

File formats
------------
Images
    Binary portable graymap (``P5``), 8-bit or 16-bit (big-endian), row-major.
    Intensities are normalised to [0, 1] by the header's maxval.
Contours
    UTF-8 text, one ``x y`` decimal pair per line (column, row in pixel
    units, pixel centres on integers), implicitly closed. Blank lines and
    ``#`` comments are skipped.
Manifest
    Tab-separated, ``#`` comments allowed, columns
    ``slice_id image contour stack_id slice_index split``. Paths are
    relative to the manifest's directory.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (ExtentMismatch, MalformedContour, MalformedFile,
                     MalformedImage, TooFewStacks)
from .geometry import ellipse_points, polygon_centroid
from .metrics import rasterize

FRAME = 256
ROI_SIDE = 100
GRID = 32


# ---------------------------------------------------------------------------
# Portable graymap
# ---------------------------------------------------------------------------

def encode_pgm(image, maxval=65535) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise MalformedImage("only 2-D images can be written")
    if maxval not in (255, 65535):
        raise MalformedImage("maxval must be 255 or 65535")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    raw = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    h, w = img.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + raw


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_pgm(data: bytes):
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise MalformedImage(f"truncated header near byte {pos}")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise MalformedImage(f"not a binary graymap (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise MalformedImage("non-integer header field") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise MalformedImage(f"bad header values w={w} h={h} maxval={maxval}")
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise MalformedImage(f"missing whitespace after header at byte {pos}")
    pos += 1
    depth = 2 if maxval > 255 else 1
    need = w * h * depth
    if len(data) - pos < need:
        raise MalformedImage(f"raster truncated: need {need} bytes at byte {pos}")
    if len(data) - pos > need:
        raise MalformedImage(f"trailing garbage at byte {pos + need}")
    arr = np.frombuffer(data, dtype=">u2" if depth == 2 else "u1", count=w * h, offset=pos)
    return arr.reshape(h, w).astype(np.float64) / maxval


def encode_ppm(rgb) -> bytes:
    """Binary 8-bit colour netpbm (P6) for ``(H, W, 3)`` uint8 overlays."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise MalformedImage(f"expected (H, W, 3) pixels, got {rgb.shape}")
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def write_ppm(path, rgb):
    Path(path).write_bytes(encode_ppm(rgb))


def write_pgm(path, image, maxval=65535):
    Path(path).write_bytes(encode_pgm(image, maxval))


def read_pgm(path):
    return decode_pgm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Contours
# ---------------------------------------------------------------------------

def format_contour(points) -> str:
    return "".join(f"{x:.6f} {y:.6f}\n" for x, y in np.asarray(points, dtype=np.float64))


def parse_contour(text: str):
    pts = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 2:
            raise MalformedContour(f"expected 'x y', got {s!r}", line=lineno)
        try:
            x, y = float(parts[0]), float(parts[1])
        except ValueError:
            raise MalformedContour(f"non-numeric coordinate in {s!r}", line=lineno) from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise MalformedContour("non-finite coordinate", line=lineno)
        pts.append((x, y))
    if len(pts) < 3:
        raise MalformedContour(f"closed contour needs >= 3 points, found {len(pts)}")
    return np.array(pts)


def write_contour(path, points):
    Path(path).write_text(format_contour(points), encoding="utf-8")


def read_contour(path):
    return parse_contour(Path(path).read_text(encoding="utf-8"))


def load_slice(image_path, contour_path, extents=(FRAME, FRAME)):
    image = read_pgm(image_path)
    if image.shape != tuple(extents):
        raise ExtentMismatch(f"{image_path}: {image.shape}, expected {tuple(extents)}")
    return image, read_contour(contour_path)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

COLUMNS = ("slice_id", "image", "contour", "stack_id", "slice_index", "split")


@dataclass(frozen=True)
class Entry:
    slice_id: str
    image: str
    contour: str
    stack_id: str
    slice_index: int
    split: str = "train"


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def image_path(self, e: Entry) -> Path:
        return self.root / e.image

    def contour_path(self, e: Entry) -> Path:
        return self.root / e.contour

    def load(self, e: Entry):
        return load_slice(self.image_path(e), self.contour_path(e))

    def stacks(self):
        out = {}
        for e in self.entries:
            out.setdefault(e.stack_id, []).append(e)
        return {k: sorted(v, key=lambda e: e.slice_index) for k, v in out.items()}

    def subset(self, split):
        return DatasetManifest([e for e in self.entries if e.split == split], self.root)


def format_manifest(manifest: DatasetManifest) -> str:
    lines = ["# " + "\t".join(COLUMNS)]
    for e in manifest.entries:
        lines.append("\t".join([e.slice_id, e.image, e.contour, e.stack_id,
                                str(e.slice_index), e.split]))
    return "\n".join(lines) + "\n"


def parse_manifest(text: str, root=Path("."), check_files=True) -> DatasetManifest:
    root = Path(root)
    entries, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split("\t")
        if len(parts) != len(COLUMNS):
            raise MalformedFile(f"line {lineno}: expected {len(COLUMNS)} tab-separated columns")
        try:
            idx = int(parts[4])
        except ValueError:
            raise MalformedFile(f"line {lineno}: slice_index {parts[4]!r} is not an integer") from None
        if parts[5] not in ("train", "validation"):
            raise MalformedFile(f"line {lineno}: split must be train or validation")
        if parts[0] in seen:
            raise MalformedFile(f"line {lineno}: duplicate slice id {parts[0]!r}")
        seen.add(parts[0])
        e = Entry(parts[0], parts[1], parts[2], parts[3], idx, parts[5])
        if check_files:
            for p in (root / e.image, root / e.contour):
                if not p.is_file():
                    raise MalformedFile(f"line {lineno}: missing file {p}")
        entries.append(e)
    return DatasetManifest(entries, root)


def read_manifest(path, check_files=True) -> DatasetManifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent, check_files)


def write_manifest(path, manifest: DatasetManifest):
    Path(path).write_text(format_manifest(manifest), encoding="utf-8")


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

def roi_start(center, side=ROI_SIDE, frame=FRAME):
    """Top-left index of a ``side``-wide box centred on ``center``, clamped to the frame."""
    return int(min(max(int(center) - side // 2, 0), frame - side))


def roi_box_from_contour(contour):
    cx, cy = polygon_centroid(contour)
    row = int(math.floor(cy + 0.5))
    col = int(math.floor(cx + 0.5))
    return row, col


def roi_grid(center, side=ROI_SIDE, frame=FRAME, grid=GRID):
    """32x32 mask of the cells whose source blocks intersect the clamped ROI box."""
    block = frame // grid
    r0, c0 = roi_start(center[0], side, frame), roi_start(center[1], side, frame)
    cells = np.arange(grid) * block
    rows = (cells + block - 1 >= r0) & (cells <= r0 + side - 1)
    cols = (cells + block - 1 >= c0) & (cells <= c0 + side - 1)
    return np.outer(rows, cols)


def make_targets(contour, extents=(FRAME, FRAME)):
    """Return ``(roi_mask32, shape_mask)`` for one expert contour."""
    center = roi_box_from_contour(contour)
    return roi_grid(center, frame=extents[0]), rasterize(contour, extents)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def split(manifest: DatasetManifest, fraction: float, seed: int = 0):
    """Shuffle stacks deterministically and assign ``fraction`` of them to train."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    stacks = sorted({e.stack_id for e in manifest.entries})
    if len(stacks) < 2:
        raise TooFewStacks(f"need at least 2 stacks to split, found {len(stacks)}")
    order = np.random.default_rng(seed).permutation(len(stacks))
    n_train = min(max(int(round(fraction * len(stacks))), 1), len(stacks) - 1)
    train_ids = {stacks[i] for i in order[:n_train]}
    train = [replace(e, split="train") for e in manifest.entries if e.stack_id in train_ids]
    val = [replace(e, split="validation") for e in manifest.entries if e.stack_id not in train_ids]
    return DatasetManifest(train, manifest.root), DatasetManifest(val, manifest.root)


# ---------------------------------------------------------------------------
# Synthetic phantoms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of the ellipse phantom generator (all lengths in pixels)."""

    extents: int = FRAME
    center_range: tuple = (88.0, 168.0)
    radius_range: tuple = (16.0, 26.0)
    wall_range: tuple = (6.0, 10.0)
    blood_range: tuple = (0.70, 0.90)
    wall_intensity_range: tuple = (0.30, 0.45)
    background_range: tuple = (0.05, 0.20)
    noise_std: float = 0.04
    slices_per_stack: int = 10
    center_drift: float = 6.0
    jitter_std: float = 0.0
    contour_points: int = 128
    margin: float = 10.0
    seed: int = 0

    def __post_init__(self):
        outer = self.radius_range[1] + self.wall_range[1]
        lo, hi = self.center_range
        if lo - outer - self.center_drift - 4 * self.jitter_std < self.margin or \
                hi + outer + self.center_drift + 4 * self.jitter_std > self.extents - 1 - self.margin:
            raise ValueError("phantom ranges can push the ellipse closer than the margin to the frame")


@dataclass
class Phantom:
    image: np.ndarray
    contour: np.ndarray
    center: tuple  # (x, y) including jitter
    true_center: tuple  # (x, y) on the smooth per-stack curve
    stack_id: str
    slice_index: int


def _render(spec, rng, cx, cy, rx, ry, angle, wall):
    n = spec.extents
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    ca, sa = math.cos(angle), math.sin(angle)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    inner = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    outer = (u / (rx + wall)) ** 2 + (v / (ry + wall)) ** 2 <= 1.0
    bg, myo, blood = (rng.uniform(*spec.background_range),
                      rng.uniform(*spec.wall_intensity_range),
                      rng.uniform(*spec.blood_range))
    img = np.full((n, n), bg)
    img[outer] = myo
    img[inner] = blood
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0), inner


def generate_phantoms(spec: PhantomSpec, count: int):
    """Yield ``count`` phantoms grouped into stacks of ``slices_per_stack``.

    Within a stack the blood-pool centre follows a random quadratic in the
    slice index (plus optional Gaussian jitter) and the radius tapers toward
    the last slice.
    """
    rng = np.random.default_rng(spec.seed)
    out = []
    k = 0
    stack = 0
    while k < count:
        n_sl = min(spec.slices_per_stack, count - k)
        base = rng.uniform(*spec.center_range, size=2)
        lin = rng.uniform(-1, 1, size=2)
        quad = rng.uniform(-1, 1, size=2)
        r0 = rng.uniform(*spec.radius_range)
        taper = rng.uniform(0.0, 0.35)
        ecc = rng.uniform(0.8, 1.0)
        angle = rng.uniform(0, math.pi)
        wall = rng.uniform(*spec.wall_range)
        half = max(spec.slices_per_stack - 1, 1) / 2.0
        for i in range(n_sl):
            t = (i - half) / half
            true_c = base + spec.center_drift * (0.5 * lin * t + 0.5 * quad * t * t)
            c = true_c + (rng.normal(0.0, spec.jitter_std, size=2) if spec.jitter_std > 0 else 0.0)
            frac = i / max(spec.slices_per_stack - 1, 1)
            rx = max(r0 * (1.0 - taper * frac), spec.radius_range[0] * 0.6)
            ry = rx * ecc
            image, _ = _render(spec, rng, c[0], c[1], rx, ry, angle, wall)
            contour = ellipse_points(c[0], c[1], rx, ry, angle, spec.contour_points)
            out.append(Phantom(image, contour, (float(c[0]), float(c[1])),
                               (float(true_c[0]), float(true_c[1])), f"s{stack:03d}", i))
            k += 1
        stack += 1
    return out


def synth_dataset(spec: PhantomSpec, count: int, out_dir, maxval=65535,
                  val_fraction=0.0) -> DatasetManifest:
    """Write ``count`` phantoms plus ``manifest.tsv`` and ``truth.tsv`` into ``out_dir``.

    With ``val_fraction`` > 0 whole stacks are assigned to the validation
    split by :func:`split` seeded with ``spec.seed``.
    """
    if count < 1:
        raise ValueError("count must be positive")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "contours").mkdir(parents=True, exist_ok=True)
    entries = []
    truth = ["# slice_id\tobserved_x\tobserved_y\ttrue_x\ttrue_y"]
    for ph in generate_phantoms(spec, count):
        sid = f"{ph.stack_id}_{ph.slice_index:02d}"
        img_rel, con_rel = f"images/{sid}.pgm", f"contours/{sid}.txt"
        write_pgm(out_dir / img_rel, ph.image, maxval)
        write_contour(out_dir / con_rel, ph.contour)
        entries.append(Entry(sid, img_rel, con_rel, ph.stack_id, ph.slice_index, "train"))
        truth.append(f"{sid}\t{ph.center[0]:.6f}\t{ph.center[1]:.6f}\t"
                     f"{ph.true_center[0]:.6f}\t{ph.true_center[1]:.6f}")
    manifest = DatasetManifest(entries, out_dir)
    if val_fraction > 0:
        train, val = split(manifest, 1.0 - val_fraction, spec.seed)
        labels = {e.slice_id: e.split for e in train.entries + val.entries}
        manifest = DatasetManifest([replace(e, split=labels[e.slice_id]) for e in entries], out_dir)
    write_manifest(out_dir / "manifest.tsv", manifest)
    (out_dir / "truth.tsv").write_text("\n".join(truth) + "\n", encoding="utf-8")
    return manifest
