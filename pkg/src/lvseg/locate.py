"""Stage 1: convolutional ROI localisation.

A 64x64 slice (256x256 block-averaged by 4) goes through
conv 11x11xK -> activation -> average pool 6 -> unroll -> dense + sigmoid
-> 32x32 mask of ROI probabilities. The mask's thresholded centroid picks the
centre of a 100x100 crop in the original 256x256 slice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import FRAME, GRID, ROI_SIDE, roi_start
from .errors import DimensionMismatch, EmptyMask, InvalidSpec, InvalidThreshold
from .imaging import block_downsample
from .numerics import (Activation, Conv2D, ConvSpec, Dense, Network, Pool2D, Reshape,
                       output_extent)
from .train import FitResult, TrainConfig, glorot_uniform, minibatch_sgd


@dataclass(frozen=True)
class ArchVariant:
    depth: str = "one_conv"
    width: int = 100
    activation: str = "sigmoid"
    pooling: str = "average"

    def __post_init__(self):
        if self.depth not in ("one_conv", "two_conv"):
            raise InvalidSpec(f"unknown depth {self.depth!r}")
        if self.activation not in ("sigmoid", "relu"):
            raise InvalidSpec(f"unknown activation {self.activation!r}")
        if self.pooling not in ("average", "max"):
            raise InvalidSpec(f"unknown pooling {self.pooling!r}")
        if self.width < 1:
            raise InvalidSpec("width must be positive")

    @classmethod
    def from_config(cls, cfg: TrainConfig):
        return cls(cfg.depth, cfg.width, cfg.activation, cfg.pooling)

    @property
    def name(self):
        if self == ORIGINAL:
            return "original"
        parts = []
        if self.depth == "two_conv":
            parts.append("deeper")
        if self.width != ORIGINAL.width:
            parts.append(f"width{self.width}")
        if self.activation != ORIGINAL.activation:
            parts.append(self.activation)
        if self.pooling != ORIGINAL.pooling:
            parts.append(f"{self.pooling}pool")
        return "+".join(parts)


ORIGINAL = ArchVariant()

# second stage of the deeper ablation: 5x5 conv, 100 filters, stride 1, no pooling
SECOND_CONV_SIZE = 5
SECOND_CONV_FILTERS = 100


@dataclass(frozen=True)
class Geometry:
    """Extents of one locator network; the default is the full-size model."""

    input_size: int = 64
    filter_size: int = 11
    pool: int = 6
    out_grid: int = GRID
    second_filter_size: int = SECOND_CONV_SIZE
    second_filters: int = SECOND_CONV_FILTERS


class LocatorCNN:
    """Network plus named parameter access (``conv_filters``, ``fc_weights``, ...)."""

    batch_limit = 32

    def __init__(self, variant: ArchVariant = ORIGINAL, geometry: Geometry = Geometry()):
        self.variant = variant
        self.geometry = geometry
        g = geometry
        k = variant.width
        conv_out = output_extent(g.input_size, g.filter_size)
        if conv_out % g.pool:
            raise InvalidSpec(f"pool {g.pool} does not divide the {conv_out} conv map")
        pooled = conv_out // g.pool
        layers = [Conv2D(ConvSpec(g.filter_size, 0, 1, k), 1), Activation(variant.activation),
                  Pool2D(g.pool, variant.pooling)]
        self.chain = [(g.input_size, g.input_size, 1), (conv_out, conv_out, k),
                      (conv_out, conv_out, k), (pooled, pooled, k)]
        names = {0: "conv"}
        side, channels = pooled, k
        if variant.depth == "two_conv":
            side = output_extent(pooled, g.second_filter_size)
            channels = g.second_filters
            names[len(layers)] = "conv2"
            layers += [Conv2D(ConvSpec(g.second_filter_size, 0, 1, channels), k),
                       Activation(variant.activation)]
            self.chain += [(side, side, channels), (side, side, channels)]
        flat = side * side * channels
        n_out = g.out_grid * g.out_grid
        layers += [Reshape((flat,))]
        names[len(layers)] = "fc"
        layers += [Dense(flat, n_out), Activation("sigmoid"), Reshape((g.out_grid, g.out_grid))]
        self.chain += [(flat,), (n_out,), (n_out,), (g.out_grid, g.out_grid)]
        self.net = Network(layers)
        self._names = names

    # -- parameters ---------------------------------------------------------
    def _key_map(self):
        out = {}
        for idx, prefix in self._names.items():
            if prefix.startswith("conv"):
                out[f"{idx}.W"] = f"{prefix}_filters"
                out[f"{idx}.b"] = f"{prefix}_bias"
            else:
                out[f"{idx}.W"] = "fc_weights"
                out[f"{idx}.b"] = "fc_bias"
        return out

    def params(self):
        raw = self.net.named_params()
        return {name: raw[key] for key, name in self._key_map().items()}

    def set_params(self, params):
        inv = {name: key for key, name in self._key_map().items()}
        self.net.set_params({inv[k]: v for k, v in params.items()})

    def init(self, seed=0, filters=None, filter_bias=None):
        """Glorot-uniform convolutions (or pretrained first-layer filters) and a zero dense layer."""
        rng = np.random.default_rng(seed)
        p = {k: np.zeros_like(v) for k, v in self.params().items()}
        w = p["conv_filters"]
        f = w.shape[0]
        p["conv_filters"] = glorot_uniform(rng, f * f * w.shape[2], w.shape[3], w.shape)
        if filters is not None:
            filters = np.asarray(filters, dtype=np.float64)
            if filters.shape != w.shape:
                raise DimensionMismatch(f"pretrained filters {filters.shape} vs {w.shape}")
            p["conv_filters"] = filters.copy()
            if filter_bias is not None:
                p["conv_bias"] = np.asarray(filter_bias, dtype=np.float64).copy()
        if "conv2_filters" in p:
            w2 = p["conv2_filters"]
            f2 = w2.shape[0]
            p["conv2_filters"] = glorot_uniform(rng, f2 * f2 * w2.shape[2], w2.shape[3], w2.shape)
        self.set_params(p)
        return self

    def to_tensors(self):
        return {k: v.copy() for k, v in self.params().items()}

    @classmethod
    def from_tensors(cls, tensors, variant: ArchVariant = ORIGINAL, geometry: Geometry = Geometry()):
        model = cls(variant, geometry)
        expected = {k: v.shape for k, v in model.params().items()}
        got = {k: tuple(v.shape) for k, v in tensors.items() if k in expected}
        if set(got) != set(expected) or any(got[k] != expected[k] for k in expected):
            diff = {k: (expected[k], got.get(k)) for k in expected if got.get(k) != expected[k]}
            raise DimensionMismatch(f"checkpoint does not match variant {variant.name}: {diff}")
        model.set_params({k: tensors[k] for k in expected})
        return model

    # -- inference ----------------------------------------------------------
    def forward(self, images, check_chain=True):
        """Batch forward ``(N, S, S)`` or ``(N, S, S, 1)`` -> ``(N, G, G)`` probabilities."""
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[..., None]
        s = self.geometry.input_size
        if x.ndim != 4 or x.shape[1:] != (s, s, 1):
            raise DimensionMismatch(f"locator expects (N, {s}, {s}), got {np.shape(images)}")
        if x.shape[0] > self.batch_limit:
            return np.concatenate([self.forward(x[i:i + self.batch_limit], check_chain)
                                   for i in range(0, x.shape[0], self.batch_limit)])
        out = self.net.forward(x, record=check_chain)
        if check_chain:
            for act, want in zip(self.net.activations, self.chain[1:]):
                if act.shape[1:] != want:
                    raise DimensionMismatch(f"intermediate {act.shape[1:]} != {want}")
            self.net.activations = []
        return out

    def shape_chain(self, image):
        """Per-stage extents of one forward pass, input first."""
        self.net.forward(np.asarray(image, dtype=np.float64)[None, ..., None], record=True)
        shapes = [tuple(np.shape(image)) + (1,)]
        shapes += [a.shape[1:] for a in self.net.activations]
        self.net.activations = []
        return shapes


def cnn_forward(image64, model: LocatorCNN):
    return model.forward(np.asarray(image64)[None])[0]


def downsample_slice(image256):
    return block_downsample(image256, 4)


def train_cnn(images64, masks32, cfg: TrainConfig, filters=None, filter_bias=None,
              variant: ArchVariant = None, geometry: Geometry = Geometry(), callback=None):
    """Fit a locator by minibatch SGD on the MSE between predicted and target masks.

    ``callback(epoch, loss, model)`` runs after every epoch.
    """
    variant = variant or ArchVariant.from_config(cfg)
    model = LocatorCNN(variant, geometry).init(cfg.seed, filters, filter_bias)
    x = np.asarray(images64, dtype=np.float64)[..., None]
    y = np.asarray(masks32, dtype=np.float64)
    hook = None if callback is None else (lambda epoch, loss: callback(epoch, loss, model))
    history = minibatch_sgd(model.net, x, y, cfg, callback=hook)
    return model, history


# ---------------------------------------------------------------------------
# ROI box
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoiBox:
    center: tuple  # (row, col) in frame coordinates, already clamped
    side: int = ROI_SIDE
    frame: int = FRAME

    @classmethod
    def around(cls, center, side=ROI_SIDE, frame=FRAME):
        r0 = roi_start(center[0], side, frame)
        c0 = roi_start(center[1], side, frame)
        return cls((r0 + side // 2, c0 + side // 2), side, frame)

    @property
    def start(self):
        return (self.center[0] - self.side // 2, self.center[1] - self.side // 2)

    def slices(self):
        r0, c0 = self.start
        return slice(r0, r0 + self.side), slice(c0, c0 + self.side)

    def to_frame(self, points):
        """Shift ``(x, y)`` ROI-pixel points into frame coordinates."""
        r0, c0 = self.start
        return np.asarray(points, dtype=np.float64) + np.array([c0, r0], dtype=np.float64)

    def to_roi(self, points):
        r0, c0 = self.start
        return np.asarray(points, dtype=np.float64) - np.array([c0, r0], dtype=np.float64)


def mask_to_box(mask32, threshold=0.5, frame=FRAME, side=ROI_SIDE):
    """ROI box centred on the centroid of cells at or above ``threshold``.

    Cell ``i`` covers source rows ``[8i, 8i + 8)``, so its centre maps to
    ``8i + 3.5``; the centroid is rounded to the nearest pixel and the box
    clamped inside the frame.
    """
    if not 0.0 < threshold < 1.0:
        raise InvalidThreshold("threshold must lie in (0, 1)")
    m = np.asarray(mask32, dtype=np.float64)
    rows, cols = np.nonzero(m >= threshold)
    if rows.size == 0:
        raise EmptyMask("no ROI cell exceeds the threshold")
    scale = frame / m.shape[0]
    r = math.floor((rows.mean() + 0.5) * scale - 0.5 + 0.5)
    c = math.floor((cols.mean() + 0.5) * scale - 0.5 + 0.5)
    return RoiBox.around((r, c), side, frame)


def crop_roi(image256, box: RoiBox):
    img = np.asarray(image256)
    return img[box.slices()].copy()


def paste_roi(image256, roi, box: RoiBox):
    out = np.array(image256, copy=True)
    out[box.slices()] = roi
    return out
