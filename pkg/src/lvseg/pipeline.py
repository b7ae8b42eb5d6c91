"""End-to-end composition of the three stages.

Each function consumes only the outputs of the previous stage, so the CLI
can run the stages as separate commands with checkpoints in between.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import deform
from .dataio import FRAME, GRID, ROI_SIDE, make_targets, roi_box_from_contour
from .errors import EmptyMask
from .geometry import resample_closed
from .imaging import resize_bilinear, scale_points
from .infershape import (DEFAULT_LOSS as SAE_LOSS, PRETRAIN_CONFIG, LayerwiseResult, SaeGeometry,
                         StackedAE, binarize, pretrain_layers, train_supervised)
from .locate import (ArchVariant, LocatorCNN, RoiBox, crop_roi, downsample_slice, mask_to_box,
                     train_cnn)
from .metrics import rasterize, trace_boundary
from .numerics import LossConfig
from .pretrain import DEFAULT_LOSS as FILTER_LOSS, FilterBank, extract_patches, train_sparse_ae
from .train import Schedule, TrainConfig

CNN_CONFIG = TrainConfig(learning_rate=20.0, epochs=40, batch_size=20)
SAE_CONFIG = TrainConfig(learning_rate=1.0, epochs=30, batch_size=10)
FILTER_PATCHES = 2000
FILTER_SCHEDULE = Schedule(iterations=400, learning_rate=1.0)
SNAKE_POINTS = 64
# dt 0.1 converges to the same contours but spends most steps after repeated halvings
LEVELSET_DT = 0.5
LEVELSET_STEPS = 300
REFINE_MODES = ("none", "levelset", "snake")


def derive_seed(seed, task):
    """Per-task seed: stable across runs and independent of execution order."""
    return int(np.random.SeedSequence([int(seed), *task.encode("utf-8")]).generate_state(1)[0])


def loss_for(mode, composite: LossConfig):
    return composite if mode == "composite" else LossConfig(mode="mse_only")


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

@dataclass
class LocatorFit:
    model: LocatorCNN
    filters: FilterBank = None
    losses: list = field(default_factory=list)


def cnn_training_pairs(images, contours):
    x = np.stack([downsample_slice(im) for im in images])
    y = np.stack([make_targets(c)[0] for c in contours]).astype(np.float64)
    return x, y


def pretrain_filters(images64, cfg: TrainConfig, pretrained=True):
    """Sparse-AE filters for the first convolution (None when ``pretrained`` is off)."""
    if not pretrained:
        return None
    variant = ArchVariant.from_config(cfg)
    model = LocatorCNN(variant)
    f = model.geometry.filter_size
    patches = extract_patches(list(images64), f, max(FILTER_PATCHES, 10 * variant.width),
                              seed=derive_seed(cfg.seed, "patches"))
    schedule = Schedule(FILTER_SCHEDULE.iterations, FILTER_SCHEDULE.learning_rate,
                        FILTER_SCHEDULE.checkpoint_every, derive_seed(cfg.seed, "filters"))
    # sparsity is what makes these filters useful, so this loss ignores cfg.loss_mode
    return train_sparse_ae(patches, variant.width, FILTER_LOSS, schedule)


def fit_locator(images, contours, cfg: TrainConfig = CNN_CONFIG, pretrained=True,
                callback=None) -> LocatorFit:
    x, y = cnn_training_pairs(images, contours)
    bank = pretrain_filters(x, cfg, pretrained)
    model, history = train_cnn(x, y, cfg, None if bank is None else bank.filters,
                               None if bank is None else bank.bias, callback=callback)
    return LocatorFit(model, bank, history.losses)


def locate(model: LocatorCNN, images, threshold=0.5):
    """ROI boxes and 32x32 masks; an all-below-threshold mask falls back to its peak cell."""
    masks = model.forward(np.stack([downsample_slice(im) for im in images]))
    boxes = []
    for m in masks:
        try:
            boxes.append(mask_to_box(m, threshold))
        except EmptyMask:
            r, c = np.unravel_index(int(np.argmax(m)), m.shape)
            scale = FRAME // GRID
            boxes.append(RoiBox.around((r * scale + scale // 2, c * scale + scale // 2)))
    return boxes, masks


def oracle_boxes(contours):
    return [RoiBox.around(roi_box_from_contour(c)) for c in contours]


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

@dataclass
class ShapeFit:
    model: StackedAE
    layers: LayerwiseResult
    losses: list = field(default_factory=list)


def shape_target(contour, box: RoiBox, side=SaeGeometry.side):
    """Expert contour rasterized on the 64x64 grid of its ROI."""
    pts = scale_points(box.to_roi(contour), box.side, side)
    pts[:, 0] = np.clip(pts[:, 0], -0.5, side - 0.5)
    pts[:, 1] = np.clip(pts[:, 1], -0.5, side - 0.5)
    return rasterize(pts, (side, side)).astype(np.float64)


def sae_training_pairs(images, contours, boxes):
    rois = np.stack([crop_roi(im, b) for im, b in zip(images, boxes)])
    masks = np.stack([shape_target(c, b) for c, b in zip(contours, boxes)])
    return rois, masks


def fit_shape_model(rois, masks64, cfg: TrainConfig = SAE_CONFIG) -> ShapeFit:
    loss = loss_for(cfg.loss_mode, SAE_LOSS)
    layers = pretrain_layers(rois, loss, PRETRAIN_CONFIG.replace(seed=derive_seed(cfg.seed, "sae")))
    model, history = train_supervised(rois, masks64, layers, cfg)
    return ShapeFit(model, layers, history.losses)


# ---------------------------------------------------------------------------
# Stage 3
# ---------------------------------------------------------------------------

@dataclass
class SliceResult:
    box: RoiBox
    mask64: np.ndarray
    initial: np.ndarray  # traced shape, frame coordinates
    contour: np.ndarray  # refined, frame coordinates


def shape_to_roi_mask(mask64, side=ROI_SIDE):
    """Upsample stage-2 probabilities to ROI resolution and binarize."""
    return binarize(np.clip(resize_bilinear(mask64, (side, side)), 0.0, 1.0))


def refine(mask_roi, roi, mode="snake", snake: deform.SnakeConfig = deform.SnakeConfig(),
           weights: deform.EnergyWeights = deform.EnergyWeights(), dt=LEVELSET_DT,
           max_steps=LEVELSET_STEPS):
    """Initial traced contour and its refinement, both in ROI coordinates."""
    initial = trace_boundary(mask_roi)
    if mode == "none":
        return initial, initial
    if mode == "snake":
        init = resample_closed(initial, SNAKE_POINTS)
        return initial, deform.snake_evolve(init, roi, snake)
    if mode == "levelset":
        phi0 = deform.signed_distance(mask_roi)
        res = deform.evolve(phi0, roi, phi0, weights, dt=dt, max_steps=max_steps)
        return initial, deform.extract_contour(res.phi)
    raise ValueError(f"unknown refine mode {mode!r}")


def segment(image, box: RoiBox, shape_model: StackedAE = None, mode="snake", oracle_mask=None,
            snake: deform.SnakeConfig = deform.SnakeConfig(),
            weights: deform.EnergyWeights = deform.EnergyWeights()) -> SliceResult:
    """Stages 2 and 3 for one slice given its ROI box.

    ``oracle_mask`` (64x64, ROI grid) replaces the stacked autoencoder output.
    """
    roi = crop_roi(image, box)
    mask64 = oracle_mask if oracle_mask is not None else shape_model.predict(roi[None])[0]
    mask_roi = shape_to_roi_mask(mask64, box.side)
    if not mask_roi.any():
        raise EmptyMask("inferred shape is empty")
    initial, refined = refine(mask_roi, roi, mode, snake, weights)
    return SliceResult(box, mask64, box.to_frame(initial), box.to_frame(refined))
