"""Sparse autoencoder that learns convolution filters from unlabeled patches."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ImageTooSmall, InvalidSpec
from .numerics import Activation, Dense, LossConfig, Network
from .train import FitResult, Schedule, full_batch_descent, glorot_uniform

DEFAULT_LOSS = LossConfig(l2_weight=1e-4, sparsity_weight=3.0, sparsity_target=0.05)


@dataclass
class PatchSet:
    patches: np.ndarray  # (N, F, F)
    size: int
    source: str = ""

    def __post_init__(self):
        if self.patches.ndim != 3 or self.patches.shape[1:] != (self.size, self.size):
            raise InvalidSpec(f"patches {self.patches.shape} do not all have size {self.size}")

    def __len__(self):
        return self.patches.shape[0]


@dataclass
class FilterBank:
    filters: np.ndarray  # (F, F, 1, K)
    bias: np.ndarray  # (K,)
    history: FitResult = field(default_factory=FitResult)
    mean_activation: np.ndarray = None
    decoder_bias: np.ndarray = None
    network: Network = None


def extract_patches(images, size: int, count: int, seed: int = 0) -> PatchSet:
    """Draw ``count`` ``size x size`` patches at uniform random positions.

    Each draw picks an image uniformly, then a top-left corner uniformly
    among the positions that keep the patch inside that image.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise InvalidSpec("no images to sample from")
    for k, im in enumerate(images):
        if im.shape[0] < size or im.shape[1] < size:
            raise ImageTooSmall(f"image {k} is {im.shape}, smaller than {size}x{size}")
    rng = np.random.default_rng(seed)
    which = rng.integers(0, len(images), size=count)
    out = np.empty((count, size, size))
    for n, k in enumerate(which):
        im = images[k]
        r = rng.integers(0, im.shape[0] - size + 1)
        c = rng.integers(0, im.shape[1] - size + 1)
        out[n] = im[r:r + size, c:c + size]
    return PatchSet(out, size, source=f"{len(images)} images, seed {seed}")


def build_autoencoder(n_visible: int, n_hidden: int, rng, decoder: str = "identity") -> Network:
    net = Network([Dense(n_visible, n_hidden), Activation("sigmoid"),
                   Dense(n_hidden, n_visible), Activation(decoder)])
    net.layers[0].params["W"] = glorot_uniform(rng, n_visible, n_hidden, (n_hidden, n_visible))
    net.layers[2].params["W"] = glorot_uniform(rng, n_hidden, n_visible, (n_visible, n_hidden))
    return net


def train_sparse_ae(patches: PatchSet, hidden: int, cfg: LossConfig = DEFAULT_LOSS,
                    schedule: Schedule = None, normalize: bool = True,
                    min_patches_per_filter: int = 10) -> FilterBank:
    """Train a one-hidden-layer sparse autoencoder and return its encoder as filters.

    The decoder is linear because zero-mean patches take negative values.
    Encoder weights are reshaped row-major into ``(F, F, 1, K)`` filters.
    """
    schedule = schedule or Schedule()
    if cfg.mode != "composite" or cfg.sparsity_weight <= 0:
        raise InvalidSpec("filter pretraining needs the composite loss with sparsity_weight > 0")
    if len(patches) < min_patches_per_filter * hidden:
        raise InvalidSpec(
            f"{len(patches)} patches is fewer than {min_patches_per_filter} per filter")
    f = patches.size
    x = patches.patches.reshape(len(patches), f * f)
    if normalize:
        x = x - x.mean(axis=1, keepdims=True)
    rng = np.random.default_rng(schedule.seed)
    net = build_autoencoder(f * f, hidden, rng)
    history = full_batch_descent(net, x, x, cfg, schedule, sparse_layers=(1,))
    net.forward(x, record=True)
    w_enc = net.layers[0].params["W"]
    filters = w_enc.reshape(hidden, f, f).transpose(1, 2, 0)[:, :, None, :].copy()
    return FilterBank(filters=filters, bias=net.layers[0].params["b"].copy(), history=history,
                      mean_activation=net.activations[1].mean(axis=0),
                      decoder_bias=net.layers[2].params["b"].copy(), network=net)
