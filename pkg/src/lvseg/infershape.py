"""Stage 2: stacked autoencoder mapping a 100x100 ROI to a 64x64 shape mask.

The ROI is resampled to 64x64, standardised to zero mean and unit variance
and unrolled to 4096 values, then passes
through two sigmoid hidden layers of 100 units (each the encoder of a
sparse autoencoder trained layer by layer) and a sigmoid output layer of
4096 units trained with the MSE against expert masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidSpec, InvalidThreshold
from .imaging import resize_bilinear
from .numerics import Activation, Dense, LossConfig, Network
from .pretrain import build_autoencoder
from .train import FitResult, Schedule, TrainConfig, full_batch_descent, minibatch_sgd

DEFAULT_LOSS = LossConfig(l2_weight=1e-5, sparsity_weight=0.02, sparsity_target=0.05)
INIT_NORMAL_STD = 0.01
INIT_UNIFORM_BOUND = 0.05
# AE1 has a linear decoder over standardised pixels, AE2 a sigmoid decoder over codes
PRETRAIN_CONFIG = TrainConfig(learning_rate=1.0, epochs=60, batch_size=10, stop_window=0)
AE2_RATE_FACTOR = 10.0
HEAD_SCHEDULE = Schedule(iterations=300, learning_rate=10.0)


@dataclass(frozen=True)
class SaeGeometry:
    side: int = 64
    hidden: int = 100
    roi_side: int = 100

    @property
    def n_in(self):
        return self.side * self.side


class StackedAE:
    """4096 -> 100 -> 100 -> 4096 sigmoid network with named parameters."""

    KEYS = {"0.W": "enc1_weights", "0.b": "enc1_bias", "2.W": "enc2_weights",
            "2.b": "enc2_bias", "4.W": "out_weights", "4.b": "out_bias"}

    def __init__(self, geometry: SaeGeometry = SaeGeometry()):
        self.geometry = geometry
        n, h = geometry.n_in, geometry.hidden
        self.net = Network([Dense(n, h), Activation("sigmoid"), Dense(h, h), Activation("sigmoid"),
                            Dense(h, n), Activation("sigmoid")])
        self.chain = [(n,), (h,), (h,), (h,), (h,), (n,), (n,)]

    def params(self):
        raw = self.net.named_params()
        return {name: raw[key] for key, name in self.KEYS.items()}

    def set_params(self, params):
        inv = {v: k for k, v in self.KEYS.items()}
        self.net.set_params({inv[k]: v for k, v in params.items()})

    def to_tensors(self):
        return {k: v.copy() for k, v in self.params().items()}

    @classmethod
    def from_tensors(cls, tensors, geometry: SaeGeometry = SaeGeometry()):
        model = cls(geometry)
        want = {k: v.shape for k, v in model.params().items()}
        bad = {k: (want[k], None if k not in tensors else tensors[k].shape)
               for k in want if k not in tensors or tensors[k].shape != want[k]}
        if bad:
            raise DimensionMismatch(f"checkpoint does not match the stacked autoencoder: {bad}")
        model.set_params({k: tensors[k] for k in want})
        return model

    def forward_vectors(self, x, check_chain=True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.geometry.n_in:
            raise DimensionMismatch(f"expected (N, {self.geometry.n_in}), got {x.shape}")
        out = self.net.forward(x, record=check_chain)
        if check_chain:
            for act, want in zip(self.net.activations, self.chain[1:]):
                if act.shape[1:] != want:
                    raise DimensionMismatch(f"intermediate {act.shape[1:]} != {want}")
            self.net.activations = []
        return out

    def codes(self, x):
        """Hidden activations ``(h1, h2)`` for unrolled inputs (instrumentation hook)."""
        self.net.forward(np.asarray(x, dtype=np.float64), record=True)
        h1, h2 = self.net.activations[1], self.net.activations[3]
        self.net.activations = []
        return h1, h2

    def predict(self, rois):
        """``(N, 100, 100)`` ROIs -> ``(N, 64, 64)`` probabilities."""
        x = rois_to_vectors(rois, self.geometry)
        s = self.geometry.side
        return self.forward_vectors(x).reshape(-1, s, s)


def standardize(x):
    """Per-row zero mean and unit variance; constant rows map to zeros."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    # rounding leaves a std of ~1e-17 on constant rows; treat that as zero
    flat = sd <= 1e-12 * (1.0 + np.abs(mu))
    return np.where(flat, 0.0, (x - mu) / np.where(flat, 1.0, sd))


def rois_to_vectors(rois, geometry: SaeGeometry = SaeGeometry()):
    rois = np.asarray(rois, dtype=np.float64)
    if rois.ndim == 2:
        rois = rois[None]
    s = geometry.side
    if rois.shape[1:] == (s, s):
        small = rois
    elif rois.shape[1:] == (geometry.roi_side, geometry.roi_side):
        small = np.stack([resize_bilinear(r, (s, s)) for r in rois])
    else:
        raise DimensionMismatch(f"ROIs must be {geometry.roi_side}x{geometry.roi_side}, got {rois.shape[1:]}")
    return standardize(small.reshape(small.shape[0], s * s))


def sae_forward(roi, model: StackedAE):
    return model.predict(np.asarray(roi)[None])[0]


@dataclass
class LayerwiseResult:
    enc1: tuple
    enc2: tuple
    ae1_history: FitResult = field(default_factory=FitResult)
    ae2_history: FitResult = field(default_factory=FitResult)
    ae1_codes: np.ndarray = None
    ae2_inputs: np.ndarray = None
    ae1_mean_activation: np.ndarray = None
    ae2_mean_activation: np.ndarray = None


def pretrain_layers(rois, loss: LossConfig = DEFAULT_LOSS, cfg: TrainConfig = None,
                    geometry: SaeGeometry = SaeGeometry()) -> LayerwiseResult:
    """Greedy layerwise training of the two encoders by minibatch SGD.

    AE1 reconstructs the standardised ROIs through ``hidden`` units with a
    linear decoder; AE2 reconstructs AE1's codes, which lie in (0, 1), with a
    sigmoid decoder and a larger step.
    """
    cfg = cfg or PRETRAIN_CONFIG
    x = rois_to_vectors(rois, geometry)
    rng = np.random.default_rng(cfg.seed)
    h = geometry.hidden
    ae1 = build_autoencoder(geometry.n_in, h, rng, decoder="identity")
    hist1 = minibatch_sgd(ae1, x, x, cfg, loss, sparse_layers=(1,))
    ae1.forward(x, record=True)
    codes = ae1.activations[1].copy()
    ae2 = build_autoencoder(h, h, rng, decoder="sigmoid")
    cfg2 = cfg.replace(learning_rate=cfg.learning_rate * AE2_RATE_FACTOR)
    hist2 = minibatch_sgd(ae2, codes, codes, cfg2, loss, sparse_layers=(1,))
    ae2.forward(codes, record=True)
    return LayerwiseResult(
        enc1=(ae1.layers[0].params["W"].copy(), ae1.layers[0].params["b"].copy()),
        enc2=(ae2.layers[0].params["W"].copy(), ae2.layers[0].params["b"].copy()),
        ae1_history=hist1, ae2_history=hist2, ae1_codes=codes, ae2_inputs=codes,
        ae1_mean_activation=codes.mean(axis=0),
        ae2_mean_activation=ae2.activations[1].mean(axis=0))


def init_output_layer(scheme, shape, rng):
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme == "normal":
        return rng.normal(0.0, INIT_NORMAL_STD, size=shape)
    if scheme == "uniform":
        return rng.uniform(-INIT_UNIFORM_BOUND, INIT_UNIFORM_BOUND, size=shape)
    raise InvalidSpec(f"unknown init scheme {scheme!r}")


def train_supervised(rois, masks64, layers: LayerwiseResult, cfg: TrainConfig,
                     geometry: SaeGeometry = SaeGeometry(), schedule: Schedule = None):
    """Fit the output layer (and optionally the whole stack) under the MSE.

    Without fine-tuning the encoders are frozen, so the 100-dim codes are
    computed once and the output layer is fit by monotone full-batch descent.
    """
    model = StackedAE(geometry)
    rng = np.random.default_rng(cfg.seed)
    p = model.params()
    p["enc1_weights"], p["enc1_bias"] = layers.enc1
    p["enc2_weights"], p["enc2_bias"] = layers.enc2
    p["out_weights"] = init_output_layer(cfg.init_scheme, p["out_weights"].shape, rng)
    p["out_bias"] = np.zeros_like(p["out_bias"])
    model.set_params(p)
    x = rois_to_vectors(rois, geometry)
    y = np.asarray(masks64, dtype=np.float64).reshape(x.shape[0], -1)
    mse = LossConfig(mode="mse_only")
    schedule = schedule or HEAD_SCHEDULE
    _, h2 = model.codes(x)
    head = Network([model.net.layers[4], model.net.layers[5]])
    history = full_batch_descent(head, h2, y, mse, schedule)
    if cfg.finetune:
        tune = minibatch_sgd(model.net, x, y, cfg, mse)
        history.losses.extend(tune.losses)
        history.checkpoints.append(tune.losses[-1])
    return model, history


def binarize(mask, threshold=0.5):
    if not 0.0 < threshold < 1.0:
        raise InvalidThreshold("threshold must lie in (0, 1)")
    return np.asarray(mask) >= threshold
